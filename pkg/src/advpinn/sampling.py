"""Collocation point generators: stratified/uniform draws, residual-driven
refinement (top-N and Gaussian importance refitting), and the sign-gradient
attack pair used by adversarial retraining.

Every sampler is a pure function of its inputs and seed.  Points live in
(n, d) row format.  ``residual_fn`` arguments map points to signed residual
values; ``abs_residual_fn`` arguments map points to (values, gradients) of
the attack objective, with gradients obtained through the autodiff graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pde import DomainBox

__all__ = [
    "ORIGINS",
    "SampleSet",
    "AttackConfig",
    "lhs",
    "uniform",
    "rar_select",
    "fit_gaussian",
    "sais_step",
    "pinn_pgd",
    "at_pinn_candidates",
]

ORIGINS = ("lhs", "uniform", "rar", "sais", "adversarial", "boundary")


@dataclass
class SampleSet:
    """Collocation points tagged with the training iteration that made them."""

    points: np.ndarray
    iteration_tags: np.ndarray
    origin: str

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.iteration_tags = np.asarray(self.iteration_tags, dtype=np.int64)
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")
        if len(self.iteration_tags) != len(self.points):
            raise ValueError("iteration tag count must match point count")
        if np.any(self.iteration_tags < 0):
            raise ValueError("iteration tags must be non-negative")

    def __len__(self) -> int:
        return len(self.points)


def _tags(n, iteration):
    return np.full(n, iteration, dtype=np.int64)


@dataclass
class AttackConfig:
    """Sign-PGD attack parameters, all in domain units."""

    epsilon: float
    eta: float
    steps: int
    revisit: float = 0.0

    def __post_init__(self):
        if self.epsilon <= 0 or self.eta <= 0:
            raise ValueError("epsilon and eta must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.revisit < 0:
            raise ValueError("revisit must be >= 0")


def lhs(n, domain: DomainBox, seed, iteration=0) -> SampleSet:
    """Latin hypercube draw: per dimension one sample in each of n strata."""
    if n < 1:
        raise ValueError("lhs needs n >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = domain.lo_arr(), domain.hi_arr()
    pts = np.empty((n, domain.dim))
    for j in range(domain.dim):
        strata = (rng.permutation(n) + rng.uniform(0.0, 1.0, size=n)) / n
        pts[:, j] = lo[j] + (hi[j] - lo[j]) * strata
    return SampleSet(pts, _tags(n, iteration), "lhs")


def uniform(n, domain: DomainBox, seed, iteration=0) -> SampleSet:
    """I.i.d. uniform draw over the domain box."""
    if n < 1:
        raise ValueError("uniform needs n >= 1")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(domain.lo_arr(), domain.hi_arr(), size=(n, domain.dim))
    return SampleSet(pts, _tags(n, iteration), "uniform")


def _top_by_abs(values, n):
    """Indices of the n largest |values|, ties broken by lowest index."""
    order = np.argsort(-np.abs(values), kind="stable")
    return order[:n]


def rar_select(candidate_factor, n, domain, residual_fn, seed, iteration=0):
    """Keep the top-n |residual| points out of floor(factor*n) uniform draws."""
    if candidate_factor <= 1:
        raise ValueError("candidate_factor must exceed 1")
    n_cand = int(math.floor(candidate_factor * n))
    cands = uniform(n_cand, domain, seed).points
    res = np.asarray(residual_fn(cands), dtype=np.float64)
    if not np.all(np.isfinite(res)):
        raise FloatingPointError("residual_fn returned non-finite values")
    keep = _top_by_abs(res, n)
    return SampleSet(cands[keep], _tags(n, iteration), "rar")


def fit_gaussian(points: np.ndarray):
    """Sample mean and unbiased sample covariance of a point set."""
    points = np.atleast_2d(points)
    mu = points.mean(axis=0)
    centered = points - mu
    denom = max(len(points) - 1, 1)
    cov = centered.T @ centered / denom
    return mu, cov


def _safe_cholesky(cov):
    """Cholesky factor, regularizing degenerate covariances with 1e-6 I."""
    try:
        return np.linalg.cholesky(cov), cov
    except np.linalg.LinAlgError:
        reg = cov + 1e-6 * np.eye(cov.shape[0])
        return np.linalg.cholesky(reg), reg


def _truncated_gaussian(rng, mu, cov, n, domain):
    """Rejection-sample N(mu, cov) into the box; clip as a last resort."""
    chol, _ = _safe_cholesky(cov)
    lo, hi = domain.lo_arr(), domain.hi_arr()
    out = np.empty((n, domain.dim))
    filled = 0
    attempts = 0
    cap = 1000 * n
    while filled < n and attempts < cap:
        batch = n - filled
        draw = mu + rng.standard_normal((batch, domain.dim)) @ chol.T
        attempts += batch
        ok = np.all((draw >= lo) & (draw <= hi), axis=1)
        good = draw[ok]
        take = min(len(good), n - filled)
        out[filled : filled + take] = good[:take]
        filled += take
    if filled < n:
        draw = mu + rng.standard_normal((n - filled, domain.dim)) @ chol.T
        out[filled:] = np.clip(draw, lo, hi)
    return out


def sais_step(
    n_per_round, p0, max_rounds, domain, residual_fn, seed, iteration=0
) -> SampleSet:
    """Gaussian importance refitting: iteratively fit N(mu, Sigma) to the
    top-residual fraction of each round's draw and sample the next round from
    the truncated fit.  Returns the final round's draw."""
    if not 0 < p0 < 1:
        raise ValueError("p0 must lie in (0, 1)")
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    rng = np.random.default_rng(seed)
    n_elite = int(math.ceil(p0 * n_per_round))
    draw = uniform(n_per_round, domain, rng).points
    for r in range(max_rounds - 1):
        res = np.asarray(residual_fn(draw), dtype=np.float64)
        if not np.all(np.isfinite(res)):
            raise FloatingPointError("residual_fn returned non-finite values")
        elite = draw[_top_by_abs(res, n_elite)]
        mu, cov = fit_gaussian(elite)
        draw = _truncated_gaussian(rng, mu, cov, n_per_round, domain)
    return SampleSet(draw, _tags(n_per_round, iteration), "sais")


def pinn_pgd(
    x0,
    abs_residual_fn,
    config: AttackConfig,
    domain: DomainBox,
    seed=None,
    random_init=True,
    stats=None,
):
    """Sign-gradient ascent on the attack objective within an inf-norm ball.

    Starting from ``x0`` (optionally jittered by U[-eps, eps] and clipped to
    the domain), takes ``steps`` steps of size ``eta`` along the sign of the
    objective gradient, accumulating the perturbation and clipping it to
    [-eps, eps]; the result is clipped back into the domain.  Points whose
    gradient comes back non-finite skip that step (counted under
    ``stats['nonfinite_grad_steps']``).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    eps, eta = config.epsilon, config.eta
    rng = np.random.default_rng(seed)
    if random_init:
        base = x0 + rng.uniform(-eps, eps, size=x0.shape)
    else:
        base = x0.copy()
    base = domain.clip(base)
    g0 = np.zeros_like(base)
    for _ in range(config.steps):
        _, grads = abs_residual_fn(base + g0)
        grads = np.asarray(grads, dtype=np.float64)
        bad = ~np.all(np.isfinite(grads), axis=1)
        if bad.any():
            grads = grads.copy()
            grads[bad] = 0.0
            if stats is not None:
                stats["nonfinite_grad_steps"] = stats.get(
                    "nonfinite_grad_steps", 0
                ) + int(bad.sum())
        g0 = np.clip(g0 + eta * np.sign(grads), -eps, eps)
    return domain.clip(base + g0)


def _revisit_indices(k, revisit):
    """Seed iterations attacked at iteration k: the window of the most recent
    floor(revisit)+1 iterations, a fraction of the next older one when the
    revisit depth is fractional, and always iteration 0."""
    full_count = int(math.floor(revisit)) + 1
    frac = revisit - math.floor(revisit)
    window = list(range(max(0, k - full_count), k))
    tail = k - full_count - 1
    if frac <= 0 or tail < 1:
        tail = None
    return window, tail, frac


def at_pinn_candidates(
    history,
    config: AttackConfig,
    abs_residual_fn,
    domain: DomainBox,
    n_k,
    seed,
    extra_seed_points=None,
    stats=None,
) -> SampleSet:
    """Attack recent and initial samples, keep the top-|residual| candidates.

    ``history`` holds the sample sets of iterations 0..k-1.  Seeds are the
    samples of the revisit window plus the initial set (plus
    ``extra_seed_points``, e.g. supervised boundary points for evolution
    problems); each seed is attacked once and the ``n_k`` highest-|objective|
    results are returned, tagged with iteration k.
    """
    if not history:
        raise ValueError("history must contain the initial sample set")
    k = len(history)
    window, tail, frac = _revisit_indices(k, config.revisit)
    rng = np.random.default_rng(seed)
    chosen = {i: None for i in window}
    if 0 not in chosen:
        chosen[0] = None
    if tail is not None and tail not in chosen:
        n_tail = int(round(frac * len(history[tail])))
        if n_tail > 0:
            chosen[tail] = rng.choice(len(history[tail]), size=n_tail, replace=False)
    blocks = []
    for i in sorted(chosen):
        sel = chosen[i]
        pts = history[i].points
        blocks.append(pts if sel is None else pts[np.sort(sel)])
    if extra_seed_points is not None and len(extra_seed_points):
        blocks.append(np.atleast_2d(extra_seed_points))
    seeds = np.vstack(blocks)
    if n_k > len(seeds):
        raise ValueError(
            f"requested {n_k} samples but only {len(seeds)} candidates"
        )
    attacked = pinn_pgd(
        seeds, abs_residual_fn, config, domain, seed=rng, stats=stats
    )
    values, _ = abs_residual_fn(attacked)
    keep = _top_by_abs(np.asarray(values), n_k)
    return SampleSet(attacked[keep], _tags(n_k, k), "adversarial")

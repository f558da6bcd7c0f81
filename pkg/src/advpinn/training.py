"""Loss assembly, Adam optimization and the iterative retraining loop.

The loss is the mean squared residual over the pooled collocation set plus a
weighted mean squared boundary mismatch, built as one graph so a single
backward yields all parameter gradients.  Retraining appends each
iteration's new samples to the pool (nothing is ever dropped), resets the
optimizer moments and continues from the current parameters.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import network
from . import pde as pde_mod
from . import sampling

__all__ = [
    "TrainConfig",
    "TrainState",
    "MetricsRow",
    "Metrics",
    "TrainingDiverged",
    "init_train_state",
    "pinn_loss",
    "adam_step",
    "reset_momentum",
    "make_attack_objective",
    "run_iterative_training",
    "STRATEGIES",
]

STRATEGIES = ("lhs_baseline", "uniform", "rar", "sais", "at_pinn")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    """Raised when a loss or its gradients leave the finite range."""


@dataclass
class TrainConfig:
    """Everything one training run needs besides the problem itself."""

    strategy: str
    layer_sizes: tuple[int, ...]
    samples_per_iteration: list[int]
    epochs_per_iteration: list[int]
    n_boundary: int
    iterations: int
    learning_rate: float = 1e-4
    lambda_boundary: float = 1.0
    seed: int = 0
    attack: sampling.AttackConfig | None = None
    rar_factor: float = 2.0
    sais_p0: float = 0.1
    sais_rounds: int = 10
    sais_n: int | None = None
    init_time_cap: float | None = None
    attack_boundary_seeds: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lambda_boundary <= 0:
            raise ValueError("lambda_boundary must be positive")
        k = self.iterations
        if len(self.samples_per_iteration) != k + 1:
            raise ValueError("need one sample count per iteration 0..K")
        if len(self.epochs_per_iteration) != k + 1:
            raise ValueError("need one epoch count per iteration 0..K")
        counts = [self.n_boundary, *self.samples_per_iteration]
        if any(c < 1 for c in counts):
            raise ValueError("all sample counts must be >= 1")
        if any(e < 1 for e in self.epochs_per_iteration):
            raise ValueError("all epoch counts must be >= 1")
        if self.strategy == "at_pinn" and self.attack is None:
            raise ValueError("at_pinn strategy needs an AttackConfig")
        if self.strategy == "lhs_baseline" and self.iterations != 0:
            raise ValueError("lhs_baseline trains once; set iterations=0")


@dataclass
class TrainState:
    """Parameters plus Adam moments and bookkeeping."""

    params: network.MlpParams
    adam_m: list[np.ndarray]
    adam_v: list[np.ndarray]
    step_count: int = 0
    loss_history: list[float] = field(default_factory=list)
    skipped_steps: int = 0
    boundary_points: np.ndarray | None = None
    boundary_targets: np.ndarray | None = None
    attack_stats: dict = field(default_factory=dict)


@dataclass
class MetricsRow:
    k: int
    n_samples: int
    error: float
    max_grid_residual: float
    max_new_sample_residual: float
    wall_time: float


@dataclass
class Metrics:
    problem: str
    strategy: str
    rows: list[MetricsRow] = field(default_factory=list)


def _param_arrays(params: network.MlpParams):
    return [*params.weights, *params.biases]


def init_train_state(params: network.MlpParams) -> TrainState:
    arrays = _param_arrays(params)
    return TrainState(
        params,
        [np.zeros_like(a) for a in arrays],
        [np.zeros_like(a) for a in arrays],
    )


def _build_loss(problem, params, colloc, parts_np, boundary, targets, lam,
                requires_grad=True):
    if colloc is None or len(colloc) == 0:
        raise ValueError("empty collocation set")
    wnodes, bnodes = network.params_to_leaves(params, requires_grad)
    x = ad.leaf(colloc.T)
    bundle = network.mlp_graph(
        wnodes, bnodes, x, second_coords=problem.second_order_coords
    )
    parts = {k: ad.leaf(v) for k, v in parts_np.items()}
    r = problem.residual(bundle, parts)
    loss = ad.reduce_mean(ad.square(r))
    if boundary is not None and len(boundary):
        xb = ad.leaf(boundary.T)
        ub = network.mlp_graph(wnodes, bnodes, xb, with_derivs=False).u
        mismatch = ad.sub(ub, ad.leaf(targets[None, :]))
        loss = ad.add(loss, ad.mul(ad.reduce_mean(ad.square(mismatch)), ad.leaf(lam)))
    return loss, wnodes, bnodes


def pinn_loss(problem, params, collocation, boundary_points=None,
              boundary_targets=None, lambda_boundary=1.0) -> ad.Node:
    """Scalar loss node: mean squared residual over the pooled collocation
    points plus lambda times the mean squared boundary mismatch."""
    colloc = np.atleast_2d(np.asarray(collocation, dtype=np.float64))
    parts = problem.residual_parts_np(colloc)
    boundary = (
        None
        if boundary_points is None
        else np.atleast_2d(np.asarray(boundary_points, dtype=np.float64))
    )
    targets = (
        None if boundary_targets is None else np.asarray(boundary_targets)
    )
    loss, _, _ = _build_loss(
        problem, params, colloc, parts, boundary, targets, lambda_boundary
    )
    return loss


def adam_step(state: TrainState, gradients, learning_rate,
              beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS) -> TrainState:
    """One bias-corrected Adam update; non-finite gradients skip the step."""
    arrays = _param_arrays(state.params)
    if len(gradients) != len(arrays):
        raise ValueError("gradient count does not match parameter arrays")
    for g, a in zip(gradients, arrays):
        if g.shape != a.shape:
            raise ValueError("gradient shape mismatch")
    if not all(np.all(np.isfinite(g)) for g in gradients):
        state.skipped_steps += 1
        return state
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for a, m, v, g in zip(arrays, state.adam_m, state.adam_v, gradients):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        a -= learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def reset_momentum(state: TrainState) -> TrainState:
    """Zero the Adam moments and step count; parameters are untouched."""
    for m in state.adam_m:
        m[...] = 0.0
    for v in state.adam_v:
        v[...] = 0.0
    state.step_count = 0
    return state


def make_attack_objective(problem, params):
    """Objective |r(x; theta)| with its input gradient, theta frozen.

    Returns ``fn(points) -> (values, grads)`` where both are per-point; the
    gradient comes from backward through the residual graph, so it includes
    the input dependence of the propagated derivatives.  Points with
    non-finite objective report NaN gradients (callers skip/count them).
    """
    d = problem.input_dim

    def fn(points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = len(points)
        coords = [
            ad.leaf(points[:, i][None, :], requires_grad=True) for i in range(d)
        ]
        xmat = None
        for i in range(d):
            e = np.zeros((d, 1))
            e[i, 0] = 1.0
            term = ad.matmul(ad.leaf(e), coords[i])
            xmat = term if xmat is None else ad.add(xmat, term)
        wnodes, bnodes = network.params_to_leaves(params, requires_grad=False)
        bundle = network.mlp_graph(
            wnodes, bnodes, xmat, second_coords=problem.second_order_coords
        )
        parts = problem.residual_parts_graph(coords)
        a = ad.absval(problem.residual(bundle, parts))
        values = a.value[0].copy()
        finite = np.isfinite(values)
        if finite.all():
            root = ad.reduce_sum(a)
        else:
            root = ad.reduce_sum(ad.mul(a, ad.leaf(finite.astype(np.float64))))
        ad.backward(root, free_memory=True)
        grads = np.empty((n, d))
        for i in range(d):
            grads[:, i] = coords[i].adjoint[0]
        if not finite.all():
            grads[~finite] = np.nan
        return values, grads

    return fn


def _residual_value_fn(problem, params):
    def fn(points):
        return pde_mod.residual_values(problem, params, points)

    return fn


# Largest collocation block evaluated as one graph; bigger sets are split so
# the intermediate arrays stay cache-resident, with gradients accumulated
# across blocks (same totals, summation grouped by block).
_CHUNK = 2048


def _epoch_value_and_grads(problem, params, colloc, parts_np, boundary,
                           targets, lam):
    n = len(colloc)
    if n <= _CHUNK:
        loss, wnodes, bnodes = _build_loss(
            problem, params, colloc, parts_np, boundary, targets, lam
        )
        value = float(loss.value)
        ad.backward(loss, free_memory=True)
        grads = [w.adjoint for w in wnodes]
        grads += [b.adjoint[:, 0] for b in bnodes]
        return value, grads

    inv_n = 1.0 / n
    value = 0.0
    grads = None
    for start in range(0, n, _CHUNK):
        block = colloc[start : start + _CHUNK]
        parts_block = {k: v[:, start : start + _CHUNK] for k, v in parts_np.items()}
        wnodes, bnodes = network.params_to_leaves(params, True)
        x = ad.leaf(block.T)
        bundle = network.mlp_graph(
            wnodes, bnodes, x, second_coords=problem.second_order_coords
        )
        parts = {k: ad.leaf(v) for k, v in parts_block.items()}
        r = problem.residual(bundle, parts)
        root = ad.mul(ad.reduce_sum(ad.square(r)), ad.leaf(inv_n))
        value += float(root.value)
        ad.backward(root, free_memory=True)
        if grads is None:
            grads = [w.adjoint.copy() for w in wnodes]
            grads += [b.adjoint[:, 0].copy() for b in bnodes]
        else:
            nw = len(wnodes)
            for i, w in enumerate(wnodes):
                grads[i] += w.adjoint
            for i, b in enumerate(bnodes):
                grads[nw + i] += b.adjoint[:, 0]
    if boundary is not None and len(boundary):
        wnodes, bnodes = network.params_to_leaves(params, True)
        xb = ad.leaf(boundary.T)
        ub = network.mlp_graph(wnodes, bnodes, xb, with_derivs=False).u
        mismatch = ad.sub(ub, ad.leaf(targets[None, :]))
        root = ad.mul(ad.reduce_mean(ad.square(mismatch)), ad.leaf(lam))
        value += float(root.value)
        ad.backward(root, free_memory=True)
        nw = len(wnodes)
        for i, w in enumerate(wnodes):
            grads[i] += w.adjoint
        for i, b in enumerate(bnodes):
            grads[nw + i] += b.adjoint[:, 0]
    return value, grads


def _train_phase(state, problem, colloc, parts_np, boundary, targets, cfg,
                 epochs, k):
    lam, lr = cfg.lambda_boundary, cfg.learning_rate
    for epoch in range(epochs):
        try:
            value, grads = _epoch_value_and_grads(
                problem, state.params, colloc, parts_np, boundary, targets, lam
            )
        except FloatingPointError as err:
            raise TrainingDiverged(
                f"non-finite loss at iteration {k}, epoch {epoch}: {err}"
            ) from err
        adam_step(state, grads, lr)
        state.loss_history.append(value)
    return state


def _initial_domain(problem, cfg):
    if cfg.init_time_cap is None:
        return problem.domain
    ti = problem.time_index
    if ti is None:
        raise ValueError("init_time_cap set for a problem without time")
    hi = list(problem.domain.hi)
    hi[ti] = cfg.init_time_cap
    return pde_mod.DomainBox(problem.domain.lo, tuple(hi))


def _generate_samples(problem, cfg, state, history, boundary, k, rng, stats):
    n_k = cfg.samples_per_iteration[k]
    strategy = cfg.strategy
    if strategy == "uniform":
        return sampling.uniform(n_k, problem.domain, rng, iteration=k)
    if strategy == "rar":
        return sampling.rar_select(
            cfg.rar_factor, n_k, problem.domain,
            _residual_value_fn(problem, state.params), rng, iteration=k,
        )
    if strategy == "sais":
        return sampling.sais_step(
            cfg.sais_n or n_k, cfg.sais_p0, cfg.sais_rounds, problem.domain,
            _residual_value_fn(problem, state.params), rng, iteration=k,
        )
    if strategy == "at_pinn":
        objective = make_attack_objective(problem, state.params)
        extra = boundary if cfg.attack_boundary_seeds else None
        return sampling.at_pinn_candidates(
            history, cfg.attack, objective, problem.domain, n_k, rng,
            extra_seed_points=extra, stats=stats,
        )
    raise ValueError(f"strategy {strategy!r} cannot generate iteration samples")


def run_iterative_training(problem, cfg: TrainConfig, evaluator=None,
                           sample_override=None, progress=None):
    """Train with iterative sample refinement; returns (state, history, metrics).

    ``evaluator(problem, params) -> (error, max_grid_residual)`` fills the
    error columns of the metrics (NaN when omitted).  ``sample_override``
    replaces the per-iteration sample generation with pre-made point arrays,
    which disables strategy differences (testing hook).
    """
    ss = np.random.SeedSequence(cfg.seed)
    seeds = ss.spawn(3 + cfg.iterations)
    rng_net, rng_boundary, rng_init = seeds[0], seeds[1], seeds[2]

    params = network.init_params(cfg.layer_sizes, rng_net)
    state = init_train_state(params)
    boundary, targets = problem.sample_boundary(
        cfg.n_boundary, np.random.default_rng(rng_boundary)
    )
    stats = {}
    init_n = cfg.samples_per_iteration[0]
    history = [sampling.lhs(init_n, _initial_domain(problem, cfg), rng_init)]
    metrics = Metrics(problem.name, cfg.strategy)

    colloc = history[0].points
    parts_np = problem.residual_parts_np(colloc)

    gen_res = pde_mod.residual_values(problem, state.params, colloc)
    max_new = float(np.max(np.abs(gen_res)))
    t0 = time.perf_counter()
    _train_phase(
        state, problem, colloc, parts_np, boundary, targets, cfg,
        cfg.epochs_per_iteration[0], 0,
    )
    wall = time.perf_counter() - t0
    err, max_grid = (math.nan, math.nan)
    if evaluator is not None:
        err, max_grid = evaluator(problem, state.params)
    metrics.rows.append(
        MetricsRow(0, len(colloc), err, max_grid, max_new, wall)
    )
    if progress:
        progress(0, metrics.rows[-1])

    for k in range(1, cfg.iterations + 1):
        rng_k = np.random.default_rng(seeds[2 + k])
        if sample_override is not None:
            pts = np.atleast_2d(np.asarray(sample_override[k - 1], dtype=np.float64))
            new_set = sampling.SampleSet(
                pts, np.full(len(pts), k, dtype=np.int64), "uniform"
            )
        else:
            new_set = _generate_samples(
                problem, cfg, state, history, boundary, k, rng_k, stats
            )
        gen_res = pde_mod.residual_values(problem, state.params, new_set.points)
        max_new = float(np.max(np.abs(gen_res)))
        history.append(new_set)
        colloc = np.vstack([colloc, new_set.points])
        parts_np = problem.residual_parts_np(colloc)
        reset_momentum(state)
        t0 = time.perf_counter()
        _train_phase(
            state, problem, colloc, parts_np, boundary, targets, cfg,
            cfg.epochs_per_iteration[k], k,
        )
        wall = time.perf_counter() - t0
        err, max_grid = (math.nan, math.nan)
        if evaluator is not None:
            err, max_grid = evaluator(problem, state.params)
        metrics.rows.append(
            MetricsRow(k, len(colloc), err, max_grid, max_new, wall)
        )
        if progress:
            progress(k, metrics.rows[-1])

    state.boundary_points = boundary
    state.boundary_targets = targets
    state.attack_stats = stats
    return state, history, metrics

"""Benchmark problem definitions: domains, residuals, boundary data.

Each problem knows how to assemble its signed residual from a network
derivative bundle plus the input-only terms of the operator (forcing,
variable coefficients).  Those terms come in two interchangeable flavours:
plain arrays (cheap, used while training where the collocation points are
fixed) and graph nodes built from the coordinate leaves (used by attacks,
where the residual must stay differentiable in x).  Evolution problems fold
time into the input vector as the last coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import network

__all__ = [
    "DomainBox",
    "PdeProblem",
    "poisson_problem",
    "burgers_problem",
    "multiscale_problem",
    "allen_cahn_problem",
    "get_problem",
    "PROBLEM_NAMES",
    "residual_batch",
    "residual_values",
    "grid_points",
]


@dataclass(frozen=True)
class DomainBox:
    """Axis-aligned box with per-dimension bounds."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi) or not self.lo:
            raise ValueError("lo and hi must be non-empty and equally long")
        if any(l >= h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"degenerate domain box {self.lo}..{self.hi}")

    @property
    def dim(self) -> int:
        return len(self.lo)

    def lo_arr(self) -> np.ndarray:
        return np.asarray(self.lo, dtype=np.float64)

    def hi_arr(self) -> np.ndarray:
        return np.asarray(self.hi, dtype=np.float64)

    def contains(self, points: np.ndarray, tol: float = 1e-12) -> bool:
        lo, hi = self.lo_arr(), self.hi_arr()
        return bool(
            np.all(points >= lo - tol) and np.all(points <= hi + tol)
        )

    def clip(self, points: np.ndarray) -> np.ndarray:
        return np.clip(points, self.lo_arr(), self.hi_arr())


class PdeProblem:
    """Base benchmark problem; subclasses fill in the operator pieces."""

    name: str
    domain: DomainBox
    second_order_coords: tuple[int, ...]
    metric_kind: str  # "relative_l2" or "residual_mse"
    time_index: int | None = None
    part_names: tuple[str, ...] = ()

    @property
    def input_dim(self) -> int:
        return self.domain.dim

    def exact_solution(self, points: np.ndarray):
        """Closed-form solution values, or None when only an oracle exists."""
        return None

    def residual_parts_np(self, points: np.ndarray) -> dict[str, np.ndarray]:
        """Input-only residual terms as (1, n) arrays."""
        return {}

    def residual_parts_graph(self, coords: list[ad.Node]) -> dict[str, ad.Node]:
        """Input-only residual terms built from coordinate nodes."""
        return {}

    def residual(self, bundle: network.DerivBundle, parts) -> ad.Node:
        """Signed residual node (1, n) from a derivative bundle."""
        raise NotImplementedError

    def sample_boundary(self, n: int, rng: np.random.Generator):
        """(points, targets) on the boundary/initial faces; faces exact."""
        raise NotImplementedError


def _parts_to_leaves(parts_np):
    return {k: ad.leaf(v) for k, v in parts_np.items()}


_POISSON_CENTERS = (-0.8, 0.0, 0.8)


def _gauss(s, c):
    return np.exp(-100.0 * (s - c) ** 2)


def _gauss_dd(s, c):
    # second derivative of exp(-100 (s-c)^2)
    return (40000.0 * (s - c) ** 2 - 200.0) * _gauss(s, c)


class PoissonProblem(PdeProblem):
    """-Laplace(u) = f on [-1,1]^2 with a three-ridge/three-canyon solution."""

    name = "poisson2d"
    domain = DomainBox((-1.0, -1.0), (1.0, 1.0))
    second_order_coords = (0, 1)
    metric_kind = "relative_l2"
    part_names = ("f",)

    def exact_solution(self, points):
        x, y = points[:, 0], points[:, 1]
        u = np.zeros_like(x)
        for c in _POISSON_CENTERS:
            u += _gauss(x, c) - _gauss(y, c)
        return u

    def forcing(self, points):
        x, y = points[:, 0], points[:, 1]
        lap = np.zeros_like(x)
        for c in _POISSON_CENTERS:
            lap += _gauss_dd(x, c) - _gauss_dd(y, c)
        return -lap

    def residual_parts_np(self, points):
        return {"f": self.forcing(points)[None, :]}

    def residual_parts_graph(self, coords):
        x, y = coords

        def gauss_dd_node(s, c):
            t2 = ad.square(ad.sub(s, ad.leaf(c)))
            g = ad.exp(ad.mul(t2, ad.leaf(-100.0)))
            return ad.mul(ad.sub(ad.mul(t2, ad.leaf(40000.0)), ad.leaf(200.0)), g)

        lap = None
        for c in _POISSON_CENTERS:
            term = ad.sub(gauss_dd_node(x, c), gauss_dd_node(y, c))
            lap = term if lap is None else ad.add(lap, term)
        return {"f": ad.mul(lap, ad.leaf(-1.0))}

    def residual(self, bundle, parts):
        lap = ad.add(bundle.d2u[0], bundle.d2u[1])
        return ad.sub(ad.mul(lap, ad.leaf(-1.0)), parts["f"])

    def sample_boundary(self, n, rng):
        lo, hi = self.domain.lo, self.domain.hi
        counts = [n // 4] * 4
        for i in range(n - 4 * (n // 4)):
            counts[i] += 1
        pts = []
        # edges: x=lo, x=hi, y=lo, y=hi
        for (axis, val), m in zip(
            [(0, lo[0]), (0, hi[0]), (1, lo[1]), (1, hi[1])], counts
        ):
            other = 1 - axis
            p = np.empty((m, 2))
            p[:, axis] = val
            p[:, other] = rng.uniform(lo[other], hi[other], size=m)
            pts.append(p)
        points = np.vstack(pts)
        return points, self.exact_solution(points)


class BurgersProblem(PdeProblem):
    """u_t + u u_x = nu u_xx on [-1,1]x[0,1], nu = 0.01/pi."""

    name = "burgers"
    domain = DomainBox((-1.0, 0.0), (1.0, 1.0))
    second_order_coords = (0,)
    metric_kind = "relative_l2"
    time_index = 1
    nu = 0.01 / np.pi

    def initial_condition(self, x):
        return -np.sin(np.pi * x)

    def residual(self, bundle, parts):
        conv = ad.mul(bundle.u, bundle.du[0])
        visc = ad.mul(bundle.d2u[0], ad.leaf(self.nu))
        return ad.sub(ad.add(bundle.du[1], conv), visc)

    def sample_boundary(self, n, rng):
        return _evolution_boundary(self, n, rng, self.initial_condition)


class MultiscaleProblem(PdeProblem):
    """-(kappa u')' = sin(x) on [0, pi] with an oscillatory coefficient."""

    name = "multiscale"
    domain = DomainBox((0.0,), (float(np.pi),))
    second_order_coords = (0,)
    metric_kind = "residual_mse"
    part_names = ("kappa", "kappa_prime", "forcing")
    eps = 0.25

    def kappa(self, x):
        return 0.5 * np.sin(2.0 * np.pi * x / self.eps) + np.sin(x) + 2.0

    def kappa_prime(self, x):
        w = 2.0 * np.pi / self.eps
        return 0.5 * w * np.cos(w * x) + np.cos(x)

    def residual_parts_np(self, points):
        x = points[:, 0]
        return {
            "kappa": self.kappa(x)[None, :],
            "kappa_prime": self.kappa_prime(x)[None, :],
            "forcing": np.sin(x)[None, :],
        }

    def residual_parts_graph(self, coords):
        (x,) = coords
        w = 2.0 * np.pi / self.eps
        kappa = ad.add(
            ad.add(ad.mul(ad.sin(ad.mul(x, ad.leaf(w))), ad.leaf(0.5)), ad.sin(x)),
            ad.leaf(2.0),
        )
        kappa_prime = ad.add(
            ad.mul(ad.cos(ad.mul(x, ad.leaf(w))), ad.leaf(0.5 * w)), ad.cos(x)
        )
        return {"kappa": kappa, "kappa_prime": kappa_prime, "forcing": ad.sin(x)}

    def residual(self, bundle, parts):
        flux = ad.add(
            ad.mul(parts["kappa_prime"], bundle.du[0]),
            ad.mul(parts["kappa"], bundle.d2u[0]),
        )
        return ad.mul(ad.add(flux, parts["forcing"]), ad.leaf(-1.0))

    def sample_boundary(self, n, rng):
        lo, hi = self.domain.lo[0], self.domain.hi[0]
        ends = np.array([lo, hi])
        points = np.tile(ends, (n + 1) // 2)[:n][:, None]
        return points, np.zeros(n)


class AllenCahnProblem(PdeProblem):
    """u_t = D u_xx + 5(u - u^3) on [-1,1]x[0,1], D = 1e-4."""

    name = "allen_cahn"
    domain = DomainBox((-1.0, 0.0), (1.0, 1.0))
    second_order_coords = (0,)
    metric_kind = "relative_l2"
    time_index = 1
    diffusion = 1e-4

    def initial_condition(self, x):
        return x**2 * np.cos(np.pi * x)

    def residual(self, bundle, parts):
        reaction = ad.mul(ad.sub(bundle.u, ad.powi(bundle.u, 3)), ad.leaf(5.0))
        visc = ad.mul(bundle.d2u[0], ad.leaf(self.diffusion))
        return ad.sub(ad.sub(bundle.du[1], visc), reaction)

    def sample_boundary(self, n, rng):
        return _evolution_boundary(self, n, rng, self.initial_condition)


def _evolution_boundary(problem, n, rng, initial_condition):
    """Half the points on the t=0 face, a quarter on each spatial end.

    Corner points, when they appear, carry the initial-condition value.
    """
    lo, hi = problem.domain.lo, problem.domain.hi
    n_init = n // 2
    n_left = (n - n_init) // 2
    n_right = n - n_init - n_left
    p_init = np.empty((n_init, 2))
    p_init[:, 0] = rng.uniform(lo[0], hi[0], size=n_init)
    p_init[:, 1] = lo[1]
    t_init = initial_condition(p_init[:, 0])
    p_l = np.empty((n_left, 2))
    p_l[:, 0] = lo[0]
    p_l[:, 1] = rng.uniform(lo[1], hi[1], size=n_left)
    p_r = np.empty((n_right, 2))
    p_r[:, 0] = hi[0]
    p_r[:, 1] = rng.uniform(lo[1], hi[1], size=n_right)
    points = np.vstack([p_init, p_l, p_r])
    targets = np.concatenate([t_init, np.zeros(n_left + n_right)])
    return points, targets


def poisson_problem() -> PdeProblem:
    return PoissonProblem()


def burgers_problem() -> PdeProblem:
    return BurgersProblem()


def multiscale_problem() -> PdeProblem:
    return MultiscaleProblem()


def allen_cahn_problem() -> PdeProblem:
    return AllenCahnProblem()


PROBLEM_NAMES = {
    "poisson2d": poisson_problem,
    "burgers": burgers_problem,
    "multiscale": multiscale_problem,
    "allen_cahn": allen_cahn_problem,
}


def get_problem(name: str) -> PdeProblem:
    try:
        factory = PROBLEM_NAMES[name]
    except KeyError:
        raise KeyError(
            f"unknown problem {name!r}; known: {sorted(PROBLEM_NAMES)}"
        ) from None
    return factory()


def residual_batch(problem: PdeProblem, params, points: np.ndarray) -> ad.Node:
    """Signed residual nodes at interior points, differentiable in theta.

    Points must lie inside the closed domain (1e-12 tolerance).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if not problem.domain.contains(points):
        raise ValueError("residual_batch: point outside problem domain")
    wnodes, bnodes = network.params_to_leaves(params, requires_grad=True)
    x_node = ad.leaf(points.T)
    bundle = network.mlp_graph(
        wnodes, bnodes, x_node, second_coords=problem.second_order_coords
    )
    parts = _parts_to_leaves(problem.residual_parts_np(points))
    return problem.residual(bundle, parts)


def residual_values(problem: PdeProblem, params, points: np.ndarray) -> np.ndarray:
    """Signed residual values (n,) without gradient tracking.

    Large batches are evaluated in cache-sized blocks.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    block = 4096
    if len(points) > block:
        return np.concatenate(
            [
                residual_values(problem, params, points[s : s + block])
                for s in range(0, len(points), block)
            ]
        )
    wnodes, bnodes = network.params_to_leaves(params, requires_grad=False)
    x_node = ad.leaf(points.T)
    bundle = network.mlp_graph(
        wnodes, bnodes, x_node, second_coords=problem.second_order_coords
    )
    parts = _parts_to_leaves(problem.residual_parts_np(points))
    return problem.residual(bundle, parts).value[0]


def grid_points(domain: DomainBox, per_dim: int = 256):
    """Cartesian evaluation grid; returns (points (N, d), axes list)."""
    axes = [
        np.linspace(lo, hi, per_dim) for lo, hi in zip(domain.lo, domain.hi)
    ]
    if domain.dim == 1:
        return axes[0][:, None], axes
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    return points, axes

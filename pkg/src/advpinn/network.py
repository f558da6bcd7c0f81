"""Fully-connected tanh network with analytic propagation of input derivatives.

The forward pass is expressed as autodiff graph nodes.  First and pure second
derivatives of the output with respect to each input coordinate are
propagated layer by layer alongside the activations:

    z = W a + b,   a' = tanh'(z) (W a_prev'),   a'' = tanh''(z)(W a_prev')^2
                                                     + tanh'(z)(W a_prev'')

seeded at the input with a' = e_i and a'' = 0.  Everything is built from
first-order graph ops, so differential-operator residuals assembled from the
bundle stay differentiable with respect to both the parameters and the
inputs.  Batches are carried column-wise: a point batch (n, d) becomes a
(d, n) activation matrix and every bundle entry is a (1, n) node.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

__all__ = [
    "MlpParams",
    "DerivBundle",
    "init_params",
    "forward",
    "forward_with_derivs",
    "params_to_leaves",
    "mlp_graph",
    "save_checkpoint",
    "load_checkpoint",
]

_CKPT_MAGIC = b"ADVPINN-CKPT-1\n"


@dataclass
class MlpParams:
    """Per-layer weight matrices (out, in) and bias vectors (out,)."""

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    def copy(self) -> "MlpParams":
        return MlpParams(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


@dataclass
class DerivBundle:
    """Network output and its per-coordinate input derivatives as graph nodes.

    ``u``, ``du[i]`` and ``d2u[i]`` are (1, n) nodes over the point batch.
    ``d2u`` entries are None for coordinates whose second derivative was not
    requested.  The leaves used to build the graph are kept so callers can
    run backward and read adjoints.
    """

    u: ad.Node
    du: list[ad.Node]
    d2u: list[ad.Node | None]
    x_node: ad.Node | None = None
    weight_nodes: list[ad.Node] = field(default_factory=list)
    bias_nodes: list[ad.Node] = field(default_factory=list)


def init_params(layer_sizes, seed) -> MlpParams:
    """Xavier/Glorot-uniform weights, zero biases; deterministic per seed."""
    layer_sizes = tuple(int(s) for s in layer_sizes)
    if len(layer_sizes) < 2:
        raise ValueError("need at least input and output layer sizes")
    if any(s <= 0 for s in layer_sizes):
        raise ValueError(f"zero-width layer in {layer_sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(layer_sizes, weights, biases)


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a point batch (n, d); returns (n,) values."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] != params.input_dim:
        raise ValueError(
            f"expected {params.input_dim} input columns, got {x.shape[1]}"
        )
    a = x.T
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = w @ a + b[:, None]
        a = z if l == last else np.tanh(z)
    return a[0]


def params_to_leaves(params: MlpParams, requires_grad: bool):
    """Wrap parameter arrays as graph leaves (biases as column vectors)."""
    wnodes = [ad.leaf(w, requires_grad) for w in params.weights]
    bnodes = [ad.leaf(b[:, None], requires_grad) for b in params.biases]
    return wnodes, bnodes


def mlp_graph(wnodes, bnodes, x_node, second_coords=(), with_derivs=True):
    """Build the forward/derivative graph from prepared leaves.

    ``x_node`` is a (d, n) node.  Returns a DerivBundle; ``second_coords``
    selects the coordinates whose pure second derivative chains are
    propagated (all requested entries filled, others None).  With
    ``with_derivs=False`` only ``u`` is built (boundary-loss path).
    """
    d, n = x_node.value.shape
    second = set(second_coords)

    a = x_node
    da = []
    d2a = [None] * d
    if with_derivs:
        for i in range(d):
            seed = np.zeros((d, n))
            seed[i, :] = 1.0
            da.append(ad.leaf(seed))

    last = len(wnodes) - 1
    for l, (w, b) in enumerate(zip(wnodes, bnodes)):
        z = ad.add(ad.matmul(w, a), b)
        if l == last:
            u = z
            du = [ad.matmul(w, da[i]) for i in range(d)] if with_derivs else []
            d2u = [
                ad.matmul(w, d2a[i]) if (with_derivs and i in second) else None
                for i in range(d)
            ]
            return DerivBundle(u, du, d2u)
        anew = ad.tanh(z)
        if with_derivs:
            s = ad.one_minus_sq(anew)  # tanh'(z)
            tpp = ad.scaled_mul(anew, s, -2.0) if second else None  # tanh''(z)
            da_new = []
            d2a_new = [None] * d
            for i in range(d):
                p = ad.matmul(w, da[i])
                da_new.append(ad.mul(s, p))
                if i in second:
                    if d2a[i] is not None:
                        q = ad.matmul(w, d2a[i])
                        d2a_new[i] = ad.quadmix(tpp, p, s, q)
                    else:
                        d2a_new[i] = ad.quadmix(tpp, p)
            da, d2a = da_new, d2a_new
        a = anew
    raise AssertionError("unreachable")


def forward_with_derivs(params: MlpParams, x: np.ndarray) -> DerivBundle:
    """Network output with first and second input derivatives for a batch.

    The returned bundle's entries live on a fresh graph whose parameter and
    input leaves all track gradients, so differentiating any entry with
    respect to the parameters or the inputs via backward is valid.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] != params.input_dim:
        raise ValueError(
            f"expected {params.input_dim} input columns, got {x.shape[1]}"
        )
    wnodes, bnodes = params_to_leaves(params, requires_grad=True)
    x_node = ad.leaf(x.T, requires_grad=True)
    bundle = mlp_graph(
        wnodes, bnodes, x_node, second_coords=range(params.input_dim)
    )
    bundle.x_node = x_node
    bundle.weight_nodes = wnodes
    bundle.bias_nodes = bnodes
    return bundle


def save_checkpoint(params: MlpParams, path) -> None:
    """Write parameters to the versioned binary checkpoint format.

    Layout: magic line ``ADVPINN-CKPT-1``, an ascii line ``layers k s0 .. sk``
    with the layer sizes, then for each layer the weight matrix (row-major)
    followed by the bias vector, all little-endian float64.
    """
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        sizes = " ".join(str(s) for s in params.layer_sizes)
        fh.write(f"layers {len(params.layer_sizes)} {sizes}\n".encode())
        for w, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path) -> MlpParams:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not an advpinn checkpoint: {path}")
        header = fh.readline().decode().split()
        if len(header) < 2 or header[0] != "layers":
            raise ValueError(f"malformed checkpoint header: {path}")
        count = int(header[1])
        sizes = tuple(int(s) for s in header[2:])
        if len(sizes) != count:
            raise ValueError(f"layer count mismatch in header: {path}")
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            wbuf = fh.read(fan_out * fan_in * 8)
            bbuf = fh.read(fan_out * 8)
            if len(wbuf) != fan_out * fan_in * 8 or len(bbuf) != fan_out * 8:
                raise ValueError(f"truncated checkpoint: {path}")
            weights.append(
                np.frombuffer(wbuf, dtype="<f8").reshape(fan_out, fan_in).copy()
            )
            biases.append(np.frombuffer(bbuf, dtype="<f8").copy())
        if fh.read(1):
            raise ValueError(f"trailing bytes in checkpoint: {path}")
    return MlpParams(sizes, weights, biases)

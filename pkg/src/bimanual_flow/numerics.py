"""Dense-vector substrate: seeded sampling, a small MLP with exact
reverse-mode gradients, and an Adam optimizer.

All state lives in plain numpy float64 arrays. Randomness comes from the
Philox counter-based bit generator keyed by an explicit 64-bit seed; normal
variates are produced by Box-Muller on Philox uniforms, so fixtures are
reproducible from the seed alone.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

_TWO_PI = 2.0 * np.pi


def derive_seed(seed: int, *labels) -> int:
    """Deterministically derive a child seed from a master seed and labels.

    The split is sha256 over "seed/label1/label2/..." truncated to 64 bits,
    which keeps independent streams (per arm, per episode, per epoch)
    decoupled from each other and from config flags.
    """
    text = "/".join([str(int(seed))] + [str(l) for l in labels])
    digest = hashlib.sha256(text.encode("ascii")).digest()
    return int.from_bytes(digest[:8], "little")


class SeededRng:
    """Philox-backed stream with Box-Muller normals.

    Philox is counter-based, so the stream for a given 64-bit key is
    identical across runs and platforms.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def uniform(self, n: int) -> Array:
        return self._gen.random(n)

    def normal(self, n: int) -> Array:
        """n standard-normal variates via Box-Muller on Philox uniforms."""
        if n < 1:
            raise ValueError("n must be >= 1")
        pairs = (n + 1) // 2
        u = self._gen.random(2 * pairs)
        u1 = 1.0 - u[:pairs]  # (0, 1]: keeps log finite
        u2 = u[pairs:]
        radius = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(_TWO_PI * u2)
        out[1::2] = radius * np.sin(_TWO_PI * u2)
        return out[:n]

    def normal_matrix(self, rows: int, cols: int) -> Array:
        return self.normal(rows * cols).reshape(rows, cols)

    def integers(self, low: int, high: int, n: int) -> Array:
        return self._gen.integers(low, high, size=n)

    def permutation(self, n: int) -> Array:
        return self._gen.permutation(n)

    def spawn(self, *labels) -> "SeededRng":
        return SeededRng(derive_seed(self.seed, *labels))


def seeded_normal(seed: int, n: int) -> Array:
    """Deterministic vector of n standard-normal draws for a 64-bit seed."""
    return SeededRng(seed).normal(n)


def check_finite(arr: Array, what: str) -> Array:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite entries")
    return arr


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

_ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class MlpSpec:
    """Shape of a fully connected net: input -> hidden... -> output."""

    input_dim: int
    hidden_dims: tuple
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        dims = (self.input_dim, self.output_dim) + tuple(self.hidden_dims)
        if any(int(d) < 1 for d in dims):
            raise ValueError("all layer dims must be >= 1")
        if len(self.hidden_dims) == 0:
            raise ValueError("hidden_dims must be nonempty")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")

    def layer_shapes(self):
        """[(out, in)] weight shapes for each linear layer."""
        dims = [self.input_dim] + list(self.hidden_dims) + [self.output_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


@dataclass
class MlpParams:
    """Per-layer weights (out, in) and biases (out,), matching a spec."""

    spec: MlpSpec
    weights: list
    biases: list

    def __post_init__(self):
        shapes = self.spec.layer_shapes()
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ValueError("layer count does not match spec")
        for w, b, (rows, cols) in zip(self.weights, self.biases, shapes):
            if w.shape != (rows, cols) or b.shape != (rows,):
                raise ValueError(
                    f"layer shape mismatch: got {w.shape}/{b.shape}, "
                    f"spec wants {(rows, cols)}/{(rows,)}"
                )
            check_finite(w, "weight matrix")
            check_finite(b, "bias vector")

    def copy(self) -> "MlpParams":
        return MlpParams(
            self.spec,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def flat_arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def init_mlp(spec: MlpSpec, seed: int, scale: float | None = None) -> MlpParams:
    """Seeded Glorot-style init (scale overrides the per-layer default)."""
    rng = SeededRng(seed)
    weights, biases = [], []
    for rows, cols in spec.layer_shapes():
        s = scale if scale is not None else np.sqrt(1.0 / cols)
        weights.append(rng.normal_matrix(rows, cols) * s)
        biases.append(np.zeros(rows))
    return MlpParams(spec, weights, biases)


def zero_mlp(spec: MlpSpec) -> MlpParams:
    weights = [np.zeros((r, c)) for r, c in spec.layer_shapes()]
    biases = [np.zeros(r) for r, _ in spec.layer_shapes()]
    return MlpParams(spec, weights, biases)


def _activate(x: Array, kind: str) -> Array:
    if kind == "tanh":
        return np.tanh(x)
    return np.maximum(x, 0.0)


def _activate_grad(pre: Array, post: Array, kind: str) -> Array:
    if kind == "tanh":
        return 1.0 - post * post
    return (pre > 0.0).astype(float)


def _forward_cached(params: MlpParams, x: Array):
    """Forward pass keeping pre/post activations; x is (dim,) or (batch, dim)."""
    act = params.spec.activation
    n_layers = len(params.weights)
    pres, posts = [], [x]
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        pre = h @ w.T + b
        pres.append(pre)
        h = _activate(pre, act) if i < n_layers - 1 else pre
        posts.append(h)
    return h, pres, posts


def mlp_forward(params: MlpParams, x: Array) -> Array:
    """Evaluate the net on a single input vector (or a (batch, dim) matrix)."""
    if x.shape[-1] != params.spec.input_dim:
        raise ValueError(
            f"input dim {x.shape[-1]} != spec input_dim {params.spec.input_dim}"
        )
    out, _, _ = _forward_cached(params, x)
    return out


def mlp_backward(params: MlpParams, x: Array, output_grad: Array):
    """Exact reverse-mode gradients of the forward map.

    Returns (param_grads, input_grad) where param_grads is an MlpParams-shaped
    structure. Accepts batched x/output_grad, in which case parameter
    gradients are summed over the batch and input_grad is per-row.
    """
    if x.shape[-1] != params.spec.input_dim:
        raise ValueError("input dim does not match spec")
    if output_grad.shape[-1] != params.spec.output_dim:
        raise ValueError("output_grad dim does not match spec")
    if x.ndim != output_grad.ndim:
        raise ValueError("x and output_grad must have matching rank")

    act = params.spec.activation
    n_layers = len(params.weights)
    _, pres, posts = _forward_cached(params, x)

    batched = x.ndim == 2
    g = output_grad
    w_grads = [None] * n_layers
    b_grads = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        inp = posts[i]
        if batched:
            w_grads[i] = g.T @ inp
            b_grads[i] = g.sum(axis=0)
        else:
            w_grads[i] = np.outer(g, inp)
            b_grads[i] = g.copy()
        g = g @ params.weights[i]
        if i > 0:
            g = g * _activate_grad(pres[i - 1], posts[i], act)
    grads = MlpParams(params.spec, w_grads, b_grads)
    return grads, g


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @staticmethod
    def for_params(params: MlpParams) -> "AdamState":
        flats = params.flat_arrays()
        return AdamState(
            step=0,
            m=[np.zeros_like(a) for a in flats],
            v=[np.zeros_like(a) for a in flats],
        )


def adam_step(
    params: MlpParams,
    grads: MlpParams,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One Adam update; returns (new_params, new_state). Inputs untouched."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    g_flat = grads.flat_arrays()
    for g in g_flat:
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient; training aborted")

    t = state.step + 1
    new_m, new_v, new_flat = [], [], []
    for p, g, m, v in zip(params.flat_arrays(), g_flat, state.m, state.v):
        m2 = beta1 * m + (1.0 - beta1) * g
        v2 = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m2 / (1.0 - beta1**t)
        v_hat = v2 / (1.0 - beta2**t)
        new_flat.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m2)
        new_v.append(v2)

    n_layers = len(params.weights)
    new_params = MlpParams(
        params.spec,
        [new_flat[2 * i] for i in range(n_layers)],
        [new_flat[2 * i + 1] for i in range(n_layers)],
    )
    return new_params, AdamState(step=t, m=new_m, v=new_v)

"""Minimal differentiable-numerics substrate.

Fixed-topology feed-forward networks with exact reverse-mode gradients,
a bias-corrected adaptive-moment optimizer, seeded counter-based random
streams, and a binary checkpoint format. Everything downstream (policies,
value nets, encoders, noise predictors) is built from these pieces.

All math is 64-bit. Forward and backward are pure functions of their
arguments; optimizer state is explicit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError, NumericError, ShapeError

_MASK64 = (1 << 64) - 1

_ACTIVATIONS = ("tanh", "relu")

CHECKPOINT_MAGIC = b"FPMCKPT1"


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class RngStream:
    """Counter-based random stream with deterministic key splitting.

    Identical seed => identical sequence. ``split(i)`` derives an
    independent child stream; children of different indices never share
    a key, so parallel rollouts are order-independent.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def split(self, index: int) -> "RngStream":
        return RngStream(_splitmix64(self.seed ^ _splitmix64((int(index) + 1) & _MASK64)))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)


@dataclass
class Mlp:
    """Fully-connected network with a flat weight vector.

    Layout per layer: W (n_in x n_out, row-major) then bias (n_out).
    Hidden activation is tanh or relu; output is identity.
    """

    layer_sizes: list[int]
    activation: str
    weights: np.ndarray

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def layer_views(self):
        """Yield (W, b) views into the flat weight vector, no copies."""
        off = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = self.weights[off:off + n_in * n_out].reshape(n_in, n_out)
            off += n_in * n_out
            b = self.weights[off:off + n_out]
            off += n_out
            yield w, b


def weight_count(layer_sizes) -> int:
    return sum((a + 1) * b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def mlp_init(layer_sizes, activation: str, seed) -> Mlp:
    """Glorot-uniform weights, zero biases, deterministic per seed.

    ``seed`` may be an integer or an RngStream.
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ConfigurationError(f"need >=2 layers with positive sizes, got {layer_sizes}")
    if activation not in _ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {activation!r}")
    rng = seed if isinstance(seed, RngStream) else RngStream(seed)
    weights = np.zeros(weight_count(sizes))
    off = 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (n_in + n_out))
        weights[off:off + n_in * n_out] = rng.uniform(-bound, bound, n_in * n_out)
        off += n_in * n_out + n_out  # biases stay zero
    return Mlp(sizes, activation, weights)


def _check_input(mlp: Mlp, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != mlp.layer_sizes[0]:
        raise ShapeError(f"expected input dim {mlp.layer_sizes[0]}, got shape {x.shape}")
    return x, single


def _forward_cached(mlp: Mlp, x: np.ndarray):
    """Returns (output, pre-activations list, post-activations list)."""
    acts = [x]
    pre = []
    h = x
    layers = list(mlp.layer_views())
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        pre.append(z)
        if i < len(layers) - 1:
            h = np.tanh(z) if mlp.activation == "tanh" else np.maximum(z, 0.0)
        else:
            h = z
        acts.append(h)
    return h, pre, acts


def mlp_forward(mlp: Mlp, x) -> np.ndarray:
    """Pure forward pass; accepts a single input (d,) or a batch (N, d)."""
    xb, single = _check_input(mlp, x)
    out, _, _ = _forward_cached(mlp, xb)
    return out[0] if single else out


def mlp_backward(mlp: Mlp, x, output_gradient) -> tuple[np.ndarray, np.ndarray]:
    """Exact reverse-mode gradients of <output, output_gradient>.

    Returns (param_gradient, input_gradient). Batched inputs sum the
    parameter gradient over the batch; the input gradient stays
    per-sample.
    """
    xb, single = _check_input(mlp, x)
    g = np.asarray(output_gradient, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != (xb.shape[0], mlp.layer_sizes[-1]):
        raise ShapeError(f"output_gradient shape {g.shape} inconsistent with "
                         f"batch {xb.shape[0]} x out dim {mlp.layer_sizes[-1]}")
    _, pre, acts = _forward_cached(mlp, xb)
    layers = list(mlp.layer_views())
    pgrad = np.zeros_like(mlp.weights)
    off = len(mlp.weights)
    delta = g
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        n_in, n_out = w.shape
        if i < len(layers) - 1:
            if mlp.activation == "tanh":
                delta = delta * (1.0 - np.tanh(pre[i]) ** 2)
            else:
                delta = delta * (pre[i] > 0.0)
        off -= n_out
        pgrad[off:off + n_out] = delta.sum(axis=0)
        off -= n_in * n_out
        pgrad[off:off + n_in * n_out] = (acts[i].T @ delta).ravel()
        delta = delta @ w.T
    xgrad = delta[0] if single else delta
    return pgrad, xgrad


@dataclass
class AdamHyper:
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              hyper: AdamHyper) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected adaptive-moment descent step; returns new copies."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError("params/grads/state length mismatch")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient entries")
    t = state.step + 1
    m = hyper.beta1 * state.m + (1 - hyper.beta1) * grads
    v = hyper.beta2 * state.v + (1 - hyper.beta2) * grads * grads
    m_hat = m / (1 - hyper.beta1 ** t)
    v_hat = v / (1 - hyper.beta2 ** t)
    new_params = params - hyper.step_size * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return new_params, AdamState(m, v, t)


def finite_diff_gradcheck(function, point, h: float = 1e-5,
                          coords=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``function(x)`` must return (scalar value, gradient vector). ``coords``
    restricts the check to the given coordinate indices (default: all) —
    useful for large parameter vectors where probing every coordinate is
    too slow.
    """
    x = np.asarray(point, dtype=np.float64)
    _, analytic = function(x)
    analytic = np.asarray(analytic, dtype=np.float64)
    worst = 0.0
    for i in (range(x.size) if coords is None else coords):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        fp, _ = function(xp)
        fm, _ = function(xm)
        central = (fp - fm) / (2 * h)
        err = abs(analytic.flat[i] - central) / (abs(analytic.flat[i]) + abs(central) + 1e-12)
        worst = max(worst, err)
    return worst


_ACT_CODES = {"tanh": 0, "relu": 1}
_CODE_ACTS = {v: k for k, v in _ACT_CODES.items()}


def save_checkpoint(mlp: Mlp, path) -> None:
    """Binary checkpoint: magic, layer sizes, per-hidden-layer activation
    codes, little-endian f64 weights. Bit-exact round trip."""
    n_hidden = max(0, len(mlp.layer_sizes) - 2)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(mlp.layer_sizes)))
        f.write(struct.pack(f"<{len(mlp.layer_sizes)}I", *mlp.layer_sizes))
        f.write(bytes([_ACT_CODES[mlp.activation]] * n_hidden))
        f.write(np.asarray(mlp.weights, dtype="<f8").tobytes())


def load_checkpoint(path) -> Mlp:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic in {path}")
    off = 8
    try:
        (n_sizes,) = struct.unpack_from("<I", data, off)
        off += 4
        sizes = list(struct.unpack_from(f"<{n_sizes}I", data, off))
        off += 4 * n_sizes
        n_hidden = max(0, n_sizes - 2)
        codes = data[off:off + n_hidden]
        if len(codes) != n_hidden:
            raise struct.error("truncated activation codes")
        off += n_hidden
        n_weights = weight_count(sizes)
        raw = data[off:off + 8 * n_weights]
        if len(raw) != 8 * n_weights:
            raise struct.error("truncated weights")
        weights = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    except struct.error as exc:
        raise FormatError(f"corrupt checkpoint {path}: {exc}") from exc
    acts = {codes[i] for i in range(n_hidden)} or {0}
    if len(acts) != 1 or next(iter(acts)) not in _CODE_ACTS:
        raise FormatError(f"inconsistent activation codes in {path}")
    return Mlp(sizes, _CODE_ACTS[next(iter(acts))], weights)

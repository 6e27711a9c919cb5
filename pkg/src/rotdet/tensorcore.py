"""Dense float64 building blocks for the decoder.

Tensors are plain ``numpy.ndarray`` objects (row-major float64). This
module adds the handful of layers the decoder needs and a central
finite-difference gradient used to verify the hand-written backward pass.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericError


def make_rng(seed):
    """Seeded generator; the same seed gives the same stream everywhere."""
    return np.random.default_rng(int(seed))


@dataclass(frozen=True)
class LinearLayer:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.ndim != 1 or self.bias.shape[0] != self.weight.shape[0]:
            raise DimensionError(
                f"inconsistent linear layer: weight {self.weight.shape}, bias {self.bias.shape}"
            )

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    @classmethod
    def init(cls, rng, in_features, out_features):
        """Uniform in +-1/sqrt(fan_in) for both weight and bias."""
        bound = 1.0 / np.sqrt(in_features)
        w = rng.uniform(-bound, bound, size=(out_features, in_features))
        b = rng.uniform(-bound, bound, size=out_features)
        return cls(w, b)

    @classmethod
    def zeros(cls, in_features, out_features):
        return cls(np.zeros((out_features, in_features)), np.zeros(out_features))


def linear_forward(x, layer):
    """``x @ W.T + b`` over the last axis of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != layer.in_features:
        raise DimensionError(f"input last extent {x.shape[-1:]} != layer input {layer.in_features}")
    return x @ layer.weight.T + layer.bias


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.ndim}")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def relu(x):
    return np.maximum(x, 0.0)


def sinusoidal_pe(grid, channels, temperature=10000.0):
    """Sinusoidal embedding of a ``grid`` x ``grid`` lattice, shape [channels, grid, grid].

    Cell centers sit at normalized coordinates (i + 0.5) / grid. The first
    half of the channels encodes x (column), the second half y (row); inside
    each half channels alternate sin, cos over geometrically spaced
    frequencies, starting at frequency 1.
    """
    if grid < 1:
        raise ConfigError(f"grid size must be >= 1, got {grid}")
    if channels <= 0 or channels % 4:
        raise ConfigError(f"channels must be a positive multiple of 4, got {channels}")
    half = channels // 2
    coords = (np.arange(grid) + 0.5) / grid
    k = np.arange(half // 2)
    freq = temperature ** (2.0 * k / half)
    phase = coords[:, None] / freq[None, :]  # [grid, half/2]
    enc = np.empty((grid, half))
    enc[:, 0::2] = np.sin(phase)
    enc[:, 1::2] = np.cos(phase)
    pe = np.empty((channels, grid, grid))
    pe[:half] = np.broadcast_to(enc.T[:, None, :], (half, grid, grid))
    pe[half:] = np.broadcast_to(enc.T[:, :, None], (half, grid, grid))
    return pe


@dataclass(frozen=True)
class AttentionParams:
    q_proj: LinearLayer
    k_proj: LinearLayer
    v_proj: LinearLayer
    out_proj: LinearLayer

    @classmethod
    def init(cls, rng, channels):
        return cls(*(LinearLayer.init(rng, channels, channels) for _ in range(4)))


def self_attention(queries, params):
    """Single-head scaled dot-product self-attention over the rows of ``queries`` [N, C]."""
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2:
        raise DimensionError(f"expected [N, C] queries, got shape {queries.shape}")
    q = linear_forward(queries, params.q_proj)
    k = linear_forward(queries, params.k_proj)
    v = linear_forward(queries, params.v_proj)
    weights = softmax(q @ k.T / np.sqrt(q.shape[-1]), axis=-1)
    return linear_forward(weights @ v, params.out_proj)


def finite_diff_grad(f, x, h=1e-5, indices=None):
    """Central-difference gradient of the scalar function ``f`` at ``x``.

    ``indices`` optionally restricts evaluation to those flat coordinates;
    the other entries of the result are left at zero.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad

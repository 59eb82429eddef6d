"""Dense-tensor kernels: matmul, softmax, activations, normalization, Top-K masking.

Everything is float64 and pure; the rest of the package is built on these.
Tensors are plain numpy arrays with rank <= 4, row-major.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError

MAX_RANK = 4


def as_tensor(data) -> np.ndarray:
    """Coerce to a float64 array of rank <= 4 and verify finiteness."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > MAX_RANK:
        raise DimensionError(f"rank {arr.ndim} exceeds supported maximum {MAX_RANK}")
    if not np.all(np.isfinite(arr)):
        raise DimensionError("tensor contains NaN or Inf entries")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product; batched over leading dimensions when ranks exceed 2."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 1 or b.ndim < 1:
        raise DimensionError(f"matmul needs rank >= 1 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    return np.matmul(a, b)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, with max-subtraction for stability."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax_rows requires a non-empty last axis")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def topk_mask(x: np.ndarray, k: int) -> np.ndarray:
    """0/1 mask marking the k largest entries of each last-axis row.

    Ties are broken toward the lower index, so the mask is deterministic.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if k < 1 or k > n:
        raise ParameterError(f"topk_mask k={k} outside [1, {n}]")
    # stable argsort on -x keeps lower indices first among ties
    order = np.argsort(-x, axis=-1, kind="stable")
    mask = np.zeros_like(x)
    np.put_along_axis(mask, order[..., :k], 1.0, axis=-1)
    return mask


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(np.asarray(x, dtype=np.float64))


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalize the last axis to mean 0 / var 1, then apply the affine (gain, bias)."""
    x = np.asarray(x, dtype=np.float64)
    if eps <= 0:
        raise ParameterError("layer_norm eps must be positive")
    mean = np.mean(x, axis=-1, keepdims=True)
    var = np.var(x, axis=-1, keepdims=True)
    normed = (x - mean) / np.sqrt(var + eps)
    return normed * np.asarray(gain, dtype=np.float64) + np.asarray(bias, dtype=np.float64)


@dataclass
class RngState:
    """Counter-based deterministic RNG: identical (seed, counter) -> identical draws."""

    seed: int
    counter: int = 0

    def _next(self) -> np.random.Generator:
        gen = np.random.default_rng([self.seed, self.counter])
        self.counter += 1
        return gen

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._next().normal(0.0, scale, size=shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._next().uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self._next().integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._next().permutation(n)

    def spawn(self) -> "RngState":
        """Child stream decorrelated from this one."""
        return RngState(seed=int(self._next().integers(0, 2**63 - 1)))

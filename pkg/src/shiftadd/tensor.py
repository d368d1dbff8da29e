"""Dense tensor kernels with explicit paired forward/backward passes.

Tensors are plain C-contiguous numpy arrays. Public model state is float32;
matrix-product kernels accumulate in float64 internally and cast back to the
caller's dtype, so two kernels that are supposed to agree (e.g. a shift kernel
and its dense oracle) share one reduction and agree bitwise. Passing float64
arrays keeps everything in float64, which is what the gradient-check harness
does.

There is no autodiff graph: every primitive has a hand-written backward that
takes the upstream gradient plus whatever the forward cached.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32

LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand extents do not line up."""


class StateError(RuntimeError):
    """Backward invoked without the forward cache it needs."""


def make_rng(seed: int) -> np.random.Generator:
    """Seed-deterministic generator (PCG64 draws are platform-stable)."""
    return np.random.Generator(np.random.PCG64(seed))


def tensor(data, dtype=DTYPE) -> np.ndarray:
    """Materialize `data` as a C-contiguous array of the working dtype."""
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


@dataclass
class GradPair:
    """A trainable value with its gradient accumulator of identical shape."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.value.shape != self.grad.shape:
            raise ShapeError(
                f"value/grad shape mismatch: {self.value.shape} vs {self.grad.shape}")

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def accumulate(self, g: np.ndarray) -> None:
        self.grad += g.astype(self.grad.dtype, copy=False)


def _result_dtype(*arrays) -> np.dtype:
    return np.result_type(*(a.dtype for a in arrays))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matrix product, float64 accumulation, result in the operand dtype."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    out = np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)
    return out.astype(_result_dtype(a, b), copy=False)


def matmul_backward(dout: np.ndarray, a: np.ndarray, b: np.ndarray):
    """dA = dO.B^T, dB = A^T.dO."""
    if a is None or b is None:
        raise StateError("matmul backward needs the cached operands")
    return matmul(dout, b.T), matmul(a.T, dout)


def bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matrix product over a leading stack axis."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm extents differ: {a.shape} x {b.shape}")
    out = np.matmul(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return out.astype(_result_dtype(a, b), copy=False)


def bmm_backward(dout: np.ndarray, a: np.ndarray, b: np.ndarray):
    return bmm(dout, np.swapaxes(b, -1, -2)), bmm(np.swapaxes(a, -1, -2), dout)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax; rows along `axis` sum to one."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for {x.ndim}-D input")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(dout: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    """dx = y * (dout - sum(dout * y)) along the softmax axis."""
    if y is None:
        raise StateError("softmax backward needs the cached output")
    inner = np.sum(dout * y, axis=axis, keepdims=True)
    return y * (dout - inner)


def layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
              eps: float = LAYERNORM_EPS):
    """Normalize the last axis to zero mean / unit variance, then affine.

    Returns (y, cache); the cache feeds layernorm_backward.
    """
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ShapeError(f"last-axis extent {x.shape[-1]} does not match affine params")
    mean = np.mean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    y = xhat * gain + bias
    return y, (xhat, inv_std, gain)


def layernorm_backward(dout: np.ndarray, cache):
    """Gradients for (x, gain, bias) given the forward cache."""
    if cache is None:
        raise StateError("layernorm backward needs the forward cache")
    xhat, inv_std, gain = cache
    d = xhat.shape[-1]
    dxhat = dout * gain
    dgain = np.sum(dout * xhat, axis=tuple(range(dout.ndim - 1)))
    dbias = np.sum(dout, axis=tuple(range(dout.ndim - 1)))
    # dx = inv_std/d * (d*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
    s1 = np.sum(dxhat, axis=-1, keepdims=True)
    s2 = np.sum(dxhat * xhat, axis=-1, keepdims=True)
    dx = (inv_std / d) * (d * dxhat - s1 - xhat * s2)
    return dx, dgain, dbias


# tanh form of the gaussian error linear unit; smooth, so finite-difference
# checks are clean everywhere.
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    if x is None:
        raise StateError("gelu backward needs the cached input")
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    if x is None:
        raise StateError("relu backward needs the cached input")
    return dout * (x > 0)


def dwconv3x3(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Depthwise 3x3 convolution with zero padding of one on each side.

    `x` is (h, w, c) or (batch, h, w, c); `kernels` is (3, 3, c). Output shape
    equals input shape.
    """
    if kernels.shape[0] != 3 or kernels.shape[1] != 3:
        raise ShapeError(f"kernels must be 3x3xC, got {kernels.shape}")
    if x.shape[-1] != kernels.shape[2]:
        raise ShapeError(f"channel mismatch: input {x.shape[-1]}, kernels {kernels.shape[2]}")
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=np.float64)
    xp[:, 1:-1, 1:-1, :] = x
    k64 = np.asarray(kernels, dtype=np.float64)
    out = np.zeros((b, h, w, c), dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            out += xp[:, di:di + h, dj:dj + w, :] * k64[di, dj]
    out = out.astype(_result_dtype(x, kernels), copy=False)
    return out[0] if squeeze else out


def dwconv3x3_backward(dout: np.ndarray, x: np.ndarray, kernels: np.ndarray):
    """Gradients for (x, kernels); same padding convention as the forward."""
    if x is None:
        raise StateError("dwconv3x3 backward needs the cached input")
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
        dout = dout[None]
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=np.float64)
    xp[:, 1:-1, 1:-1, :] = x
    d64 = np.asarray(dout, dtype=np.float64)
    k64 = np.asarray(kernels, dtype=np.float64)
    dxp = np.zeros_like(xp)
    dk = np.zeros((3, 3, c), dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            window = xp[:, di:di + h, dj:dj + w, :]
            dk[di, dj] = np.sum(d64 * window, axis=(0, 1, 2))
            dxp[:, di:di + h, dj:dj + w, :] += d64 * k64[di, dj]
    dx = dxp[:, 1:-1, 1:-1, :].astype(x.dtype, copy=False)
    dk = dk.astype(kernels.dtype, copy=False)
    return (dx[0] if squeeze else dx), dk


_BACKWARDS = {
    "matmul": lambda dout, cache: matmul_backward(dout, *cache),
    "bmm": lambda dout, cache: bmm_backward(dout, *cache),
    "softmax": lambda dout, cache: softmax_backward(dout, *cache),
    "layernorm": lambda dout, cache: layernorm_backward(dout, cache),
    "gelu": lambda dout, cache: gelu_backward(dout, cache),
    "relu": lambda dout, cache: relu_backward(dout, cache),
    "dwconv3x3": lambda dout, cache: dwconv3x3_backward(dout, *cache),
}


def backward_of(op: str, dout: np.ndarray, cache):
    """Dispatch the hand-written backward for a named primitive."""
    if op not in _BACKWARDS:
        raise KeyError(f"no backward registered for {op!r}; known: {sorted(_BACKWARDS)}")
    if cache is None:
        raise StateError(f"{op} backward invoked without a forward cache")
    return _BACKWARDS[op](dout, cache)

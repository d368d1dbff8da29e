"""Shift and add reparameterizations of dense linear layers.

A shift layer stores a sign matrix s in {-1,+1} and an integer exponent matrix
P, representing weights s * 2^P. Multiplying by such a weight is an exponent
add in hardware; in binary floating point the reconstruction is exact, so the
shift kernel must agree bitwise with a dense product against the reconstructed
matrix.

An add layer stores a sign matrix b in {-1,+1} plus one positive scale gamma:
the product against gamma * b needs only signed accumulation and a single
trailing scale.

Training both goes through latent dense shadow weights: forward quantizes the
shadow, backward treats the layer as dense at the reconstructed weights
(straight-through estimator), and the optimizer step is followed by a
re-quantization of the shadow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, ShapeError, StateError, matmul, matmul_backward

P_MIN_DEFAULT = -15
P_MAX_DEFAULT = 15


@dataclass
class QuantConfig:
    p_min: int = P_MIN_DEFAULT
    p_max: int = P_MAX_DEFAULT
    scale_mode: str = "per-matrix"  # or "per-head"

    def __post_init__(self):
        if self.p_min >= self.p_max:
            raise ValueError(f"p_min {self.p_min} must be below p_max {self.p_max}")
        if self.scale_mode not in ("per-matrix", "per-head"):
            raise ValueError(f"unknown scale_mode {self.scale_mode!r}")


@dataclass
class ShiftLinear:
    """Sign flips and power-of-two exponents of one linear layer."""

    s: np.ndarray          # {-1,+1}, float, shape (in_dim, out_dim)
    p: np.ndarray          # integer exponents, same shape
    p_min: int = P_MIN_DEFAULT
    p_max: int = P_MAX_DEFAULT

    @property
    def in_dim(self) -> int:
        return self.s.shape[0]

    @property
    def out_dim(self) -> int:
        return self.s.shape[1]


@dataclass
class AddLinear:
    """Binarized weights plus one trailing scale."""

    b: np.ndarray          # {-1,+1}, float, shape (in_dim, out_dim)
    gamma: float

    @property
    def in_dim(self) -> int:
        return self.b.shape[0]

    @property
    def out_dim(self) -> int:
        return self.b.shape[1]


def sign_unit(x: np.ndarray) -> np.ndarray:
    """Sign with sign(0) := +1, in the input dtype."""
    return np.where(x < 0, -1.0, 1.0).astype(x.dtype, copy=False)


def quantize_shift(w: np.ndarray, cfg: QuantConfig = QuantConfig()) -> ShiftLinear:
    """Round a dense matrix onto the nearest sign * 2^P grid.

    P = rint(log2|w|) clamped to [p_min, p_max]; zeros land on p_min, where
    2^p_min is numerically negligible.
    """
    if w.ndim != 2:
        raise ShapeError(f"expected a 2-D weight matrix, got shape {w.shape}")
    s = sign_unit(w)
    with np.errstate(divide="ignore"):
        raw = np.rint(np.log2(np.abs(np.asarray(w, dtype=np.float64))))
    p = np.clip(np.nan_to_num(raw, nan=cfg.p_min, neginf=cfg.p_min),
                cfg.p_min, cfg.p_max).astype(np.int32)
    return ShiftLinear(s=s, p=p, p_min=cfg.p_min, p_max=cfg.p_max)


def reconstruct(layer: ShiftLinear, dtype=DTYPE) -> np.ndarray:
    """Exact s * 2^P realized by writing P into the exponent field."""
    return np.ldexp(np.asarray(layer.s, dtype=dtype), layer.p)


def shift_forward(x: np.ndarray, layer: ShiftLinear) -> np.ndarray:
    """x @ (s * 2^P). Power-of-two weights make this exact, so the result is
    bit-identical to a dense product against the reconstruction."""
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"input extent {x.shape[-1]} != layer in_dim {layer.in_dim}")
    return matmul(x, reconstruct(layer, dtype=x.dtype))


def shift_backward(dout: np.ndarray, x: np.ndarray, layer: ShiftLinear):
    """Straight-through gradients: the layer is dense at reconstruct(layer).

    Returns (dx, dw_dense); dw_dense is meant for the latent shadow weights.
    """
    if x is None:
        raise StateError("shift backward needs the cached input")
    w = reconstruct(layer, dtype=x.dtype)
    return matmul_backward(dout, x, w)


def binarize(x: np.ndarray, scale_mode: str = "per-matrix"):
    """Split x into sign codes and a mean-absolute scale.

    per-matrix: one gamma for the whole array. per-head: x must be stacked as
    (heads, ...) and gamma is reduced over everything but axis 0 (broadcastable
    against x).
    """
    if x.size == 0:
        raise ShapeError("cannot binarize an empty array")
    b = sign_unit(x)
    if scale_mode == "per-matrix":
        gamma = float(np.mean(np.abs(x)))
    elif scale_mode == "per-head":
        axes = tuple(range(1, x.ndim))
        gamma = np.mean(np.abs(x), axis=axes, keepdims=True)
    else:
        raise ValueError(f"unknown scale_mode {scale_mode!r}")
    return b, gamma


def add_matmul(x: np.ndarray, layer: AddLinear) -> np.ndarray:
    """Signed accumulation of x's columns under b, scaled once by gamma.

    The inner loop adds and subtracts input entries only; gamma multiplies the
    accumulated result. Matches matmul(x, gamma * b) to float64 accumulation
    accuracy.
    """
    if x.ndim != 2:
        raise ShapeError(f"add_matmul expects a 2-D input, got {x.shape}")
    if x.shape[1] != layer.in_dim:
        raise ShapeError(f"input extent {x.shape[1]} != layer in_dim {layer.in_dim}")
    x64 = np.asarray(x, dtype=np.float64)
    out = np.empty((x.shape[0], layer.out_dim), dtype=np.float64)
    for j in range(layer.out_dim):
        pos = layer.b[:, j] > 0
        out[:, j] = x64[:, pos].sum(axis=1) - x64[:, ~pos].sum(axis=1)
    out *= layer.gamma
    return out.astype(x.dtype, copy=False)


def add_backward(dout: np.ndarray, x: np.ndarray, layer: AddLinear):
    """Straight-through gradients at the effective dense weights gamma * b."""
    if x is None:
        raise StateError("add backward needs the cached input")
    w = (layer.gamma * layer.b).astype(x.dtype, copy=False)
    return matmul_backward(dout, x, w)


@dataclass
class ReparamResult:
    layer: object                  # ShiftLinear or AddLinear
    shadow: np.ndarray             # dense copy kept trainable under the STE


def reparam_linear(dense_w: np.ndarray, target: str,
                   cfg: QuantConfig = QuantConfig()) -> ReparamResult:
    """Convert a trained dense matrix into a shift or add layer plus shadow."""
    if target == "shift":
        return ReparamResult(layer=quantize_shift(dense_w, cfg), shadow=dense_w.copy())
    if target == "add":
        b, gamma = binarize(dense_w, scale_mode="per-matrix")
        return ReparamResult(layer=AddLinear(b=b, gamma=gamma), shadow=dense_w.copy())
    raise ValueError(f"unknown reparameterization target {target!r}")


def reconstruct_add(layer: AddLinear, dtype=DTYPE) -> np.ndarray:
    return (layer.gamma * layer.b).astype(dtype, copy=False)

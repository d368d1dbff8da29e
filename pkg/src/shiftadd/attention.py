"""Multi-head attention in softmax form and in reordered linear form.

The linear form evaluates q~ @ (k~^T V) instead of (q~ k~^T) V, which is the
same product by associativity but costs O(n) in the token count. Features are
kept nonnegative so every normalized output row is a convex combination of
value rows:

    out = q~ (k~^T V) / (q~ (k~^T 1) + eps)

In binary mode, queries and keys are sign-quantized per head and mapped from
{-1,+1} to {0,1} codes; the per-head mean-absolute scales multiply the
features once, outside the two token-mixing products.

A depthwise 3x3 branch on V (tokens laid out on a ceil(sqrt(n)) square grid,
missing cells zero-padded) restores local mixing in the linear modes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .quantize import AddLinear, ShiftLinear, add_matmul, binarize, shift_forward

MODES = ("softmax", "linear", "linear-binary")

PHI_EPS = 1e-6       # keeps relu features strictly positive
EPS_NORM = 1e-6      # default floor under the normalizing key sums

Projection = Union[np.ndarray, ShiftLinear, AddLinear]


@dataclass
class AttentionConfig:
    heads: int
    model_dim: int
    mode: str = "softmax"
    eps_norm: float = EPS_NORM
    use_dwconv: bool = True  # only consulted by the linear modes

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise T.ShapeError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.mode not in MODES:
            raise ValueError(f"unknown attention mode {self.mode!r}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


@dataclass
class AttentionWeights:
    wq: Projection
    wk: Projection
    wv: Projection
    wo: Projection
    dw_kernels: Optional[np.ndarray] = None  # (3, 3, model_dim)


def project(x: np.ndarray, w: Projection) -> np.ndarray:
    if isinstance(w, ShiftLinear):
        return shift_forward(x, w)
    if isinstance(w, AddLinear):
        return add_matmul(x, w)
    return T.matmul(x, w)


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """(..., n, d) -> (..., heads, n, d/heads)."""
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    return np.swapaxes(x, -3, -2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """(..., heads, n, dk) -> (..., n, heads*dk), inverse of split_heads."""
    x = np.swapaxes(x, -3, -2)
    *lead, n, h, dk = x.shape
    return np.ascontiguousarray(x).reshape(*lead, n, h * dk)


# ---------------------------------------------------------------------------
# per-head cores over stacked heads (H, n, dk); H may fold a batch axis


def softmax_core(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    dk = q.shape[-1]
    scores = T.bmm(q, np.swapaxes(k, -1, -2)) / math.sqrt(dk)
    attn = T.softmax(scores, axis=-1)
    out = T.bmm(attn, v)
    return out, (q, k, v, attn)


def softmax_core_backward(dout: np.ndarray, cache):
    if cache is None:
        raise T.StateError("softmax attention backward needs the forward cache")
    q, k, v, attn = cache
    dk = q.shape[-1]
    dattn = T.bmm(dout, np.swapaxes(v, -1, -2))
    dv = T.bmm(np.swapaxes(attn, -1, -2), dout)
    dscores = T.softmax_backward(dattn, attn, axis=-1) / math.sqrt(dk)
    dq = T.bmm(dscores, k)
    dkk = T.bmm(np.swapaxes(dscores, -1, -2), q)
    return dq, dkk, dv


def linear_core(qf: np.ndarray, kf: np.ndarray, v: np.ndarray, eps_norm: float):
    """Normalized Q(KV) attention on nonnegative features."""
    kv = T.bmm(np.swapaxes(kf, -1, -2), v)          # (H, dk, dk)
    z = np.sum(kf, axis=-2)                          # (H, dk), k~^T 1
    num = T.bmm(qf, kv)                              # (H, n, dk)
    den = T.bmm(qf, z[..., None])[..., 0] + eps_norm  # (H, n)
    out = num / den[..., None]
    return out, (qf, kf, v, kv, z, num, den, eps_norm)


def linear_core_backward(dout: np.ndarray, cache):
    """Reverse pass of linear_core.

    Rows whose denominator sits exactly at the eps floor carry no feature
    mass at all (zero raw denominator forces a zero numerator, so the output
    is a constant zero there); the 1/eps normalization gradient on such rows
    is an artifact of the floor and is masked out. That situation is routine
    for sign-quantized queries, where an all-negative row has no active code.
    """
    if cache is None:
        raise T.StateError("linear attention backward needs the forward cache")
    qf, kf, v, kv, z, num, den, eps_norm = cache
    live = (den > eps_norm)[..., None]
    dnum = np.where(live, dout / den[..., None], 0.0)
    dden = -np.sum(np.where(live, dout, 0.0) * num, axis=-1) / (den * den)
    dqf = T.bmm(dnum, np.swapaxes(kv, -1, -2)) + dden[..., None] * z[..., None, :]
    dkv = T.bmm(np.swapaxes(qf, -1, -2), dnum)
    dz = np.sum(qf * dden[..., None], axis=-2)
    dkf = T.bmm(v, np.swapaxes(dkv, -1, -2)) + dz[..., None, :]
    dv = T.bmm(kf, dkv)
    return dqf, dkf, dv


def feat_relu(x: np.ndarray) -> np.ndarray:
    """Nonnegative feature map for the non-binary linear mode (swappable)."""
    return T.relu(x) + PHI_EPS


def feat_relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return T.relu_backward(dout, x)


def binarize_qk(q: np.ndarray, k: np.ndarray, cfg: AttentionConfig):
    """Per-head sign quantization of Q and K, shifted to {0,1} codes.

    q, k are (n, model_dim). Returns head-split features (heads, n, dk) with
    the per-head scales already multiplied in, plus the raw scales.
    """
    qh = split_heads(q, cfg.heads)
    kh = split_heads(k, cfg.heads)
    bq, gq = binarize(qh, scale_mode="per-head")
    bk, gk = binarize(kh, scale_mode="per-head")
    qf = gq * (bq + 1.0) * 0.5
    kf = gk * (bk + 1.0) * 0.5
    return qf.astype(q.dtype, copy=False), kf.astype(k.dtype, copy=False), (gq, gk)


def _dwconv_tokens(v: np.ndarray, kernels: np.ndarray):
    """Depthwise conv over tokens arranged on a padded square grid."""
    n, d = v.shape
    side = math.isqrt(n)
    if side * side < n:
        side += 1
    grid = np.zeros((side * side, d), dtype=v.dtype)
    grid[:n] = v
    out = T.dwconv3x3(grid.reshape(side, side, d), kernels)
    return out.reshape(side * side, d)[:n], side


def _dwconv_tokens_backward(dout: np.ndarray, v: np.ndarray,
                            kernels: np.ndarray, side: int):
    n, d = v.shape
    grid = np.zeros((side * side, d), dtype=v.dtype)
    grid[:n] = v
    dgrid = np.zeros((side * side, d), dtype=dout.dtype)
    dgrid[:n] = dout
    dx, dk = T.dwconv3x3_backward(dgrid.reshape(side, side, d),
                                  grid.reshape(side, side, d), kernels)
    return dx.reshape(side * side, d)[:n], dk


# ---------------------------------------------------------------------------
# module-level operations on one token sequence (n, model_dim)


def softmax_attention(x: np.ndarray, w: AttentionWeights,
                      cfg: AttentionConfig) -> np.ndarray:
    if x.shape[-1] != cfg.model_dim:
        raise T.ShapeError(f"token dim {x.shape[-1]} != model_dim {cfg.model_dim}")
    q = split_heads(project(x, w.wq), cfg.heads)
    k = split_heads(project(x, w.wk), cfg.heads)
    v = split_heads(project(x, w.wv), cfg.heads)
    out, _ = softmax_core(q, k, v)
    return project(merge_heads(out), w.wo)


def linear_attention(x: np.ndarray, w: AttentionWeights,
                     cfg: AttentionConfig) -> np.ndarray:
    if cfg.mode not in ("linear", "linear-binary"):
        raise ValueError(f"linear_attention called with mode {cfg.mode!r}")
    if x.shape[-1] != cfg.model_dim:
        raise T.ShapeError(f"token dim {x.shape[-1]} != model_dim {cfg.model_dim}")
    q = project(x, w.wq)
    k = project(x, w.wk)
    v_full = project(x, w.wv)
    v = split_heads(v_full, cfg.heads)
    if cfg.mode == "linear-binary":
        qf, kf, _ = binarize_qk(q, k, cfg)
    else:
        qf = feat_relu(split_heads(q, cfg.heads))
        kf = feat_relu(split_heads(k, cfg.heads))
    out, _ = linear_core(qf, kf, v, cfg.eps_norm)
    merged = merge_heads(out)
    if cfg.use_dwconv and w.dw_kernels is not None:
        merged = merged + _dwconv_tokens(v_full, w.dw_kernels)[0]
    return project(merged, w.wo)


def attention(x: np.ndarray, w: AttentionWeights, cfg: AttentionConfig) -> np.ndarray:
    if cfg.mode == "softmax":
        return softmax_attention(x, w, cfg)
    return linear_attention(x, w, cfg)

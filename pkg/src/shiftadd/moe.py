"""Heterogeneous top-1 mixture of experts with latency-aware balancing.

Tokens are routed to the expert with the highest gate value (softmax over a
learned linear map); the winning gate value scales that expert's output. Two
auxiliary losses keep the assignment balanced in proportion to expert speed:

    imp  = scv({alpha_i * sum_x p_i(x)})      gate-value balance
    load = scv({alpha_i * sum_x q_i(x)})      assignment-count balance

where scv is the squared coefficient of variation, alpha_i = lat_i / sum(lat)
is the latency coefficient of expert i, and q_i(x) is a smooth proxy for
"expert i wins token x": the normal CDF of the logit margin over the runner-up
divided by a noise scale sigma. Both losses are zero exactly when each
expert's weighted share is inversely proportional to its latency, so faster
experts take more tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T

SCV_EPS = 1e-10

_erf = np.frompyfunc(math.erf, 1, 1)

_INV_SQRT_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def normal_cdf(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + _erf(np.asarray(z, dtype=np.float64) * _INV_SQRT_2).astype(np.float64))


def normal_pdf(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


@dataclass
class Router:
    w_g: np.ndarray            # (d, num_experts)
    sigma: float = 0.1
    lam: float = 0.01

    def __post_init__(self):
        if self.w_g.ndim != 2 or self.w_g.shape[1] < 2:
            raise T.ShapeError(f"router needs a (d, E>=2) gating matrix, got {self.w_g.shape}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")

    @property
    def num_experts(self) -> int:
        return self.w_g.shape[1]


@dataclass
class DispatchPlan:
    expert_of: np.ndarray              # (n,) winning expert per token
    gate_of: np.ndarray                # (n,) winning gate value per token
    index_of: list                     # per-expert token index arrays

    def share(self, expert: int) -> float:
        return float(self.index_of[expert].size) / max(self.expert_of.size, 1)


def latency_coefficients(lat: Sequence[float]) -> np.ndarray:
    lat = np.asarray(lat, dtype=np.float64)
    if np.any(lat <= 0):
        raise ValueError("latencies must be positive")
    return lat / lat.sum()


def route(x: np.ndarray, router: Router):
    """Gate distribution per token: p = softmax(x @ W_g) rowwise."""
    logits = T.matmul(x, router.w_g.astype(x.dtype, copy=False))
    return T.softmax(logits, axis=-1), logits


def dispatch(p: np.ndarray, logits: np.ndarray) -> DispatchPlan:
    """Assign each token to its argmax expert; ties go to the lower index."""
    expert_of = np.argmax(p, axis=-1)
    gate_of = np.take_along_axis(p, expert_of[:, None], axis=-1)[:, 0]
    index_of = [np.flatnonzero(expert_of == e) for e in range(p.shape[-1])]
    return DispatchPlan(expert_of=expert_of, gate_of=gate_of, index_of=index_of)


def moe_forward(x: np.ndarray, experts: Sequence, plan: DispatchPlan) -> np.ndarray:
    """Gather tokens per expert, process, scale by the gate, scatter back."""
    out = None
    for e, expert in enumerate(experts):
        idx = plan.index_of[e]
        if idx.size == 0:
            continue
        y = expert.forward(x[idx])
        if out is None:
            out = np.zeros((x.shape[0], y.shape[1]), dtype=y.dtype)
        elif y.shape[1] != out.shape[1]:
            raise T.ShapeError("experts disagree on output dim")
        out[idx] = y * plan.gate_of[idx, None]
    return out if out is not None else x.copy()


def scv(values) -> float:
    """Population variance over squared mean, guarded against zero mean."""
    v = np.asarray(values, dtype=np.float64)
    mean = v.mean()
    var = np.mean((v - mean) ** 2)
    return float(var / max(mean * mean, SCV_EPS))


def scv_grad(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    mean = v.mean()
    var = np.mean((v - mean) ** 2)
    denom = max(mean * mean, SCV_EPS)
    g = 2.0 * (v - mean) / (n * denom)
    if mean * mean > SCV_EPS:
        g -= 2.0 * var / (n * mean * denom)
    return g


def importance_loss(p: np.ndarray, alpha: np.ndarray) -> float:
    """scv of latency-weighted gate mass per expert."""
    return scv(np.asarray(alpha) * p.sum(axis=0))


def importance_loss_grad(p: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Gradient with respect to every p[x, i]."""
    alpha = np.asarray(alpha, dtype=np.float64)
    du = scv_grad(alpha * np.asarray(p, dtype=np.float64).sum(axis=0))
    return np.broadcast_to(du * alpha, p.shape).astype(np.float64)


def _win_margins(logits: np.ndarray):
    """Margin of each expert's logit over the best of the others.

    Returns (margins, rival) where rival[x, i] is the index of the strongest
    competitor of expert i on token x.
    """
    n, num = logits.shape
    margins = np.empty((n, num), dtype=np.float64)
    rival = np.empty((n, num), dtype=np.int64)
    l64 = np.asarray(logits, dtype=np.float64)
    for i in range(num):
        others = np.delete(l64, i, axis=1)
        best = others.argmax(axis=1)
        best_val = np.take_along_axis(others, best[:, None], axis=1)[:, 0]
        margins[:, i] = l64[:, i] - best_val
        rival[:, i] = np.where(best >= i, best + 1, best)
    return margins, rival


def load_estimate(logits: np.ndarray, sigma: float) -> np.ndarray:
    """Smooth per-token probability that each expert wins the gate."""
    margins, _ = _win_margins(logits)
    return normal_cdf(margins / sigma)


def load_loss(logits: np.ndarray, alpha: np.ndarray, sigma: float) -> float:
    q = load_estimate(logits, sigma)
    return scv(np.asarray(alpha) * q.sum(axis=0))


def load_loss_grad(logits: np.ndarray, alpha: np.ndarray, sigma: float) -> np.ndarray:
    """Gradient with respect to the logits."""
    alpha = np.asarray(alpha, dtype=np.float64)
    margins, rival = _win_margins(logits)
    q = normal_cdf(margins / sigma)
    du = scv_grad(alpha * q.sum(axis=0))
    dq = np.broadcast_to(du * alpha, q.shape)
    dmargin = dq * normal_pdf(margins / sigma) / sigma
    dlogits = np.zeros(logits.shape, dtype=np.float64)
    for i in range(logits.shape[1]):
        dlogits[:, i] += dmargin[:, i]
        np.add.at(dlogits, (np.arange(logits.shape[0]), rival[:, i]), -dmargin[:, i])
    return dlogits


def total_loss(l_cls: float, l_imp: float, l_load: float, lam: float = 0.01) -> float:
    return float(l_cls + lam * (l_imp + l_load))


@dataclass
class MoeLayer:
    """Two (or more) experts behind one router, with frozen latency weights."""

    router: Router
    experts: list
    lat: list
    alpha: np.ndarray = field(init=False)

    def __post_init__(self):
        if len(self.experts) != self.router.num_experts:
            raise T.ShapeError("one expert per router column required")
        if len(self.lat) != len(self.experts):
            raise T.ShapeError("one latency per expert required")
        self.alpha = latency_coefficients(self.lat)


def modularized_latency(layer: MoeLayer, measured: Sequence[float]) -> float:
    """Ideal-parallel latency of one MoE layer: the slowest expert."""
    if len(measured) != len(layer.experts):
        raise T.ShapeError(
            f"expected {len(layer.experts)} measurements, got {len(measured)}")
    return float(max(measured))

"""Toy vision transformer with manual backward passes, plus the two-stage
reparameterization pipeline and a deterministic training loop.

Blocks are pre-norm residual: x + Attn(LN(x)), then x + MLP(LN(x)). Every
linear inside attention and the MLP can be realized as a dense layer, a shift
layer trained through a straight-through estimator on latent shadow weights,
or a two-expert mixture (dense "mult" expert and shift expert) behind a
learned router with latency-aware balance losses.

Stage 1 of the pipeline switches attention from softmax form to binarized
Q(KV) linear form; stage 2 converts projections and MLP linears to shift or
mixture layers. Blocks flagged exempt (the last block by default) are left
untouched so one full-precision softmax stage remains.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional

import numpy as np

from . import attention as A
from . import moe as MOE
from . import quantize as Q
from . import tensor as T
from .data import Dataset
from .tensor import GradPair

ATTN_MODES = ("softmax", "linear", "linear-binary")
LINEAR_MODES = ("dense", "shift", "moe")


@dataclass
class BlockConfig:
    d: int
    h: int
    mlp_ratio: float = 4.0
    attn_mode: str = "softmax"
    mlp_mode: str = "dense"
    attn_linear_mode: str = "dense"
    exempt: bool = False

    def __post_init__(self):
        if self.d % self.h != 0:
            raise T.ShapeError(f"model dim {self.d} not divisible by heads {self.h}")
        if self.attn_mode not in ATTN_MODES:
            raise ValueError(f"unknown attn_mode {self.attn_mode!r}")
        if self.mlp_mode not in LINEAR_MODES:
            raise ValueError(f"unknown mlp_mode {self.mlp_mode!r}")
        if self.attn_linear_mode not in LINEAR_MODES:
            raise ValueError(f"unknown attn_linear_mode {self.attn_linear_mode!r}")


@dataclass
class ModelConfig:
    blocks: List[BlockConfig]
    patch: int = 4
    img: int = 16
    classes: int = 5
    seed: int = 0
    channels: int = 3

    def __post_init__(self):
        if self.img % self.patch != 0:
            raise T.ShapeError(f"image side {self.img} not divisible by patch {self.patch}")

    @property
    def tokens(self) -> int:
        side = self.img // self.patch
        return side * side

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        blocks = [BlockConfig(**b) for b in payload["blocks"]]
        rest = {k: v for k, v in payload.items() if k != "blocks"}
        return cls(blocks=blocks, **rest)


@dataclass
class MoeConfig:
    sigma: float = 0.1
    lam: float = 0.01
    lat: tuple = (3.0, 1.0)   # (mult expert, shift expert)


# ---------------------------------------------------------------------------
# trainable layers


class Linear:
    """Dense y = x @ w (no bias; affine freedom lives in the layer norms)."""

    kind = "dense"

    def __init__(self, w: np.ndarray):
        self.w = GradPair(np.ascontiguousarray(w))
        self._x = None

    def forward(self, x, train=False):
        if train:
            self._x = x
        return T.matmul(x, self.w.value)

    def backward(self, dout):
        if self._x is None:
            raise T.StateError("linear backward without cached forward")
        dx, dw = T.matmul_backward(dout, self._x, self.w.value)
        self.w.accumulate(dw)
        return dx

    def named_params(self, prefix):
        yield prefix + ".w", self.w

    def extra_blobs(self, prefix):
        return ()

    def post_step(self):
        pass


class ShiftLinearLayer:
    """Shift layer trained through latent dense shadow weights.

    Forward uses the quantized sign/exponent pair; backward pretends the layer
    is dense at the reconstructed weights and routes the weight gradient to
    the shadow, which is re-quantized after every optimizer step.
    """

    kind = "shift"

    def __init__(self, shadow: np.ndarray, quant_cfg: Q.QuantConfig = None):
        self.quant_cfg = quant_cfg or Q.QuantConfig()
        self.w = GradPair(np.ascontiguousarray(shadow))
        self.quant = Q.quantize_shift(self.w.value, self.quant_cfg)
        self._x = None

    def requantize(self):
        self.quant = Q.quantize_shift(self.w.value, self.quant_cfg)

    def forward(self, x, train=False):
        if train:
            self._x = x
        return Q.shift_forward(x, self.quant)

    def backward(self, dout):
        if self._x is None:
            raise T.StateError("shift backward without cached forward")
        dx, dw = Q.shift_backward(dout, self._x, self.quant)
        self.w.accumulate(dw)
        return dx

    def named_params(self, prefix):
        yield prefix + ".shadow", self.w

    def extra_blobs(self, prefix):
        yield prefix + ".quant_s", self.quant.s
        yield prefix + ".quant_p", self.quant.p

    def post_step(self):
        self.requantize()


class LayerNorm:
    def __init__(self, dim: int, dtype):
        self.gain = GradPair(np.ones(dim, dtype=dtype))
        self.bias = GradPair(np.zeros(dim, dtype=dtype))
        self._cache = None

    def forward(self, x, train=False):
        y, cache = T.layernorm(x, self.gain.value, self.bias.value)
        if train:
            self._cache = cache
        return y

    def backward(self, dout):
        if self._cache is None:
            raise T.StateError("layernorm backward without cached forward")
        dx, dgain, dbias = T.layernorm_backward(dout, self._cache)
        self.gain.accumulate(dgain)
        self.bias.accumulate(dbias)
        return dx

    def named_params(self, prefix):
        yield prefix + ".gain", self.gain
        yield prefix + ".bias", self.bias

    def post_step(self):
        pass


class Mlp:
    """Two linears with a gelu in between; linears are dense or shift."""

    def __init__(self, fc1, fc2):
        self.fc1 = fc1
        self.fc2 = fc2
        self._h = None

    def forward(self, x, train=False):
        h = self.fc1.forward(x, train)
        if train:
            self._h = h
        return self.fc2.forward(T.gelu(h), train)

    def backward(self, dout):
        if self._h is None:
            raise T.StateError("mlp backward without cached forward")
        dg = self.fc2.backward(dout)
        dh = T.gelu_backward(dg, self._h)
        return self.fc1.backward(dh)

    def named_params(self, prefix):
        yield from self.fc1.named_params(prefix + ".fc1")
        yield from self.fc2.named_params(prefix + ".fc2")

    def extra_blobs(self, prefix):
        yield from self.fc1.extra_blobs(prefix + ".fc1")
        yield from self.fc2.extra_blobs(prefix + ".fc2")

    def post_step(self):
        self.fc1.post_step()
        self.fc2.post_step()


class MoeModule:
    """Top-1 two-expert mixture over token rows with balance losses.

    Gradients flow to the experts, to the router through the winning gate
    value, and (scaled by lam) through the importance and load losses.
    """

    def __init__(self, w_g: np.ndarray, experts: list, moe_cfg: MoeConfig):
        self.wg = GradPair(np.ascontiguousarray(w_g))
        self.experts = experts
        self.cfg = moe_cfg
        self.alpha = MOE.latency_coefficients(moe_cfg.lat)
        self.last_plan: Optional[MOE.DispatchPlan] = None
        self.aux_imp = 0.0
        self.aux_load = 0.0
        self._cache = None

    def router(self) -> MOE.Router:
        return MOE.Router(w_g=self.wg.value, sigma=self.cfg.sigma, lam=self.cfg.lam)

    def forward(self, x, train=False):
        p, logits = MOE.route(x, self.router())
        plan = MOE.dispatch(p, logits)
        self.last_plan = plan
        outs = {}
        out = None
        for e, expert in enumerate(self.experts):
            idx = plan.index_of[e]
            if idx.size == 0:
                continue
            y = expert.forward(x[idx], train)
            if out is None:
                out = np.zeros((x.shape[0], y.shape[1]), dtype=y.dtype)
            out[idx] = y * plan.gate_of[idx, None]
            outs[e] = y
        if train:
            if self.cfg.lam > 0:
                self.aux_imp = MOE.importance_loss(p, self.alpha)
                self.aux_load = MOE.load_loss(logits, self.alpha, self.cfg.sigma)
            else:
                # lambda 0 disables the balance losses entirely
                self.aux_imp = 0.0
                self.aux_load = 0.0
            self._cache = (x, p, logits, plan, outs)
        return out if out is not None else np.zeros_like(x)

    def backward(self, dout):
        if self._cache is None:
            raise T.StateError("moe backward without cached forward")
        x, p, logits, plan, outs = self._cache
        dx = np.zeros_like(x)
        dgate = np.zeros(x.shape[0], dtype=np.float64)
        for e, expert in enumerate(self.experts):
            idx = plan.index_of[e]
            if idx.size == 0:
                continue
            dy = dout[idx] * plan.gate_of[idx, None]
            dgate[idx] = np.sum(dout[idx] * outs[e], axis=1)
            dx[idx] = expert.backward(dy)
        dp = np.zeros(p.shape, dtype=np.float64)
        dp[np.arange(p.shape[0]), plan.expert_of] = dgate
        dlogits = T.softmax_backward(dp, np.asarray(p, dtype=np.float64), axis=-1)
        if self.cfg.lam > 0:
            dimp_p = MOE.importance_loss_grad(p, self.alpha)
            dlogits += self.cfg.lam * T.softmax_backward(
                dimp_p, np.asarray(p, dtype=np.float64), axis=-1)
            dlogits += self.cfg.lam * MOE.load_loss_grad(logits, self.alpha, self.cfg.sigma)
        dlogits = dlogits.astype(x.dtype, copy=False)
        dxr, dwg = T.matmul_backward(dlogits, x, self.wg.value)
        self.wg.accumulate(dwg)
        return dx + dxr

    def named_params(self, prefix):
        yield prefix + ".router.wg", self.wg
        for e, expert in enumerate(self.experts):
            yield from expert.named_params(f"{prefix}.expert{e}")

    def extra_blobs(self, prefix):
        for e, expert in enumerate(self.experts):
            yield from expert.extra_blobs(f"{prefix}.expert{e}")

    def post_step(self):
        for expert in self.experts:
            expert.post_step()


class AttentionLayer:
    """Multi-head attention over (batch, tokens, dim) activations."""

    def __init__(self, block_cfg: BlockConfig, projections: dict,
                 dw_kernels: Optional[GradPair]):
        self.cfg = block_cfg
        self.proj = projections     # keys q, k, v, o
        self.dw = dw_kernels        # GradPair(3, 3, d) or None
        self._cache = None

    @property
    def heads(self):
        return self.cfg.h

    def _fold_heads(self, x, batch, n):
        d = x.shape[-1]
        h = self.heads
        return A.split_heads(x.reshape(batch, n, d), h).reshape(batch * h, n, d // h)

    def _unfold_heads(self, x, batch, n):
        hb, _, dk = x.shape
        h = self.heads
        return A.merge_heads(x.reshape(batch, h, n, dk)).reshape(batch * n, h * dk)

    def forward(self, x, train=False):
        batch, n, d = x.shape
        flat = x.reshape(batch * n, d)
        q = self.proj["q"].forward(flat, train)
        k = self.proj["k"].forward(flat, train)
        v = self.proj["v"].forward(flat, train)
        qh = self._fold_heads(q, batch, n)
        kh = self._fold_heads(k, batch, n)
        vh = self._fold_heads(v, batch, n)
        mode = self.cfg.attn_mode
        if mode == "softmax":
            out, core_cache = A.softmax_core(qh, kh, vh)
            feat_cache = None
        else:
            if mode == "linear-binary":
                bq, gq = Q.binarize(qh, scale_mode="per-head")
                bk, gk = Q.binarize(kh, scale_mode="per-head")
                qf = (gq * (bq + 1.0) * 0.5).astype(x.dtype, copy=False)
                kf = (gk * (bk + 1.0) * 0.5).astype(x.dtype, copy=False)
                feat_cache = (qh, kh, bq, bk, gq, gk)
            else:
                qf = A.feat_relu(qh)
                kf = A.feat_relu(kh)
                feat_cache = (qh, kh)
            out, core_cache = A.linear_core(qf, kf, vh, A.EPS_NORM)
        merged = self._unfold_heads(out, batch, n)
        dw_cache = None
        if mode != "softmax" and self.dw is not None:
            per_sample = []
            for b in range(batch):
                conv, side = A._dwconv_tokens(v[b * n:(b + 1) * n], self.dw.value)
                per_sample.append(conv)
            merged = merged + np.concatenate(per_sample, axis=0)
            dw_cache = (v, side)
        y = self.proj["o"].forward(merged, train)
        if train:
            self._cache = (batch, n, mode, core_cache, feat_cache, dw_cache)
        return y.reshape(batch, n, d)

    def backward(self, dout):
        if self._cache is None:
            raise T.StateError("attention backward without cached forward")
        batch, n, mode, core_cache, feat_cache, dw_cache = self._cache
        d = dout.shape[-1]
        dmerged = self.proj["o"].backward(dout.reshape(batch * n, d))
        dv_extra = None
        if dw_cache is not None:
            v, side = dw_cache
            dv_parts, dk_total = [], np.zeros_like(self.dw.value)
            for b in range(batch):
                dvb, dkb = A._dwconv_tokens_backward(
                    dmerged[b * n:(b + 1) * n], v[b * n:(b + 1) * n],
                    self.dw.value, side)
                dv_parts.append(dvb)
                dk_total += dkb
            self.dw.accumulate(dk_total)
            dv_extra = np.concatenate(dv_parts, axis=0)
        dheads = self._fold_heads(dmerged, batch, n)
        if mode == "softmax":
            dqh, dkh, dvh = A.softmax_core_backward(dheads, core_cache)
        else:
            dqf, dkf, dvh = A.linear_core_backward(dheads, core_cache)
            if mode == "linear-binary":
                qh, kh, bq, bk, gq, gk = feat_cache
                dqh = self._binarize_backward(dqf, qh, bq, gq)
                dkh = self._binarize_backward(dkf, kh, bk, gk)
            else:
                qh, kh = feat_cache
                dqh = A.feat_relu_backward(dqf, qh)
                dkh = A.feat_relu_backward(dkf, kh)
        dq = self._unfold_heads(dqh, batch, n)
        dk = self._unfold_heads(dkh, batch, n)
        dv = self._unfold_heads(dvh, batch, n)
        if dv_extra is not None:
            dv = dv + dv_extra
        dflat = (self.proj["q"].backward(dq) + self.proj["k"].backward(dk)
                 + self.proj["v"].backward(dv))
        return dflat.reshape(batch, n, d)

    @staticmethod
    def _binarize_backward(dfeat, raw, codes_pm, gamma):
        """Identity straight-through on the sign; exact path through gamma.

        feat = gamma * (sign(raw)+1)/2 with gamma = mean|raw| per head slice.
        """
        codes01 = (codes_pm + 1.0) * 0.5
        scope = raw.shape[-1] * raw.shape[-2]
        dgamma = np.sum(dfeat * codes01, axis=(-1, -2), keepdims=True)
        draw = 0.5 * gamma * dfeat + dgamma * Q.sign_unit(raw) / scope
        return draw.astype(raw.dtype, copy=False)

    def named_params(self, prefix):
        for key in ("q", "k", "v", "o"):
            yield from self.proj[key].named_params(f"{prefix}.{key}")
        if self.dw is not None:
            yield prefix + ".dw", self.dw

    def extra_blobs(self, prefix):
        for key in ("q", "k", "v", "o"):
            yield from self.proj[key].extra_blobs(f"{prefix}.{key}")

    def post_step(self):
        for key in ("q", "k", "v", "o"):
            self.proj[key].post_step()


class Block:
    def __init__(self, cfg: BlockConfig, attn: AttentionLayer, mlp, dtype):
        self.cfg = cfg
        self.ln1 = LayerNorm(cfg.d, dtype)
        self.ln2 = LayerNorm(cfg.d, dtype)
        self.attn = attn
        self.mlp = mlp

    def forward(self, x, train=False):
        batch, n, d = x.shape
        h = x + self.attn.forward(self.ln1.forward(x, train), train)
        flat = self.ln2.forward(h, train).reshape(batch * n, d)
        y = h + self.mlp.forward(flat, train).reshape(batch, n, d)
        return y

    def backward(self, dout):
        batch, n, d = dout.shape
        dmlp = self.mlp.backward(dout.reshape(batch * n, d))
        dh = dout + self.ln2.backward(dmlp.reshape(batch, n, d))
        dattn = self.attn.backward(dh)
        return dh + self.ln1.backward(dattn)

    def named_params(self, prefix):
        yield from self.ln1.named_params(prefix + ".ln1")
        yield from self.attn.named_params(prefix + ".attn")
        yield from self.ln2.named_params(prefix + ".ln2")
        yield from self.mlp.named_params(prefix + ".mlp")

    def extra_blobs(self, prefix):
        yield from self.attn.extra_blobs(prefix + ".attn")
        yield from self.mlp.extra_blobs(prefix + ".mlp")

    def post_step(self):
        self.attn.post_step()
        self.mlp.post_step()


# ---------------------------------------------------------------------------
# model assembly


def _init_linear(rng, fan_in, fan_out, dtype, scale=None):
    scale = scale if scale is not None else 1.0 / np.sqrt(fan_in)
    return (rng.standard_normal((fan_in, fan_out)) * scale).astype(dtype)


def _make_linear(mode, rng, fan_in, fan_out, dtype, moe_cfg, quant_cfg):
    """One projection or MLP matrix in the requested realization."""
    w = _init_linear(rng, fan_in, fan_out, dtype)
    if mode == "dense":
        return Linear(w)
    if mode == "shift":
        return ShiftLinearLayer(w, quant_cfg)
    if mode == "moe":
        wg = _init_linear(rng, fan_in, 2, dtype, scale=0.02)
        experts = [Linear(w), ShiftLinearLayer(w.copy(), quant_cfg)]
        return MoeModule(wg, experts, moe_cfg)
    raise ValueError(f"unknown linear mode {mode!r}")


def _make_mlp(cfg: BlockConfig, rng, dtype, moe_cfg, quant_cfg):
    hidden = int(cfg.d * cfg.mlp_ratio)
    if cfg.mlp_mode == "dense":
        return Mlp(Linear(_init_linear(rng, cfg.d, hidden, dtype)),
                   Linear(_init_linear(rng, hidden, cfg.d, dtype)))
    if cfg.mlp_mode == "shift":
        return Mlp(ShiftLinearLayer(_init_linear(rng, cfg.d, hidden, dtype), quant_cfg),
                   ShiftLinearLayer(_init_linear(rng, hidden, cfg.d, dtype), quant_cfg))
    if cfg.mlp_mode == "moe":
        wg = _init_linear(rng, cfg.d, 2, dtype, scale=0.02)
        w1 = _init_linear(rng, cfg.d, hidden, dtype)
        w2 = _init_linear(rng, hidden, cfg.d, dtype)
        experts = [Mlp(Linear(w1), Linear(w2)),
                   Mlp(ShiftLinearLayer(w1.copy(), quant_cfg),
                       ShiftLinearLayer(w2.copy(), quant_cfg))]
        return MoeModule(wg, experts, moe_cfg)
    raise ValueError(f"unknown mlp_mode {cfg.mlp_mode!r}")


class Model:
    """Patch embedding, learned positions, transformer blocks, mean-pool head."""

    def __init__(self, cfg: ModelConfig, dtype=T.DTYPE,
                 moe_cfg: MoeConfig = None, quant_cfg: Q.QuantConfig = None):
        self.cfg = cfg
        self.dtype = dtype
        self.moe_cfg = moe_cfg or MoeConfig()
        self.quant_cfg = quant_cfg or Q.QuantConfig()
        rng = T.make_rng(cfg.seed)
        d0 = cfg.blocks[0].d
        patch_dim = cfg.patch * cfg.patch * cfg.channels
        self.patch_embed = Linear(_init_linear(rng, patch_dim, d0, dtype))
        self.pos = GradPair((rng.standard_normal((cfg.tokens, d0)) * 0.02).astype(dtype))
        self.blocks = []
        for bc in cfg.blocks:
            proj = {key: _make_linear(bc.attn_linear_mode, rng, bc.d, bc.d, dtype,
                                      self.moe_cfg, self.quant_cfg)
                    for key in ("q", "k", "v", "o")}
            dw = None
            if bc.attn_mode != "softmax":
                dw = GradPair(np.zeros((3, 3, bc.d), dtype=dtype))
            attn = AttentionLayer(bc, proj, dw)
            mlp = _make_mlp(bc, rng, dtype, self.moe_cfg, self.quant_cfg)
            self.blocks.append(Block(bc, attn, mlp, dtype))
        self.final_ln = LayerNorm(cfg.blocks[-1].d, dtype)
        self.head = Linear(_init_linear(rng, cfg.blocks[-1].d, cfg.classes, dtype,
                                        scale=0.01))
        self._pool_cache = None

    # -- plumbing

    def patchify(self, images: np.ndarray) -> np.ndarray:
        b = images.shape[0]
        p, img, c = self.cfg.patch, self.cfg.img, self.cfg.channels
        side = img // p
        x = images.reshape(b, side, p, side, p, c)
        x = x.transpose(0, 1, 3, 2, 4, 5).reshape(b, side * side, p * p * c)
        return np.ascontiguousarray(x)

    def forward(self, images: np.ndarray, train=False) -> np.ndarray:
        x = (np.asarray(images, dtype=self.dtype) - 0.5)
        patches = self.patchify(x)
        b, n, pd = patches.shape
        tokens = self.patch_embed.forward(patches.reshape(b * n, pd), train)
        tokens = tokens.reshape(b, n, -1) + self.pos.value
        for block in self.blocks:
            tokens = block.forward(tokens, train)
        tokens = self.final_ln.forward(tokens, train)
        pooled = tokens.mean(axis=1)
        if train:
            self._pool_cache = (b, n)
        return self.head.forward(pooled, train)

    def backward(self, dlogits: np.ndarray) -> None:
        if self._pool_cache is None:
            raise T.StateError("model backward without cached forward")
        b, n = self._pool_cache
        dpooled = self.head.backward(dlogits)
        dtokens = np.repeat(dpooled[:, None, :], n, axis=1) / n
        dtokens = self.final_ln.backward(dtokens)
        for block in reversed(self.blocks):
            dtokens = block.backward(dtokens)
        self.pos.accumulate(dtokens.sum(axis=0))
        d0 = dtokens.shape[-1]
        self.patch_embed.backward(dtokens.reshape(b * n, d0))

    def named_params(self):
        yield "patch_embed.w", self.patch_embed.w
        yield "pos", self.pos
        for i, block in enumerate(self.blocks):
            yield from block.named_params(f"block{i}")
        yield from self.final_ln.named_params("final_ln")
        yield "head.w", self.head.w

    def extra_blobs(self):
        for i, block in enumerate(self.blocks):
            yield from block.extra_blobs(f"block{i}")

    def post_step(self):
        for block in self.blocks:
            block.post_step()

    def moe_modules(self):
        for i, block in enumerate(self.blocks):
            if isinstance(block.mlp, MoeModule):
                yield f"block{i}.mlp", block.mlp
            for key in ("q", "k", "v", "o"):
                layer = block.attn.proj[key]
                if isinstance(layer, MoeModule):
                    yield f"block{i}.attn.{key}", layer

    def aux_losses(self):
        imp = sum(m.aux_imp for _, m in self.moe_modules())
        load = sum(m.aux_load for _, m in self.moe_modules())
        return float(imp), float(load)

    def zero_grads(self):
        for _, p in self.named_params():
            p.zero_grad()


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross entropy and its gradient, via a stable log-softmax."""
    b = logits.shape[0]
    l64 = np.asarray(logits, dtype=np.float64)
    shifted = l64 - l64.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    logp = shifted - logz
    loss = float(-np.mean(logp[np.arange(b), labels]))
    p = np.exp(logp)
    p[np.arange(b), labels] -= 1.0
    return loss, (p / b).astype(logits.dtype, copy=False)


class SgdMomentum:
    """Plain momentum descent with optional global gradient-norm clipping.

    Velocity is keyed by parameter name so it can be serialized next to the
    weights. Clipping is deterministic and guards against the occasional
    spike a re-quantized shift layer can produce."""

    def __init__(self, lr: float, momentum: float = 0.9, clip_norm: float = None):
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, named_params) -> None:
        params = list(named_params)
        scale = 1.0
        if self.clip_norm is not None:
            sq = sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                     for _, p in params)
            norm = np.sqrt(sq)
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for name, p in params:
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.value)
            v = self.momentum * v + scale * p.grad
            self.velocity[name] = v
            p.value -= (self.lr * v).astype(p.value.dtype, copy=False)


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    lam: float = 0.01
    seed: int = 0
    log_every: int = 1
    clip_norm: float = 5.0


@dataclass
class TrainTrace:
    rows: List[dict] = field(default_factory=list)
    final_loss: float = 0.0
    steps: int = 0
    wall_seconds: float = 0.0


def train(model: Model, dataset: Dataset, hyper: TrainConfig,
          optimizer: SgdMomentum = None, trainable=None) -> TrainTrace:
    """Minibatch momentum descent on classification plus balance losses.

    `trainable` optionally restricts the update to a name predicate (used for
    router-only experiments). Deterministic for a fixed seed.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    if np.any(dataset.labels < 0) or np.any(dataset.labels >= model.cfg.classes):
        raise ValueError("labels out of range for model head")
    rng = T.make_rng(hyper.seed)
    opt = optimizer or SgdMomentum(hyper.lr, hyper.momentum, clip_norm=hyper.clip_norm)
    for _, module in model.moe_modules():
        module.cfg.lam = hyper.lam
    params = list(model.named_params())
    if trainable is not None:
        params = [(name, p) for name, p in params if trainable(name)]
    trace = TrainTrace()
    start = time.perf_counter()
    for step in range(hyper.steps):
        idx = rng.integers(0, n, size=hyper.batch_size)
        images = dataset.images[idx]
        labels = dataset.labels[idx]
        model.zero_grads()
        logits = model.forward(images, train=True)
        l_cls, dlogits = cross_entropy(logits, labels)
        l_imp, l_load = model.aux_losses()
        loss = MOE.total_loss(l_cls, l_imp, l_load, hyper.lam)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        model.backward(dlogits)
        opt.step(params)
        model.post_step()
        if step % hyper.log_every == 0 or step == hyper.steps - 1:
            row = {"step": step, "loss": loss, "l_cls": l_cls,
                   "l_imp": l_imp, "l_load": l_load}
            for name, module in model.moe_modules():
                row[f"{name}.share1"] = module.last_plan.share(1)
            trace.rows.append(row)
        trace.final_loss = loss
    trace.steps = hyper.steps
    trace.wall_seconds = time.perf_counter() - start
    return trace


@dataclass
class EvalResult:
    accuracy: float
    expert_shares: Dict[str, list]
    dispatch_maps: Dict[str, np.ndarray]   # layer -> (N, tokens) expert index


def evaluate(model: Model, dataset: Dataset, batch_size: int = 64) -> EvalResult:
    n = len(dataset)
    correct = 0
    maps: Dict[str, list] = {name: [] for name, _ in model.moe_modules()}
    tokens = model.cfg.tokens
    for start in range(0, n, batch_size):
        images = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        logits = model.forward(images, train=False)
        correct += int((np.argmax(logits, axis=1) == labels).sum())
        for name, module in model.moe_modules():
            plan = module.last_plan
            maps[name].append(plan.expert_of.reshape(-1, tokens))
    dispatch_maps = {name: np.concatenate(chunks, axis=0)
                     for name, chunks in maps.items() if chunks}
    shares = {}
    for name, arr in dispatch_maps.items():
        counts = np.bincount(arr.ravel(), minlength=2).astype(np.float64)
        shares[name] = (counts / counts.sum()).tolist()
    return EvalResult(accuracy=correct / n, expert_shares=shares,
                      dispatch_maps=dispatch_maps)


# ---------------------------------------------------------------------------
# reparameterization pipeline


def _convert_linear(layer, target, rng, moe_cfg, quant_cfg):
    """Realize a trained linear in the target mode, preserving its weights."""
    if isinstance(layer, MoeModule) or target == "dense":
        return layer
    w = layer.w.value.copy()
    if target == "shift":
        return ShiftLinearLayer(w, quant_cfg)
    if target == "moe":
        wg = (rng.standard_normal((w.shape[0], 2)) * 0.02).astype(w.dtype)
        experts = [Linear(w.copy()), ShiftLinearLayer(w.copy(), quant_cfg)]
        return MoeModule(wg, experts, moe_cfg)
    raise ValueError(f"unknown conversion target {target!r}")


def _convert_mlp(mlp, target, rng, moe_cfg, quant_cfg):
    if isinstance(mlp, MoeModule) or target == "dense":
        return mlp
    w1 = mlp.fc1.w.value.copy()
    w2 = mlp.fc2.w.value.copy()
    if target == "shift":
        return Mlp(ShiftLinearLayer(w1, quant_cfg), ShiftLinearLayer(w2, quant_cfg))
    if target == "moe":
        wg = (rng.standard_normal((w1.shape[0], 2)) * 0.02).astype(w1.dtype)
        experts = [Mlp(Linear(w1.copy()), Linear(w2.copy())),
                   Mlp(ShiftLinearLayer(w1.copy(), quant_cfg),
                       ShiftLinearLayer(w2.copy(), quant_cfg))]
        return MoeModule(wg, experts, moe_cfg)
    raise ValueError(f"unknown conversion target {target!r}")


# ---------------------------------------------------------------------------
# cost-model bridge


def _linear_desc(layer, in_dim, out_dim):
    from . import costmodel as CM
    return CM.LinearDesc(layer.kind, in_dim, out_dim)


def _moe_token_split(module: MoeModule, tokens: int, shares) -> tuple:
    if shares is None and module.last_plan is not None \
            and module.last_plan.expert_of.size:
        plan = module.last_plan
        total = plan.expert_of.size
        shares = [plan.index_of[e].size / total for e in range(len(module.experts))]
    if shares is None:
        shares = [1.0 / len(module.experts)] * len(module.experts)
    counts = [int(round(s * tokens)) for s in shares]
    counts[0] += tokens - sum(counts)
    return tuple(counts)


def audit_layers(model: Model, tokens: int = None, moe_shares: dict = None):
    """Closed-form op counts for one forward pass over one token sequence.

    Mixture layers are weighted by their most recent dispatch shares (run
    evaluate() first), by `moe_shares[layer_name]`, or by an even split.
    """
    from . import costmodel as CM

    n = tokens or model.cfg.tokens
    moe_shares = moe_shares or {}
    audits = []

    def add(name, cls, desc, t):
        audits.append(CM.LayerAudit(name, cls, CM.count_ops(desc, t)))

    def linear_audit(name, cls, layer, in_dim, out_dim, t):
        if isinstance(layer, MoeModule):
            split = _moe_token_split(layer, t, moe_shares.get(name))
            desc = CM.MoeDesc(
                router=CM.LinearDesc("dense", in_dim, len(layer.experts)),
                expert_descs=tuple((CM.LinearDesc(e.kind, in_dim, out_dim),)
                                   for e in layer.experts),
                expert_tokens=split)
            add(name, cls + "_moe", desc, t)
        else:
            add(name, cls, _linear_desc(layer, in_dim, out_dim), t)

    def mlp_audit(name, mlp, d, t):
        if isinstance(mlp, MoeModule):
            hidden = mlp.experts[0].fc1.w.value.shape[1]
            split = _moe_token_split(mlp, t, moe_shares.get(name))
            expert_descs = tuple(
                (CM.LinearDesc(e.fc1.kind, d, hidden),
                 CM.LinearDesc(e.fc2.kind, hidden, d))
                for e in mlp.experts)
            add(name, "mlp_moe", CM.MoeDesc(
                router=CM.LinearDesc("dense", d, len(mlp.experts)),
                expert_descs=expert_descs, expert_tokens=split), t)
            for e, cnt in zip(mlp.experts, split):
                add(name + ".act", "mlp_act",
                    CM.ElementwiseDesc("gelu", hidden), cnt)
        else:
            hidden = mlp.fc1.w.value.shape[1]
            add(name + ".fc1", "mlp", _linear_desc(mlp.fc1, d, hidden), t)
            add(name + ".act", "mlp_act", CM.ElementwiseDesc("gelu", hidden), t)
            add(name + ".fc2", "mlp", _linear_desc(mlp.fc2, hidden, d), t)

    d0 = model.cfg.blocks[0].d
    patch_dim = model.cfg.patch * model.cfg.patch * model.cfg.channels
    add("patch_embed", "embed", CM.LinearDesc("dense", patch_dim, d0), n)
    for i, block in enumerate(model.blocks):
        bc = block.cfg
        prefix = f"block{i}"
        add(f"{prefix}.ln1", "layernorm", CM.ElementwiseDesc("layernorm", bc.d), n)
        for key in ("q", "k", "v", "o"):
            linear_audit(f"{prefix}.attn.{key}", "attn_proj",
                         block.attn.proj[key], bc.d, bc.d, n)
        add(f"{prefix}.attn.mix", "attn_mix",
            CM.AttnMixDesc(bc.attn_mode, bc.h, bc.d // bc.h), n)
        add(f"{prefix}.attn.aux", "attn_aux",
            CM.AttnAuxDesc(bc.attn_mode, bc.h, bc.d // bc.h), n)
        if bc.attn_mode != "softmax" and block.attn.dw is not None:
            add(f"{prefix}.attn.dwconv", "attn_dwconv", CM.DwConvDesc(bc.d), n)
        add(f"{prefix}.residual1", "residual", CM.ElementwiseDesc("residual", bc.d), n)
        add(f"{prefix}.ln2", "layernorm", CM.ElementwiseDesc("layernorm", bc.d), n)
        mlp_audit(f"{prefix}.mlp", block.mlp, bc.d, n)
        add(f"{prefix}.residual2", "residual", CM.ElementwiseDesc("residual", bc.d), n)
    d_last = model.cfg.blocks[-1].d
    add("final_ln", "layernorm", CM.ElementwiseDesc("layernorm", d_last), n)
    add("head", "head", CM.LinearDesc("dense", d_last, model.cfg.classes), 1)
    return audits


def apply_stage(model: Model, stage: int, mlp_target: str = "shift",
                attn_target: str = "shift", reparam_seed: int = 77) -> Model:
    """Stage 1: softmax attention becomes binarized Q(KV) linear attention.
    Stage 2: attention projections and MLPs become shift or mixture layers.

    Exempt blocks are skipped entirely. Conversion happens in place; finetune
    afterwards with train().
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    rng = T.make_rng(reparam_seed)
    if stage == 2 and any(b.cfg.attn_mode == "softmax" and not b.cfg.exempt
                          for b in model.blocks):
        raise ValueError("stage 2 requires a stage-1 model (linear attention)")
    for block in model.blocks:
        if block.cfg.exempt:
            continue
        if stage == 1:
            block.cfg.attn_mode = "linear-binary"
            block.attn.cfg = block.cfg
            if block.attn.dw is None:
                dim = block.cfg.d
                block.attn.dw = GradPair(np.zeros((3, 3, dim), dtype=model.dtype))
        else:
            block.cfg.attn_linear_mode = attn_target
            block.cfg.mlp_mode = mlp_target
            block.attn.cfg = block.cfg
            for key in ("q", "k", "v", "o"):
                block.attn.proj[key] = _convert_linear(
                    block.attn.proj[key], attn_target, rng,
                    model.moe_cfg, model.quant_cfg)
            block.mlp = _convert_mlp(block.mlp, mlp_target, rng,
                                     model.moe_cfg, model.quant_cfg)
    return model

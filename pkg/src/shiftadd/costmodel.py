"""Analytical energy, area, and op-count model for shift/add networks.

Unit costs come from published 45nm CMOS figures for multiply, add, and shift
at several formats; on top of that sits a closed-form op counter per layer
kind and a two-level data-movement estimate (weights stream once from DRAM,
activations move through SRAM at a fixed pJ/byte). Absolute joules are a
modeling choice; ratios between kernels and the breakdown structure are the
meaningful outputs.

Counting conventions:
  dense linear m x k x n   -> m*k*n mults,   m*(k-1)*n adds
  shift linear             -> m*k*n shifts,  m*(k-1)*n adds, no mults
  add linear               -> m*k*n adds, plus m*n trailing-scale mults
                              (the scale is counted separately on purpose)
  attention token mixing   -> only the two matrix products; softmax form is
                              quadratic in tokens, reordered linear form is
                              linear in tokens; binary codes turn product
                              mults into selected accumulation (zero mults)
  everything else (norms, residuals, activations) uses documented per-element
  estimates so breakdowns stay complete.

Transcendentals (exp in softmax, tanh in the MLP activation) have no table
entry and are not counted; divisions are priced as multiplications.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

# (op, format) -> (energy_pJ, area_um2), 45nm CMOS
TABLE_45NM: Dict[Tuple[str, str], Tuple[float, float]] = {
    ("mult", "FP32"): (3.7, 7700.0),
    ("mult", "FP16"): (0.9, 1640.0),
    ("mult", "INT32"): (3.1, 3495.0),
    ("mult", "INT8"): (0.2, 282.0),
    ("add", "FP32"): (1.1, 4184.0),
    ("add", "FP16"): (0.4, 1360.0),
    ("add", "INT32"): (0.1, 137.0),
    ("add", "INT8"): (0.03, 36.0),
    ("shift", "INT32"): (0.13, 157.0),
    ("shift", "INT16"): (0.057, 73.0),
    ("shift", "INT8"): (0.024, 34.0),
}

FORMAT_BYTES = {"FP32": 4, "FP16": 2, "INT32": 4, "INT16": 2, "INT8": 1}


class CostLookupError(KeyError):
    pass


@dataclass(frozen=True)
class CostEntry:
    energy_pj: float
    area_um2: float


@dataclass
class CostTable:
    entries: Dict[Tuple[str, str], CostEntry]
    dram_pj_per_byte: float = 20.0
    sram_pj_per_byte: float = 1.0

    @classmethod
    def default(cls) -> "CostTable":
        return cls(entries={k: CostEntry(*v) for k, v in TABLE_45NM.items()})

    def lookup(self, op: str, fmt: str) -> CostEntry:
        try:
            return self.entries[(op, fmt)]
        except KeyError:
            known = ", ".join(f"{o}/{f}" for o, f in sorted(self.entries))
            raise CostLookupError(f"no entry for ({op}, {fmt}); known pairs: {known}") from None

    def to_json(self, path) -> None:
        payload = {
            "dram_pj_per_byte": self.dram_pj_per_byte,
            "sram_pj_per_byte": self.sram_pj_per_byte,
            "entries": [
                {"op": op, "format": fmt, "energy_pj": e.energy_pj, "area_um2": e.area_um2}
                for (op, fmt), e in sorted(self.entries.items())
            ],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "CostTable":
        with open(path) as fh:
            payload = json.load(fh)
        entries = {
            (row["op"], row["format"]): CostEntry(row["energy_pj"], row["area_um2"])
            for row in payload["entries"]
        }
        return cls(entries=entries,
                   dram_pj_per_byte=payload.get("dram_pj_per_byte", 20.0),
                   sram_pj_per_byte=payload.get("sram_pj_per_byte", 1.0))


def energy_ratio(table: CostTable, num_op: str, den_op: str, fmt: str) -> float:
    return table.lookup(num_op, fmt).energy_pj / table.lookup(den_op, fmt).energy_pj


@dataclass
class FormatPolicy:
    """Which table format prices each counted operation."""

    dense_mult: str = "FP32"
    dense_add: str = "FP32"
    shift: str = "INT16"
    shift_acc_add: str = "INT32"
    add_acc: str = "INT32"
    gamma_mult: str = "FP32"
    attn_mult: str = "FP32"
    attn_add: str = "FP32"
    other_mult: str = "FP32"
    other_add: str = "FP32"
    act_bytes: int = 4
    dense_weight_bytes: int = 4
    shift_weight_bytes: int = 1   # packed sign + exponent
    add_weight_bytes: int = 1     # sign plane


DEFAULT_POLICY = FormatPolicy()


@dataclass
class OpCount:
    mults: Dict[str, int] = field(default_factory=dict)
    adds: Dict[str, int] = field(default_factory=dict)
    shifts: Dict[str, int] = field(default_factory=dict)
    dram_bytes: int = 0
    sram_bytes: int = 0

    def bump(self, kind: str, fmt: str, count: int) -> None:
        if count < 0:
            raise ValueError("op counts are nonnegative")
        bucket = getattr(self, kind)
        bucket[fmt] = bucket.get(fmt, 0) + int(count)

    def merge(self, other: "OpCount") -> "OpCount":
        for kind in ("mults", "adds", "shifts"):
            for fmt, c in getattr(other, kind).items():
                self.bump(kind, fmt, c)
        self.dram_bytes += other.dram_bytes
        self.sram_bytes += other.sram_bytes
        return self

    def total(self, kind: str) -> int:
        return sum(getattr(self, kind).values())

    @property
    def bytes_moved(self) -> int:
        return self.dram_bytes + self.sram_bytes


# ---------------------------------------------------------------------------
# layer descriptors


@dataclass(frozen=True)
class LinearDesc:
    kind: str                 # dense | shift | add
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class AttnMixDesc:
    """The two token-mixing matrix products of one attention layer."""
    mode: str                 # softmax | linear | linear-binary
    heads: int
    head_dim: int


@dataclass(frozen=True)
class AttnAuxDesc:
    """Scales, normalizers, and binary-code trailing scales of attention."""
    mode: str
    heads: int
    head_dim: int


@dataclass(frozen=True)
class DwConvDesc:
    channels: int


@dataclass(frozen=True)
class ElementwiseDesc:
    kind: str                 # layernorm | residual | gelu
    dim: int


@dataclass(frozen=True)
class MoeDesc:
    router: LinearDesc
    expert_descs: tuple        # one tuple of descs per expert
    expert_tokens: tuple       # integer token count routed to each expert


def count_ops(desc, tokens: int, policy: FormatPolicy = DEFAULT_POLICY) -> OpCount:
    """Closed-form op and traffic counts for one layer over `tokens` rows."""
    oc = OpCount()
    m = int(tokens)

    if isinstance(desc, LinearDesc):
        k, n = desc.in_dim, desc.out_dim
        if desc.kind == "dense":
            oc.bump("mults", policy.dense_mult, m * k * n)
            oc.bump("adds", policy.dense_add, m * (k - 1) * n)
            oc.dram_bytes += k * n * policy.dense_weight_bytes
        elif desc.kind == "shift":
            oc.bump("shifts", policy.shift, m * k * n)
            oc.bump("adds", policy.shift_acc_add, m * (k - 1) * n)
            oc.dram_bytes += k * n * policy.shift_weight_bytes
        elif desc.kind == "add":
            oc.bump("adds", policy.add_acc, m * k * n)
            oc.bump("mults", policy.gamma_mult, m * n)
            oc.dram_bytes += k * n * policy.add_weight_bytes
        else:
            raise ValueError(f"unknown linear kind {desc.kind!r}")
        oc.sram_bytes += (m * k + m * n) * policy.act_bytes

    elif isinstance(desc, AttnMixDesc):
        h, dk, n = desc.heads, desc.head_dim, m
        if desc.mode == "softmax":
            # (QK^T) then (A V), both quadratic in tokens
            oc.bump("mults", policy.attn_mult, h * (n * n * dk) * 2)
            oc.bump("adds", policy.attn_add, h * (n * n * (dk - 1) + n * dk * (n - 1)))
            oc.sram_bytes += h * (4 * n * dk + 2 * n * n) * policy.act_bytes
        elif desc.mode in ("linear", "linear-binary"):
            # (K^T V) then Q (KV), both linear in tokens
            adds = h * (dk * dk * (n - 1) + n * dk * (dk - 1))
            if desc.mode == "linear":
                oc.bump("mults", policy.attn_mult, h * (n * dk * dk) * 2)
            else:
                # {0,1} codes select-and-accumulate; no products
                pass
            oc.bump("adds", policy.attn_add, adds)
            oc.sram_bytes += h * (4 * n * dk + 2 * dk * dk) * policy.act_bytes
        else:
            raise ValueError(f"unknown attention mode {desc.mode!r}")

    elif isinstance(desc, AttnAuxDesc):
        h, dk, n = desc.heads, desc.head_dim, m
        if desc.mode == "softmax":
            # 1/sqrt(dk) scale and the softmax row normalization
            oc.bump("mults", policy.attn_mult, 2 * h * n * n)
            oc.bump("adds", policy.attn_add, h * (n * n + n * (n - 1)))
        else:
            # key-sum z, q.z, the normalizing division, and (in binary mode)
            # the per-head trailing scales
            oc.bump("adds", policy.attn_add, h * (dk * (n - 1) + n * (dk - 1) + n))
            if desc.mode == "linear":
                oc.bump("mults", policy.attn_mult, h * (n * dk + n * dk))
            else:
                oc.bump("adds", policy.attn_add, h * n * (dk - 1))
                oc.bump("mults", policy.gamma_mult, h * (n * dk + n + 1))
                oc.bump("mults", policy.attn_mult, h * n * dk)

    elif isinstance(desc, DwConvDesc):
        side = math.isqrt(max(m, 1))
        if side * side < m:
            side += 1
        cells = side * side
        oc.bump("mults", policy.dense_mult, 9 * cells * desc.channels)
        oc.bump("adds", policy.dense_add, 8 * cells * desc.channels)
        oc.dram_bytes += 9 * desc.channels * policy.dense_weight_bytes
        oc.sram_bytes += 2 * cells * desc.channels * policy.act_bytes

    elif isinstance(desc, ElementwiseDesc):
        d = desc.dim
        if desc.kind == "layernorm":
            oc.bump("mults", policy.other_mult, 2 * m * d)
            oc.bump("adds", policy.other_add, 3 * m * d)
        elif desc.kind == "residual":
            oc.bump("adds", policy.other_add, m * d)
        elif desc.kind == "gelu":
            oc.bump("mults", policy.other_mult, 4 * m * d)
            oc.bump("adds", policy.other_add, 2 * m * d)
        else:
            raise ValueError(f"unknown elementwise kind {desc.kind!r}")
        oc.sram_bytes += 2 * m * d * policy.act_bytes

    elif isinstance(desc, MoeDesc):
        oc.merge(count_ops(desc.router, m, policy))
        for sub_descs, t in zip(desc.expert_descs, desc.expert_tokens):
            for sub in sub_descs:
                oc.merge(count_ops(sub, int(t), policy))

    else:
        raise ValueError(f"unknown layer descriptor {type(desc).__name__}")

    return oc


# ---------------------------------------------------------------------------
# energy accounting


@dataclass
class LayerAudit:
    name: str
    layer_class: str           # breakdown bucket, e.g. attn_mix, mlp, router
    ops: OpCount


@dataclass
class EnergyReport:
    per_layer: List[dict]
    by_class: Dict[str, float]
    compute_pj: float
    movement_pj: float
    total_pj: float


def energy(audits: Sequence[LayerAudit], table: CostTable) -> EnergyReport:
    per_layer = []
    by_class: Dict[str, float] = {}
    compute_total = 0.0
    movement_total = 0.0
    kind_to_op = {"mults": "mult", "adds": "add", "shifts": "shift"}
    for audit in audits:
        compute = 0.0
        for kind, op in kind_to_op.items():
            for fmt, count in sorted(getattr(audit.ops, kind).items()):
                compute += count * table.lookup(op, fmt).energy_pj
        movement = (audit.ops.dram_bytes * table.dram_pj_per_byte
                    + audit.ops.sram_bytes * table.sram_pj_per_byte)
        per_layer.append({
            "name": audit.name,
            "class": audit.layer_class,
            "compute_pj": compute,
            "movement_pj": movement,
            "total_pj": compute + movement,
        })
        by_class[audit.layer_class] = by_class.get(audit.layer_class, 0.0) + compute + movement
        compute_total += compute
        movement_total += movement
    # totals are the exact sums of the rows, in row order
    total = 0.0
    for row in per_layer:
        total += row["total_pj"]
    return EnergyReport(per_layer=per_layer, by_class=by_class,
                        compute_pj=compute_total, movement_pj=movement_total,
                        total_pj=total)


def merge_opcounts(audits: Sequence[LayerAudit]) -> OpCount:
    total = OpCount()
    for a in audits:
        total.merge(a.ops)
    return total


def latency_report(plain_seconds: Sequence[float],
                   moe_expert_seconds: Sequence[Sequence[float]]):
    """Sequential wall-clock versus ideal-parallel (modularized) totals.

    Non-MoE layers contribute their time to both figures; each MoE layer
    contributes the sum of its expert times sequentially but only the slowest
    expert under ideal parallelism.
    """
    base = float(sum(plain_seconds))
    sequential = base + sum(sum(e) for e in moe_expert_seconds)
    modularized = base + sum(max(e) for e in moe_expert_seconds)
    return {"wallclock_est": sequential, "modularized": modularized}


def report_to_json(report: EnergyReport, extras: dict | None = None) -> str:
    payload = {
        "compute_pj": report.compute_pj,
        "movement_pj": report.movement_pj,
        "total_pj": report.total_pj,
        "by_class": report.by_class,
        "per_layer": report.per_layer,
    }
    if extras:
        payload.update(extras)
    return json.dumps(payload, indent=2, sort_keys=True)


def report_to_csv(report: EnergyReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "class", "compute_pj", "movement_pj", "total_pj"])
        for row in report.per_layer:
            writer.writerow([row["name"], row["class"],
                             repr(row["compute_pj"]), repr(row["movement_pj"]),
                             repr(row["total_pj"])])

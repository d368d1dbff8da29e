"""Command-line surface: train, reparam, evaluate, bench, energy, dispatch-map.

Every command writes machine-first CSV/JSON artifacts into --out and is
bit-reproducible for a fixed config and seed (kernel wall-times from `bench`
are physical measurements and the one exception). Exit codes: 0 success,
2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as CK
from . import costmodel as CM
from . import data as D
from . import model as MD
from . import quantize as Q
from . import tensor as T
from .config import ConfigError, echo_resolved, load_run_spec

_PIN_GUARD = "SHIFTADD_THREADS_PINNED"


def _load_dataset(spec, data_flag):
    if data_flag:
        return D.load_dataset(data_flag)
    if spec.dataset_path:
        return D.load_dataset(spec.dataset_path)
    return D.gen_shapes(spec.data)


def _write_metrics(path, rows):
    keys = ["step", "loss", "l_cls", "l_imp", "l_load"]
    extra = sorted({k for row in rows for k in row} - set(keys))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys + extra)
        for row in rows:
            writer.writerow([repr(row.get(k, "")) for k in keys + extra])


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _model_from_spec(spec):
    return MD.Model(spec.model, moe_cfg=spec.moe, quant_cfg=spec.quant)


def cmd_train(args) -> int:
    if args.steps is not None:
        args.set = list(args.set) + [f"train.steps={args.steps}"]
    spec = load_run_spec(args.config, args.set, args.seed)
    out = Path(args.out or spec.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_resolved(spec, out)
    dataset = _load_dataset(spec, args.data)
    model = _model_from_spec(spec)
    opt = MD.SgdMomentum(spec.train.lr, spec.train.momentum, spec.train.clip_norm)
    trace = MD.train(model, dataset, spec.train, optimizer=opt)
    result = MD.evaluate(model, dataset)
    CK.save_checkpoint(out / "checkpoint.ckpt", model, step=trace.steps, optimizer=opt)
    _write_metrics(out / "metrics.csv", trace.rows)
    _write_json(out / "accuracy.json", {
        "train_accuracy": result.accuracy,
        "final_loss": trace.final_loss,
        "steps": trace.steps,
        "expert_shares": result.expert_shares,
    })
    print(f"trained {trace.steps} steps, train accuracy {result.accuracy:.4f}, "
          f"artifacts in {out}")
    return 0


def cmd_reparam(args) -> int:
    if args.steps is not None:
        args.set = list(args.set) + [f"train.steps={args.steps}"]
    spec = load_run_spec(args.config, args.set, args.seed)
    out = Path(args.out or spec.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_resolved(spec, out)
    ckpt = CK.load_checkpoint(args.ckpt)
    model = CK.build_model(ckpt)
    model.moe_cfg = spec.moe
    model.quant_cfg = spec.quant
    dataset = _load_dataset(spec, args.data)
    before_acc = MD.evaluate(model, dataset).accuracy
    before_ops = CM.merge_opcounts(MD.audit_layers(model))
    MD.apply_stage(model, args.stage, mlp_target=args.mlp_target,
                   attn_target=args.attn_target)
    trace = MD.train(model, dataset, spec.train)
    after = MD.evaluate(model, dataset)
    after_ops = CM.merge_opcounts(MD.audit_layers(model))
    CK.save_checkpoint(out / "checkpoint.ckpt", model, step=trace.steps,
                       extra_meta={"stage": args.stage})
    _write_metrics(out / "metrics.csv", trace.rows)
    _write_json(out / "reparam_audit.json", {
        "stage": args.stage,
        "accuracy_before": before_acc,
        "accuracy_after": after.accuracy,
        "mults_before": before_ops.total("mults"),
        "mults_after": after_ops.total("mults"),
        "shifts_after": after_ops.total("shifts"),
        "adds_after": after_ops.total("adds"),
    })
    print(f"stage {args.stage}: accuracy {before_acc:.4f} -> {after.accuracy:.4f}, "
          f"mults {before_ops.total('mults')} -> {after_ops.total('mults')}")
    return 0


def cmd_evaluate(args) -> int:
    spec = load_run_spec(args.config, args.set, args.seed)
    ckpt = CK.load_checkpoint(args.ckpt)
    model = CK.build_model(ckpt)
    dataset = _load_dataset(spec, args.data)
    result = MD.evaluate(model, dataset)
    payload = {"accuracy": result.accuracy, "expert_shares": result.expert_shares,
               "samples": len(dataset)}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "accuracy.json", payload)
    print(json.dumps(payload, sort_keys=True))
    return 0


_BENCH_KERNELS = ("matmul", "matadd", "matshift", "fakeshift")


def _bench_one(kernel, x, w, reps):
    """Correctness gate against the dense oracle, then median wall time."""
    quant = Q.quantize_shift(w)
    b, gamma = Q.binarize(w)
    add_layer = Q.AddLinear(b=b, gamma=gamma)
    fake_w = (quant.s * np.exp2(quant.p.astype(np.float64))).astype(w.dtype)

    if kernel == "matmul":
        run = lambda: T.matmul(x, w)
    elif kernel == "matshift":
        run = lambda: Q.shift_forward(x, quant)
        if not np.array_equal(run(), T.matmul(x, fake_w)):
            raise FloatingPointError("matshift does not match its dense oracle")
    elif kernel == "fakeshift":
        run = lambda: T.matmul(x, fake_w)
    elif kernel == "matadd":
        run = lambda: Q.add_matmul(x, add_layer)
        ref = T.matmul(x, (gamma * b).astype(w.dtype))
        got = run()
        scale = max(np.max(np.abs(ref)), 1e-12)
        if np.max(np.abs(got - ref)) / scale > 1e-6:
            raise FloatingPointError("matadd drifted from its dense oracle")
    else:
        raise ConfigError(f"unknown kernel {kernel!r}")

    run()  # warmup
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cmd_bench(args) -> int:
    rng = T.make_rng(args.seed if args.seed is not None else 0)
    rows = []
    for shape in args.shapes:
        try:
            m, k, n = (int(v) for v in shape.lower().split("x"))
        except ValueError:
            print(f"error: bad shape {shape!r}, expected MxKxN", file=sys.stderr)
            return 2
        x = rng.uniform(-1, 1, (m, k)).astype(np.float32)
        w = rng.uniform(-1, 1, (k, n)).astype(np.float32)
        base = _bench_one("matmul", x, w, args.reps)
        for kernel in args.kernel:
            med = base if kernel == "matmul" else _bench_one(kernel, x, w, args.reps)
            rows.append({"shape": shape, "kernel": kernel, "median_s": med,
                         "speedup_vs_matmul": base / med,
                         "threads": args.threads or "1"})
    out_path = Path(args.out or "bench.csv")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["shape", "kernel", "median_s", "speedup_vs_matmul", "threads"])
        for row in rows:
            writer.writerow([row["shape"], row["kernel"], repr(row["median_s"]),
                             repr(row["speedup_vs_matmul"]), row["threads"]])
    print(f"wrote {out_path} ({len(rows)} rows)")
    return 0


def cmd_energy(args) -> int:
    ckpt = CK.load_checkpoint(args.ckpt)
    model = CK.build_model(ckpt)
    table = CM.CostTable.from_json(args.table) if args.table else CM.CostTable.default()
    spec = load_run_spec(args.config, args.set, args.seed)
    if args.data or args.config:
        dataset = _load_dataset(spec, args.data)
        MD.evaluate(model, dataset)  # populates dispatch shares on moe layers
    audits = MD.audit_layers(model, tokens=args.tokens)
    report = CM.energy(audits, table)
    ratios = {
        "shift_vs_mult_int32": CM.energy_ratio(table, "mult", "shift", "INT32"),
        "add_vs_mult_int32": CM.energy_ratio(table, "mult", "add", "INT32"),
    }
    counts = CM.merge_opcounts(audits)
    extras = {"ratios": ratios,
              "op_totals": {"mults": counts.total("mults"),
                            "adds": counts.total("adds"),
                            "shifts": counts.total("shifts")},
              "bytes": {"dram": counts.dram_bytes, "sram": counts.sram_bytes}}
    out = Path(args.out or "energy_out")
    out.mkdir(parents=True, exist_ok=True)
    (out / "energy.json").write_text(CM.report_to_json(report, extras) + "\n")
    CM.report_to_csv(report, out / "energy.csv")
    print(f"total {report.total_pj:.1f} pJ (compute {report.compute_pj:.1f}, "
          f"movement {report.movement_pj:.1f}); reports in {out}")
    return 0


def cmd_dispatch_map(args) -> int:
    spec = load_run_spec(args.config, args.set, args.seed)
    ckpt = CK.load_checkpoint(args.ckpt)
    model = CK.build_model(ckpt)
    moe_names = [name for name, _ in model.moe_modules()]
    if not moe_names:
        print("error: checkpoint has no mixture-of-experts layers", file=sys.stderr)
        return 2
    layer = args.layer or moe_names[0]
    if layer not in moe_names:
        print(f"error: no MoE layer named {layer!r}; available: {moe_names}",
              file=sys.stderr)
        return 2
    dataset = _load_dataset(spec, args.data)
    result = MD.evaluate(model, dataset)
    dmap = result.dispatch_maps[layer]
    out = Path(args.out or "dispatch_out")
    out.mkdir(parents=True, exist_ok=True)
    grid_csv = out / f"dispatch_{layer.replace('.', '_')}.csv"
    with open(grid_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image"] + [f"token{t}" for t in range(dmap.shape[1])])
        for i in range(dmap.shape[0]):
            writer.writerow([i] + dmap[i].tolist())
    _write_json(out / "dispatch_summary.json", {
        "layer": layer,
        "expert_shares": result.expert_shares,
        "tokens_per_image": int(dmap.shape[1]),
        "images": int(dmap.shape[0]),
        "accuracy": result.accuracy,
    })
    print(f"wrote {grid_csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shiftadd",
        description="Multiplication-reduced transformer toolkit: training, "
                    "reparameterization, kernel benchmarks, energy audits.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="ini-style run configuration file")
        p.add_argument("--seed", type=int, default=None,
                       help=f"seed (falls back to [run] seed, then ${'{'}SHIFTADD_SEED{'}'})")
        p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                       help="override a config value")
        p.add_argument("--out", help="output directory")
        p.add_argument("--data", help="dataset container path (overrides [data])")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reparam", help="convert a checkpoint to the next stage and finetune")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--mlp-target", default="shift", choices=("dense", "shift", "moe"))
    p.add_argument("--attn-target", default="shift", choices=("dense", "shift", "moe"))
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_reparam)

    p = sub.add_parser("evaluate", help="accuracy and dispatch statistics")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="micro-benchmark the kernels")
    p.add_argument("--kernel", nargs="+", default=list(_BENCH_KERNELS),
                   choices=_BENCH_KERNELS)
    p.add_argument("--shapes", nargs="+", default=["64x64x64"],
                   help="input MxKxN, weights KxN")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output CSV path")
    p.add_argument("--threads", default=None,
                   help="BLAS threads used (recorded in the CSV)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("energy", help="analytical energy breakdown of a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--table", help="cost table JSON (defaults to the 45nm table)")
    p.add_argument("--tokens", type=int, default=None)
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("dispatch-map", help="per-token expert assignments of a MoE layer")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layer", help="MoE layer name (default: first)")
    p.set_defaults(func=cmd_dispatch_map)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (D.FormatError, CM.CostLookupError, T.ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    """Console entry point; pins BLAS to one thread unless --threads is given."""
    if _PIN_GUARD not in os.environ and "--threads" not in sys.argv:
        os.environ[_PIN_GUARD] = "1"
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, "1")
        os.execvpe(sys.executable, [sys.executable, "-m", "shiftadd.cli"] + sys.argv[1:],
                   os.environ)
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())

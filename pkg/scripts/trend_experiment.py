#!/usr/bin/env python3
"""Two-stage reparameterization trend on the synthetic shapes task.

Trains a dense baseline, converts attention to binarized Q(KV) linear form
(stage 1), then compares two stage-2 treatments of the remaining linears:
everything-shift versus shift attention projections with a mixture-of-experts
MLP. Reports held-out accuracy for each variant plus the foreground vs
background Mult-expert dispatch shares of the MoE model.
"""

import argparse
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from shiftadd import checkpoint as CK
from shiftadd import data as D
from shiftadd import model as MD


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=2)
    ap.add_argument("--classes", type=int, default=5)
    ap.add_argument("--train-per-class", type=int, default=250)
    ap.add_argument("--test-per-class", type=int, default=200)
    ap.add_argument("--noise", type=float, default=0.45)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--dense-steps", type=int, default=2400)
    ap.add_argument("--stage1-steps", type=int, default=700)
    ap.add_argument("--stage2-steps", type=int, default=1400)
    ap.add_argument("--lat", default="3,1", help="expert latencies, mult,shift")
    ap.add_argument("--out", default="runs/trend")
    return ap.parse_args()


def main():
    args = parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed
    lat = tuple(float(v) for v in args.lat.split(","))
    t0 = time.time()

    blocks = [MD.BlockConfig(d=args.dim, h=args.heads, mlp_ratio=4.0, exempt=(i == 1))
              for i in range(2)]
    cfg = MD.ModelConfig(blocks=blocks, patch=4, img=16, classes=args.classes,
                         seed=seed)
    train_ds = D.gen_shapes(D.SyntheticSpec(
        img=16, classes=args.classes, samples_per_class=args.train_per_class,
        seed=seed + 1000, noise_std=args.noise))
    test_ds, masks = D.gen_shapes_with_masks(D.SyntheticSpec(
        img=16, classes=args.classes, samples_per_class=args.test_per_class,
        seed=seed + 2000, noise_std=args.noise))

    results = {}

    model = MD.Model(cfg, moe_cfg=MD.MoeConfig(lat=lat))
    MD.train(model, train_ds, MD.TrainConfig(steps=args.dense_steps, batch_size=32,
                                             lr=0.05, seed=seed))
    results["train_accuracy"] = MD.evaluate(model, train_ds).accuracy
    results["dense"] = MD.evaluate(model, test_ds).accuracy
    print(f"dense baseline: train {results['train_accuracy']:.4f}, "
          f"test {results['dense']:.4f}")

    MD.apply_stage(model, 1)
    MD.train(model, train_ds, MD.TrainConfig(steps=args.stage1_steps, batch_size=32,
                                             lr=0.02, seed=seed + 1))
    results["stage1"] = MD.evaluate(model, test_ds).accuracy
    print(f"stage 1 (binary Q(KV) attention): test {results['stage1']:.4f}")
    s1_path = out / "stage1.ckpt"
    CK.save_checkpoint(s1_path, model, step=args.dense_steps + args.stage1_steps)

    m_shift = CK.build_model(CK.load_checkpoint(s1_path))
    MD.apply_stage(m_shift, 2, mlp_target="shift", attn_target="shift")
    MD.train(m_shift, train_ds, MD.TrainConfig(steps=args.stage2_steps, batch_size=32,
                                               lr=0.02, seed=seed + 2))
    results["stage2_shift"] = MD.evaluate(m_shift, test_ds).accuracy
    print(f"stage 2, all shift: test {results['stage2_shift']:.4f}")
    CK.save_checkpoint(out / "stage2_shift.ckpt", m_shift)

    m_moe = CK.build_model(CK.load_checkpoint(s1_path))
    MD.apply_stage(m_moe, 2, mlp_target="moe", attn_target="shift")
    for _, module in m_moe.moe_modules():
        for expert in module.experts:
            expert.fc2.w.value *= 2.0  # undo the initial top-1 gate scaling
            if hasattr(expert.fc2, "requantize"):
                expert.fc2.requantize()
    MD.train(m_moe, train_ds, MD.TrainConfig(steps=args.stage2_steps, batch_size=32,
                                             lr=0.02, seed=seed + 3))
    ev = MD.evaluate(m_moe, test_ds)
    results["stage2_moe"] = ev.accuracy
    results["expert_shares"] = ev.expert_shares
    CK.save_checkpoint(out / "stage2_moe.ckpt", m_moe)
    print(f"stage 2, moe MLP: test {results['stage2_moe']:.4f} "
          f"shares {ev.expert_shares}")

    fg = D.token_foreground(masks, patch=4, min_fraction=0.25)
    mult = ev.dispatch_maps["block0.mlp"] == 0
    results["fg_mult_share"] = float(mult[fg].mean())
    results["bg_mult_share"] = float(mult[~fg].mean())
    results["dispatch_gap"] = results["fg_mult_share"] - results["bg_mult_share"]
    results["wall_seconds"] = time.time() - t0
    print(f"dispatch: foreground Mult share {results['fg_mult_share']:.3f}, "
          f"background {results['bg_mult_share']:.3f}")

    with open(out / "trend_results.json", "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
    print(f"wrote {out / 'trend_results.json'} ({results['wall_seconds']:.0f}s)")


if __name__ == "__main__":
    main()

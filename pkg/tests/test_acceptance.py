"""Acceptance suite: one test per criterion, each printing a PASS line with
the measured values. The trend experiment (criteria 6 and 7) trains a dense
baseline and both stage-2 variants once per session at a frozen seed; margins
for the frozen run are recorded next to each assertion.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from shiftadd import attention as A
from shiftadd import checkpoint as CK
from shiftadd import costmodel as CM
from shiftadd import data as D
from shiftadd import model as MD
from shiftadd import moe as MOE
from shiftadd import quantize as Q
from shiftadd import tensor as T
from shiftadd.cli import main as cli_main
from shiftadd.gradcheck import check_gradients, numerical_grad, rel_error


def report(criterion, detail):
    print(f"[PASS] criterion-{criterion}: {detail}")


# ---------------------------------------------------------------------------
# criterion 1: kernel-oracle equivalence on 1,000 random shapes


def test_criterion_1_kernel_oracles():
    rng = T.make_rng(101)
    start = time.perf_counter()
    add_worst = 0.0
    for _ in range(1000):
        m, k, n = rng.integers(1, 65, size=3)
        x = rng.uniform(-1, 1, (m, k)).astype(np.float32)
        w = rng.uniform(-2, 2, (k, n)).astype(np.float32)

        layer = Q.quantize_shift(w)
        fake = (layer.s * np.exp2(layer.p.astype(np.float32))).astype(np.float32)
        assert np.array_equal(Q.shift_forward(x, layer), T.matmul(x, fake))

        b, gamma = Q.binarize(w)
        got = Q.add_matmul(x, Q.AddLinear(b=b, gamma=gamma))
        ref = T.matmul(x, (gamma * b).astype(np.float32))
        err = rel_error(got, ref)
        add_worst = max(add_worst, err)
        assert err < 1e-6
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0
    report(1, f"1000 shapes, shift bit-exact, add worst rel {add_worst:.2e}, "
              f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: cost-table fidelity and the headline energy ratios

PRINTED_TABLE = {
    ("mult", "FP32"): (3.7, 7700), ("mult", "FP16"): (0.9, 1640),
    ("mult", "INT32"): (3.1, 3495), ("mult", "INT8"): (0.2, 282),
    ("add", "FP32"): (1.1, 4184), ("add", "FP16"): (0.4, 1360),
    ("add", "INT32"): (0.1, 137), ("add", "INT8"): (0.03, 36),
    ("shift", "INT32"): (0.13, 157), ("shift", "INT16"): (0.057, 73),
    ("shift", "INT8"): (0.024, 34),
}


def test_criterion_2_table_fidelity():
    table = CM.CostTable.default()
    for (op, fmt), (energy, area) in PRINTED_TABLE.items():
        entry = table.lookup(op, fmt)
        assert entry.energy_pj == energy
        assert entry.area_um2 == area
    shift_ratio = CM.energy_ratio(table, "mult", "shift", "INT32")
    add_ratio = CM.energy_ratio(table, "mult", "add", "INT32")
    assert abs(shift_ratio - 23.8) <= 0.5
    assert abs(add_ratio - 31.0) <= 0.5
    report(2, f"11/11 entries exact; INT32 shift ratio {shift_ratio:.2f}, "
              f"add ratio {add_ratio:.1f}")


# ---------------------------------------------------------------------------
# criterion 3: finite-difference gradient suite


def test_criterion_3_gradient_suite():
    start = time.perf_counter()
    g = T.make_rng(33)
    worst = 0.0

    def track(err):
        nonlocal worst
        worst = max(worst, err)

    # core primitives
    a, b = g.uniform(-1, 1, (3, 4)), g.uniform(-1, 1, (4, 2))
    r = g.uniform(-1, 1, (3, 2))
    track(check_gradients(lambda a_, b_: float(np.sum(T.matmul(a_, b_) * r)),
                          [a, b], list(T.matmul_backward(r, a, b))))

    x = g.uniform(-1, 1, (2, 5))
    rs = g.uniform(-1, 1, (2, 5))
    y = T.softmax(x, axis=-1)
    track(check_gradients(lambda x_: float(np.sum(T.softmax(x_, -1) * rs)),
                          [x], [T.softmax_backward(rs, y, -1)]))

    xl = g.uniform(-1, 1, (3, 6))
    gain, bias = g.uniform(0.5, 1.5, 6), g.uniform(-0.5, 0.5, 6)
    rl = g.uniform(-1, 1, (3, 6))
    _, cache = T.layernorm(xl, gain, bias)
    track(check_gradients(
        lambda x_, g_, b_: float(np.sum(T.layernorm(x_, g_, b_)[0] * rl)),
        [xl, gain, bias], list(T.layernorm_backward(rl, cache))))

    xg = g.uniform(-2, 2, (4, 5))
    rg = g.uniform(-1, 1, (4, 5))
    track(check_gradients(lambda x_: float(np.sum(T.gelu(x_) * rg)),
                          [xg], [T.gelu_backward(rg, xg)]))

    xc = g.uniform(-1, 1, (4, 4, 2))
    kc = g.uniform(-1, 1, (3, 3, 2))
    rc = g.uniform(-1, 1, (4, 4, 2))
    track(check_gradients(lambda x_, k_: float(np.sum(T.dwconv3x3(x_, k_) * rc)),
                          [xc, kc], list(T.dwconv3x3_backward(rc, xc, kc))))

    # attention cores
    q3, k3, v3 = (g.standard_normal((2, 4, 3)) for _ in range(3))
    r3 = g.standard_normal((2, 4, 3))
    _, cache = A.softmax_core(q3, k3, v3)
    track(check_gradients(
        lambda q_, k_, v_: float(np.sum(A.softmax_core(q_, k_, v_)[0] * r3)),
        [q3, k3, v3], list(A.softmax_core_backward(r3, cache))))

    qf = 0.5 + g.uniform(0.1, 1.0, (2, 5, 3))
    kf = 0.5 + g.uniform(0.1, 1.0, (2, 5, 3))
    vf = g.standard_normal((2, 5, 3))
    rf = g.standard_normal((2, 5, 3))
    _, cache = A.linear_core(qf, kf, vf, 1e-6)
    track(check_gradients(
        lambda q_, k_, v_: float(np.sum(A.linear_core(q_, k_, v_, 1e-6)[0] * rf)),
        [qf, kf, vf], list(A.linear_core_backward(rf, cache))))

    # shift and add layers: input gradients at fixed quantized weights
    xs = g.uniform(-1, 1, (3, 5))
    sl = Q.quantize_shift(g.uniform(-1, 1, (5, 2)))
    rsh = g.uniform(-1, 1, (3, 2))
    track(check_gradients(lambda x_: float(np.sum(Q.shift_forward(x_, sl) * rsh)),
                          [xs], [Q.shift_backward(rsh, xs, sl)[0]]))

    ab, agamma = Q.binarize(g.uniform(-1, 1, (5, 2)))
    al = Q.AddLinear(b=ab, gamma=agamma)
    track(check_gradients(lambda x_: float(np.sum(Q.add_matmul(x_, al) * rsh)),
                          [xs], [Q.add_backward(rsh, xs, al)[0]]))

    # both auxiliary losses
    p = T.softmax(g.standard_normal((6, 3)), axis=-1)
    alpha = MOE.latency_coefficients([3.0, 1.0, 2.0])
    track(check_gradients(lambda p_: MOE.importance_loss(p_, alpha),
                          [p], [MOE.importance_loss_grad(p, alpha)]))
    logits = g.standard_normal((6, 3))
    track(check_gradients(lambda l_: MOE.load_loss(l_, alpha, 0.5),
                          [logits], [MOE.load_loss_grad(logits, alpha, 0.5)]))

    # whole 2-block model at the looser depth tolerance
    bcs = [MD.BlockConfig(d=8, h=2, mlp_ratio=2.0) for _ in range(2)]
    cfg = MD.ModelConfig(blocks=bcs, patch=4, img=8, classes=3, seed=5)
    model = MD.Model(cfg, dtype=np.float64)
    g2 = T.make_rng(17)
    images = g2.uniform(0, 1, (2, 8, 8, 3))
    labels = np.array([0, 2])

    def loss_fn():
        logits_ = model.forward(images, train=True)
        return MD.cross_entropy(logits_, labels)[0]

    model.zero_grads()
    out = model.forward(images, train=True)
    _, dlogits = MD.cross_entropy(out, labels)
    model.backward(dlogits)
    whole_worst = 0.0
    for name, param in model.named_params():
        analytic = param.grad.copy()

        def f(v, _p=param):
            old = _p.value.copy()
            _p.value[...] = v
            val = loss_fn()
            _p.value[...] = old
            return val

        err = rel_error(analytic, numerical_grad(f, param.value))
        whole_worst = max(whole_worst, err)
        assert err <= 1e-3, f"{name}: {err:.2e}"

    elapsed = time.perf_counter() - start
    assert worst <= 1e-4
    assert elapsed < 60.0
    report(3, f"layer worst rel {worst:.2e} (tol 1e-4), whole-model worst "
              f"{whole_worst:.2e} (tol 1e-3), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 4: linear-attention properties


def test_criterion_4_linear_attention_properties():
    g = T.make_rng(44)
    qf = A.feat_relu(g.standard_normal((1, 6, 8)))
    kf = A.feat_relu(g.standard_normal((1, 6, 8)))
    v = g.standard_normal((1, 6, 8))
    left = T.bmm(T.bmm(qf, np.swapaxes(kf, -1, -2)), v)
    right = T.bmm(qf, T.bmm(np.swapaxes(kf, -1, -2), v))
    assoc = rel_error(left, right)
    assert assoc < 1e-5

    out, _ = A.linear_core(qf, kf, v, eps_norm=1e-12)
    lo = v.min(axis=1, keepdims=True) - 1e-9
    hi = v.max(axis=1, keepdims=True) + 1e-9
    assert np.all(out >= lo) and np.all(out <= hi)

    dk = 16
    soft = [CM.count_ops(CM.AttnMixDesc("softmax", 1, dk), n).total("mults")
            for n in (16, 32)]
    lin = [CM.count_ops(CM.AttnMixDesc("linear", 1, dk), n).total("mults")
           for n in (16, 32)]
    assert soft[1] == 4 * soft[0]
    assert lin[1] == 2 * lin[0]
    report(4, f"associativity {assoc:.2e}; convex combination holds; "
              f"mixing counts softmax x4 ({soft[0]}->{soft[1]}), "
              f"linear x2 ({lin[0]}->{lin[1]})")


# ---------------------------------------------------------------------------
# criterion 5: latency-aware balance convergence (router-only training)


def test_criterion_5_moe_balance_convergence():
    start = time.perf_counter()
    rng = T.make_rng(0)
    d, batch, steps = 16, 128, 5000
    wg = np.zeros((d, 2), dtype=np.float64)
    vel = np.zeros_like(wg)
    alpha = MOE.latency_coefficients([3.0, 1.0])
    assert np.allclose(alpha, [0.75, 0.25])
    # tokens need a nonzero mean: a bias-free linear router cannot split
    # symmetric zero-mean inputs away from 50/50
    eval_tokens = rng.normal(0.5, 1.0, size=(512, d))
    for _ in range(steps):
        x = rng.normal(0.5, 1.0, size=(batch, d))
        router = MOE.Router(w_g=wg, sigma=0.1)
        p, logits = MOE.route(x, router)
        dlogits = (T.softmax_backward(MOE.importance_loss_grad(p, alpha), p, -1)
                   + MOE.load_loss_grad(logits, alpha, 0.1))
        vel = 0.9 * vel + x.T @ dlogits
        wg -= 0.3 * vel
    p, logits = MOE.route(eval_tokens, MOE.Router(w_g=wg, sigma=0.1))
    share1 = MOE.dispatch(p, logits).share(1)
    elapsed = time.perf_counter() - start
    assert 0.65 <= share1 <= 0.85   # measured 0.768 at this seed
    assert elapsed < 60.0
    report(5, f"expert-1 dispatch share {share1:.3f} (target 0.75 +/- 0.10) "
              f"after {steps} steps, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criteria 6-8 share one trend experiment at a frozen seed

TREND_SEED = 2


@pytest.fixture(scope="session")
def trend(tmp_path_factory):
    """Dense baseline, stage 1, and both stage-2 variants on the shapes task.

    Frozen-run reference values (this seed): dense test 93.20, stage-1 95.20,
    stage-2 shift 94.40, stage-2 moe 95.20, foreground gap 0.285.
    """
    out = tmp_path_factory.mktemp("trend")
    seed = TREND_SEED
    t0 = time.perf_counter()
    bcs = [MD.BlockConfig(d=32, h=4, mlp_ratio=4.0, exempt=(i == 1))
           for i in range(2)]
    cfg = MD.ModelConfig(blocks=bcs, patch=4, img=16, classes=5, seed=seed)
    train_ds = D.gen_shapes(D.SyntheticSpec(
        img=16, classes=5, samples_per_class=250, seed=seed + 1000, noise_std=0.45))
    test_ds, masks = D.gen_shapes_with_masks(D.SyntheticSpec(
        img=16, classes=5, samples_per_class=200, seed=seed + 2000, noise_std=0.45))

    model = MD.Model(cfg, moe_cfg=MD.MoeConfig(lat=(3.0, 1.0)))
    dense_trace = MD.train(model, train_ds, MD.TrainConfig(
        steps=2400, batch_size=32, lr=0.05, seed=seed))
    dense_seconds = dense_trace.wall_seconds
    train_acc = MD.evaluate(model, train_ds).accuracy
    dense_acc = MD.evaluate(model, test_ds).accuracy

    MD.apply_stage(model, 1)
    MD.train(model, train_ds, MD.TrainConfig(
        steps=700, batch_size=32, lr=0.02, seed=seed + 1))
    s1_acc = MD.evaluate(model, test_ds).accuracy
    s1_path = out / "stage1.ckpt"
    CK.save_checkpoint(s1_path, model, step=3100)

    m_shift = CK.build_model(CK.load_checkpoint(s1_path))
    MD.apply_stage(m_shift, 2, mlp_target="shift", attn_target="shift")
    MD.train(m_shift, train_ds, MD.TrainConfig(
        steps=1400, batch_size=32, lr=0.02, seed=seed + 2))
    shift_acc = MD.evaluate(m_shift, test_ds).accuracy

    m_moe = CK.build_model(CK.load_checkpoint(s1_path))
    MD.apply_stage(m_moe, 2, mlp_target="moe", attn_target="shift")
    # undo the top-1 gate's ~0.5x output scaling at conversion so finetuning
    # starts from (roughly) the stage-1 function
    for _, module in m_moe.moe_modules():
        for expert in module.experts:
            expert.fc2.w.value *= 2.0
            if hasattr(expert.fc2, "requantize"):
                expert.fc2.requantize()
    MD.train(m_moe, train_ds, MD.TrainConfig(
        steps=1400, batch_size=32, lr=0.02, seed=seed + 3))
    moe_eval = MD.evaluate(m_moe, test_ds)

    return {
        "train_acc": train_acc, "dense_acc": dense_acc, "s1_acc": s1_acc,
        "shift_acc": shift_acc, "moe_acc": moe_eval.accuracy,
        "moe_eval": moe_eval, "masks": masks, "m_shift": m_shift,
        "dense_seconds": dense_seconds, "dense_steps": 2400,
        "wall": time.perf_counter() - t0,
    }


def test_criterion_6_accuracy_trend(trend):
    pts = lambda x: 100.0 * x
    train_acc = trend["train_acc"]
    dense, s1 = pts(trend["dense_acc"]), pts(trend["s1_acc"])
    shift, moe = pts(trend["shift_acc"]), pts(trend["moe_acc"])

    assert train_acc >= 0.90                 # frozen run: 1.00
    assert trend["dense_steps"] <= 10_000
    assert trend["dense_seconds"] < 300.0
    assert dense - s1 <= 1.5                 # frozen run: -2.00 (stage 1 gains)
    assert s1 - shift >= 0.5                 # frozen run: 0.80
    assert s1 - moe <= 1.5                   # frozen run: 0.00
    assert moe > shift                       # frozen run: +0.80
    report(6, f"train {pts(train_acc):.1f}%; test: dense {dense:.2f} -> "
              f"stage1 {s1:.2f} -> shift {shift:.2f} / moe {moe:.2f} "
              f"(shift drops, moe recovers; {trend['wall']:.0f}s total)")


def test_criterion_7_dispatch_hypothesis(trend):
    dmap = trend["moe_eval"].dispatch_maps["block0.mlp"]
    mult = dmap == 0
    fg = D.token_foreground(trend["masks"], patch=4, min_fraction=0.25)
    fg_share = float(mult[fg].mean())
    bg_share = float(mult[~fg].mean())
    gap = fg_share - bg_share
    assert gap >= 0.15                       # frozen run: 0.285
    report(7, f"Mult-expert share: foreground {fg_share:.3f} vs background "
              f"{bg_share:.3f}, gap {gap:.3f} (>= 0.15)")


def test_criterion_8_multiplication_elimination(trend):
    model = trend["m_shift"]  # linear-binary attention, shift projections+MLPs
    audited = 0
    for audit in MD.audit_layers(model):
        if audit.name.startswith("block1"):
            continue  # exempt block keeps softmax attention and dense layers
        if audit.layer_class in ("attn_mix", "attn_proj", "mlp"):
            assert audit.ops.total("mults") == 0, (audit.name, audit.ops.mults)
            audited += 1
    # trailing scales are counted, separately, under the aux class
    aux = [a for a in MD.audit_layers(model)
           if a.layer_class == "attn_aux" and a.name.startswith("block0")]
    assert aux and all(a.ops.mults.get("FP32", 0) > 0 for a in aux)
    report(8, f"{audited} reparameterized layer audits show zero multiplies "
              f"in token mixing, projections, and MLPs (scales counted apart)")


# ---------------------------------------------------------------------------
# criterion 9: command-level determinism

MICRO_CFG = """
[model]
d = 8
heads = 2
blocks = 2
patch = 4
img = 8
classes = 3
mlp_mode = moe

[train]
steps = 25
batch_size = 8
lr = 0.03
log_every = 5

[data]
classes = 3
samples_per_class = 6
noise_std = 0.2
img = 8
seed = 900

[run]
seed = 17
"""


def test_criterion_9_command_determinism(tmp_path):
    cfg = tmp_path / "micro.cfg"
    cfg.write_text(MICRO_CFG)
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / f"train_{tag}"
        assert cli_main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        outs.append(out)
    compared = []
    for name in ("checkpoint.ckpt", "metrics.csv", "accuracy.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
        compared.append(f"train/{name}")

    for tag in ("a", "b"):
        assert cli_main(["energy", "--ckpt", str(outs[0] / "checkpoint.ckpt"),
                         "--config", str(cfg),
                         "--out", str(tmp_path / f"energy_{tag}")]) == 0
        assert cli_main(["dispatch-map", "--ckpt", str(outs[0] / "checkpoint.ckpt"),
                         "--config", str(cfg),
                         "--out", str(tmp_path / f"dmap_{tag}")]) == 0
    for name in ("energy.json", "energy.csv"):
        assert (tmp_path / "energy_a" / name).read_bytes() == \
               (tmp_path / "energy_b" / name).read_bytes()
        compared.append(f"energy/{name}")
    for name in ("dispatch_block0_mlp.csv", "dispatch_summary.json"):
        assert (tmp_path / "dmap_a" / name).read_bytes() == \
               (tmp_path / "dmap_b" / name).read_bytes()
        compared.append(f"dispatch-map/{name}")
    report(9, f"bit-identical reruns for {len(compared)} artifacts: "
              + ", ".join(compared))

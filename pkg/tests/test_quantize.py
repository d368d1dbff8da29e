import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shiftadd import quantize as Q
from shiftadd import tensor as T
from shiftadd.gradcheck import check_gradients, rel_error


def rng(seed=7):
    return T.make_rng(seed)


def test_quantize_exact_power_of_two():
    layer = Q.quantize_shift(T.tensor([[1.0]]))
    assert layer.s[0, 0] == 1.0 and layer.p[0, 0] == 0
    assert Q.reconstruct(layer)[0, 0] == 1.0


def test_quantize_rounds_toward_nearest_exponent():
    layer = Q.quantize_shift(T.tensor([[0.75]]))
    # log2 0.75 = -0.415 rounds to 0
    assert layer.s[0, 0] == 1.0 and layer.p[0, 0] == 0

    layer = Q.quantize_shift(T.tensor([[-0.3]]))
    # log2 0.3 = -1.737 rounds to -2
    assert layer.s[0, 0] == -1.0 and layer.p[0, 0] == -2
    assert Q.reconstruct(layer)[0, 0] == np.float32(-0.25)


def test_quantize_zero_maps_to_floor_exponent():
    layer = Q.quantize_shift(T.tensor([[0.0, -0.0]]))
    assert np.all(layer.s == 1.0)
    assert np.all(layer.p == layer.p_min)


def test_quantize_identity_matrix():
    layer = Q.quantize_shift(np.eye(4, dtype=np.float32))
    assert np.all(layer.p[np.eye(4, dtype=bool)] == 0)
    assert np.all(layer.p[~np.eye(4, dtype=bool)] == layer.p_min)
    assert np.all(layer.s == 1.0)


@settings(max_examples=80)
@given(st.integers(0, 2 ** 32 - 1))
def test_quantize_idempotent_and_clamped(seed):
    w = T.make_rng(seed).uniform(-4, 4, (5, 3)).astype(np.float32)
    once = Q.quantize_shift(w)
    twice = Q.quantize_shift(Q.reconstruct(once))
    assert np.array_equal(once.s, twice.s)
    assert np.array_equal(once.p, twice.p)
    assert once.p.min() >= once.p_min and once.p.max() <= once.p_max


def test_reconstruction_relative_error_bound():
    # worst case of exponent rounding is the midpoint between powers of two
    g = rng()
    w = np.ldexp(g.uniform(1.0, 2.0, (64, 64)), g.integers(-8, 8, (64, 64)))
    w = (w * np.where(g.uniform(size=w.shape) < 0.5, -1, 1)).astype(np.float32)
    rec = Q.reconstruct(Q.quantize_shift(w))
    rel = np.abs(rec - w) / np.abs(w)
    assert rel.max() <= 2 ** 0.5 - 1 + 1e-7


def test_shift_forward_all_ones_weights():
    x = rng().uniform(-1, 1, (3, 4)).astype(np.float32)
    layer = Q.ShiftLinear(s=np.ones((4, 2), np.float32), p=np.zeros((4, 2), np.int32))
    out = Q.shift_forward(x, layer)
    assert np.allclose(out, np.repeat(x.sum(axis=1, keepdims=True), 2, axis=1), atol=1e-6)


def test_shift_forward_single_entry():
    layer = Q.ShiftLinear(s=T.tensor([[-1.0]]), p=np.array([[-2]], np.int32))
    out = Q.shift_forward(T.tensor([[2.0]]), layer)
    assert out[0, 0] == np.float32(-0.5)


def test_shift_forward_matches_fakeshift_bit_exactly():
    g = rng()
    x = g.uniform(-1, 1, (8, 8)).astype(np.float32)
    layer = Q.quantize_shift(g.uniform(-2, 2, (8, 8)).astype(np.float32))
    # oracle reconstructs through an explicit float multiply instead of ldexp
    fake_w = (layer.s * np.exp2(layer.p.astype(np.float32))).astype(np.float32)
    assert np.array_equal(Q.shift_forward(x, layer), T.matmul(x, fake_w))


def test_shift_backward_equals_dense_backward_bit_exactly():
    g = rng()
    x = g.uniform(-1, 1, (5, 6)).astype(np.float32)
    layer = Q.quantize_shift(g.uniform(-1, 1, (6, 4)).astype(np.float32))
    dout = g.uniform(-1, 1, (5, 4)).astype(np.float32)
    dx, dw = Q.shift_backward(dout, x, layer)
    dx_ref, dw_ref = T.matmul_backward(dout, x, Q.reconstruct(layer))
    assert np.array_equal(dx, dx_ref) and np.array_equal(dw, dw_ref)


def test_shift_backward_dx_fd_at_fixed_weights():
    g = rng()
    x = g.uniform(-1, 1, (3, 5))
    layer = Q.quantize_shift(g.uniform(-1, 1, (5, 2)))
    r = g.uniform(-1, 1, (3, 2))

    def loss(x_):
        return float(np.sum(Q.shift_forward(x_, layer) * r))

    dx, _ = Q.shift_backward(r, x, layer)
    check_gradients(loss, [x], [dx])


def test_requantize_stable_under_tiny_shadow_update():
    g = rng()
    shadow = g.uniform(0.5, 1.5, (4, 4)).astype(np.float32)
    before = Q.quantize_shift(shadow)
    nudged = shadow * (1 + 1e-4)  # too small to move any rounded exponent here
    after = Q.quantize_shift(nudged)
    x = g.uniform(-1, 1, (2, 4)).astype(np.float32)
    assert np.array_equal(Q.shift_forward(x, before), Q.shift_forward(x, after))


def test_binarize_hand_case():
    b, gamma = Q.binarize(T.tensor([0.5, -1.5, 1.0]))
    assert np.array_equal(b, [1.0, -1.0, 1.0])
    assert gamma == 1.0


def test_binarize_all_positive():
    b, _ = Q.binarize(T.tensor([[0.1, 2.0], [3.0, 0.4]]))
    assert np.all(b == 1.0)


@settings(max_examples=40)
@given(st.floats(0.1, 8.0), st.integers(0, 2 ** 16))
def test_binarize_gamma_homogeneous(c, seed):
    x = T.make_rng(seed).uniform(-1, 1, (4, 4))
    _, g1 = Q.binarize(x)
    _, g2 = Q.binarize(c * x)
    assert np.isclose(g2, c * g1, rtol=1e-9)


def test_binarize_per_head_scope():
    g = rng()
    x = g.uniform(-1, 1, (3, 4, 5))
    b, gamma = Q.binarize(x, scale_mode="per-head")
    assert gamma.shape == (3, 1, 1)
    for h in range(3):
        assert np.isclose(gamma[h, 0, 0], np.abs(x[h]).mean())


def test_add_matmul_hand_case():
    layer = Q.AddLinear(b=T.tensor([[1.0], [-1.0]]), gamma=1.0)
    out = Q.add_matmul(T.tensor([[1.0, 2.0]]), layer)
    assert out[0, 0] == np.float32(-1.0)


def test_add_matmul_all_plus_one_is_row_sum():
    g = rng()
    x = g.uniform(-1, 1, (4, 6)).astype(np.float32)
    layer = Q.AddLinear(b=np.ones((6, 3), np.float32), gamma=1.0)
    out = Q.add_matmul(x, layer)
    assert np.allclose(out, np.repeat(x.sum(axis=1, keepdims=True), 3, axis=1), atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 16))
def test_add_matmul_matches_dense_oracle(seed):
    g = T.make_rng(seed)
    x = g.uniform(-1, 1, (8, 8)).astype(np.float32)
    b, gamma = Q.binarize(g.uniform(-1, 1, (8, 8)).astype(np.float32))
    layer = Q.AddLinear(b=b, gamma=gamma)
    dense = T.matmul(x, (gamma * b).astype(np.float32))
    assert rel_error(Q.add_matmul(x, layer), dense) < 1e-6


def test_add_backward_fd():
    g = rng()
    x = g.uniform(-1, 1, (3, 4))
    b, gamma = Q.binarize(g.uniform(-1, 1, (4, 2)))
    layer = Q.AddLinear(b=b, gamma=gamma)
    r = g.uniform(-1, 1, (3, 2))

    def loss(x_):
        return float(np.sum(Q.add_matmul(x_, layer) * r))

    dx, _ = Q.add_backward(r, x, layer)
    check_gradients(loss, [x], [dx])


def test_reparam_linear_shift_and_add():
    g = rng()
    w = g.uniform(-1, 1, (6, 6)).astype(np.float32)
    shift = Q.reparam_linear(w, "shift")
    assert isinstance(shift.layer, Q.ShiftLinear)
    assert np.array_equal(shift.shadow, w)

    add = Q.reparam_linear(w, "add")
    rec = Q.reconstruct_add(add.layer)
    assert np.allclose(rec, add.layer.gamma * Q.sign_unit(w))

    with pytest.raises(ValueError):
        Q.reparam_linear(w, "ternary")


def test_quant_config_validation():
    with pytest.raises(ValueError):
        Q.QuantConfig(p_min=3, p_max=3)
    with pytest.raises(ValueError):
        Q.QuantConfig(scale_mode="per-row")

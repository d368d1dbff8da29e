import numpy as np
import pytest

from shiftadd import attention as A
from shiftadd import tensor as T
from shiftadd.gradcheck import check_gradients, rel_error


def rng(seed=11):
    return T.make_rng(seed)


def random_weights(g, d, dw=False, dtype=np.float32):
    scale = 1.0 / np.sqrt(d)
    mats = [(g.standard_normal((d, d)) * scale).astype(dtype) for _ in range(4)]
    kernels = (g.standard_normal((3, 3, d)) * 0.1).astype(dtype) if dw else None
    return A.AttentionWeights(*mats, dw_kernels=kernels)


def test_config_validation():
    with pytest.raises(T.ShapeError):
        A.AttentionConfig(heads=3, model_dim=8)
    with pytest.raises(ValueError):
        A.AttentionConfig(heads=2, model_dim=8, mode="flash")
    assert A.AttentionConfig(heads=2, model_dim=8).head_dim == 4


def test_split_merge_roundtrip():
    g = rng()
    x = g.standard_normal((5, 8)).astype(np.float32)
    assert np.array_equal(A.merge_heads(A.split_heads(x, 4)), x)


def test_softmax_attention_single_token_is_projected_value():
    g = rng()
    cfg = A.AttentionConfig(heads=2, model_dim=8)
    w = random_weights(g, 8)
    x = g.standard_normal((1, 8)).astype(np.float32)
    out = A.softmax_attention(x, w, cfg)
    expected = T.matmul(T.matmul(x, w.wv), w.wo)
    assert rel_error(out, expected) < 1e-6


def test_softmax_attention_identical_tokens_identical_rows():
    g = rng()
    cfg = A.AttentionConfig(heads=2, model_dim=8)
    w = random_weights(g, 8)
    x = np.repeat(g.standard_normal((1, 8)).astype(np.float32), 4, axis=0)
    out = A.softmax_attention(x, w, cfg)
    assert np.allclose(out, out[0], atol=1e-6)


def test_softmax_attention_matches_hand_evaluation():
    # one head, d = 2, two tokens, evaluated step by step with plain numpy
    cfg = A.AttentionConfig(heads=1, model_dim=2)
    wq = np.array([[1.0, 0.5], [-0.25, 1.0]], np.float64)
    wk = np.array([[0.75, -1.0], [0.5, 0.25]], np.float64)
    wv = np.array([[1.0, 2.0], [0.5, -1.0]], np.float64)
    wo = np.array([[2.0, 0.0], [1.0, 1.0]], np.float64)
    x = np.array([[0.2, -0.4], [1.0, 0.3]], np.float64)

    q, k, v = x @ wq, x @ wk, x @ wv
    scores = q @ k.T / np.sqrt(2.0)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    attn = e / e.sum(axis=1, keepdims=True)
    expected = (attn @ v) @ wo

    out = A.softmax_attention(x, A.AttentionWeights(wq, wk, wv, wo), cfg)
    assert rel_error(out, expected) < 1e-6


def test_linear_core_associativity_unnormalized():
    g = rng()
    qf = A.feat_relu(g.standard_normal((2, 6, 4)))
    kf = A.feat_relu(g.standard_normal((2, 6, 4)))
    v = g.standard_normal((2, 6, 4))
    right = T.bmm(qf, T.bmm(np.swapaxes(kf, -1, -2), v))
    left = T.bmm(T.bmm(qf, np.swapaxes(kf, -1, -2)), v)
    assert rel_error(left, right) < 1e-5


def test_linear_core_uniform_keys_average_values():
    g = rng()
    qf = A.feat_relu(g.standard_normal((1, 5, 4)))
    kf = np.ones((1, 5, 4))
    v = g.standard_normal((1, 5, 4))
    out, _ = A.linear_core(qf, kf, v, eps_norm=0.0)
    assert rel_error(out, np.broadcast_to(v.mean(axis=1, keepdims=True), out.shape)) < 1e-9


def test_linear_outputs_are_convex_combinations():
    g = rng()
    qf = A.feat_relu(g.standard_normal((3, 7, 4)))
    kf = A.feat_relu(g.standard_normal((3, 7, 4)))
    v = g.standard_normal((3, 7, 4))
    out, _ = A.linear_core(qf, kf, v, eps_norm=1e-12)
    lo = v.min(axis=1, keepdims=True)
    hi = v.max(axis=1, keepdims=True)
    assert np.all(out >= lo - 1e-9) and np.all(out <= hi + 1e-9)


def test_mode_equivalence_single_token():
    g = rng()
    cfg_s = A.AttentionConfig(heads=2, model_dim=8, mode="softmax")
    cfg_l = A.AttentionConfig(heads=2, model_dim=8, mode="linear", use_dwconv=False)
    w = random_weights(g, 8)
    x = g.standard_normal((1, 8)).astype(np.float32)
    out_s = A.softmax_attention(x, w, cfg_s)
    out_l = A.linear_attention(x, w, cfg_l)
    assert rel_error(out_s, out_l) < 1e-5


def test_binarize_qk_codes_and_gammas():
    g = rng()
    cfg = A.AttentionConfig(heads=2, model_dim=8, mode="linear-binary")
    q = np.abs(g.standard_normal((5, 8))).astype(np.float32)
    k = g.standard_normal((5, 8)).astype(np.float32)
    qf, kf, (gq, gk) = A.binarize_qk(q, k, cfg)
    # all-positive q: every code is 1, so features equal the per-head scale
    assert np.allclose(qf, np.broadcast_to(gq, qf.shape).astype(np.float32))
    kh = A.split_heads(k, 2)
    for h in range(2):
        assert np.isclose(gk[h, 0, 0], np.abs(kh[h]).mean())
    assert set(np.unique(kf / gk).round(6)) <= {0.0, 1.0}


def test_binary_mode_row_with_all_negative_query_is_zero():
    g = rng()
    cfg = A.AttentionConfig(heads=1, model_dim=4, mode="linear-binary", use_dwconv=False)
    w = A.AttentionWeights(np.eye(4, dtype=np.float32), np.eye(4, dtype=np.float32),
                           np.eye(4, dtype=np.float32), np.eye(4, dtype=np.float32))
    x = g.standard_normal((4, 4)).astype(np.float32)
    x[2] = -np.abs(x[2])  # this token's query codes are all zero
    out = A.linear_attention(x, w, cfg)
    assert np.allclose(out[2], 0.0, atol=1e-6)


def test_dwconv_grid_padding_roundtrip():
    g = rng()
    v = g.standard_normal((5, 3)).astype(np.float32)  # 5 tokens -> 3x3 grid
    k = np.zeros((3, 3, 3), np.float32)
    k[1, 1] = 1.0  # identity kernel
    out, side = A._dwconv_tokens(v, k)
    assert side == 3
    assert np.allclose(out, v)


def test_softmax_core_backward_fd():
    g = rng()
    q = g.standard_normal((2, 4, 3))
    k = g.standard_normal((2, 4, 3))
    v = g.standard_normal((2, 4, 3))
    r = g.standard_normal((2, 4, 3))

    def loss(q_, k_, v_):
        out, _ = A.softmax_core(q_, k_, v_)
        return float(np.sum(out * r))

    out, cache = A.softmax_core(q, k, v)
    dq, dk, dv = A.softmax_core_backward(r, cache)
    check_gradients(loss, [q, k, v], [dq, dk, dv])


def test_linear_core_backward_fd():
    g = rng()
    # keep features strictly positive so the map stays smooth around the point
    qf = 0.5 + g.uniform(0.1, 1.0, (2, 5, 3))
    kf = 0.5 + g.uniform(0.1, 1.0, (2, 5, 3))
    v = g.standard_normal((2, 5, 3))
    r = g.standard_normal((2, 5, 3))

    def loss(qf_, kf_, v_):
        out, _ = A.linear_core(qf_, kf_, v_, eps_norm=1e-6)
        return float(np.sum(out * r))

    out, cache = A.linear_core(qf, kf, v, eps_norm=1e-6)
    dqf, dkf, dv = A.linear_core_backward(r, cache)
    check_gradients(loss, [qf, kf, v], [dqf, dkf, dv])


def test_backward_missing_cache_raises():
    with pytest.raises(T.StateError):
        A.softmax_core_backward(np.zeros((1, 2, 2)), None)
    with pytest.raises(T.StateError):
        A.linear_core_backward(np.zeros((1, 2, 2)), None)

import gc
import math

import numpy as np
import pytest

import linattn.tensor as T
from linattn.attention import (AttentionConfig, AttentionKind, AttentionParams,
                               ConfigError, MaskMode,
                               attention_forward, flop_count, project_qkv,
                               simple_attention_head, softmax_attention_head,
                               split_heads)
from linattn.rng import Rng
from linattn.tensor import (F64, Tensor, alloc_stats, backward,
                            finite_difference_gradient, gradient_rel_error)


def rand_t(rng, shape, dtype=np.float32, lo=-1.0, hi=1.0, requires_grad=False):
    data = (rng.uniform(shape) * (hi - lo) + lo).astype(dtype)
    return Tensor(data, requires_grad=requires_grad)


def make_params(rng, d_embed, d_hidden, dtype=np.float32, out_linear=False, zero=False):
    def w(shape):
        if zero:
            return Tensor(np.zeros(shape, dtype=dtype))
        return rand_t(rng, shape, dtype)

    return AttentionParams(
        q_weight=w((d_embed, d_hidden)), k_weight=w((d_embed, d_hidden)),
        v_weight=w((d_embed, d_hidden)),
        q_bias=w((d_hidden,)) if not zero else Tensor(np.zeros(d_hidden, dtype=dtype)),
        k_bias=w((d_hidden,)) if not zero else Tensor(np.zeros(d_hidden, dtype=dtype)),
        v_bias=w((d_hidden,)) if not zero else Tensor(np.zeros(d_hidden, dtype=dtype)),
        out_weight=w((d_hidden, d_embed)) if out_linear else None,
        out_bias=(w((d_embed,)) if not zero else Tensor(np.zeros(d_embed, dtype=dtype))) if out_linear else None,
    )


# ---------------------------------------------------------------------------
# projections and head split
# ---------------------------------------------------------------------------

def test_project_qkv_zero_params():
    x = rand_t(Rng(1), (4, 3))
    p = make_params(Rng(2), 3, 6, zero=True)
    q, k, v = project_qkv(x, p)
    assert not q.data.any() and not k.data.any() and not v.data.any()


def test_project_qkv_identity_weight():
    x = rand_t(Rng(3), (4, 5))
    p = make_params(Rng(4), 5, 5, zero=True)
    p.q_weight.data[...] = np.eye(5, dtype=np.float32)
    q, _, _ = project_qkv(x, p)
    assert np.array_equal(q.data, x.data)


def test_project_qkv_vs_explicit_loop():
    rng = Rng(5)
    x = rand_t(rng, (6, 4))
    p = make_params(rng, 4, 8)
    q, k, v = project_qkv(x, p)
    for mat, w, b in ((q, p.q_weight, p.q_bias), (k, p.k_weight, p.k_bias), (v, p.v_weight, p.v_bias)):
        expected = np.empty((6, 8), dtype=np.float64)
        for i in range(6):
            for j in range(8):
                expected[i, j] = sum(float(x.data[i, t]) * float(w.data[t, j]) for t in range(4)) \
                                 + float(b.data[j])
        assert np.max(np.abs(mat.data - expected)) <= 1e-6


def test_project_qkv_dim_mismatch():
    with pytest.raises(T.ShapeError):
        project_qkv(rand_t(Rng(6), (4, 3)), make_params(Rng(7), 5, 5))


def test_split_heads_single():
    m = rand_t(Rng(8), (3, 4))
    heads = split_heads(m, 1)
    assert len(heads) == 1 and np.array_equal(heads[0].data, m.data)


def test_split_heads_definition():
    m = Tensor([[1.0, 2.0, 3.0, 4.0]])
    h1, h2 = split_heads(m, 2)
    assert np.array_equal(h1.data, [[1.0, 2.0]])
    assert np.array_equal(h2.data, [[3.0, 4.0]])


def test_split_merge_round_trip_bitwise():
    m = rand_t(Rng(9), (5, 12))
    merged = T.concat_cols(split_heads(m, 3))
    assert merged.data.tobytes() == m.data.tobytes()


def test_split_heads_indivisible():
    with pytest.raises(ConfigError, match="divisible"):
        split_heads(rand_t(Rng(10), (3, 5)), 2)


# ---------------------------------------------------------------------------
# head-level attention
# ---------------------------------------------------------------------------

def test_softmax_head_zero_query_averages_values():
    rng = Rng(11)
    kh, vh = rand_t(rng, (6, 4)), rand_t(rng, (6, 4))
    out = softmax_attention_head(Tensor(np.zeros((6, 4), dtype=np.float32)), kh, vh)
    col_mean = vh.data.mean(axis=0)
    assert np.max(np.abs(out.data - col_mean[None, :])) <= 1e-6


def test_softmax_head_length_one_passes_value():
    rng = Rng(12)
    qh, kh, vh = (rand_t(rng, (1, 4)) for _ in range(3))
    out = softmax_attention_head(qh, kh, vh, scale=0.5)
    assert np.allclose(out.data, vh.data, atol=1e-7)


def test_softmax_head_vs_per_row_oracle():
    rng = Rng(13)
    qh, kh, vh = (rand_t(rng, (8, 4)) for _ in range(3))
    s = 1.0 / math.sqrt(4)
    out = softmax_attention_head(qh, kh, vh, scale=s).data
    for i in range(8):
        scores = np.array([s * float(qh.data[i] @ kh.data[j]) for j in range(8)])
        e = np.exp(scores - scores.max())
        weights = e / e.sum()
        expected = sum(weights[j] * vh.data[j].astype(np.float64) for j in range(8))
        assert np.max(np.abs(out[i] - expected)) <= 1e-6


def test_simple_head_zero_values():
    rng = Rng(14)
    out = simple_attention_head(rand_t(rng, (5, 3)), rand_t(rng, (5, 3)),
                                Tensor(np.zeros((5, 3), dtype=np.float32)))
    assert not out.data.any()


def test_simple_head_hand_case():
    q = Tensor([[1.0], [2.0]])
    k = Tensor([[1.0], [0.0]])
    v = Tensor([[3.0], [4.0]])
    out = simple_attention_head(q, k, v, scale=1.0 / math.sqrt(2))
    assert np.allclose(out.data, [[3.0 / math.sqrt(2)], [6.0 / math.sqrt(2)]], atol=1e-6)
    assert np.allclose(out.data, [[2.1213], [4.2426]], atol=1e-4)


def test_simple_head_vs_opposite_association():
    rng = Rng(15)
    qh, kh, vh = (rand_t(rng, (64, 16)) for _ in range(3))
    s = 1.0 / math.sqrt(64)
    got = simple_attention_head(qh, kh, vh, scale=s).data
    oracle = s * (qh.data @ kh.data.T) @ vh.data
    denom = max(np.max(np.abs(oracle)), 1e-12)
    assert np.max(np.abs(got - oracle)) / denom <= 1e-4


def test_associativity_property():
    for trial in range(25):
        rng = Rng(1000 + trial)
        length = int(rng.integers(2, 257))
        d = int(rng.integers(2, 65))
        for dtype, tol in ((np.float32, 1e-4), (np.float64, 1e-10)):
            q, k, v = (rand_t(rng, (length, d), dtype) for _ in range(3))
            left = (q.data @ k.data.T) @ v.data
            right = q.data @ (k.data.T @ v.data)
            denom = max(np.max(np.abs(left)), np.max(np.abs(right)), 1e-12)
            assert np.max(np.abs(left - right)) / denom <= tol


# ---------------------------------------------------------------------------
# full layer
# ---------------------------------------------------------------------------

def test_attention_forward_zero_params():
    x = rand_t(Rng(16), (5, 6))
    p = make_params(Rng(17), 6, 6, zero=True)
    for kind in AttentionKind:
        out = attention_forward(x, p, AttentionConfig(kind=kind, n_heads=2))
        assert not out.data.any()


def test_attention_forward_simple_matches_association_oracle():
    rng = Rng(18)
    x = rand_t(rng, (12, 8))
    p = make_params(rng, 8, 8)
    cfg = AttentionConfig(kind=AttentionKind.SIMPLE, n_heads=2)
    got = attention_forward(x, p, cfg).data
    q, k, v = project_qkv(x, p)
    s = 1.0 / math.sqrt(12)
    parts = []
    for qh, kh, vh in zip(split_heads(q, 2), split_heads(k, 2), split_heads(v, 2)):
        parts.append(s * (qh.data @ kh.data.T) @ vh.data)
    oracle = np.concatenate(parts, axis=1)
    denom = max(np.max(np.abs(oracle)), 1e-12)
    assert np.max(np.abs(got - oracle)) / denom <= 1e-4


def test_heads_are_not_a_noop():
    rng = Rng(19)
    x = rand_t(rng, (6, 8))
    p = make_params(rng, 8, 8)
    for kind in AttentionKind:
        one = attention_forward(x, p, AttentionConfig(kind=kind, n_heads=1)).data
        four = attention_forward(x, p, AttentionConfig(kind=kind, n_heads=4)).data
        assert np.max(np.abs(one - four)) > 1e-4


def test_attention_forward_config_errors():
    rng = Rng(20)
    x = rand_t(rng, (4, 6))
    p = make_params(rng, 6, 12)  # d_hidden != d_embed, no out layer
    with pytest.raises(ConfigError, match="d_hidden"):
        attention_forward(x, p, AttentionConfig(kind=AttentionKind.SIMPLE, n_heads=2))
    p2 = make_params(rng, 6, 6)
    with pytest.raises(ConfigError, match="output"):
        attention_forward(x, p2, AttentionConfig(kind=AttentionKind.SIMPLE, n_heads=2,
                                                 use_output_linear=True))


def test_attention_forward_output_linear_shape():
    rng = Rng(21)
    x = rand_t(rng, (4, 6))
    p = make_params(rng, 6, 12, out_linear=True)
    out = attention_forward(x, p, AttentionConfig(kind=AttentionKind.SOFTMAX, n_heads=3,
                                                  use_output_linear=True))
    assert out.shape == (4, 6)


def test_simple_attention_is_nonlinear_in_input():
    rng = Rng(22)
    p = make_params(rng, 6, 6)
    cfg = AttentionConfig(kind=AttentionKind.SIMPLE, n_heads=2)
    x1, x2 = rand_t(rng, (5, 6)), rand_t(rng, (5, 6))
    both = attention_forward(Tensor(x1.data + x2.data), p, cfg).data
    separate = attention_forward(x1, p, cfg).data + attention_forward(x2, p, cfg).data
    assert np.max(np.abs(both - separate)) > 1e-3


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", list(AttentionKind))
def test_padding_leaves_real_positions_unchanged(kind):
    rng = Rng(23)
    real_len, pad = 5, 3
    x_real = rand_t(rng, (real_len, 6), np.float64)
    p = make_params(rng, 6, 6, dtype=np.float64)
    cfg = AttentionConfig(kind=kind, n_heads=2, mask_mode=MaskMode.PAD)
    base = attention_forward(x_real, p, cfg, pad_mask=np.ones(real_len, dtype=bool)).data

    padded = np.concatenate([x_real.data, rng.uniform((pad, 6))], axis=0)
    mask = np.array([True] * real_len + [False] * pad)
    out = attention_forward(Tensor(padded, dtype=F64), p, cfg, pad_mask=mask).data
    assert np.max(np.abs(out[:real_len] - base)) <= 1e-6


def test_scale_uses_true_length_not_padded():
    rng = Rng(24)
    x = rand_t(rng, (4, 4), np.float64)
    p = make_params(rng, 4, 4, dtype=np.float64)
    cfg = AttentionConfig(kind=AttentionKind.SIMPLE, n_heads=1, mask_mode=MaskMode.PAD)
    unpadded = attention_forward(x, p, cfg, pad_mask=np.ones(4, dtype=bool)).data
    padded_x = Tensor(np.concatenate([x.data, np.zeros((4, 4))]), dtype=F64)
    mask = np.array([True] * 4 + [False] * 4)
    padded = attention_forward(padded_x, p, cfg, pad_mask=mask).data
    # 1/sqrt(L) must use L=4 in both runs for the outputs to agree
    assert np.allclose(unpadded, padded[:4], atol=1e-12)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", list(AttentionKind))
def test_attention_gradients_match_finite_differences(kind):
    rng = Rng(25)
    length, d_model = 6, 4
    x_data = rng.uniform((length, d_model)) * 2 - 1
    p = make_params(rng, d_model, d_model, dtype=np.float64)
    w = Tensor(rng.uniform((length, d_model)), dtype=F64)
    cfg = AttentionConfig(kind=kind, n_heads=2)

    def loss_through_x(t):
        return T.sum_all(T.mul(attention_forward(t, p, cfg), w))

    leaf = Tensor(x_data, dtype=F64, requires_grad=True)
    backward(loss_through_x(leaf))
    numeric = finite_difference_gradient(loss_through_x, Tensor(x_data, dtype=F64))
    assert gradient_rel_error(leaf.grad, numeric.data) <= 1e-4

    # parameter gradients via buffer swap
    for pt in (p.q_weight, p.k_weight, p.v_weight, p.q_bias, p.k_bias, p.v_bias):
        pt.requires_grad = True

        def loss_through_param(t, _pt=pt):
            saved = _pt.data
            _pt.data = t.data
            try:
                return T.sum_all(T.mul(attention_forward(Tensor(x_data, dtype=F64), p, cfg), w))
            finally:
                _pt.data = saved

        backward(loss_through_param(Tensor(pt.data, dtype=F64)))
        # that backward call filled grads of p's tensors via the shared graph
        analytic = pt.grad.copy()
        for other in (p.q_weight, p.k_weight, p.v_weight, p.q_bias, p.k_bias, p.v_bias):
            other.zero_grad()
        numeric = finite_difference_gradient(loss_through_param, Tensor(pt.data.copy(), dtype=F64))
        assert gradient_rel_error(analytic, numeric.data) <= 1e-4, f"param grad mismatch for {kind}"
        pt.requires_grad = False


# ---------------------------------------------------------------------------
# memory and flops
# ---------------------------------------------------------------------------

def test_memory_simple_linear_softmax_quadratic():
    gc.collect()
    length, d = 2048, 64
    rng = Rng(26)

    def run(head_fn):
        gc.collect()
        baseline = alloc_stats.current_bytes
        alloc_stats.reset_peak()
        q, k, v = (rand_t(rng, (length, d)) for _ in range(3))
        out = head_fn(q, k, v, 1.0)
        peak = alloc_stats.peak_bytes - baseline
        del q, k, v, out
        return peak

    simple_peak = run(simple_attention_head)
    softmax_peak = run(softmax_attention_head)
    itemsize = 4
    assert simple_peak < 10 * length * d * itemsize
    assert softmax_peak > length * length * itemsize
    assert softmax_peak > 10 * simple_peak


def test_flop_count_simple_linear_in_length():
    base = flop_count(AttentionKind.SIMPLE, 512, 32, 4)
    assert flop_count(AttentionKind.SIMPLE, 1024, 32, 4) == 2 * base


def test_flop_count_softmax_quadratic_term():
    d, heads = 64, 2
    def dominant(length):
        return 4 * length * length * d * heads
    assert dominant(2048) == 4 * dominant(1024)
    f1 = flop_count(AttentionKind.SOFTMAX, 1024, d, heads)
    f2 = flop_count(AttentionKind.SOFTMAX, 2048, d, heads)
    assert f2 / f1 == pytest.approx(4.0, rel=0.02)
    assert dominant(1024) / f1 > 0.9  # the L^2 d term dominates


def test_flop_count_validates_arguments():
    with pytest.raises(ValueError):
        flop_count(AttentionKind.SIMPLE, 0, 4, 1)

import math

import numpy as np
import pytest

from mudaif import core
from mudaif.core import (
    MaskError,
    NumericError,
    ShapeError,
    TapeError,
    Tensor,
    backward,
    concat_cols,
    concat_rows,
    conv2d_nonoverlap,
    cross_entropy_next_token,
    gelu,
    layer_norm,
    masked_fill,
    matmul,
    no_grad,
    pad_bottom_right,
    reshape,
    scaled_dot_attention,
    slice_cols,
    slice_rows,
    softmax_rows,
    take_rows,
    tmean,
    transpose,
    tsum,
)


# ---------------------------------------------------------------- oracles

def matmul_oracle(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def softmax_oracle(x):
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        e = [math.exp(v) for v in x[i]]
        s = sum(e)
        out[i] = [v / s for v in e]
    return out


def attention_oracle(q, k, v, mask=None):
    a, d = q.shape
    b = k.shape[0]
    out = np.zeros((a, v.shape[1]))
    for i in range(a):
        scores = []
        for j in range(b):
            if mask is not None and not mask[i, j]:
                scores.append(-math.inf)
            else:
                scores.append(sum(q[i, t] * k[j, t] for t in range(d)) / math.sqrt(d))
        m = max(scores)
        e = [math.exp(s - m) for s in scores]
        z = sum(e)
        w = [x / z for x in e]
        for j in range(b):
            for t in range(v.shape[1]):
                out[i, t] += w[j] * v[j, t]
    return out


def conv_oracle(image, kernel, bias):
    p = kernel.shape[0]
    h, w, cin = image.shape
    cout = kernel.shape[3]
    out = np.zeros((h // p, w // p, cout))
    for gi in range(h // p):
        for gj in range(w // p):
            for co in range(cout):
                acc = bias[co]
                for di in range(p):
                    for dj in range(p):
                        for ci in range(cin):
                            acc += image[gi * p + di, gj * p + dj, ci] * kernel[di, dj, ci, co]
                out[gi, gj, co] = acc
    return out


def nll_oracle(logits, targets):
    total = 0.0
    for i, t in enumerate(targets):
        e = [math.exp(v) for v in logits[i]]
        total += -math.log(e[t] / sum(e))
    return total / len(targets)


def fd_grad(f, t: Tensor, h=1e-5):
    """Central finite differences of a scalar-valued builder wrt one tensor."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f().item()
            flat[i] = orig - h
            lo = f().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * h)
    return g


def assert_grad_close(f, t: Tensor, rtol=1e-4):
    t.grad = None
    loss = f()
    backward(loss)
    num = fd_grad(f, t)
    denom = np.maximum(np.maximum(np.abs(num), np.abs(t.grad)), 1e-6)
    assert (np.abs(num - t.grad) / denom).max() < rtol


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = matmul(Tensor(np.eye(2)), a)
    assert np.array_equal(out.data, a.data)


def test_matmul_zero_annihilator():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = matmul(a, Tensor(np.zeros((2, 2))))
    assert np.array_equal(out.data, np.zeros((2, 2)))


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    out = matmul(Tensor(a), Tensor(b))
    assert np.allclose(out.data, matmul_oracle(a, b), atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_associativity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b, c = (rng.normal(size=(3, 3)) for _ in range(3))
        left = matmul(matmul(Tensor(a), Tensor(b)), Tensor(c)).data
        right = matmul(Tensor(a), matmul(Tensor(b), Tensor(c))).data
        assert np.abs(left - right).max() < 1e-9


def test_matmul_gradient():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    assert_grad_close(lambda: tsum(matmul(a, b) * matmul(a, b)), a)
    assert_grad_close(lambda: tsum(matmul(a, b) * matmul(a, b)), b)


# ---------------------------------------------------------------- softmax

def test_softmax_uniform_on_equal_logits():
    out = softmax_rows(Tensor(np.zeros((1, 4))))
    assert np.allclose(out.data, 0.25, atol=1e-15)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(3)
    for shift in (-50.0, 0.0, 7.25, 300.0):
        x = rng.normal(size=(4, 5))
        base = softmax_rows(Tensor(x)).data
        shifted = softmax_rows(Tensor(x + shift)).data
        assert np.array_equal(np.argmax(base, axis=1), np.argmax(shifted, axis=1))
        assert np.abs(base - shifted).max() <= 1e-9


def test_softmax_matches_exp_normalize_oracle():
    x = np.array([[math.log(1), math.log(2), math.log(3)]])
    out = softmax_rows(Tensor(x))
    assert np.abs(out.data - softmax_oracle(x)).max() < 1e-9
    assert np.allclose(out.data, [[1 / 6, 2 / 6, 3 / 6]], atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(4)
    for _ in range(50):
        x = rng.normal(scale=5.0, size=rng.integers(1, 7, size=2))
        out = softmax_rows(Tensor(x))
        assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-6


def test_softmax_empty_columns_rejected():
    with pytest.raises(ShapeError):
        softmax_rows(Tensor(np.zeros((2, 0))))


def test_softmax_gradient():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 4)))
    assert_grad_close(lambda: tsum(softmax_rows(x) * w), x)


# ---------------------------------------------------------------- attention

def test_attention_single_key_returns_value():
    rng = np.random.default_rng(6)
    q = Tensor(rng.normal(size=(1, 3)))
    k = Tensor(rng.normal(size=(1, 3)))
    v = Tensor(rng.normal(size=(1, 3)))
    out = scaled_dot_attention(q, k, v)
    assert np.allclose(out.data, v.data, atol=1e-15)


def test_attention_zero_query_gives_value_mean():
    rng = np.random.default_rng(7)
    k = Tensor(rng.normal(size=(5, 2)))
    v = Tensor(rng.normal(size=(5, 2)))
    out = scaled_dot_attention(Tensor(np.zeros((3, 2))), k, v)
    assert np.allclose(out.data, np.tile(v.data.mean(axis=0), (3, 1)), atol=1e-12)


def test_attention_matches_loop_oracle():
    rng = np.random.default_rng(8)
    q = rng.normal(size=(3, 2))
    k = rng.normal(size=(5, 2))
    v = rng.normal(size=(5, 2))
    out = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v))
    assert np.abs(out.data - attention_oracle(q, k, v)).max() < 1e-9


def test_attention_masked_matches_oracle_and_weights_are_stochastic():
    rng = np.random.default_rng(9)
    q = rng.normal(size=(4, 3))
    k = rng.normal(size=(6, 3))
    v = rng.normal(size=(6, 3))
    mask = rng.random((4, 6)) > 0.4
    mask[:, 0] = True  # keep every row satisfiable
    out, w = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v), mask=mask, return_weights=True)
    assert np.abs(out.data - attention_oracle(q, k, v, mask)).max() < 1e-9
    assert np.abs(w.data.sum(axis=1) - 1.0).max() < 1e-6
    assert np.all(w.data[~mask] == 0.0)


def test_attention_degenerate_mask_raises():
    mask = np.ones((2, 3), dtype=bool)
    mask[1] = False
    with pytest.raises(MaskError, match="row 1"):
        scaled_dot_attention(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))),
                             Tensor(np.zeros((3, 3))), mask=mask)


def test_attention_gradient():
    rng = np.random.default_rng(10)
    q = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    k = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    v = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2)))
    for t in (q, k, v):
        assert_grad_close(lambda: tsum(scaled_dot_attention(q, k, v) * w), t)


# ---------------------------------------------------------------- conv

def test_conv_zero_image_zero_bias_is_zero():
    out = conv2d_nonoverlap(Tensor(np.zeros((4, 4, 1))), Tensor(np.zeros((2, 2, 1, 3))),
                            Tensor(np.zeros(3)))
    assert np.array_equal(out.data, np.zeros((2, 2, 3)))


def test_conv_full_image_sum_kernel():
    rng = np.random.default_rng(11)
    img = rng.random((4, 4, 2))
    out = conv2d_nonoverlap(Tensor(img), Tensor(np.ones((4, 4, 2, 1))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1)
    assert abs(out.data[0, 0, 0] - img.sum()) < 1e-12


def test_conv_matches_patch_loop_oracle():
    rng = np.random.default_rng(12)
    img = rng.normal(size=(4, 4, 1))
    kernel = rng.normal(size=(2, 2, 1, 3))
    bias = rng.normal(size=3)
    out = conv2d_nonoverlap(Tensor(img), Tensor(kernel), Tensor(bias))
    assert np.abs(out.data - conv_oracle(img, kernel, bias)).max() < 1e-12


def test_conv_non_multiple_extent_instructs_padding():
    with pytest.raises(ShapeError, match="pad"):
        conv2d_nonoverlap(Tensor(np.zeros((5, 4, 1))), Tensor(np.zeros((2, 2, 1, 1))),
                          Tensor(np.zeros(1)))


def test_conv_gradient():
    rng = np.random.default_rng(13)
    img = Tensor(rng.normal(size=(4, 4, 2)), requires_grad=True)
    kernel = Tensor(rng.normal(size=(2, 2, 2, 3)), requires_grad=True)
    bias = Tensor(rng.normal(size=3), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 2, 3)))
    for t in (img, kernel, bias):
        assert_grad_close(lambda: tsum(conv2d_nonoverlap(img, kernel, bias) * w), t)


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor(np.full((1, 5), 3.7)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    assert np.allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_idempotent_on_standardized_row():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(1, 8))
    x = (x - x.mean()) / x.std()
    out = layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)))
    assert np.abs(out.data - x).max() < 1e-6


def test_layer_norm_moments():
    rng = np.random.default_rng(15)
    x = rng.normal(loc=2.0, scale=3.0, size=(4, 16))
    out = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.abs(out.mean(axis=1)).max() <= 1e-9
    assert np.abs(out.var(axis=1) - 1.0).max() < 1e-6


def test_layer_norm_gradient():
    rng = np.random.default_rng(16)
    x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    gain = Tensor(rng.normal(size=6), requires_grad=True)
    shift = Tensor(rng.normal(size=6), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 6)))
    for t in (x, gain, shift):
        assert_grad_close(lambda: tsum(layer_norm(x, gain, shift) * w), t)


# ---------------------------------------------------------------- cross entropy

def test_cross_entropy_uniform_logits():
    loss = cross_entropy_next_token(Tensor(np.zeros((3, 4))), [0, 1, 2])
    assert abs(loss.item() - math.log(4)) < 1e-12


def test_cross_entropy_near_certain_prediction():
    logits = np.zeros((1, 5))
    logits[0, 2] = 1e6
    loss = cross_entropy_next_token(Tensor(logits), [2])
    assert loss.item() < 1e-12


def test_cross_entropy_matches_per_position_oracle():
    rng = np.random.default_rng(17)
    logits = rng.normal(size=(3, 5))
    targets = [4, 0, 2]
    loss = cross_entropy_next_token(Tensor(logits), targets)
    assert abs(loss.item() - nll_oracle(logits, targets)) < 1e-9


def test_cross_entropy_out_of_vocab_target():
    with pytest.raises(IndexError, match="5"):
        cross_entropy_next_token(Tensor(np.zeros((1, 5))), [5])


def test_cross_entropy_gradient():
    rng = np.random.default_rng(18)
    logits = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    assert_grad_close(lambda: cross_entropy_next_token(logits, [1, 5, 0, 3]), logits)


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(tsum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_quadratic_gives_two_x():
    x = Tensor(np.arange(1.0, 5.0), requires_grad=True)
    backward(tsum(x * x))
    assert np.allclose(x.grad, 2 * x.data, atol=1e-12)


def test_backward_fanout_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x + x
    backward(tsum(y))
    assert np.array_equal(x.grad, np.full(2, 2.0))


def test_backward_accumulates_across_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(tsum(x * x))
    backward(tsum(x * x))  # fresh graph, same leaf
    assert np.allclose(x.grad, 4 * x.data)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(TapeError, match="scalar"):
        backward(x + x)


def test_backward_twice_without_reset_raises():
    x = Tensor([1.0], requires_grad=True)
    loss = tsum(x * x)
    backward(loss)
    with pytest.raises(TapeError, match="already ran"):
        backward(loss)


def test_backward_on_untracked_loss_raises():
    with pytest.raises(TapeError):
        backward(tsum(Tensor([1.0, 2.0])))


def test_tape_order_is_topological():
    x = Tensor([1.0], requires_grad=True)
    y = x * x
    z = y + x
    tape = core.Tape.trace(z)
    assert tape.nodes.index(y) < tape.nodes.index(z)
    assert tape.nodes.index(x) < tape.nodes.index(y)


# ---------------------------------------------------------------- misc ops

def test_non_finite_output_raises():
    with pytest.raises(NumericError):
        core.div(Tensor([1.0]), Tensor([0.0]))


def test_masked_fill_allows_neg_inf_and_blocks_grad():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    mask = np.array([[True, False], [False, False]])
    out = masked_fill(x, mask, -np.inf)
    assert out.data[0, 0] == -np.inf
    backward(tsum(softmax_rows(out)))
    assert x.grad[0, 0] == 0.0


def test_structural_op_gradients():
    rng = np.random.default_rng(19)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 6)))
    builders = [
        lambda: tsum(reshape(x, (6, 4)) * reshape(w, (6, 4))),
        lambda: tsum(transpose(x) * transpose(w)),
        lambda: tsum(slice_rows(x, 1, 3) * slice_rows(w, 1, 3)),
        lambda: tsum(slice_cols(x, 2, 5) * slice_cols(w, 2, 5)),
        lambda: tsum(concat_rows([x, x]) * concat_rows([w, w])),
        lambda: tsum(concat_cols([x, x]) * concat_cols([w, w])),
        lambda: tsum(gelu(x) * w),
        lambda: tmean(x * x),
        lambda: tsum(take_rows(x, [0, 2, 2]) * slice_rows(w, 0, 3)),
        lambda: tsum(pad_bottom_right(reshape(x, (4, 2, 3)), 5, 4)),
    ]
    for f in builders:
        x.grad = None
        assert_grad_close(f, x)


def test_take_rows_duplicate_ids_accumulate():
    w = Tensor(np.eye(3), requires_grad=True)
    out = take_rows(w, [1, 1])
    backward(tsum(out))
    assert w.grad[1].sum() == pytest.approx(6.0)  # two gathered copies, 3 cols each


def test_no_grad_blocks_tracking():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * x
    assert not y.requires_grad


def test_pad_bottom_right_noop_returns_same_tensor():
    x = Tensor(np.ones((2, 3, 1)))
    assert pad_bottom_right(x, 2, 3) is x

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hsicnn import nn
from hsicnn.errors import DimensionError, LabelError
from hsicnn.nn import LayerParams


# --- brute-force oracles: explicit loops, independent of the vectorized code ---

def naive_conv_spectral(patch, w, b, stride):
    n1, kh, kw, k = w.shape
    L = (patch.shape[-1] - k) // stride + 1
    out = np.zeros((n1, L))
    for i in range(n1):
        for j in range(L):
            acc = b[i]
            for r in range(kh):
                for c in range(kw):
                    for t in range(k):
                        acc += patch[r, c, j * stride + t] * w[i, r, c, t]
            out[i, j] = acc
    return out


def naive_conv2d(x, w, b, stride):
    C, kh, kw = w.shape
    H2 = (x.shape[0] - kh) // stride + 1
    W2 = (x.shape[1] - kw) // stride + 1
    out = np.zeros((H2, W2, C))
    for c in range(C):
        for i in range(H2):
            for j in range(W2):
                out[i, j, c] = b[c] + np.sum(x[i * stride:i * stride + kh, j * stride:j * stride + kw] * w[c])
    return out


def naive_maxpool(x, window, stride):
    H, W, C = x.shape
    Ho, Wo = (H - window) // stride + 1, (W - window) // stride + 1
    out = np.zeros((Ho, Wo, C))
    arg = np.zeros((Ho, Wo, C), dtype=int)
    for i in range(Ho):
        for j in range(Wo):
            for c in range(C):
                best, best_idx = -np.inf, -1
                for di in range(window):
                    for dj in range(window):
                        r, q = i * stride + di, j * stride + dj
                        if x[r, q, c] > best:
                            best, best_idx = x[r, q, c], (r * W + q) * C + c
                out[i, j, c] = best
                arg[i, j, c] = best_idx
    return out, arg


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


rng = np.random.default_rng(1234)


# --- Conv1 ---

def test_conv_spectral_all_ones():
    patch = np.ones((3, 3, 4))
    p = LayerParams(np.ones((1, 3, 3, 2)), np.zeros(1))
    np.testing.assert_array_equal(nn.conv_spectral_forward(patch, p, 2), [[18.0, 18.0]])


def test_conv_spectral_zero_kernels():
    patch = rng.normal(size=(3, 3, 12))
    p = LayerParams(np.zeros((5, 3, 3, 4)), np.zeros(5))
    out = nn.conv_spectral_forward(patch, p, 3)
    assert out.shape == (5, 3)
    assert not out.any()


def test_conv_spectral_ksc_length():
    patch = np.zeros((3, 3, 176), dtype=np.float32)
    p = LayerParams(np.zeros((30, 3, 3, 24), np.float32), np.zeros(30, np.float32))
    assert nn.conv_spectral_forward(patch, p, 9).shape == (30, 17)


@pytest.mark.parametrize("bands,k,stride", [(10, 4, 2), (13, 5, 3), (8, 8, 1), (20, 3, 7)])
def test_conv_spectral_matches_loops(bands, k, stride):
    patch = rng.normal(size=(3, 3, bands))
    w = rng.normal(size=(4, 3, 3, k))
    b = rng.normal(size=4)
    out = nn.conv_spectral_forward(patch, LayerParams(w, b), stride)
    np.testing.assert_allclose(out, naive_conv_spectral(patch, w, b, stride), rtol=1e-12, atol=1e-12)


def test_conv_spectral_batch_equals_per_sample():
    patches = rng.normal(size=(5, 3, 3, 11))
    p = LayerParams(rng.normal(size=(3, 3, 3, 4)), rng.normal(size=3))
    batched = nn.conv_spectral_forward(patches, p, 2)
    for i in range(5):
        np.testing.assert_allclose(batched[i], nn.conv_spectral_forward(patches[i], p, 2), atol=1e-12)


def test_conv_spectral_errors():
    p = LayerParams(np.zeros((2, 3, 3, 6)), np.zeros(2))
    with pytest.raises(DimensionError):
        nn.conv_spectral_forward(np.zeros((3, 3, 5)), p, 1)
    with pytest.raises(DimensionError):
        nn.conv_spectral_forward(np.zeros((5, 5, 10)), p, 1)


def test_conv_spectral_backward_matches_finite_differences():
    patch = rng.normal(size=(3, 3, 9))
    p = LayerParams(rng.normal(size=(3, 3, 3, 4)), rng.normal(size=3))
    upstream = rng.normal(size=(3, 3))
    f = lambda: np.sum(nn.conv_spectral_forward(patch, p, 2) * upstream)
    grads, dpatch = nn.conv_spectral_backward(upstream, patch, p, 2)
    np.testing.assert_allclose(grads.weights, numeric_grad(f, p.weights), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(grads.biases, numeric_grad(f, p.biases), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dpatch, numeric_grad(f, patch), rtol=1e-6, atol=1e-8)


# --- reshape ---

def test_reshape_stack_layout():
    out = nn.reshape_stack(np.array([[1, 2, 3], [4, 5, 6]]))
    np.testing.assert_array_equal(out, [[1, 4], [2, 5], [3, 6]])


def test_reshape_single_vector_is_column():
    v = np.array([[1.0, 2.0, 3.0, 4.0]])
    out = nn.reshape_stack(v)
    assert out.shape == (4, 1)
    np.testing.assert_array_equal(out[:, 0], v[0])


def test_reshape_ksc_shape():
    assert nn.reshape_stack(np.zeros((30, 17))).shape == (17, 30)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6)))
def test_reshape_backward_inverts_exactly(x):
    np.testing.assert_array_equal(nn.reshape_stack_backward(nn.reshape_stack(x)), x)
    g = x.T
    np.testing.assert_array_equal(nn.reshape_stack_backward(g), g.T)


# --- Conv2 ---

def test_conv2d_full_window_sum():
    out = nn.conv2d_forward(np.ones((3, 3)), LayerParams(np.ones((1, 3, 3)), np.zeros(1)), 1)
    np.testing.assert_array_equal(out, [[[9.0]]])


def test_conv2d_ksc_shape():
    p = LayerParams(np.zeros((64, 3, 3)), np.zeros(64))
    assert nn.conv2d_forward(np.zeros((17, 30)), p, 1).shape == (15, 28, 64)


def test_conv2d_delta_kernel_returns_interior():
    x = rng.normal(size=(6, 7))
    w = np.zeros((1, 3, 3))
    w[0, 1, 1] = 1
    out = nn.conv2d_forward(x, LayerParams(w, np.zeros(1)), 1)
    np.testing.assert_array_equal(out[..., 0], x[1:-1, 1:-1])


@pytest.mark.parametrize("shape,stride", [((5, 5), 1), ((9, 7), 2), ((10, 12), 3), ((3, 8), 1)])
def test_conv2d_matches_loops(shape, stride):
    x = rng.normal(size=shape)
    w = rng.normal(size=(4, 3, 3))
    b = rng.normal(size=4)
    out = nn.conv2d_forward(x, LayerParams(w, b), stride)
    np.testing.assert_allclose(out, naive_conv2d(x, w, b, stride), rtol=1e-12, atol=1e-12)


def test_conv2d_too_small():
    with pytest.raises(DimensionError):
        nn.conv2d_forward(np.zeros((2, 5)), LayerParams(np.zeros((1, 3, 3)), np.zeros(1)), 1)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_backward_matches_finite_differences(stride):
    x = rng.normal(size=(7, 6))
    p = LayerParams(rng.normal(size=(2, 3, 3)), rng.normal(size=2))
    out_shape = nn.conv2d_forward(x, p, stride).shape
    upstream = rng.normal(size=out_shape)
    f = lambda: np.sum(nn.conv2d_forward(x, p, stride) * upstream)
    grads, dx = nn.conv2d_backward(upstream, x, p, stride)
    np.testing.assert_allclose(grads.weights, numeric_grad(f, p.weights), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(grads.biases, numeric_grad(f, p.biases), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dx, numeric_grad(f, x), rtol=1e-6, atol=1e-8)


small_arrays = arrays(np.float64, st.tuples(st.integers(3, 6), st.integers(3, 6)),
                      elements=st.floats(-100, 100))


@settings(max_examples=50)
@given(small_arrays, st.floats(-5, 5), st.integers(0, 2**31))
def test_conv2d_linear_in_input(x, alpha, seed):
    r = np.random.default_rng(seed)
    p = LayerParams(r.normal(size=(3, 3, 3)), np.zeros(3))
    y = r.normal(size=x.shape)
    f = lambda v: nn.conv2d_forward(v, p, 1)
    np.testing.assert_allclose(f(alpha * x), alpha * f(x), atol=1e-10, rtol=1e-10)
    np.testing.assert_allclose(f(x + y), f(x) + f(y), atol=1e-10, rtol=1e-10)


@settings(max_examples=50)
@given(arrays(np.float64, (3, 3, 10), elements=st.floats(-100, 100)), st.floats(-5, 5),
       st.integers(0, 2**31))
def test_conv_spectral_linear_in_input(x, alpha, seed):
    r = np.random.default_rng(seed)
    p = LayerParams(r.normal(size=(2, 3, 3, 4)), np.zeros(2))
    y = r.normal(size=x.shape)
    f = lambda v: nn.conv_spectral_forward(v, p, 2)
    np.testing.assert_allclose(f(alpha * x), alpha * f(x), atol=1e-10, rtol=1e-10)
    np.testing.assert_allclose(f(x + y), f(x) + f(y), atol=1e-10, rtol=1e-10)


# --- max pooling ---

def test_maxpool_single_window():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
    out, arg = nn.maxpool2d_forward(x)
    assert out.item() == 4.0
    assert arg.item() == 3  # flat index of element (1, 1, 0)


def test_maxpool_constant_input_picks_first_index():
    x = np.full((4, 4, 2), 7.0)
    out, arg = nn.maxpool2d_forward(x)
    np.testing.assert_array_equal(out, 7.0)
    # top-left element of every window: (2i, 2j, c) -> (2i*4 + 2j)*2 + c
    expected = np.array([[[(2 * i * 4 + 2 * j) * 2 + c for c in range(2)] for j in range(2)]
                         for i in range(2)])
    np.testing.assert_array_equal(arg, expected)


def test_maxpool_ksc_shape_drops_odd_row():
    out, arg = nn.maxpool2d_forward(np.zeros((15, 28, 64), np.float32))
    assert out.shape == arg.shape == (7, 14, 64)


@pytest.mark.parametrize("shape,window,stride", [((5, 6, 3), 2, 2), ((7, 7, 2), 3, 2),
                                                 ((6, 5, 1), 2, 1), ((9, 4, 2), 3, 3)])
def test_maxpool_matches_loops(shape, window, stride):
    x = rng.normal(size=shape)
    out, arg = nn.maxpool2d_forward(x, window, stride)
    ref_out, ref_arg = naive_maxpool(x, window, stride)
    np.testing.assert_array_equal(out, ref_out)
    np.testing.assert_array_equal(arg, ref_arg)


def test_maxpool_ties_match_loops():
    x = rng.integers(0, 2, size=(6, 6, 3)).astype(float)
    out, arg = nn.maxpool2d_forward(x)
    ref_out, ref_arg = naive_maxpool(x, 2, 2)
    np.testing.assert_array_equal(arg, ref_arg)


@settings(max_examples=50)
@given(arrays(np.float64, st.tuples(st.integers(2, 7), st.integers(2, 7), st.integers(1, 3)),
              elements=st.floats(-10, 10)),
       st.sampled_from([(2, 2), (2, 1), (3, 2)]))
def test_maxpool_routing(x, geometry):
    window, stride = geometry
    if min(x.shape[:2]) < window:
        return
    out, arg = nn.maxpool2d_forward(x, window, stride)
    flat = x.reshape(-1)
    np.testing.assert_array_equal(flat[arg], out)
    ref_out, _ = naive_maxpool(x, window, stride)
    assert np.all(out >= ref_out)  # max dominates every window element

    upstream = np.random.default_rng(0).normal(size=out.shape)
    dx = nn.maxpool2d_backward(upstream, arg, x.shape, window, stride).reshape(-1)
    expected = np.zeros_like(flat)
    np.add.at(expected, arg.reshape(-1), upstream.reshape(-1))
    np.testing.assert_allclose(dx, expected, atol=1e-12)
    mask = np.ones(flat.size, bool)
    mask[arg.reshape(-1)] = False
    assert not dx[mask].any()


def test_maxpool_backward_batched():
    x = rng.normal(size=(4, 6, 6, 3)).astype(np.float32)
    out, arg = nn.maxpool2d_forward(x)
    g = rng.normal(size=out.shape).astype(np.float32)
    dx = nn.maxpool2d_backward(g, arg, x.shape)
    assert dx.dtype == np.float32
    for i in range(4):
        o, a = nn.maxpool2d_forward(x[i])
        np.testing.assert_array_equal(a, arg[i])
        np.testing.assert_array_equal(dx[i], nn.maxpool2d_backward(g[i], a, x[i].shape))


# --- fully connected / relu ---

def test_fc_identity():
    x = rng.normal(size=5)
    np.testing.assert_array_equal(nn.fc_forward(x, LayerParams(np.eye(5), np.zeros(5))), x)


def test_fc_bias_only():
    out = nn.fc_forward(np.array([3.0, -2.0]), LayerParams(np.zeros((1, 2)), np.array([5.0])))
    np.testing.assert_array_equal(out, [5.0])


def test_fc_ksc_fc1_length():
    p = LayerParams(np.zeros((1024, 6272), np.float32), np.zeros(1024, np.float32))
    assert nn.fc_forward(np.zeros(6272, np.float32), p).shape == (1024,)


def test_fc_length_mismatch():
    with pytest.raises(DimensionError):
        nn.fc_forward(np.zeros(3), LayerParams(np.zeros((2, 4)), np.zeros(2)))


def test_fc_backward_matches_finite_differences():
    x = rng.normal(size=(3, 5))
    p = LayerParams(rng.normal(size=(4, 5)), rng.normal(size=4))
    up = rng.normal(size=(3, 4))
    f = lambda: np.sum(nn.fc_forward(x, p) * up)
    grads, dx = nn.fc_backward(up, x, p)
    np.testing.assert_allclose(grads.weights, numeric_grad(f, p.weights), rtol=1e-6)
    np.testing.assert_allclose(grads.biases, numeric_grad(f, p.biases), rtol=1e-6)
    np.testing.assert_allclose(dx, numeric_grad(f, x), rtol=1e-6)


def test_relu():
    np.testing.assert_array_equal(nn.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    pos = np.abs(rng.normal(size=10))
    np.testing.assert_array_equal(nn.relu(pos), pos)
    np.testing.assert_array_equal(nn.relu(-pos - 1), 0)


def test_relu_backward_masks():
    x = -np.abs(rng.normal(size=8)) - 0.1
    assert not nn.relu_backward(np.ones(8), x).any()
    x = np.array([-1.0, 2.0, 0.0, 3.0])
    np.testing.assert_array_equal(nn.relu_backward(np.full(4, 5.0), x), [0, 5, 0, 5])


# --- softmax / cross-entropy ---

def test_softmax_uniform():
    loss, probs = nn.softmax_xent(np.zeros(4), 2)
    np.testing.assert_allclose(probs, 0.25, atol=1e-15)
    assert abs(loss - math.log(4)) < 1e-12


def test_softmax_saturation():
    loss, probs = nn.softmax_xent(np.array([50.0, 0.0, 0.0]), 0)
    assert loss < 1e-15
    assert probs[0] > 1 - 1e-15


def test_softmax_label_range():
    with pytest.raises(LabelError):
        nn.softmax_xent(np.zeros(3), 3)
    with pytest.raises(LabelError):
        nn.softmax_xent(np.zeros(3), -1)


logit_vectors = arrays(np.float64, st.integers(2, 12), elements=st.floats(-15, 15))


@given(logit_vectors, st.floats(-100, 100), st.data())
def test_softmax_properties(z, shift, data):
    label = data.draw(st.integers(0, len(z) - 1))
    loss, probs = nn.softmax_xent(z, label)
    assert abs(probs.sum() - 1) < 1e-12
    assert np.all(probs > 0) and np.all(probs < 1)
    assert loss >= 0
    loss2, probs2 = nn.softmax_xent(z + shift, label)
    np.testing.assert_allclose(probs2, probs, atol=1e-12, rtol=0)
    assert abs(loss2 - loss) < 1e-12 * max(1.0, abs(loss)) + 1e-12


@given(st.integers(2, 50), st.floats(-50, 50))
def test_uniform_loss_is_log_c(c, value):
    loss, _ = nn.softmax_xent(np.full(c, value), 0)
    assert abs(loss - math.log(c)) < 1e-12


def test_softmax_backward_matches_finite_differences():
    z = rng.normal(size=5)
    g = nn.softmax_xent_backward(nn.softmax_xent(z, 3)[1], 3)
    num = numeric_grad(lambda: nn.softmax_xent(z, 3)[0], z)
    np.testing.assert_allclose(g, num, rtol=1e-7, atol=1e-10)

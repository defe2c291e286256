import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import grad_check, naive_conv3d, tensor
from tlbias.engine import (
    BatchNormState,
    Tape,
    Tensor,
    backward,
    batchnorm,
    concat_channels,
    conv3d,
    finite_diff_grad,
    inner,
    masked_mse,
    max_unpool3d,
    maxpool3d,
    no_grad,
    relu,
    sum_all,
)
from tlbias.errors import DimensionError, DomainError, StateError, UsageError


def delta_kernel():
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 1, 1, 1] = 1.0
    return w


# ---- Tensor / tape ----------------------------------------------------------

def test_tensor_dtype_and_grad_shape():
    t = Tensor(np.arange(6).reshape(2, 3), requires_grad=True)
    assert t.dtype == np.float32 and t.shape == (2, 3)
    backward(sum_all(t))
    assert t.grad.shape == t.shape and t.grad.dtype == t.dtype
    assert Tensor([1.0], dtype="f64").dtype == np.float64
    with pytest.raises(UsageError):
        Tensor([1], dtype="f16")


def test_backward_sum_gives_ones(rng):
    x = tensor(rng.standard_normal((2, 3, 4)), grad=True)
    backward(sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_accumulates_until_zeroed(rng):
    x = tensor(rng.standard_normal((3, 4)), grad=True)
    loss = inner(x, np.arange(12.0).reshape(3, 4))
    backward(loss)
    first = x.grad.copy()
    backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * first)
    x.zero_grad()
    backward(loss)
    np.testing.assert_array_equal(x.grad, first)


def test_backward_rejects_non_scalar():
    x = tensor(np.ones((1, 1, 2, 2, 2)), grad=True)
    with pytest.raises(UsageError):
        backward(relu(x))


def test_untracked_tensors_get_no_grad(rng):
    x = tensor(rng.standard_normal((1, 1, 4, 4, 4)), grad=True)
    w = tensor(rng.standard_normal((1, 1, 3, 3, 3)))
    b = tensor(np.zeros(1))
    backward(sum_all(conv3d(x, w, b)))
    assert x.grad is not None and w.grad is None and b.grad is None


def test_tape_is_topological_and_visits_each_node_once(rng):
    x = tensor(rng.standard_normal((1, 2, 2, 2, 2)), grad=True)
    y = relu(x)
    z = concat_channels(y, y)  # y is used twice
    loss = sum_all(z)
    tape = Tape.from_loss(loss)
    assert [n.op for n in tape.nodes] == ["relu", "concat_channels", "sum"]
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for inp in n.inputs:
            if inp.node is not None:
                assert pos[id(inp.node)] < pos[id(n)]
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, 2.0 * (x.data > 0))


def test_no_grad_records_nothing(rng):
    x = tensor(rng.standard_normal((1, 1, 2, 2, 2)), grad=True)
    with no_grad():
        y = relu(x)
    assert y.node is None and not y.requires_grad


# ---- conv3d -----------------------------------------------------------------

def test_conv_identity_kernel(backend):
    x = tensor(np.ones((1, 1, 3, 3, 3)))
    y = conv3d(x, tensor(delta_kernel()), tensor([0.0]))
    np.testing.assert_array_equal(y.data, x.data)


def test_conv_all_ones_kernel_center_and_corner(backend):
    x = np.ones((1, 1, 3, 3, 3))
    w = np.ones((1, 1, 3, 3, 3))
    y = conv3d(tensor(x), tensor(w), tensor([0.0])).data
    ref = naive_conv3d(x, w, np.zeros(1))
    assert ref[0, 0, 1, 1, 1] == 27 and ref[0, 0, 0, 0, 0] == 8
    np.testing.assert_array_equal(y, ref)


def test_conv_zero_weight_bias_only():
    x = tensor(np.random.default_rng(0).standard_normal((2, 3, 2, 2, 4)))
    y = conv3d(x, tensor(np.zeros((4, 3, 3, 3, 3))), tensor(np.full(4, 0.5)))
    np.testing.assert_array_equal(y.data, np.full((2, 4, 2, 2, 4), 0.5))


def test_conv_matches_nested_loop_oracle(rng, backend):
    x = rng.standard_normal((2, 3, 4, 3, 5))
    w = rng.standard_normal((2, 3, 3, 3, 3))
    b = rng.standard_normal(2)
    y = conv3d(tensor(x), tensor(w), tensor(b)).data
    np.testing.assert_allclose(y, naive_conv3d(x, w, b), rtol=1e-12, atol=1e-12)


def test_conv_shape_errors_name_axis():
    x = tensor(np.zeros((1, 2, 4, 4, 4)))
    with pytest.raises(DimensionError, match="axis C"):
        conv3d(x, tensor(np.zeros((1, 3, 3, 3, 3))), tensor([0.0]))
    with pytest.raises(DimensionError):
        conv3d(tensor(np.zeros((2, 4, 4, 4))), tensor(np.zeros((1, 1, 3, 3, 3))), tensor([0.0]))


@settings(max_examples=25, deadline=None)
@given(
    a=st.floats(-3, 3), b=st.floats(-3, 3),
    x=arrays(np.float32, (1, 2, 4, 2, 4), elements=st.floats(-1, 1, width=32)),
    y=arrays(np.float32, (1, 2, 4, 2, 4), elements=st.floats(-1, 1, width=32)),
)
def test_conv_linearity_f32(a, b, x, y):
    w = Tensor(np.random.default_rng(7).standard_normal((3, 2, 3, 3, 3)), dtype="f32")
    zero = Tensor(np.zeros(3), dtype="f32")
    lhs = conv3d(Tensor(np.float32(a) * x + np.float32(b) * y), w, zero).data.astype(np.float64)
    rhs = (a * conv3d(Tensor(x), w, zero).data.astype(np.float64)
           + b * conv3d(Tensor(y), w, zero).data.astype(np.float64))
    scale = np.abs(w.data).sum() * (abs(a) + abs(b) + 1e-3)
    assert np.max(np.abs(lhs - rhs)) <= 1e-5 * scale


def test_conv_gradients_match_finite_differences(rng, backend):
    x = tensor(rng.standard_normal((2, 2, 2, 4, 2)), grad=True)
    w = tensor(rng.standard_normal((3, 2, 3, 3, 3)) * 0.3, grad=True)
    b = tensor(rng.standard_normal(3), grad=True)
    probe = rng.standard_normal((2, 3, 2, 4, 2))
    grad_check(lambda: inner(conv3d(x, w, b), probe), [x, w, b], rng)


def test_conv_masked_mse_gradients(rng):
    x = tensor(rng.standard_normal((1, 2, 4, 4, 2)), grad=True)
    w = tensor(rng.standard_normal((1, 2, 3, 3, 3)) * 0.3, grad=True)
    b = tensor(rng.standard_normal(1), grad=True)
    target = rng.standard_normal((1, 1, 4, 4, 2))
    mask = rng.random((1, 1, 4, 4, 2)) > 0.3
    grad_check(lambda: masked_mse(conv3d(x, w, b), target, mask), [x, w, b], rng)


# ---- pooling ----------------------------------------------------------------

def test_maxpool_single_window(backend):
    x = tensor(np.arange(1, 9, dtype=np.float64).reshape(1, 1, 2, 2, 2))
    y, idx = maxpool3d(x)
    assert y.data.ravel().tolist() == [8.0]
    assert idx.offsets.ravel().tolist() == [7]


def test_maxpool_ties_take_lowest_offset(backend):
    y, idx = maxpool3d(tensor(np.full((1, 1, 2, 2, 2), 2.0)))
    assert y.data.ravel().tolist() == [2.0] and idx.offsets.ravel().tolist() == [0]


def test_maxpool_against_window_oracle(backend):
    h, w, d = np.meshgrid(np.arange(4), np.arange(4), np.arange(4), indexing="ij")
    x = (h + w + d).astype(np.float64)[None, None]
    y, idx = maxpool3d(tensor(x))
    expect = np.empty((2, 2, 2))
    for a in range(2):
        for b in range(2):
            for c in range(2):
                expect[a, b, c] = x[0, 0, 2 * a:2 * a + 2, 2 * b:2 * b + 2, 2 * c:2 * c + 2].max()
    np.testing.assert_array_equal(y.data[0, 0], expect)
    assert y.data.size == 8


def test_maxpool_odd_extent():
    with pytest.raises(DimensionError, match="axis W"):
        maxpool3d(tensor(np.zeros((1, 1, 2, 3, 2))))


def test_unpool_places_value_at_offset(backend):
    x, idx = maxpool3d(tensor(np.arange(1, 9, dtype=np.float64).reshape(1, 1, 2, 2, 2)))
    out = max_unpool3d(tensor([[[[[8.0]]]]]), idx, (1, 1, 2, 2, 2)).data.ravel()
    assert out.tolist() == [0, 0, 0, 0, 0, 0, 0, 8.0]


def test_unpool_round_trip_structure(rng, backend):
    y = rng.standard_normal((2, 3, 4, 6, 2))
    p, idx = maxpool3d(tensor(y))
    u = max_unpool3d(p, idx, y.shape).data
    hit = np.zeros(y.shape, bool)
    flat = hit.reshape(6, -1)
    for r, offs in enumerate(idx.offsets.reshape(6, -1)):
        flat[r, offs] = True
    np.testing.assert_array_equal(u[hit], y[hit])
    assert np.all(u[~hit] == 0)


def test_unpool_gradient_is_ones(rng, backend):
    y = rng.standard_normal((1, 2, 4, 4, 2))
    p, idx = maxpool3d(tensor(y))
    x = tensor(p.data, grad=True)
    backward(sum_all(max_unpool3d(x, idx, y.shape)))
    num = finite_diff_grad(lambda t: sum_all(max_unpool3d(t, idx, y.shape)), x)
    np.testing.assert_allclose(num, 1.0, rtol=1e-9)
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


def test_unpool_inconsistent_shapes():
    _, idx = maxpool3d(tensor(np.zeros((1, 1, 4, 4, 4))))
    x = tensor(np.zeros((1, 1, 2, 2, 2)))
    with pytest.raises(DimensionError):
        max_unpool3d(x, idx, (1, 1, 4, 4, 6))
    with pytest.raises(DimensionError):
        max_unpool3d(tensor(np.zeros((1, 1, 2, 2, 1))), idx, (1, 1, 4, 4, 2))


def test_pool_unpool_gradients(rng, backend):
    x = tensor(rng.standard_normal((2, 2, 4, 2, 4)), grad=True)
    probe = rng.standard_normal((2, 2, 4, 2, 4))

    def loss():
        p, idx = maxpool3d(x)
        return inner(max_unpool3d(relu(p), idx, x.shape), probe)

    grad_check(loss, [x], rng)


# ---- batchnorm --------------------------------------------------------------

def _bn_params(c):
    return tensor(np.ones(c), grad=True), tensor(np.zeros(c), grad=True)


def test_batchnorm_constant_channel_gives_zero():
    g, b = _bn_params(2)
    y = batchnorm(tensor(np.full((2, 2, 2, 2, 2), 3.0)), g, b, BatchNormState())
    np.testing.assert_array_equal(y.data, 0.0)


def test_batchnorm_plus_minus_one():
    x = np.array([-1.0, 1.0]).reshape(2, 1, 1, 1, 1)
    g, b = _bn_params(1)
    y = batchnorm(tensor(x), g, b, BatchNormState()).data.ravel()
    expect = 1.0 / np.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(y, [-expect, expect], rtol=1e-15)
    assert abs(y[1] - 0.999995) < 1e-6


def test_batchnorm_eval_identity_with_unit_stats(rng):
    x = rng.standard_normal((2, 3, 2, 2, 2))
    g, b = _bn_params(3)
    st_ = BatchNormState(np.zeros(3), np.ones(3))
    y = batchnorm(tensor(x), g, b, st_, "eval").data
    np.testing.assert_allclose(y, x / np.sqrt(1 + 1e-5), rtol=1e-15)
    np.testing.assert_allclose(y, x, rtol=1e-5)


def test_batchnorm_eval_requires_running_stats():
    g, b = _bn_params(1)
    with pytest.raises(StateError):
        batchnorm(tensor(np.zeros((1, 1, 2, 2, 2))), g, b, BatchNormState(), "eval")


def test_batchnorm_train_needs_two_values():
    g, b = _bn_params(1)
    with pytest.raises(UsageError):
        batchnorm(tensor(np.zeros((1, 1, 1, 1, 1))), g, b, BatchNormState())


def test_batchnorm_running_stats_update(rng):
    x = rng.standard_normal((4, 2, 2, 2, 2)) * 3 + 1
    g, b = _bn_params(2)
    s = BatchNormState.initialized(2, np.float64)
    batchnorm(tensor(x), g, b, s)
    m = x.size // 2
    mean = x.mean(axis=(0, 2, 3, 4))
    var = x.var(axis=(0, 2, 3, 4))
    np.testing.assert_allclose(s.running_mean, 0.1 * mean, rtol=1e-12)
    np.testing.assert_allclose(s.running_var, 0.9 + 0.1 * var * m / (m - 1), rtol=1e-12)


def test_batchnorm_output_moments(rng):
    x = rng.standard_normal((3, 4, 4, 2, 2)) * 5 - 2
    g, b = _bn_params(4)
    y = batchnorm(tensor(x), g, b, BatchNormState()).data
    assert np.all(np.abs(y.mean(axis=(0, 2, 3, 4))) <= 1e-6)
    assert np.all(np.abs(y.var(axis=(0, 2, 3, 4)) - 1) <= 1e-4)


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_gradients(rng, mode):
    x = tensor(rng.standard_normal((2, 3, 2, 2, 2)), grad=True)
    g = tensor(rng.standard_normal(3), grad=True)
    b = tensor(rng.standard_normal(3), grad=True)
    probe = rng.standard_normal((2, 3, 2, 2, 2))
    state = BatchNormState(rng.standard_normal(3), rng.random(3) + 0.5)
    # fresh state each call so train-mode updates don't feed back into eval stats
    grad_check(lambda: inner(batchnorm(x, g, b, BatchNormState(state.running_mean.copy(),
                                                                state.running_var.copy()),
                                       mode), probe), [x, g, b], rng)


# ---- relu / concat / masked mse ---------------------------------------------

def test_relu_values_and_subgradient():
    x = tensor([-1.0, 0.0, 2.0], grad=True)
    y = relu(x)
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    backward(sum_all(y))
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_relu_all_negative():
    x = tensor(-np.arange(1.0, 5.0), grad=True)
    y = relu(x)
    backward(sum_all(y))
    assert not y.data.any() and not x.grad.any()


def test_relu_gradient_away_from_zero(rng):
    x = tensor(rng.standard_normal((2, 3)) + np.sign(rng.standard_normal((2, 3))) * 0.1,
               grad=True)
    probe = rng.standard_normal((2, 3))
    grad_check(lambda: inner(relu(x), probe), [x], rng)


def test_concat_layout_and_slice_round_trip(rng):
    a = rng.standard_normal((2, 1, 2, 2, 2))
    b = rng.standard_normal((2, 3, 2, 2, 2))
    y = concat_channels(tensor(a), tensor(b)).data
    np.testing.assert_array_equal(y[:, :1], a)
    np.testing.assert_array_equal(y[:, 1:], b)


def test_concat_gradient_splits(rng):
    a = tensor(rng.standard_normal((1, 1, 2, 2, 2)), grad=True)
    b = tensor(rng.standard_normal((1, 2, 2, 2, 2)), grad=True)
    grad_check(lambda: sum_all(concat_channels(a, b)), [a, b], rng)
    a.grad = b.grad = None
    backward(sum_all(concat_channels(a, b)))
    assert np.all(a.grad == 1) and np.all(b.grad == 1)


def test_concat_spatial_mismatch():
    with pytest.raises(DimensionError, match="axis D"):
        concat_channels(tensor(np.zeros((1, 1, 2, 2, 2))), tensor(np.zeros((1, 1, 2, 2, 4))))


def test_masked_mse_basic():
    p = tensor([1.0, 2.0])
    assert masked_mse(p, np.zeros(2), np.array([True, False])).item() == 1.0
    assert masked_mse(p, p.data.copy(), np.array([True, True])).item() == 0.0


def test_masked_mse_empty_mask():
    with pytest.raises(DomainError):
        masked_mse(tensor([1.0]), np.zeros(1), np.array([False]))


def test_masked_mse_ignores_masked_out_positions(rng):
    p = rng.standard_normal((2, 1, 4, 4, 2))
    t = rng.standard_normal(p.shape)
    m = rng.random(p.shape) > 0.5
    base = masked_mse(tensor(p), t, m).item()
    p2, t2 = p.copy(), t.copy()
    p2[~m] = 1e30
    t2[~m] = np.nan
    assert masked_mse(tensor(p2), t2, m).item() == base


# ---- finite differences -----------------------------------------------------

def test_finite_diff_sum_of_squares():
    x = tensor([1.0, 2.0])
    g = finite_diff_grad(lambda t: float(np.sum(t.data ** 2)), x)
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)


def test_finite_diff_constant():
    g = finite_diff_grad(lambda t: 3.0, tensor(np.ones(4)))
    np.testing.assert_array_equal(g, np.zeros(4))


def test_finite_diff_restores_input(rng):
    x = tensor(rng.standard_normal(5))
    before = x.data.copy()
    finite_diff_grad(lambda t: float(np.sum(np.sin(t.data))), x)
    np.testing.assert_array_equal(x.data, before)


def test_ops_are_deterministic(rng):
    x = rng.standard_normal((2, 4, 4, 4, 2)).astype(np.float32)
    w = rng.standard_normal((3, 4, 3, 3, 3)).astype(np.float32)
    b = np.zeros(3, np.float32)
    r1 = conv3d(Tensor(x), Tensor(w), Tensor(b)).data
    r2 = conv3d(Tensor(x), Tensor(w), Tensor(b)).data
    assert r1.tobytes() == r2.tobytes()

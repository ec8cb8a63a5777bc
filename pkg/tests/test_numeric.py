import math
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from _gradsuite import OP_NAMES, check_op
from varifocal.numeric import (Adam, AdamState, GraphError, NonFiniteError, NumericError, Parameter, ShapeError,
                               Tensor, adam_step, no_grad, ops, precision, step_decay_lr)
from varifocal.numeric.nn import BatchNorm2d, Conv2d, Linear
from varifocal.numeric.tensor import default_dtype

finite = st.floats(-50, 50, allow_nan=False, width=64)


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# -- finite differences --------------------------------------------------------


@pytest.mark.parametrize("name", OP_NAMES)
def test_backward_matches_central_differences(name):
    assert max(check_op(name, seed) for seed in range(5)) <= 1e-4


# -- tensor / graph semantics --------------------------------------------------------


def test_sum_gradient_is_ones():
    x = T(np.arange(6.0).reshape(2, 3), grad=True)
    ops.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_zero_times_anything_gives_zero_gradient():
    x = T([1.0, -2.0, 3.0], grad=True)
    ops.sum(ops.mul(ops.sigmoid(x), T(0.0))).backward()
    np.testing.assert_array_equal(x.grad, np.zeros(3))


def test_second_backward_without_new_forward_fails():
    x = T([1.0, 2.0], grad=True)
    loss = ops.sum(ops.mul(x, x))
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_non_scalar_backward_needs_explicit_gradient():
    x = T([1.0, 2.0], grad=True)
    y = ops.mul(x, T(3.0))
    with pytest.raises(GraphError):
        y.backward()
    y.backward(np.array([1.0, 1.0]))
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_shared_subexpression_accumulates():
    x = T([2.0], grad=True)
    y = ops.add(x, x)
    ops.sum(ops.mul(y, x)).backward()  # 2x^2
    np.testing.assert_allclose(x.grad, [8.0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_results_raise():
    with pytest.raises(NonFiniteError):
        ops.mul(T([np.inf]), T([0.0]))
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1e308])) * Tensor(np.array([1e308]))


def test_no_grad_records_nothing():
    x = T([1.0], grad=True)
    with no_grad():
        y = ops.mul(x, x)
    assert not y.requires_grad


def test_precision_context_is_thread_local():
    seen = {}

    def other():
        seen["dtype"] = default_dtype()

    with precision(np.float64):
        th = threading.Thread(target=other)
        th.start()
        th.join()
        assert default_dtype() == np.float64
    assert seen["dtype"] == np.float32
    assert default_dtype() == np.float32


def test_parameter_grad_matches_shape_and_resets():
    p = Parameter(np.ones((2, 3)))
    assert p.grad.shape == p.shape
    ops.sum(ops.mul(p, p)).backward()
    assert np.any(p.grad)
    p.zero_grad()
    assert not np.any(p.grad) and p.grad.shape == p.shape


# -- conv2d ---------------------------------------------------------------------------


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((3, 5, 5))
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    np.testing.assert_array_equal(ops.conv2d(T(x), T(w), T(np.zeros(3))).data, x)


def test_conv_zero_weights_give_zero_output_shape():
    out = ops.conv2d(T(np.ones((2, 7, 6))), T(np.zeros((4, 2, 3, 3))), T(np.zeros(4)), stride=2, pad=1)
    assert out.shape == (4, 4, 3)
    assert not out.data.any()


def test_conv_all_ones_3x3_gives_9():
    out = ops.conv2d(T(np.ones((1, 3, 3))), T(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1) and out.data.item() == 9.0


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.conv2d(T(np.ones((2, 4, 4))), T(np.ones((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        ops.conv2d(T(np.ones((1, 2, 2))), T(np.ones((1, 1, 3, 3))))


@given(st.integers(1, 3), st.integers(1, 2), st.integers(0, 2), st.integers(3, 9))
def test_conv_output_extent(k, stride, pad, h):
    out = ops.conv2d(T(np.ones((1, h, h + 1))), T(np.ones((2, 1, k, k))), stride=stride, pad=pad)
    assert out.shape == (2, (h + 2 * pad - k) // stride + 1, (h + 1 + 2 * pad - k) // stride + 1)


def test_conv_is_linear_in_input():
    rng = np.random.default_rng(3)
    a, b, w = rng.standard_normal((2, 5, 5)), rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    lhs = ops.conv2d(T(2 * a + b), T(w), pad=1).data
    rhs = 2 * ops.conv2d(T(a), T(w), pad=1).data + ops.conv2d(T(b), T(w), pad=1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_conv_matches_scipy_correlate():
    from scipy.signal import correlate2d

    rng = np.random.default_rng(4)
    x, w = rng.standard_normal((1, 6, 7)), rng.standard_normal((1, 1, 3, 3))
    expected = correlate2d(x[0], w[0, 0], mode="valid")
    np.testing.assert_allclose(ops.conv2d(T(x), T(w)).data[0], expected, atol=1e-12)


# -- batch norm -------------------------------------------------------------------------


def test_bn_constant_input_gives_zero():
    out = ops.batch_norm2d(T(np.full((2, 1, 3, 3), 4.0)), T([1.0]), T([0.0]))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_bn_zero_gamma_emits_beta():
    x = np.random.default_rng(0).standard_normal((2, 2, 3, 3))
    out = ops.batch_norm2d(T(x), T([0.0, 0.0]), T([1.5, -2.0]))
    np.testing.assert_allclose(out.data[:, 0], 1.5)
    np.testing.assert_allclose(out.data[:, 1], -2.0)


def test_bn_two_element_channel():
    x = np.array([0.0, 2.0]).reshape(2, 1, 1, 1)
    out = ops.batch_norm2d(T(x), T([1.0]), T([0.0]), eps=1e-12)
    np.testing.assert_allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-9)


def test_bn_normalizes_and_tracks_running_stats():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 2.0, (8, 2, 4, 4))
    rm, rv = np.zeros(2), np.ones(2)
    out = ops.batch_norm2d(T(x), T([1.0, 1.0]), T([0.0, 0.0]), rm, rv, momentum=0.1)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    m = x.shape[0] * 16
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_bn_errors():
    x = T(np.ones((1, 1, 1, 1)))
    with pytest.raises(ValueError):
        ops.batch_norm2d(T(np.ones((2, 1, 1, 1))), T([1.0]), T([0.0]), eps=0.0)
    with pytest.raises(ShapeError):
        ops.batch_norm2d(x, T([1.0]), T([0.0]), training=True)
    with pytest.raises(NumericError):
        ops.batch_norm2d(x, T([1.0]), T([0.0]), training=False)
    bn = BatchNorm2d(1).eval()
    with pytest.raises(NumericError):
        bn(T(np.ones((2, 1, 2, 2))))


# -- relu / pooling / fc / softmax / resize -----------------------------------------------


def test_relu_examples():
    np.testing.assert_array_equal(ops.relu(T([-3.0, -1.0])).data, [0.0, 0.0])
    np.testing.assert_array_equal(ops.relu(T([1.0, 5.0])).data, [1.0, 5.0])
    x = T([-1.0, 0.0, 2.0], grad=True)
    out = ops.relu(x)
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])
    ops.sum(out).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])  # subgradient 0 at 0


def test_max_pool_examples():
    np.testing.assert_array_equal(ops.max_pool2d(T(np.full((1, 4, 4), 7.0)), 2).data, np.full((1, 2, 2), 7.0))
    assert ops.max_pool2d(T(np.array([[[1.0, 2.0], [3.0, 4.0]]])), 2).data.item() == 4.0
    assert ops.max_pool2d(T(np.zeros((640, 32, 32), dtype=np.float32)), 8).shape == (640, 4, 4)
    with pytest.raises(ShapeError):
        ops.max_pool2d(T(np.zeros((1, 2, 2))), 3)


def test_max_pool_tie_goes_to_first_cell():
    x = T(np.ones((1, 2, 2)), grad=True)
    ops.sum(ops.max_pool2d(x, 2)).backward()
    np.testing.assert_array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


@given(arrays(np.float64, (2, 6, 6), elements=finite), st.sampled_from([(2, 2), (3, 3), (3, 2), (2, 1)]))
def test_max_pool_conserves_gradient_mass(x, ks):
    k, s = ks
    t = T(x, grad=True)
    out = ops.max_pool2d(t, k, s)
    g = np.random.default_rng(0).standard_normal(out.shape)
    out.backward(g)
    assert t.grad.sum() == pytest.approx(g.sum(), abs=1e-9)


def test_fully_connected_examples():
    x = T([3.0, 4.0])
    np.testing.assert_array_equal(ops.fully_connected(x, T(np.eye(2)), T([0.0, 0.0])).data, [3.0, 4.0])
    np.testing.assert_array_equal(ops.fully_connected(x, T(np.zeros((2, 2))), T([5.0, 6.0])).data, [5.0, 6.0])
    np.testing.assert_array_equal(ops.fully_connected(x, T([[1.0, 2.0]]), T([1.0])).data, [12.0])
    with pytest.raises(ShapeError):
        ops.fully_connected(T([1.0, 2.0, 3.0]), T([[1.0, 2.0]]))


def test_softmax_examples():
    np.testing.assert_allclose(ops.softmax(T(np.zeros(24))).data, np.full(24, 1 / 24))
    np.testing.assert_allclose(ops.softmax(T([0.0, 1000.0])).data, [0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(ops.softmax(T([0.0, math.log(3)])).data, [0.25, 0.75])


@given(arrays(np.float64, (3, 7), elements=finite), st.floats(-100, 100))
def test_softmax_sums_to_one_and_is_shift_invariant(x, c):
    s = ops.softmax(T(x)).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(ops.softmax(T(x + c)).data, s, atol=1e-9)
    np.testing.assert_array_equal(np.argmax(ops.softmax(T(x + c)).data, 1), np.argmax(s, 1))


def test_bilinear_examples():
    x = np.random.default_rng(0).standard_normal((2, 5, 4))
    np.testing.assert_array_equal(ops.bilinear_resize(T(x), 5, 4).data, x)
    np.testing.assert_allclose(ops.bilinear_resize(T(np.full((1, 3, 3), 2.5)), 7, 2).data, 2.5)
    np.testing.assert_allclose(ops.bilinear_resize(T([[[0.0, 1.0]]]), 1, 3).data, [[[0.0, 0.5, 1.0]]])
    with pytest.raises(ValueError):
        ops.bilinear_resize(T(x), 0, 3)


@given(arrays(np.float64, (1, 4, 5), elements=finite), st.integers(1, 9), st.integers(1, 9))
def test_bilinear_stays_within_input_range(x, h, w):
    out = ops.bilinear_resize(T(x), h, w).data
    assert out.min() >= x.min() - 1e-9 and out.max() <= x.max() + 1e-9


# -- Adam -------------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_parameter():
    p = Parameter(np.array([1.0, -2.0]))
    s = AdamState.for_param(p, learning_rate=0.1)
    adam_step(p, s)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_magnitude_is_lr():
    p = Parameter(np.array([1.0]))
    p.grad = np.array([1.0])
    s = AdamState.for_param(p, learning_rate=0.1)
    adam_step(p, s)
    assert p.data[0] == pytest.approx(0.9, abs=1e-6)
    assert s.step == 1 and np.all(s.v >= 0) and s.m.shape == p.shape


def test_adam_requires_state():
    p = Parameter(np.array([1.0]))
    with pytest.raises(ValueError, match="state"):
        adam_step(p, None)


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(5)
    p = Parameter(rng.standard_normal(4))
    ref = p.data.copy()
    m = v = np.zeros(4)
    opt = Adam([p], lr=1e-2)
    for t in range(1, 6):
        g = rng.standard_normal(4)
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_adam_skips_frozen_parameters():
    a, b = Parameter(np.ones(2)), Parameter(np.ones(2))
    b.trainable = False
    assert Adam([a, b]).params == [a]


@pytest.mark.parametrize("epoch,lr", [(0, 1e-4), (9, 1e-4), (10, 9e-5), (25, 8.1e-5)])
def test_step_decay(epoch, lr):
    assert step_decay_lr(1e-4, epoch) == pytest.approx(lr, rel=1e-12)


# -- modules ----------------------------------------------------------------------------


def test_module_state_roundtrip_includes_running_stats():
    bn = BatchNorm2d(2)
    bn(T(np.random.default_rng(0).standard_normal((4, 2, 3, 3))))
    conv, fc = Conv2d(2, 3, 3, pad=1), Linear(4, 2)
    for mod in (bn, conv, fc):
        state = mod.state_dict()
        other = type(mod)(*((2,) if mod is bn else (2, 3, 3) if mod is conv else (4, 2)))
        other.load_state_dict(state)
        for k, v in other.state_dict().items():
            np.testing.assert_array_equal(v, state[k])
    assert "running_mean" in bn.state_dict() and int(bn.state_dict()["num_batches_tracked"][0]) == 1


def test_determinism_same_inputs_bit_identical():
    rng = np.random.default_rng(9)
    x, w = rng.standard_normal((2, 3, 8, 8)).astype(np.float32), rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = ops.conv2d(Tensor(x), Tensor(w), pad=1).data
    b = ops.conv2d(Tensor(x), Tensor(w), pad=1).data
    assert a.tobytes() == b.tobytes()

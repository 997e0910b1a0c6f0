import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from leno import tensor as T
from leno.errors import ConfigError, ContractError, DimensionError, DomainError, NonFiniteError
from leno.tensor import Tensor
from oracles import bilinear_loops, conv2d_loops


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- conv2d --------------------------------------------------------------------

def test_conv_all_ones_matches_loop_oracle():
    x = np.ones((1, 3, 3))
    w = np.ones((1, 1, 3, 3))
    b = np.zeros(1)
    expected = conv2d_loops(x, w, b, 1, 1)
    assert expected[0, 1, 1] == 9 and expected[0, 0, 0] == 4
    out = T.conv2d(t64(x), t64(w), t64(b), 1, 1).data
    np.testing.assert_array_equal(out, expected)


def test_conv_identity_kernel(rng):
    x = rng.random((2, 5, 5))
    w = np.zeros((2, 2, 1, 1))
    w[0, 0] = w[1, 1] = 1
    out = T.conv2d(t64(x), t64(w), t64(np.zeros(2))).data
    np.testing.assert_array_equal(out, x)


def test_conv_zero_weight_gives_bias(rng):
    out = T.conv2d(t64(rng.random((3, 6, 6))), t64(np.zeros((2, 3, 3, 3))), t64([0.5, -2.0]), 2, 1).data
    assert out.shape == (2, 3, 3)
    assert np.all(out[0] == 0.5) and np.all(out[1] == -2.0)


@settings(max_examples=25, deadline=None)
@given(
    c=st.integers(1, 3), o=st.integers(1, 3), h=st.integers(3, 7), w=st.integers(3, 7),
    k=st.sampled_from([1, 3]), stride=st.sampled_from([1, 2]), pad=st.integers(0, 1), seed=st.integers(0, 999),
)
def test_conv_matches_loops(c, o, h, w, k, stride, pad, seed):
    r = np.random.default_rng(seed)
    x, wt, b = r.standard_normal((c, h, w)), r.standard_normal((o, c, k, k)), r.standard_normal(o)
    out = T.conv2d(t64(x), t64(wt), t64(b), stride, pad).data
    np.testing.assert_allclose(out, conv2d_loops(x, wt, b, stride, pad), atol=1e-12)
    assert out.shape[-2:] == ((h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)


def test_conv_batch_equals_per_image(rng):
    x = rng.standard_normal((3, 2, 6, 6))
    w, b = t64(rng.standard_normal((4, 2, 3, 3))), t64(rng.standard_normal(4))
    batched = T.conv2d(t64(x), w, b, 2, 1).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], T.conv2d(t64(x[i]), w, b, 2, 1).data, atol=1e-13)


@pytest.mark.parametrize("bad", [
    dict(x=(2, 4, 4), w=(1, 3, 3, 3)),  # channel mismatch
    dict(x=(2, 4, 4), w=(1, 2, 2, 2)),  # even kernel
    dict(x=(2, 1, 1), w=(1, 2, 5, 5)),  # too small
])
def test_conv_dimension_errors(bad):
    with pytest.raises(DimensionError):
        T.conv2d(t64(np.zeros(bad["x"])), t64(np.zeros(bad["w"])), t64(np.zeros(bad["w"][0])))
    with pytest.raises(DimensionError):
        T.conv2d(t64(np.zeros((2, 5, 5))), t64(np.zeros((1, 2, 3, 3))), t64([0.0]), stride=3)


# -- small primitives ----------------------------------------------------------

def test_relu_sigmoid_maxpool_examples():
    np.testing.assert_array_equal(T.relu(t64([-1, 0, 2])).data, [0, 0, 2])
    np.testing.assert_array_equal(T.maxpool2(t64([[[1, 2], [3, 4]]])).data, [[[4]]])
    assert T.sigmoid(t64(0.0)).data == 0.5


def test_sigmoid_stays_open_interval_in_float32():
    out = T.sigmoid(Tensor(np.array([-200, -30, 30, 200], dtype=np.float32))).data
    assert np.all(out > 0) and np.all(out < 1)


def test_maxpool_odd_dims():
    with pytest.raises(DimensionError):
        T.maxpool2(t64(np.zeros((1, 3, 4))))


def test_maxpool_tie_routes_to_first():
    x = t64(np.ones((1, 2, 2)), grad=True)
    T.backward(T.sum_all(T.maxpool2(x)))
    np.testing.assert_array_equal(x.grad, [[[1, 0], [0, 0]]])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 4, 6), elements=st.floats(-5, 5)), arrays(np.float64, (2, 2, 3), elements=st.floats(-3, 3)))
def test_maxpool_backward_conserves_gradient(x, g):
    xt = t64(x, grad=True)
    out = T.maxpool2(xt)
    T.backward(T.sum_all(T.mul(out, t64(g))))
    assert np.isclose(xt.grad.sum(), g.sum(), rtol=0, atol=1e-12)
    assert np.count_nonzero(xt.grad) <= g.size


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-1e6, 1e6)), arrays(np.float64, (3, 4), elements=st.floats(-1e6, 1e6)))
def test_add_mul_commute_bitwise(a, b):
    np.testing.assert_array_equal(T.add(t64(a), t64(b)).data, T.add(t64(b), t64(a)).data)
    np.testing.assert_array_equal(T.mul(t64(a), t64(b)).data, T.mul(t64(b), t64(a)).data)


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        T.add(t64(np.zeros(3)), t64(np.zeros(4)))
    with pytest.raises(DimensionError):
        T.mul(t64(np.zeros((2, 3))), t64(np.zeros((3, 2))))


def test_batch_broadcast_gradient_sums_over_batch(rng):
    a = t64(rng.random((4, 2, 3)), grad=True)
    b = t64(rng.random((2, 3)), grad=True)
    T.backward(T.sum_all(T.add(a, b)))
    np.testing.assert_array_equal(b.grad, np.full((2, 3), 4.0))


def test_upsample_matches_loop_oracle(rng):
    x = rng.random((2, 3, 5))
    for hh, ww in [(6, 10), (12, 7), (3, 5)]:
        np.testing.assert_allclose(T.upsample_bilinear(t64(x), hh, ww).data, bilinear_loops(x, hh, ww), atol=1e-12)


def test_mean_channels_example():
    out = T.mean_channels(t64([[[1, 3]], [[3, 5]]])).data
    np.testing.assert_array_equal(out, [[[2, 4]]])


# -- losses --------------------------------------------------------------------

def test_bce_at_half_is_ln2(rng):
    p = t64(np.full((1, 4, 4), 0.5))
    assert T.bce(p, t64(rng.random((1, 4, 4)))).item() == pytest.approx(np.log(2), abs=1e-12)


def test_bce_target_domain():
    with pytest.raises(DomainError):
        T.bce(t64([0.5, 0.5]), t64([0.0, 1.5]))


def test_bce_clamps_saturated_predictions():
    val = T.bce(t64([0.0, 1.0]), t64([0.0, 1.0])).item()
    assert val == pytest.approx(-np.log(1 - 1e-7), rel=1e-9)


def test_mse_zero_when_equal(rng):
    p = rng.random(5)
    assert T.mse(t64(p), t64(p)).item() == 0.0


# -- backward / sgd ------------------------------------------------------------

def test_backward_square_sum():
    x = t64([1.0, 2.0], grad=True)
    T.backward(T.sum_all(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_constant_gives_zero():
    x = t64([1.0, 2.0], grad=True)
    y = T.scale(x, 0.0)
    T.backward(T.sum_all(y))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_fan_out_accumulates():
    x = t64([3.0], grad=True)
    # x used three times: d(x + x + x)/dx = 3
    T.backward(T.sum_all(T.add(T.add(x, x), x)))
    assert x.grad[0] == 3.0


def test_backward_requires_scalar():
    x = t64([1.0, 2.0], grad=True)
    with pytest.raises(ContractError):
        T.backward(T.mul(x, x))


def test_no_grad_skips_graph():
    x = t64([1.0], grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y.is_leaf


def test_nonfinite_result_raises():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        T.scale(t64([1e308]), 10.0)


def test_sgd_step():
    p = t64([1.0], grad=True)
    T.sgd_step([p], 0.1, [np.array([2.0])])
    assert p.data[0] == pytest.approx(0.8)
    q = t64([1.5], grad=True)
    T.sgd_step([q], 0.1, [np.zeros(1)])
    assert q.data[0] == 1.5
    with pytest.raises(ConfigError):
        T.sgd_step([p], 0.0)


def test_sgd_skips_tensor_without_grad():
    frozen, live = t64([1.0]), t64([1.0], grad=True)
    live.grad = np.array([1.0])
    T.sgd_step([frozen, live], 0.5)
    assert frozen.data[0] == 1.0 and live.data[0] == 0.5


# -- gradcheck -----------------------------------------------------------------

def test_gradcheck_conv(rng):
    x = t64(rng.standard_normal((2, 4, 4)))
    w = t64(rng.standard_normal((3, 2, 3, 3)))
    b = t64(rng.standard_normal(3))
    assert T.gradcheck(lambda x, w, b: T.conv2d(x, w, b, 1, 1), [x, w, b]) < 1e-4
    assert T.gradcheck(lambda x, w, b: T.conv2d(x, w, b, 2, 1), [x, w, b]) < 1e-4


def test_gradcheck_relu_away_from_kink(rng):
    x = rng.uniform(0.1, 2, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
    assert T.gradcheck(T.relu, [t64(x)]) < 1e-6


def test_gradcheck_detects_wrong_gradient():
    def bad(x):
        out = T.mul(x, x)
        out._backward = lambda g: (g * 3.0, g * 3.0)  # wrong on purpose
        return out

    assert T.gradcheck(bad, [t64([1.0, 2.0])]) > 0.1


def test_forward_deterministic(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w, b = rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    a1 = T.conv2d(t64(x), t64(w), t64(b), 1, 1).data
    a2 = T.conv2d(t64(x), t64(w), t64(b), 1, 1).data
    assert a1.tobytes() == a2.tobytes()

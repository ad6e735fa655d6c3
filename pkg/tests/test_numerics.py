import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hyda import numerics as nm
from hyda.errors import ConfigError, NumericError, ShapeError

from conftest import naive_conv3d, naive_pointwise


def T(a, grad=False):
    return nm.Tensor(a, requires_grad=grad)


def test_pointwise_scalar():
    x = np.full((1, 1, 1, 1, 1), 2.0)
    assert nm.pointwise_conv3d(T(x), T([[3.0]])).data.item() == 6.0


def test_pointwise_identity():
    x = np.random.default_rng(0).standard_normal((2, 3, 2, 2, 2))
    out = nm.pointwise_conv3d(T(x), T(np.eye(3)), T(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_pointwise_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((1, 2, 2, 2, 2)), rng.standard_normal((3, 2)), rng.standard_normal(3)
    np.testing.assert_allclose(nm.pointwise_conv3d(T(x), T(w), T(b)).data, naive_pointwise(x, w, b),
                               atol=1e-12, rtol=0)


def test_pointwise_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 2, 2, 2\).*\(3, 4\)"):
        nm.pointwise_conv3d(T(np.zeros((1, 2, 2, 2, 2))), T(np.zeros((3, 4))))


def test_conv_zero_kernel():
    x = np.random.default_rng(2).standard_normal((1, 2, 3, 3, 3))
    assert not nm.conv3d_same(T(x), T(np.zeros((4, 2, 3, 3, 3)))).data.any()


def test_conv_dirac_kernel():
    x = np.random.default_rng(3).standard_normal((1, 1, 4, 3, 2))
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 1, 1, 1] = 1.0
    np.testing.assert_array_equal(nm.conv3d_same(T(x), T(w)).data, x)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(4)
    x, w = rng.standard_normal((1, 2, 4, 4, 4)), rng.standard_normal((3, 2, 3, 3, 3))
    np.testing.assert_allclose(nm.conv3d_same(T(x), T(w)).data, naive_conv3d(x, w), atol=1e-12, rtol=0)


def test_conv_per_sample_kernels_match_oracle():
    rng = np.random.default_rng(5)
    x, w = rng.standard_normal((2, 2, 3, 2, 3)), rng.standard_normal((2, 3, 2, 3, 3, 3))
    np.testing.assert_allclose(nm.conv3d_same(T(x), T(w)).data, naive_conv3d(x, w), atol=1e-12, rtol=0)


def test_conv_rejects_bad_kernel():
    with pytest.raises(ShapeError):
        nm.conv3d_same(T(np.zeros((1, 2, 3, 3, 3))), T(np.zeros((1, 2, 5, 5, 5))))
    with pytest.raises(ShapeError):
        nm.conv3d_same(T(np.zeros((1, 2, 3, 3, 3))), T(np.zeros((1, 3, 3, 3, 3))))


def test_activation_values():
    x = T([-1.5, 2.5, 0.0, 2.0])
    np.testing.assert_array_equal(nm.activation(x, "relu").data, [0.0, 2.5, 0.0, 2.0])
    s = nm.activation(x, "sigmoid").data
    assert s[2] == 0.5
    assert abs(s[3] - 1 / (1 + np.exp(-2))) < 1e-6
    assert abs(s[3] - 0.880797) < 1e-6
    with pytest.raises(ConfigError):
        nm.activation(x, "tanh")


def test_relu_gradient_zero_at_zero():
    x = T([0.0, 1.0, -1.0], grad=True)
    nm.backward(nm.reduce_sum(nm.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_softmax_examples():
    np.testing.assert_allclose(nm.softmax(T([[0.0, 0.0]])).data, [[0.5, 0.5]])
    for c in (-3.0, 0.0, 7.5):
        np.testing.assert_allclose(nm.softmax(T([[c, c + np.log(3)]])).data, [[0.25, 0.75]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-30, 30)), st.floats(-50, 50))
def test_softmax_simplex_and_shift_invariance(x, c):
    s = nm.softmax(T(x)).data
    assert np.all(np.abs(s.sum(axis=1) - 1) < 1e-12)
    # integer shifts keep the max-subtracted logits exactly representable
    shifted = nm.softmax(T(x + np.round(c))).data
    np.testing.assert_allclose(shifted, s, atol=1e-12, rtol=0)


def test_softmax_shift_bitwise_for_exact_shift():
    x = np.array([[0.25, -1.5, 3.0]])
    np.testing.assert_array_equal(nm.softmax(T(x)).data, nm.softmax(T(x + 8.0)).data)


def test_global_avg_pool():
    x = np.full((1, 2, 2, 2, 2), 3.5)
    np.testing.assert_array_equal(nm.global_avg_pool(T(x)).data.reshape(-1), [3.5, 3.5])
    x = np.arange(1, 9, dtype=float).reshape(1, 1, 2, 2, 2)
    assert nm.global_avg_pool(T(x)).data.item() == 4.5
    xt = T(np.random.default_rng(0).standard_normal((1, 2, 2, 3, 2)), grad=True)
    nm.backward(nm.reduce_sum(nm.global_avg_pool(xt)))
    np.testing.assert_allclose(xt.grad, 1 / 12)


def test_reshape_and_flatten():
    x = T(np.arange(864.0).reshape(1, 864, 1, 1, 1))
    assert nm.reshape(x, (1, 32, 3, 3, 3)).shape == (1, 32, 3, 3, 3)
    back = nm.reshape(nm.reshape(x, (1, 32, 3, 3, 3)), x.shape)
    np.testing.assert_array_equal(back.data, x.data)
    assert nm.flatten(T(np.zeros((1, 2, 2, 2, 2)))).shape == (1, 16)
    with pytest.raises(ShapeError):
        nm.reshape(x, (1, 30, 3, 3, 3))


def test_backward_simple_cases():
    w = T([1.0, -2.0, 3.0], grad=True)
    x = np.array([0.5, 4.0, -1.0])
    nm.backward(nm.reduce_sum(nm.mul(w, x)))
    np.testing.assert_array_equal(w.grad, x)

    w = T([1.0], grad=True)
    r = nm.relu(nm.mul(w, -1.0))
    nm.backward(nm.reduce_sum(nm.mul(r, r)))
    assert w.grad[0] == 0.0


def test_backward_accumulates_over_uses():
    w = T([2.0], grad=True)
    nm.backward(nm.reduce_sum(nm.add(nm.mul(w, 3.0), nm.mul(w, w))))
    assert w.grad[0] == 3.0 + 4.0


def test_backward_requires_scalar():
    w = T([1.0, 2.0], grad=True)
    with pytest.raises(ShapeError):
        nm.backward(nm.mul(w, 2.0))


def test_finite_diff_square():
    w = T([3.0], grad=True)
    err = nm.finite_diff_check(lambda: nm.reduce_sum(nm.mul(w, w)), [("w", w)], h=1e-4)
    assert err < 1e-8
    assert abs(w.grad[0] - 6.0) < 1e-12


def test_finite_diff_linear_exact():
    w = T(np.random.default_rng(0).standard_normal(5), grad=True)
    c = np.arange(5.0)
    assert nm.finite_diff_check(lambda: nm.reduce_sum(nm.mul(w, c)), [("w", w)]) < 1e-10


def test_finite_diff_rejects_step_and_nonfinite():
    w = T([1.0], grad=True)
    with pytest.raises(ConfigError):
        nm.finite_diff_check(lambda: nm.reduce_sum(w), [("w", w)], h=1e-2)
    with pytest.raises(NumericError):
        nm.finite_diff_check(lambda: nm.reduce_sum(nm.log(nm.mul(w, 0.0))), [("w", w)])


def test_debug_checks_flag_nonfinite():
    with nm.debug_checks():
        with pytest.raises(NumericError):
            nm.log(T([0.0]))
    nm.log(T([0.0]))  # silent outside debug mode


def _random_op_graph(seed):
    rng = np.random.default_rng(seed)
    x = T(rng.uniform(-1, 1, (2, 3, 3, 2, 3)), grad=True)
    wp = T(rng.uniform(-1, 1, (4, 3)), grad=True)
    bp = T(rng.uniform(-1, 1, 4), grad=True)
    wc = T(rng.uniform(-1, 1, (2, 2, 4, 3, 3, 3)), grad=True)
    lw = T(rng.uniform(-1, 1, (2 * 18, 3)), grad=True)
    params = [("x", x), ("wp", wp), ("bp", bp), ("wc", wc), ("lw", lw)]

    def loss():
        h = nm.sigmoid(nm.pointwise_conv3d(x, wp, bp))
        h = nm.conv3d_same(h, wc)
        gate = nm.sigmoid(nm.global_avg_pool(h))
        h = nm.mul(gate, nm.relu(h))
        h = nm.flatten(nm.transpose(h, (0, 2, 1, 3, 4)))
        p = nm.softmax(nm.linear(h, lw))
        return nm.mul(nm.reduce_mean(nm.log(nm.pick(p, [0, 2]))), -1.0)

    return loss, params


@pytest.mark.parametrize("seed", range(5))
def test_composite_gradients_match_finite_differences(seed):
    loss, params = _random_op_graph(seed)
    assert nm.finite_diff_check(loss, params, h=1e-4) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_scatter_take_concat_gradients(seed):
    rng = np.random.default_rng(seed)
    x = T(rng.uniform(-1, 1, (5, 3)), grad=True)
    y = T(rng.uniform(-1, 1, (5, 2)), grad=True)
    src, dst = rng.integers(0, 5, 12), np.r_[np.arange(4), rng.integers(0, 4, 8)]

    def loss():
        h = nm.concat([x, y], axis=1)
        h = nm.scatter_mean(h, src, dst, 4)
        h = nm.take(h, [0, 3, 3, 1])
        return nm.reduce_sum(nm.mul(nm.clip(h, -0.3, 0.4), nm.power(nm.sub(2.0, h), 2.0)))

    assert nm.finite_diff_check(loss, [("x", x), ("y", y)]) < 1e-4


def test_model_params_registry():
    P = nm.ModelParams()
    P.add("a", np.zeros(3), "hypergraph")
    with pytest.raises(ConfigError):
        P.add("a", np.zeros(2))
    with pytest.raises(ConfigError):
        P.add("b", np.zeros(2), "bogus")
    P.add("b", np.ones((2, 2)))
    assert P.count() == 7 and P.names() == ["a", "b"]
    state = P.state_dict()
    P["b"].data[...] = 5
    P.load_state_dict(state)
    np.testing.assert_array_equal(P["b"].data, np.ones((2, 2)))


def test_activation_pattern_replay_preserves_base_point():
    rng = np.random.default_rng(7)
    x = T(rng.uniform(-1, 1, (6, 5)), grad=True)
    w = T(rng.uniform(-1, 1, (5, 4)), grad=True)
    loss = lambda: nm.reduce_sum(nm.power(nm.relu(nm.matmul(nm.relu(x), w)), 2.0))  # noqa: E731
    plain = loss()
    pattern = nm.ActivationPattern()
    with pattern.record():
        recorded = loss()
    with pattern.replay():
        replayed = loss()
    assert plain.data == recorded.data == replayed.data
    nm.backward(plain)
    g_plain = w.grad.copy()
    w.grad = x.grad = None
    nm.backward(replayed)
    np.testing.assert_array_equal(w.grad, g_plain)
    with pytest.raises(ShapeError):
        with pattern.replay():
            nm.relu(T(np.zeros(3)))


def test_plain_differences_straddle_relu_kinks():
    # many units sitting just above zero: a shared shift crosses some of them
    pre = np.linspace(1e-6, 1e-3, 400)
    b = T([0.0], grad=True)
    loss = lambda: nm.reduce_sum(nm.relu(nm.add(T(pre), b)))  # noqa: E731
    big = nm.finite_diff_check(loss, [("b", b)], h=1e-3)
    small = nm.finite_diff_check(loss, [("b", b)], h=1e-6)
    held = nm.finite_diff_check(loss, [("b", b)], h=1e-3, hold_relu_pattern=True)
    assert big > 1e-2 and small < big and held < 1e-10

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bn_eval_loops, conv2d_loops, grad_check, kl_scalar, softmax_scalar
from repmobile import ops
from repmobile.errors import ConfigError, DimensionError, NonFiniteError, PreconditionError
from repmobile.params import BnParams
from repmobile.tensor import Tensor, backward, no_grad


def T(a, grad=True, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=grad)


def bn64(c, rng, eps=1e-5):
    return BnParams(
        T(rng.uniform(0.5, 1.5, c)), T(rng.normal(size=c)),
        rng.normal(size=c), rng.uniform(0.5, 2.0, c), eps,
    )


# -- tensor / graph -------------------------------------------------------------


def test_float_dtypes_kept_ints_promoted():
    assert Tensor(np.zeros(3, np.float64)).dtype == np.float64
    assert Tensor([1, 2, 3]).dtype == np.float32


def test_shared_node_visited_once():
    x = T([2.0])
    y = ops.scale(x, 3.0)
    z = ops.add(y, y)  # dz/dx = 6
    backward(z)
    assert x.grad[0] == 6.0
    assert z.inputs == ()  # graph dismantled


def test_no_grad_records_nothing():
    x = T([1.0])
    with no_grad():
        y = ops.scale(x, 2.0)
    assert not y.requires_grad and y.inputs == ()


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_non_finite_output_is_an_error():
    with pytest.raises(NonFiniteError):
        ops.scale(T([1e308]), 1e10)


def test_scale_gradient_is_the_factor():
    x = T(np.ones(4))
    backward(ops.scale(x, -2.5), grad=np.ones(4))
    np.testing.assert_array_equal(x.grad, np.full(4, -2.5))


# -- conv2d ---------------------------------------------------------------------


def test_zero_input_gives_bias():
    b = T([0.5, -1.0])
    y = ops.conv2d(T(np.zeros((1, 3, 4, 4))), T(np.ones((2, 3, 3, 3))), b, padding=(1, 1))
    assert np.all(y.data[0, 0] == 0.5) and np.all(y.data[0, 1] == -1.0)


def test_impulse_picks_aligned_tap(rng):
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 1.0
    w = rng.normal(size=(1, 1, 3, 3))
    y = ops.conv2d(T(x), T(w), padding=(1, 1)).data
    assert y[0, 0, 1, 1] == w[0, 0, 1, 1]
    # cross-correlation: output at (0,0) sees the impulse through tap (2,2)
    assert y[0, 0, 0, 0] == w[0, 0, 2, 2]


def test_conv_matches_loop_oracle(rng):
    x = rng.normal(size=(1, 3, 32, 32))
    w = rng.normal(size=(8, 3, 3, 3))
    y = ops.conv2d(T(x, dtype=np.float32), T(w, dtype=np.float32), padding=(1, 1)).data
    ref = conv2d_loops(x, w, padding=(1, 1))
    assert y.shape == (1, 8, 32, 32)
    assert np.max(np.abs(y - ref)) / np.max(np.abs(ref)) <= 1e-6


@pytest.mark.parametrize(
    "cin,cout,k,stride,pad,groups",
    [
        (4, 4, (3, 3), (1, 1), (1, 1), 4),  # depthwise
        (4, 4, (3, 1), (2, 1), (1, 0), 4),  # depthwise, frequency stride
        (4, 4, (1, 3), (2, 2), (0, 1), 4),
        (3, 5, (1, 1), (1, 1), (0, 0), 1),  # pointwise
        (2, 6, (3, 3), (2, 2), (1, 1), 1),  # dense strided
        (4, 6, (3, 3), (1, 1), (1, 1), 2),  # grouped
    ],
)
def test_conv_paths_match_oracle(rng, cin, cout, k, stride, pad, groups):
    x = rng.normal(size=(2, cin, 7, 6))
    w = rng.normal(size=(cout, cin // groups) + k)
    b = rng.normal(size=cout)
    y = ops.conv2d(T(x), T(w), T(b), stride, pad, groups).data
    np.testing.assert_allclose(y, conv2d_loops(x, w, b, stride, pad, groups), rtol=1e-12, atol=1e-12)


def test_conv_errors():
    with pytest.raises(ConfigError):
        ops.conv2d(T(np.zeros((1, 3, 4, 4))), T(np.zeros((4, 1, 3, 3))), groups=2)
    with pytest.raises(DimensionError):
        ops.conv2d(T(np.zeros((1, 3, 4, 4))), T(np.zeros((4, 2, 3, 3))))


@given(alpha=st.floats(-10, 10, allow_nan=False), seed=st.integers(0, 2**16))
@settings(max_examples=25, deadline=None)
def test_conv_is_linear(alpha, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(1, 2, 5, 5)).astype(np.float32)
    w = T(r.normal(size=(3, 2, 3, 3)), False, np.float32)
    a = ops.conv2d(T(alpha * x, False, np.float32), w, padding=(1, 1)).data
    b = alpha * ops.conv2d(T(x, False, np.float32), w, padding=(1, 1)).data
    assert np.allclose(a, b, rtol=1e-5, atol=1e-5 * max(1.0, abs(alpha)))


def test_conv_gradients(rng):
    x = T(rng.normal(size=(1, 2, 6, 6)))
    w = T(rng.normal(size=(3, 2, 3, 3)))
    b = T(rng.normal(size=3))
    assert grad_check(lambda: ops.conv2d(x, w, b, padding=(1, 1)), [x, w, b], rng) <= 1e-3
    wd = T(rng.normal(size=(2, 1, 3, 1)))
    assert grad_check(lambda: ops.conv2d(x, wd, None, (2, 1), (1, 0), 2), [x, wd], rng) <= 1e-3


def test_rep_depthwise_matches_sum_of_branches(rng):
    x = T(rng.normal(size=(2, 3, 6, 5)))
    specs = [((3, 3), (1, 1)), ((1, 1), (0, 0)), ((3, 1), (1, 0)), ((1, 3), (0, 1))]
    from repmobile.params import ConvParams

    branches = [(ConvParams(T(rng.normal(size=(3, 1) + k)), None, (2, 1), p, 3), bn64(3, rng)) for k, p in specs]
    for training in (False, True):
        fused = ops.rep_depthwise(x, branches, training).data
        ref = sum(ops.batchnorm(ops.conv2d(x, c.weight, None, c.stride, c.padding, 3), bn, training).data for c, bn in branches)
        np.testing.assert_allclose(fused, ref, atol=1e-12)
    assert grad_check(lambda: ops.rep_depthwise(x, branches, True), [x] + [c.weight for c, _ in branches] + [branches[1][1].gamma], rng) <= 1e-3


# -- batchnorm --------------------------------------------------------------------


def test_bn_eval_identity_with_zero_eps():
    bn = BnParams(T(np.ones(2)), T(np.zeros(2)), np.zeros(2), np.ones(2), eps=0.0)
    x = np.random.default_rng(0).normal(size=(2, 2, 3, 3))
    np.testing.assert_array_equal(ops.batchnorm(T(x), bn, False).data, x)


def test_bn_eval_matches_loops(rng):
    bn = bn64(3, rng)
    x = rng.normal(size=(2, 3, 4, 4))
    ref = bn_eval_loops(x, bn.gamma.data, bn.beta.data, bn.running_mean, bn.running_var, bn.eps)
    np.testing.assert_allclose(ops.batchnorm(T(x), bn, False).data, ref, atol=1e-12)


def test_bn_train_constant_input_gives_beta():
    bn = BnParams(T([2.0]), T([0.3]), np.zeros(1), np.ones(1))
    y = ops.batchnorm(T(np.full((2, 1, 3, 3), 7.0)), bn, True).data
    np.testing.assert_allclose(y, 0.3, atol=1e-12)


def test_bn_train_output_stats(rng):
    bn = bn64(2, rng)
    y = ops.batchnorm(T(rng.normal(3.0, 2.0, size=(4, 2, 5, 5))), bn, True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), bn.beta.data, atol=1e-4)
    np.testing.assert_allclose(y.std(axis=(0, 2, 3)), bn.gamma.data, atol=1e-4)


def test_bn_running_stats_update(rng):
    bn = BnParams.identity(2, np.float64)
    x = rng.normal(1.0, 3.0, size=(4, 2, 5, 5))
    ops.batchnorm(T(x), bn, True)
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_bn_train_needs_positive_eps_and_data():
    bn = BnParams.identity(1, np.float64, eps=0.0)
    with pytest.raises(ConfigError):
        ops.batchnorm(T(np.ones((2, 1, 2, 2))), bn, True)
    with pytest.raises(ConfigError):
        ops.batchnorm(T(np.ones((0, 1, 2, 2))), BnParams.identity(1, np.float64), True)


def test_bn_gradients(rng):
    bn = bn64(3, rng)
    x = T(rng.normal(size=(3, 3, 4, 4)))
    for training in (True, False):
        assert grad_check(lambda: ops.batchnorm(x, bn, training), [x, bn.gamma, bn.beta], rng) <= 1e-3


# -- elementwise / pooling --------------------------------------------------------


def test_elementwise_examples(rng):
    assert ops.relu(T([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    x = rng.normal(size=(2, 3))
    np.testing.assert_array_equal(ops.add(T(x), 0.0).data, x)
    np.testing.assert_array_equal(ops.scale(T(x), 2.0).data, np.array([[2 * v for v in row] for row in x]))
    with pytest.raises(DimensionError):
        ops.add(T(np.zeros(2)), T(np.zeros(3)))


def test_global_avg_pool(rng):
    x = np.zeros((1, 1, 2, 2))
    x[0, 0, 1, 0] = 1.0
    assert ops.global_avg_pool(T(x)).data[0, 0] == 0.25
    r = rng.normal(size=(2, 3, 4, 5))
    ref = [[sum(r[n, c].ravel()) / 20 for c in range(3)] for n in range(2)]
    np.testing.assert_allclose(ops.global_avg_pool(T(r)).data, ref, atol=1e-14)
    xt = T(r)
    assert grad_check(lambda: ops.global_avg_pool(ops.relu(xt)), [xt], rng) <= 1e-3


# -- softmax / losses --------------------------------------------------------------


def test_softmax_golden():
    np.testing.assert_allclose(ops.softmax_t(T([[0.0, 0.0]]), 0.1).data, [[0.5, 0.5]])
    p = ops.softmax_t(T([[1.0, 0.0]]), 0.1).data[0]
    assert abs(p[0] - 0.9999546) < 1e-7 and abs(p[1] - 4.54e-5) < 1e-7
    assert p.tolist() == pytest.approx(softmax_scalar([1.0, 0.0], 0.1), abs=1e-15)
    np.testing.assert_allclose(ops.softmax_t(T([[5.0, 5.0, 5.0]]), 1.0).data, [[1 / 3] * 3])
    with pytest.raises(ConfigError):
        ops.softmax_t(T([[1.0]]), 0.0)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12), st.floats(0.05, 5.0))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_to_one(z, tau):
    p = ops.softmax_t(T([z], False, np.float32), tau).data
    assert abs(p.sum() - 1) <= 1e-6 and np.all(p >= 0)


def test_cross_entropy_examples(rng):
    big = np.zeros((1, 10))
    big[0, 3] = 1e9
    assert ops.cross_entropy(T(big), [3]).item() == pytest.approx(0.0, abs=1e-12)
    assert ops.cross_entropy(T(np.zeros((4, 10))), [0, 1, 2, 3]).item() == pytest.approx(math.log(10), abs=1e-12)
    z = rng.normal(size=(3, 5))
    y = [4, 0, 2]
    ref = sum(-math.log(softmax_scalar(list(z[i]))[y[i]]) for i in range(3)) / 3
    assert ops.cross_entropy(T(z), y).item() == pytest.approx(ref, rel=1e-12)


def test_kl_golden():
    assert ops.kl_divergence(T([[0.3, 0.7]]), [[0.3, 0.7]]).item() == pytest.approx(0.0, abs=1e-15)
    assert ops.kl_divergence(T([[0.5, 0.5]]), [[1.0, 0.0]]).item() == pytest.approx(0.693147, abs=1e-6)
    v = ops.kl_divergence(T([[0.9, 0.1]]), [[0.5, 0.5]]).item()
    assert v == pytest.approx(0.510826, abs=1e-6)
    assert v == pytest.approx(kl_scalar([0.9, 0.1], [0.5, 0.5]), abs=1e-15)
    with pytest.raises(PreconditionError):
        ops.kl_divergence(T([[0.5, 0.6]]), [[0.5, 0.5]])


@given(st.integers(0, 2**16), st.integers(2, 8))
@settings(max_examples=40, deadline=None)
def test_kl_nonnegative(seed, c):
    r = np.random.default_rng(seed)
    p = r.dirichlet(np.ones(c), size=3)
    q = r.dirichlet(np.ones(c) * 0.3, size=3)
    assert ops.kl_divergence(T(p), q).item() >= -1e-9
    assert ops.kl_divergence_logits(T(r.normal(size=(3, c)) * 5), r.normal(size=(3, c)) * 5, 0.1).item() >= -1e-9


def test_fused_kl_equals_composed(rng):
    s, t = rng.normal(size=(4, 10)), rng.normal(size=(4, 10))
    for tau in (1.0, 0.5, 0.1):
        a = ops.kl_divergence_logits(T(s), t, tau).item()
        b = ops.kl_divergence(ops.softmax_t(T(s), tau), ops.softmax_t(T(t), tau).data).item()
        assert a == pytest.approx(b, rel=1e-9, abs=1e-12)


def test_loss_gradients(rng):
    z = T(rng.normal(size=(3, 5)))
    y = [1, 4, 0]
    assert grad_check(lambda: ops.softmax_t(z, 0.5), [z], rng) <= 1e-3
    assert grad_check(lambda: ops.log_softmax(z, 0.7), [z], rng) <= 1e-3
    assert grad_check(lambda: ops.cross_entropy(z, y), [z], rng) <= 1e-3
    q = rng.dirichlet(np.ones(5), size=3)
    p = T(rng.dirichlet(np.ones(5), size=3))
    assert grad_check(lambda: ops.kl_divergence(p, q), [p], rng) <= 1e-3
    t = rng.normal(size=(3, 5))
    assert grad_check(lambda: ops.kl_divergence_logits(z, t, 0.5), [z], rng) <= 1e-3

import numpy as np
import pytest

from oracles import calibrated_stats, randomize_stats
from repmobile import ops
from repmobile.errors import ConfigError, DataError, ReparamError
from repmobile.model import INPUT_SHAPE, build_model, predict
from repmobile.params import BnParams, ConvParams
from repmobile.reparam import AlreadyMergedError, fold_bn, merge_branches, pad_kernel, reparameterize_model
from repmobile.tensor import Tensor


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def rand_bn(c, rng):
    return BnParams(T(rng.uniform(0.5, 1.5, c)), T(rng.normal(size=c)), rng.normal(size=c), rng.uniform(0.1, 2.0, c))


def dw(k, c, rng, stride=(1, 1)):
    pad = {(3, 3): (1, 1), (1, 1): (0, 0), (3, 1): (1, 0), (1, 3): (0, 1)}[k]
    return ConvParams(T(rng.normal(size=(c, 1) + k)), None, stride, pad, c)


def test_pad_kernel_examples():
    row = pad_kernel(np.array([[[[1.0, 2.0, 3.0]]]]))
    assert row[0, 0].tolist() == [[0, 0, 0], [1, 2, 3], [0, 0, 0]]
    col = pad_kernel(np.array([[[[1.0], [2.0], [3.0]]]]))
    assert col[0, 0].tolist() == [[0, 1, 0], [0, 2, 0], [0, 3, 0]]
    one = pad_kernel(np.array([[[[5.0]]]]))
    assert one[0, 0].tolist() == [[0, 0, 0], [0, 5, 0], [0, 0, 0]]
    with pytest.raises(ConfigError):
        pad_kernel(np.zeros((1, 1, 2, 2)))


@pytest.mark.parametrize("k", [(1, 1), (1, 3), (3, 1)])
def test_padded_kernel_conv_equivalence(rng, k):
    c = dw(k, 3, rng)
    x = T(rng.normal(size=(2, 3, 9, 7)))
    a = ops.conv2d(x, c.weight, None, (1, 1), c.padding, 3).data
    b = ops.conv2d(x, T(pad_kernel(c.weight)), None, (1, 1), (1, 1), 3).data
    assert np.max(np.abs(a - b)) <= 1e-6


def test_fold_golden_example():
    conv = ConvParams(T([[[[2.0]]]]))
    bn = BnParams(T([0.5]), T([0.1]), np.array([1.0]), np.array([3.99999]), eps=1e-5)
    f = fold_bn(conv, bn)
    assert abs(f.weight.item() - 0.5) < 1e-12 and abs(f.bias.item() - (-0.15)) < 1e-12
    x = T(np.array([[[[0.7, -1.3]]]]))
    ref = ops.batchnorm(ops.conv2d(x, conv.weight), bn, False).data
    got = ops.conv2d(x, T(f.weight), T(f.bias)).data
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_fold_identity_and_errors(rng):
    w = rng.normal(size=(3, 1, 3, 3))
    bn = BnParams(T(np.ones(3)), T(np.zeros(3)), np.zeros(3), np.full(3, 1 - 1e-5))
    f = fold_bn(ConvParams(T(w), None, (1, 1), (1, 1), 3), bn)
    assert np.max(np.abs(f.weight - w)) <= 1e-6 and np.max(np.abs(f.bias)) <= 1e-6
    bad = BnParams(T(np.ones(3)), T(np.zeros(3)), np.zeros(3), np.array([1.0, -0.1, 1.0]))
    with pytest.raises(DataError):
        fold_bn(ConvParams(T(w), None, (1, 1), (1, 1), 3), bad)


def test_fold_operational(rng):
    for _ in range(10):
        conv = ConvParams(T(rng.normal(size=(4, 3, 3, 3))), T(rng.normal(size=4)), (1, 1), (1, 1))
        bn = rand_bn(4, rng)
        x = T(rng.normal(size=(10, 3, 6, 6)))
        f = fold_bn(conv, bn)
        ref = ops.batchnorm(ops.conv2d(x, conv.weight, conv.bias, padding=(1, 1)), bn, False).data
        got = ops.conv2d(x, T(f.weight), T(f.bias), padding=(1, 1)).data
        assert np.max(np.abs(got - ref)) <= 1e-5


def test_merge_examples(rng):
    c, bn = dw((3, 3), 4, rng), rand_bn(4, rng)
    single = merge_branches([(c, bn)])
    f = fold_bn(c, bn)
    assert np.array_equal(single.weight, f.weight) and np.array_equal(single.bias, f.bias)
    double = merge_branches([(c, bn), (c, bn)])
    np.testing.assert_allclose(double.weight, 2 * f.weight)
    with pytest.raises(ConfigError):
        merge_branches([(dw((3, 3), 4, rng), bn), (dw((1, 1), 4, rng, stride=(2, 1)), bn)])


def test_four_branch_operational(rng):
    branches = [(dw(k, 5, rng, (2, 1)), rand_bn(5, rng)) for k in [(3, 3), (1, 1), (3, 1), (1, 3)]]
    m = merge_branches(branches)
    x = T(rng.normal(size=(100, 5, 8, 7)))
    ref = sum(ops.batchnorm(ops.conv2d(x, c.weight, None, c.stride, c.padding, 5), bn, False).data for c, bn in branches)
    got = ops.conv2d(x, T(m.weight), T(m.bias), (2, 1), (1, 1), 5).data
    assert np.max(np.abs(got - ref)) <= 1e-5


def test_merge_homomorphic_under_ablation(rng):
    branches = [(dw(k, 3, rng), rand_bn(3, rng)) for k in [(3, 3), (1, 1), (3, 1), (1, 3)]]
    full = merge_branches(branches)
    for i in range(1, 4):
        rest = merge_branches(branches[:i] + branches[i + 1 :])
        f = fold_bn(*branches[i])
        np.testing.assert_allclose(rest.weight, full.weight - pad_kernel(f.weight), atol=1e-6)
        np.testing.assert_allclose(rest.bias, full.bias - f.bias, atol=1e-6)


def test_model_merge_guards():
    m = build_model(8)
    mm = reparameterize_model(m)
    assert mm.mode == "merged" and all(b.merged for b in mm.blocks)
    assert all(u.bn is None for u in mm.stem) and mm.head.bn is None
    with pytest.raises(AlreadyMergedError):
        reparameterize_model(mm)
    with pytest.raises(ReparamError):
        reparameterize_model(m.copy().train())


def test_model_equivalence_32_and_64_bit(rng):
    for dtype, tol in ((np.float32, 1e-4), (np.float64, 1e-8)):
        m = calibrated_stats(build_model(16, dtype=dtype, seed=4), rng)
        x = rng.normal(size=(8,) + INPUT_SHAPE[1:]).astype(dtype)
        a, b = predict(m, x), predict(reparameterize_model(m), x)
        assert np.max(np.abs(a - b)) <= tol
        assert np.array_equal(a.argmax(1), b.argmax(1))


def test_argmax_agreement_many_inputs(rng):
    m = randomize_stats(build_model(8, seed=6), rng)
    mm = reparameterize_model(m)
    x = rng.normal(size=(1000,) + INPUT_SHAPE[1:]).astype(np.float32)
    assert np.array_equal(predict(m, x, 250).argmax(1), predict(mm, x, 250).argmax(1))


@pytest.mark.parametrize("prep", ["fresh", "random"])
def test_uncalibrated_merge_relative_error(rng, prep):
    # identity or arbitrary running stats let activations grow to |logit| ~ 1e2..1e4;
    # float32 agreement is then only meaningful relative to the logit scale
    m = build_model(8)
    if prep == "random":
        randomize_stats(m, rng)
    x = rng.normal(size=(4,) + INPUT_SHAPE[1:]).astype(np.float32)
    a, b = predict(m, x), predict(reparameterize_model(m), x)
    assert np.max(np.abs(a - b)) <= 1e-5 * np.max(np.abs(a))
    assert np.array_equal(a.argmax(1), b.argmax(1))


def test_calibrated_logit_scale(rng):
    m = calibrated_stats(build_model(16, seed=1), rng)
    a = predict(m, rng.normal(size=(8,) + INPUT_SHAPE[1:]).astype(np.float32))
    assert 0.1 < np.abs(a).max() < 50

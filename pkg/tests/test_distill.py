import math
import os

import numpy as np
import pytest

from oracles import grad_check, kl_scalar, softmax_scalar
from repmobile import ops
from repmobile.audio import AugmentConfig, render
from repmobile.distill import (
    DistillConfig,
    LogitsCache,
    ModelTeacher,
    TeacherHandle,
    cache_teachers,
    distill_loss,
    distill_train,
    header_size,
    record_size,
)
from repmobile.errors import CacheMissError, ConfigError, NonFiniteError
from repmobile.model import build_model
from repmobile.training import TrainConfig, train
from repmobile.tensor import Tensor


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_lambda_one_is_cross_entropy(rng):
    s = T(rng.normal(size=(4, 10)))
    y = [0, 3, 9, 1]
    t = [rng.normal(size=(4, 10)), rng.normal(size=(4, 10))]
    assert distill_loss(s, t, y, DistillConfig(lam=1.0)).item() == ops.cross_entropy(s, y).item()


def test_lambda_zero_matching_teachers_is_zero(rng):
    z = rng.normal(size=(3, 10)) * 4
    assert abs(distill_loss(T(z), [z, z.copy()], [0, 1, 2], DistillConfig(lam=0.0)).item()) <= 1e-9


def test_two_teacher_blend_by_hand():
    s = [1.0] + [0.0] * 9
    ce = -math.log(softmax_scalar(s)[0])
    kl_uniform = kl_scalar(softmax_scalar(s, 0.1), [0.1] * 10)
    expect = 0.5 * ce + 0.5 * (0.0 + kl_uniform) / 2
    got = distill_loss(T([s]), [np.array([s]), np.zeros((1, 10))], [0], DistillConfig(lam=0.5, tau=0.1)).item()
    assert abs(got - expect) <= 1e-6
    # closed form of the same quantity
    z = math.exp(10) + 9
    assert abs(kl_uniform - (math.log(0.1) - 1 + math.log(z))) < 1e-12


def test_config_validation(rng):
    with pytest.raises(ConfigError):
        distill_loss(T(rng.normal(size=(2, 10))), [], [0, 1], DistillConfig(lam=0.5))
    assert distill_loss(T(np.zeros((2, 10))), [], [0, 1], DistillConfig(lam=1.0)).item() == pytest.approx(math.log(10))
    for bad in (dict(lam=1.5), dict(lam=-0.1), dict(tau=0.0)):
        with pytest.raises(ConfigError):
            DistillConfig(**bad)


def test_affine_in_lambda(rng):
    s = rng.normal(size=(3, 10))
    t = [rng.normal(size=(3, 10))]
    y = [2, 5, 7]
    vals = [distill_loss(T(s), t, y, DistillConfig(lam=l)).item() for l in (0.0, 0.25, 0.5, 1.0)]
    ce, kd = vals[3], vals[0]
    for l, v in zip((0.0, 0.25, 0.5, 1.0), vals):
        assert v == pytest.approx(kd + l * (ce - kd), rel=1e-12, abs=1e-12)
        assert v >= 0


def test_distill_loss_gradient(rng):
    s = T(rng.normal(size=(3, 10)))
    t = [rng.normal(size=(3, 10)), rng.normal(size=(3, 10))]
    assert grad_check(lambda: distill_loss(s, t, [0, 4, 9], DistillConfig(lam=0.3, tau=0.5)), [s], rng) <= 1e-3


# -- cache ---------------------------------------------------------------------------


class NaNTeacher(TeacherHandle):
    id = "nan"

    def logits(self, views):
        out = np.zeros((len(views), 10), np.float32)
        out[-1, 0] = np.nan
        return out


def test_cache_counts_size_and_replay(tmp_path, tiny_data):
    teacher = ModelTeacher(build_model(8, branch_set=["3x3"], seed=1), "cnn8")
    ids = tiny_data.ids("train")[:2]
    c = cache_teachers([teacher], tiny_data, ids, 1, tmp_path / "c.bin")
    assert len(c) == 2
    recs = list(c.records())
    body = sum(record_size(len(d.to_bytes()), 1, 10) for d, _ in recs)
    assert os.path.getsize(tmp_path / "c.bin") == header_size(["cnn8"], 2) + body
    for d, logits in recs:
        again = teacher.produce_logits(d, tiny_data.waveform)
        assert np.max(np.abs(again - logits[0])) <= 1e-5
    with pytest.raises(CacheMissError):
        c.read(ids[0], 5)


def test_cache_rejects_non_finite(tmp_path, tiny_data):
    with pytest.raises(NonFiniteError, match="sample"):
        cache_teachers([NaNTeacher()], tiny_data, tiny_data.ids("train")[:4], 1, tmp_path / "bad.bin", batch_size=4)
    assert not (tmp_path / "bad.bin").exists()


def test_cache_header_roundtrip(tmp_path, tiny_data):
    ts = [ModelTeacher(build_model(8, branch_set=["3x3"], seed=i), f"t{i}") for i in range(2)]
    c = cache_teachers(ts, tiny_data, tiny_data.ids("train")[:3], 2, tmp_path / "c.bin")
    again = LogitsCache(tmp_path / "c.bin")
    assert again.teacher_ids == ["t0", "t1"] and again.num_teachers == 2 and again.epochs == [0, 1]
    descs, logits = again.batch(tiny_data.ids("train")[:3], 1)
    assert logits.shape == (2, 3, 10) and [d.epoch for d in descs] == [1, 1, 1]


def test_distill_train_smoke_and_cache_miss(tmp_path, tiny_data):
    ids = tiny_data.ids("train")[:8]
    teacher = ModelTeacher(build_model(8, branch_set=["3x3"], seed=1), "t")
    c = cache_teachers([teacher], tiny_data, ids, 1, tmp_path / "c.bin", batch_size=4)
    r = distill_train(build_model(8, seed=2), c, tiny_data, ids, TrainConfig(epochs=1, warmup_epochs=0, batch_size=4))
    assert len(r.metrics) == 1 and math.isfinite(r.metrics[0]["loss"])
    with pytest.raises(CacheMissError):
        distill_train(build_model(8, seed=2), c, tiny_data, ids, TrainConfig(epochs=2, warmup_epochs=0, batch_size=4))


def test_lambda_one_equals_plain_training(tmp_path, tiny_data):
    ids = tiny_data.ids("train")[:8]
    cfg = TrainConfig(epochs=2, warmup_epochs=1, batch_size=4, seed=3)
    teacher = ModelTeacher(build_model(8, branch_set=["3x3"], seed=1), "t")
    c = cache_teachers([teacher], tiny_data, ids, 2, tmp_path / "c.bin", seed=3, batch_size=4, augment=cfg.augment)
    a = distill_train(build_model(8, seed=2), c, tiny_data, ids, cfg, DistillConfig(lam=1.0)).model
    b = train(build_model(8, seed=2), tiny_data, ids, cfg).model
    for (n, x), (_, y) in zip(a.named_tensors(), b.named_tensors()):
        assert x.tobytes() == y.tobytes(), n


def test_distill_loss_decreases(tmp_path, tiny_data):
    ids = tiny_data.ids("train")[:8]
    cfg = TrainConfig(epochs=20, warmup_epochs=2, batch_size=8, augment=AugmentConfig(roll=False, specaug=False, fms=False))
    teacher = ModelTeacher(build_model(8, branch_set=["3x3"], seed=1), "t")
    c = cache_teachers([teacher], tiny_data, ids, 20, tmp_path / "c.bin", batch_size=8, augment=cfg.augment)
    r = distill_train(build_model(8, seed=2), c, tiny_data, ids, cfg)
    assert r.metrics[-1]["loss"] < r.metrics[0]["loss"]

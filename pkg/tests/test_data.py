import hashlib

import numpy as np
import pytest

from repmobile.audio import log_mel
from repmobile.data import Dataset, SyntheticSceneSpec, gen_data, make_subsets, plan_index, read_index, synthesize


def test_counts_and_determinism(tmp_path):
    spec = SyntheticSceneSpec(seed=2)
    a = gen_data(spec, 10, tmp_path / "a")
    b = gen_data(spec, 10, tmp_path / "b")
    ia, ib = read_index(a), read_index(b)
    assert len(ia) == 100
    for ea, eb in zip(ia, ib):
        ha = hashlib.sha256((a / ea.path).read_bytes()).hexdigest()
        assert ha == hashlib.sha256((b / eb.path).read_bytes()).hexdigest()
    assert Dataset(a).digest() == Dataset(b).digest()


def test_clip_invariants():
    spec = SyntheticSceneSpec()
    rec = spec.recipes()
    assert len({str(r) for r in rec}) == 10
    assert np.array_equal(spec.device_filters(), SyntheticSceneSpec().device_filters())
    w = synthesize(spec, 3, 1, 17)
    assert w.shape == (32000,) and np.max(np.abs(w)) <= 1.0


def test_held_out_device_never_trains():
    idx = plan_index(SyntheticSceneSpec(), 20, 8)
    assert all(e.device != 3 for e in idx if e.split == "train")
    assert any(e.device == 3 for e in idx if e.split == "test")


def test_linearly_separable(tmp_path):
    """A linear probe on time-averaged log-mel must beat 60%."""
    from sklearn.linear_model import LogisticRegression

    root = gen_data(SyntheticSceneSpec(seed=1), 30, tmp_path / "d", n_test_per_class=15)
    ds = Dataset(root)

    def feats(split):
        ids = ds.ids(split)
        return np.stack([log_mel(ds.waveform(i)).mean(axis=1) for i in ids]), ds.labels(ids)

    xtr, ytr = feats("train")
    xte, yte = feats("test")
    clf = LogisticRegression(max_iter=2000).fit(xtr, ytr)
    assert clf.score(xte, yte) > 0.6


@pytest.fixture(scope="module")
def big_index():
    return plan_index(SyntheticSceneSpec(), 100)  # 1000 training entries


def test_subsets_nested_and_stratified(big_index):
    subs = make_subsets(big_index)
    by = {e.id: e for e in big_index}
    sets = {s.fraction: set(s.ids) for s in subs}
    assert sets[1.0] == {e.id for e in big_index}
    assert sets[0.05] < sets[0.1] < sets[0.25] < sets[0.5] < sets[1.0]
    devices = sorted({e.device for e in big_index})
    for s in subs:
        n = len(s.ids)
        cls = np.bincount([by[i].label for i in s.ids], minlength=10)
        assert np.all(np.abs(cls - n / 10) <= 1), (s.fraction, cls)
        dev = np.array([sum(by[i].device == d for i in s.ids) for d in devices])
        share = np.array([sum(e.device == d for e in big_index) for d in devices]) / len(big_index)
        assert np.all(np.abs(dev - n * share) <= 1), (s.fraction, dev)
    half = next(s for s in subs if s.fraction == 0.5)
    cls = np.bincount([by[i].label for i in half.ids])
    assert np.all(np.abs(cls - 50) <= 1)

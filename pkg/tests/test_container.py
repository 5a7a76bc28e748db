import json

import numpy as np
import pytest

from oracles import randomize_stats
from repmobile.container import load_model, save_model
from repmobile.errors import DataError
from repmobile.model import build_model
from repmobile.reparam import reparameterize_model


@pytest.mark.parametrize("merged", [False, True])
def test_roundtrip_bit_exact(tmp_path, rng, merged):
    m = randomize_stats(build_model(16, branch_set=["3x3", "1x3"], seed=3), rng)
    if merged:
        m = reparameterize_model(m)
    save_model(m, tmp_path / "m")
    back = load_model(tmp_path / "m")
    assert back.mode == m.mode and back.branch_set == m.branch_set
    a, b = m.named_tensors(), back.named_tensors()
    assert [n for n, _ in a] == [n for n, _ in b]
    assert all(x.tobytes() == y.tobytes() for (_, x), (_, y) in zip(a, b))


def test_manifest_layout(tmp_path):
    m = build_model(8)
    save_model(m, tmp_path / "m")
    man = json.loads((tmp_path / "m" / "manifest.json").read_text())
    blob = (tmp_path / "m" / "weights.bin").read_bytes()
    assert man["tensors"][-1]["offset"] + man["tensors"][-1]["nbytes"] == len(blob)
    t = man["tensors"][0]
    first = np.frombuffer(blob[: t["nbytes"]], "<f4").reshape(t["shape"])
    assert np.array_equal(first, m.stem[0].conv.weight.data)


def test_corrupt_container(tmp_path):
    m = build_model(8)
    save_model(m, tmp_path / "m")
    man = json.loads((tmp_path / "m" / "manifest.json").read_text())
    man["architecture"]["base_channels"] = 12
    (tmp_path / "m" / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(DataError):
        load_model(tmp_path / "m")
    with pytest.raises(DataError):
        load_model(tmp_path / "missing")

import numpy as np
import pytest

from repmobile.complexity import bn_cost, complexity, conv_cost, count_macs, count_params
from repmobile.model import build_model
from repmobile.params import BnParams, ConvParams
from repmobile.reparam import reparameterize_model
from repmobile.tensor import Tensor


def conv(cout, cin, k, groups=1, bias=False, stride=(1, 1), pad=(0, 0)):
    return ConvParams(Tensor(np.zeros((cout, cin // groups) + k)), Tensor(np.zeros(cout)) if bias else None, stride, pad, groups)


def test_hand_counted_examples():
    c = conv(8, 3, (3, 3), bias=True, pad=(1, 1))
    row = conv_cost("c", c, (1, 3, 32, 32))
    assert row.params == 8 * 3 * 9 + 8 == 224
    assert row.macs == 8 * 32 * 32 * 3 * 9 == 221_184
    d = conv_cost("d", conv(4, 4, (1, 1), groups=4), (1, 4, 5, 5))
    assert d.macs == 100
    b = bn_cost("bn", BnParams.identity(32), (1, 32, 4, 4))
    assert b.params == 64 and b.macs == 32 * 16


# frozen from the manual layer-by-layer sum for the pinned layout
FROZEN = {
    32: (121_452, 66_810_560, 108_122, 60_432_384),
    64: (437_956, 244_208_320, None, 231_456_768),
    96: (949_532, 532_198_080, 909_562, 513_073_152),
}


@pytest.mark.parametrize("width", [32, 64, 96])
def test_merged_macs_equal_single_branch(width):
    m = build_model(width)
    merged = reparameterize_model(m)
    single = reparameterize_model(build_model(width, branch_set=["3x3"]))
    assert count_macs(merged) == count_macs(single)
    assert count_macs(m) > count_macs(merged)
    assert count_macs(build_model(width, branch_set=["3x3", "1x1"])) > count_macs(merged)
    p, mac, mp, mmac = FROZEN[width]
    assert (count_params(m), count_macs(m)) == (p, mac)
    assert count_macs(merged) == mmac
    if mp is not None:
        assert count_params(merged) == mp


def test_report_totals_and_purity():
    m = build_model(16)
    rep = complexity(m)
    assert rep.total_params == sum(r.params for r in rep.rows)
    assert rep.total_macs == sum(r.macs for r in rep.rows)
    other = build_model(16, seed=99)
    assert complexity(other).to_csv() == rep.to_csv()
    assert rep.to_csv().splitlines()[-1].startswith("TOTAL")
    assert "TOTAL" in rep.table()

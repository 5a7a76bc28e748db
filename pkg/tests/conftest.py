import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from repmobile.runtime import tune_allocator  # noqa: E402

tune_allocator()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """4 train + 2 test clips per class."""
    from repmobile.data import Dataset, SyntheticSceneSpec, gen_data

    root = gen_data(SyntheticSceneSpec(seed=5), 4, tmp_path_factory.mktemp("tiny"), n_test_per_class=2)
    return Dataset(root)


_criteria: list[tuple[int, str, bool, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    n, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0][:160] if call.excinfo else ""
    _criteria.append((n, title, rep.passed, detail))
    print(f"\n{'PASS' if rep.passed else 'FAIL'} [{n:>2}] {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(_criteria):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} [{n:>2}] {title}: {detail}")

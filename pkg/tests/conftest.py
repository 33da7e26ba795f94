from contextlib import contextmanager

import numpy as np
import pytest

from efm.dataset import make_synthetic_2d
from efm.model import init_model

CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_dataset():
    return make_synthetic_2d(n_per_cluster=20, seed=3)


@pytest.fixture
def small_model():
    return init_model(2, 2, hidden=(16, 16), seed=1)


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance criterion's outcome.

    The body may set ``rec["detail"]``; any exception (including a failed
    assert) marks the criterion FAIL and propagates.
    """
    log = request.config.stash.setdefault(CRITERIA, {})

    @contextmanager
    def run(number, title):
        rec = {"detail": ""}
        try:
            yield rec
        except BaseException:
            log[number] = (title, False, rec["detail"])
            raise
        log[number] = (title, True, rec["detail"])

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(CRITERIA, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(log):
        title, ok, detail = log[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)

import contextlib
import time

import pytest

_RESULTS = []


class Criterion:
    def __init__(self, number, title):
        self.number, self.title = number, title
        self.detail = ""


@contextlib.contextmanager
def _criterion(number, title):
    c = Criterion(number, title)
    start = time.perf_counter()
    ok = False
    try:
        yield c
        ok = True
    finally:
        _RESULTS.append((number, title, ok, c.detail, time.perf_counter() - start))


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c:`` records one pass/fail line for the summary."""
    return _criterion


@pytest.fixture(scope="session")
def pretrained_base():
    """200 task-A volumes, 20 epochs, seed 42 (shared by the transfer checks)."""
    from hyps.experiments import pretrain
    from hyps.model import ToyModelConfig

    start = time.perf_counter()
    model, result = pretrain(ToyModelConfig(), n=200, epochs=20, seed=42)
    return model, result, time.perf_counter() - start


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    best = {}
    for number, title, ok, detail, secs in _RESULTS:
        prev = best.get((number, title))
        best[(number, title)] = (prev[0] and ok if prev else ok, (prev[1] + "; " if prev else "") + detail,
                                 (prev[2] if prev else 0.0) + secs)
    for (number, title), (ok, detail, secs) in sorted(best.items()):
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({secs:.1f}s) {detail}")

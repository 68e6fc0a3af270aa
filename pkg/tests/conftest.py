import numpy as np
import pytest

from statprune.model import all_capture_points, forward_with_capture
from statprune.synthetic import gen_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy():
    """Small post-norm toy with a classifier head and all captures."""
    model, calib, holdout = gen_synthetic(n=16, layers=2, heads=4, f=32, m=24, b=8, seed=7, classes=3)
    _, caps = forward_with_capture(model, calib.inputs, calib.lengths, all_capture_points(model))
    return model, calib, holdout, caps


ACCEPTANCE_LINES = []


@pytest.fixture
def record():
    """Record one acceptance line; printed in the terminal summary."""

    def _record(number, title, ok, detail, seconds, limit):
        in_time = seconds < limit
        status = "PASS" if ok and in_time else "FAIL"
        line = f"[{status}] criterion {number:>2} {title}: {detail}; {seconds:.2f}s (limit {limit:g}s)"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return ok and in_time

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

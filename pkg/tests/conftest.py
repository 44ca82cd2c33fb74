import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_problem(rng, n, m, separation=0.8):
    """Overlapping two-class Gaussian data with both labels present."""
    d = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    d[0], d[1] = 1.0, -1.0
    X = rng.standard_normal((n, m)) + separation * d[:, None] / np.sqrt(m)
    return X, d


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool | None, detail: str) -> None:
    """Store and echo the one-line verdict for an acceptance criterion (None means skipped)."""
    status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
    line = f"criterion {number}: {status}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])

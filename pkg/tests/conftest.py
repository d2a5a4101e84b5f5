from __future__ import annotations

import numpy as np
import pytest

from dbf.data import GenSpec, generate

# Lines recorded by the acceptance tests, echoed in the terminal summary so
# they are visible without ``-s``.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    spec = GenSpec(n_samples=12, lengths={"t": 4, "v": 4, "a": 4}, dims={"t": 5, "v": 6, "a": 7},
                   key_frames=1, seed=3)
    return generate(spec)

from __future__ import annotations

import numpy as np
import pytest


def ball_points(rng, n, dim, max_norm=0.9, min_norm=0.0):
    """``n`` points with uniform directions and norms uniform in [min_norm, max_norm]."""
    v = rng.normal(size=(n, dim))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return v * rng.uniform(min_norm, max_norm, size=(n, 1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

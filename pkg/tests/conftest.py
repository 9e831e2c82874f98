import math

import numpy as np
import pytest


def softmax_ref(z, tau=1.0):
    """Plain-python softmax used as an independent oracle."""
    e = [math.exp(x / tau) for x in z]
    s = sum(e)
    return [x / s for x in e]


def kl_ref(p, q):
    return sum(a * math.log(a / b) for a, b in zip(p, q) if a > 0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(key: str, ok: bool, detail: str) -> bool:
        line = f"{key} {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[key] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[key])

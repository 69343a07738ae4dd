from __future__ import annotations

import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


# Acceptance criteria report: one PASS/FAIL line each, printed live and
# repeated in the terminal summary so it survives output capture.
_VERDICTS: list[str] = []


class Criterion:
    def __init__(self, name: str, budget: float | None, prior: float = 0.0):
        self.name = name
        self.budget = budget
        self.prior = prior  # seconds already spent in shared fixtures
        self.detail = ""

    def __enter__(self) -> Criterion:
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        elapsed = time.perf_counter() - self._t0 + self.prior
        over = self.budget is not None and elapsed >= self.budget
        ok = exc_type is None and not over
        note = self.detail
        if over and exc_type is None:
            note = f"{note}; over the {self.budget:g} s budget".lstrip("; ")
        line = f"{'PASS' if ok else 'FAIL'}  {self.name}  [{elapsed:.2f} s]" + (f"  {note}" if note else "")
        _VERDICTS.append(line)
        print(line)
        if over and exc_type is None:
            raise AssertionError(f"{self.name}: took {elapsed:.2f} s, budget {self.budget:g} s")
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)

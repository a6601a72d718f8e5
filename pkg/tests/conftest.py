import numpy as np
import pytest
import torch

from vtryon.synthetic import synthetic_records

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_records():
    """Two items per category at 64x48."""
    return synthetic_records(2, (64, 48), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record one pass/fail line per acceptance criterion; returns ``ok`` for asserting."""
    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[number] = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        print(ACCEPTANCE_LINES[number])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])

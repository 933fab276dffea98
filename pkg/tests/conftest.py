import numpy as np
import pytest
import torch

from hoigen.data import Family, generate_dataset
from hoigen.geometry import default_hand_model

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line[1])


@pytest.fixture
def record_criterion():
    def record(number: int, name: str, ok: bool, detail: str = ""):
        status = "PASS" if ok else "FAIL"
        ACCEPTANCE_LINES.append((number, f"[{status}] criterion {number:2d}: {name}" + (f" ({detail})" if detail else "")))
        print(f"[{status}] criterion {number}: {name} {detail}")
        assert ok, f"criterion {number} failed: {detail}"
    return record


@pytest.fixture(scope="session")
def hands():
    return default_hand_model("left"), default_hand_model("right")


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset([Family.BI_ART, Family.SINGLE_RIGID], 2, seed=3, frames=8)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)

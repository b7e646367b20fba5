import numpy as np
import pytest
from hypothesis import settings

from sgflow.kernels import KernelMultipliers
from sgflow.lattice import LatticeSpec

settings.register_profile("ci", max_examples=30, deadline=None)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def spec16():
    return LatticeSpec(16, 0.25)


@pytest.fixture(scope="session")
def km16(spec16):
    return KernelMultipliers(spec16, 1.0)


@pytest.fixture(scope="session")
def spec32():
    return LatticeSpec(32, 0.125)


@pytest.fixture(scope="session")
def km32(spec32):
    return KernelMultipliers(spec32, 1.0)


def random_field(seed, shape):
    return np.random.default_rng(seed).standard_normal(shape)


# acceptance verdicts, echoed once more in the terminal summary
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(k: int, ok: bool, detail: str) -> bool:
        line = f"CRITERION {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[k] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])

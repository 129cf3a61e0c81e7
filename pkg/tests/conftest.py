import numpy as np
import pytest

from octcodec.network import ArchConfig, CodecModel
from octcodec.tensor import precision


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model():
    """Untrained 8-channel model; enough for coding and causality checks."""
    return CodecModel(ArchConfig(M=8, N=8, alpha=0.5), seed=3)


def tiny_cfg(**kw):
    return ArchConfig(**({"M": 4, "N": 4, "alpha": 0.5} | kw))


# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

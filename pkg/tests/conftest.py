import numpy as np
import pytest

from attriblab.data_io import load_reference, reference_dir
from attriblab.model import load_checkpoint

_ACCEPTANCE = []


@pytest.fixture(scope="session")
def reference_ckpt():
    return load_checkpoint(reference_dir() / "reference.aclb")


@pytest.fixture(scope="session")
def test_set():
    return load_reference("test")


@pytest.fixture(scope="session")
def train_set():
    return load_reference("train")


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def criterion():
    """Record one acceptance line; call with (label, passed, detail)."""

    def record(label: str, passed: bool, detail: str = "") -> bool:
        _ACCEPTANCE.append(f"{'PASS' if passed else 'FAIL'}  {label}" + (f"  [{detail}]" if detail else ""))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)

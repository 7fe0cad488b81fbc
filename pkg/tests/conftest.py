import numpy as np
import pytest

from isoprop.datasets import SyntheticSpec, generate_synthetic
from isoprop.training import Hyperparams


@pytest.fixture(scope="session")
def tiny_ds():
    return generate_synthetic(SyntheticSpec(n_seen=8, n_unseen=3, d_a=8, d_v=16, samples_per_class=8,
                                            n_superclusters=3, seed=3))


@pytest.fixture
def tiny_hp():
    return Hyperparams(ways=4, d=8, lr=1e-3, epochs=2, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = []


@pytest.fixture(scope="session")
def verdict():
    """Record a one-line acceptance verdict; all are printed in the terminal summary."""
    def record(number, ok, detail):
        _VERDICTS.append((number, ok, detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(_VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")

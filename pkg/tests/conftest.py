import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))

from unlearn_recon.datasets import Dataset, SplitSpec, SyntheticSpec, split_private_public, synthesize

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def mnist_idx(tmp_path_factory):
    """Gzipped IDX files of the 5000-digit MNIST sample shipped with mlxtend."""
    pytest.importorskip("mlxtend")
    from make_mnist_idx import write_mnist5k

    return write_mnist5k(tmp_path_factory.mktemp("mnist"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def synthetic_split(n, d, task="regression", *, seed=0, split_seed=1, noise_std=0.1, n_classes=3,
                    public_fraction=0.5) -> tuple[Dataset, Dataset]:
    data = synthesize(SyntheticSpec(n, d, task, noise_std, seed, n_classes))
    return split_private_public(data, SplitSpec(public_fraction, split_seed))

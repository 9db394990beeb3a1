import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from robust_rnn.model import Activation, RnnParams  # noqa: E402

MNIST_DIR = Path(os.environ.get("ROBUST_RNN_MNIST", "/root/data/mnist"))


def random_params(rng, n, d, m, activation=Activation.TANH, scale=0.6):
    return RnnParams(
        scale * rng.standard_normal((n, n)) / np.sqrt(n),
        scale * rng.standard_normal((n, d)),
        0.3 * rng.standard_normal(n),
        rng.standard_normal((m, n)),
        rng.standard_normal(m),
        activation,
    )


def random_psd(rng, k, scale=1.0):
    g = rng.standard_normal((k, k))
    return scale * g @ g.T / k


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def mnist_dir():
    if not (MNIST_DIR / "t10k-images-idx3-ubyte").exists():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR} (set ROBUST_RNN_MNIST)")
    return MNIST_DIR


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion for the summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, title, ok, detail=""):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

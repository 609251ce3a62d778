import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oiltta.core_math import make_rng  # noqa: E402
from oiltta.experiment import load_config, train_source  # noqa: E402
from oiltta.model import Instance, ModelParams  # noqa: E402

ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_cfg():
    return load_config()


@pytest.fixture(scope="session")
def trained(default_cfg):
    """Source model trained with the default config (about two seconds)."""
    return train_source(default_cfg)


@pytest.fixture
def rng():
    return make_rng(1234)


def random_batch(rng, n=4, L=6, d=8, labelled=True):
    out = []
    for _ in range(n):
        s = int(rng.integers(0, L))
        e = int(rng.integers(s, L))
        out.append(Instance(rng.normal(size=(L, d)), (s, e) if labelled else None))
    return out


def random_params(rng, d=8, h=8, scale=2.0):
    return ModelParams.init(d, h, rng, scale=scale)

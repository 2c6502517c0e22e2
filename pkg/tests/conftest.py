import numpy as np
import pytest

from hybridrec.config import RunConfig


def small_config(**kw) -> RunConfig:
    """A run that finishes in about a second."""
    base = RunConfig().set(
        cluster__nn_workers=2, cluster__embedding_workers=2, cluster__ps_shards=2,
        data__samples=2000, data__vocab=2000,
        train__batch_size=32, train__eval_every=10, train__eval_samples=400, train__checkpoint_every=10,
    )
    return base.set(**kw) if kw else base


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    return small_config()


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

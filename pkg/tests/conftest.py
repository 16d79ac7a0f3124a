import dataclasses

import pytest

from refnet.config import smoke_config
from refnet.data import DataConfig, SegDataset, build_splits

TINY_DATA = DataConfig(size=32, n_target=10, n_open=10, n_heldout=4, k=3)


def tiny_setup(**train):
    """Smoke preset shrunk further for unit tests (32 px, depth 2, batch 2)."""
    cfg = smoke_config(**{**dict(batch_size=2, target_batch=2, critic_batch=2, max_iterations=3), **train})
    return cfg.train, dataclasses.replace(cfg.arch, depth=2)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    build_splits(TINY_DATA, root, seed=0)
    return root


@pytest.fixture
def tiny_data(tiny_root):
    return SegDataset(tiny_root)


def pytest_terminal_summary(terminalreporter):
    """Collect the acceptance lines in one block at the end of the run."""
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])

import numpy as np
import pytest

from compresslab import toyvlm as tv


@pytest.fixture(scope="session")
def tiny_cfg():
    return tv.ModelConfig(grid_side=4, patch_dim=12, model_dim=16, heads=2, layers=4, ffn_dim=24)


@pytest.fixture(scope="session")
def tiny_weights(tiny_cfg):
    return tv.init_weights(tiny_cfg, seed=3)


@pytest.fixture(scope="session")
def tiny_data(tiny_cfg):
    return tv.generate_dataset(tiny_cfg, 16, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])

import numpy as np
import pytest

from vitsr import data as D
from vitsr.model import ModelConfig

MICRO = dict(image_size=32, patch_size=8, embed_dim=32, encoder_depth=2, decoder_depth=2,
             num_heads_encoder=2, num_heads_decoder=2)


@pytest.fixture
def micro_cfg():
    return ModelConfig(**MICRO)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """8 train / 4 val synthetic 48px images."""
    root = tmp_path_factory.mktemp("synth")
    D.make_synthetic_dataset(root, 8, 4, 48, seed=3)
    return root


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

import sys
from pathlib import Path

import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.corpus import CorpusSpec, gen_corpus  # noqa: E402
from src.model import ModelConfig  # noqa: E402


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False,
        help="run the full-size acceptance experiments",
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size acceptance run, skipped without --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_model_config():
    """16x16 model small enough for per-test training steps."""
    return ModelConfig(
        image_size=16,
        content_channels=8,
        forgery_channels=8,
        base_width=4,
        embed_dim=4,
        num_methods=2,
    )


@pytest.fixture(scope="session")
def tiny_spec():
    return CorpusSpec(n_real=24, n_fake_per_method=12, image_size=16, seed=3)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_spec, tmp_path_factory):
    """Three-method 16x16 corpus shared by the whole session (read-only)."""
    return gen_corpus(tiny_spec, str(tmp_path_factory.mktemp("tiny_corpus")))

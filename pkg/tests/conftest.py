import sys
from pathlib import Path

import numpy as np
import pytest

from hiq.config import DataConfig, ModelConfig, TrainConfig

sys.path.insert(0, str(Path(__file__).parent))

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_model_config(**overrides) -> ModelConfig:
    """Smallest model that still exercises every component."""
    base = dict(
        input_size=32,
        backbone_widths=(4, 8, 8, 8),
        convs_per_stage=1,
        d_q=8,
        n_heads=2,
        query_channels=4,
        query_size=2,
        max_components=4,
        camp_dim=4,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


def tiny_train_config(**overrides) -> TrainConfig:
    """A few-second training run on a 2x2 synthetic hierarchy."""
    cfg = TrainConfig(
        epochs=1,
        batch_size=8,
        lr=0.02,
        backbone_lr_mult=0.5,
        grad_clip=5.0,
        model=tiny_model_config(),
        data=DataConfig(n_coarse=2, children=(2,), images_per_class=5, noise=0.05, seed=0),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])

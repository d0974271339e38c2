import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pcnet.config import TrainConfig
from pcnet.data import generate_synthetic, prepare_splits

settings.register_profile("pcnet", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pcnet")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides) -> TrainConfig:
    """A configuration small enough for sub-second epochs."""
    base = dict(epochs=2, synth_classes=4, synth_per_class=12, input_size=16, channels=(4, 8), P=4, K=3,
                train_fraction=0.5, seed=3)
    base.update(overrides)
    return TrainConfig(**base).validate()


@pytest.fixture
def tiny_data():
    cfg = tiny_config()
    ds = generate_synthetic(cfg.synth_classes, cfg.synth_per_class, (cfg.input_size,) * 2, cfg.seed)
    return prepare_splits(ds, cfg.train_fraction, cfg.seed)

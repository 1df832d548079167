import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from alcagcn.dataset import assign_protocol_split
from alcagcn.encoder import EncoderConfig
from alcagcn.model import Model, ModelConfig
from alcagcn.synthetic import generate_synthetic_dataset

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

SMALL_ENCODER = EncoderConfig(channels=(8, 16), strides=(2, 2), dropout=0.0)


def small_model(seed=0, **kw):
    kw.setdefault("d_emb", 16)
    return Model(ModelConfig(encoder=kw.pop("encoder", SMALL_ENCODER), **kw), seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    ds = generate_synthetic_dataset(8, 6, seed=3, difficulty=0.5)
    return assign_protocol_split(ds, [6, 7], val_fraction=0.2, seed=0)

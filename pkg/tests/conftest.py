import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from diffpost.model import ModelConfig, build_model
from diffpost.seq import default_vocab

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def vocab():
    return default_vocab()


def tiny_cfg(**kw):
    base = dict(vocab_size=64, d_model=16, n_layers=1, n_heads=2, max_len=48, dtype="float64", init_seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return build_model(tiny_cfg())


@pytest.fixture
def make_model():
    def make(**kw):
        return build_model(tiny_cfg(**kw))
    return make


def content_tokens(vocab, rng, n):
    """n random non-reserved ids."""
    low = max(vocab.reserved) + 1
    return rng.integers(low, vocab.size, n)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


def random_head(model, scale=1.0, seed=0):
    """Give the output layer enough spread that predictions are far from uniform."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        model.head.weight.copy_(torch.randn(model.head.weight.shape, generator=g, dtype=torch.float64) * scale)
        model.head.bias.copy_(torch.randn(model.head.bias.shape, generator=g, dtype=torch.float64) * scale)
    return model

import numpy as np
import pytest

from rsmi.nn import ModelConfig, init_params


def small_config(**kw):
    opts = dict(vocab_size=12, n_classes=3, d_model=8, n_blocks=2, d_ff=12, max_len=8,
                dtype="float64")
    opts.update(kw)
    return ModelConfig(**opts)


@pytest.fixture
def small_model():
    cfg = small_config(noise_sites=("embed", "block1"), sigma=0.3)
    return init_params(cfg, seed=3), cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

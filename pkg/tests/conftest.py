import pytest
import torch

from miar.config import ModelConfig, TrainConfig
from miar.datamodel import SyntheticSpec, generate_synthetic
from miar.fusion import build_model

TOY_DIMS = dict(d_t1=6, d_t2=6, d_a=7, d_v=5)


@pytest.fixture
def toy_model_cfg() -> ModelConfig:
    return ModelConfig(d_model=8, n_heads=2, ffn_mult=2, d_align=4, **TOY_DIMS)


@pytest.fixture
def toy_train_cfg() -> TrainConfig:
    return TrainConfig(
        d_model=8, n_heads=2, ffn_mult=2, d_align=4,
        batch_size=8, epochs=2, seed=101,
    )


def make_toy_split(n=12, seq_len=10, seed=3, name="train", **overrides):
    spec = SyntheticSpec(n_samples=n, seq_len=seq_len, seed=seed, **TOY_DIMS, **overrides)
    return generate_synthetic(spec, name=name)


@pytest.fixture
def toy_split():
    return make_toy_split()


@pytest.fixture
def toy_model(toy_model_cfg):
    return build_model(toy_model_cfg, seed=7)


@pytest.fixture
def toy_model_f64(toy_model_cfg):
    return build_model(toy_model_cfg, seed=7, dtype=torch.float64)

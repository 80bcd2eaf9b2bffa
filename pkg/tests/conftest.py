import numpy as np
import pytest
import torch

from elasticdet.datasynth import DatasetSpec, generate_dataset
from elasticdet.model import ArchConfig, ElasticWeights, ModelConfig


@pytest.fixture(scope="session")
def tiny_arch() -> ArchConfig:
    return ArchConfig(
        embed_dim=32,
        num_heads=2,
        mlp_ratio=2.0,
        enc_depth=3,
        dec_depth=2,
        num_classes=3,
        base_patch_size=16,
        min_patch_size=8,
        max_resolution=64,
        max_queries=16,
        mask_dim=8,
        mask_head=True,
    )


@pytest.fixture(scope="session")
def tiny_weights(tiny_arch) -> ElasticWeights:
    torch.manual_seed(7)
    weights = ElasticWeights(tiny_arch)
    weights.eval()
    return weights


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(resolution=64, patch_size=16, num_windows=2,
                       num_decoder_layers=2, num_queries=8, mask_head_enabled=True)


@pytest.fixture(scope="session")
def shapes_dataset():
    return generate_dataset(DatasetSpec(num_images=12, image_size=64, seed=11))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(123)

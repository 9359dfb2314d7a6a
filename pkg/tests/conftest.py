"""Shared desk-scale fixtures: a small random backbone and synthetic data."""

import numpy as np
import pytest
import torch

from udfa.config import ModelConfig, TrainConfig
from udfa.data import prepare_data, synth_dataset
from udfa.model import build_model

torch.set_num_threads(1)


def make_tiny_cfg(**overrides) -> ModelConfig:
    """Small random-backbone config: full architecture, desk-scale sizes."""
    base = dict(
        patch_size=14, embed_dim=64, num_blocks=6, num_stages=3, num_classes=4,
        spa_scales=(4, 8, 14), spa_channels=(16, 32, 64), mhca_heads=4,
        input_size=(56, 56), backbone_native_grid=4, decoder_channels=(64, 64, 32),
    )
    base.update(overrides)
    return ModelConfig(**base)


def make_tiny_train_cfg(**overrides) -> TrainConfig:
    base = dict(dataset="synthetic", batch_size=2, base_lr=3e-3, max_iterations=10, seed=7)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return make_tiny_cfg()


@pytest.fixture
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg, seed=0)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """Synthetic dataset at the tiny model's input size (no resampling)."""
    root = tmp_path_factory.mktemp("synth") / "data"
    prepare_data("synthetic", root, num_cases=2, shape=(4, 56, 56), num_classes=4, seed=0)
    return root


@pytest.fixture(scope="session")
def overfit_slices():
    """Two fixed synthetic slices with foreground, for overfit runs."""
    ds = synth_dataset(num_cases=2, shape=(6, 56, 56), num_classes=4, seed=0)
    slices = [s for s in ds["train"] if (s.label > 0).any()][:2]
    assert len(slices) == 2
    return slices


def rand_images(batch, size, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(batch, 3, size, size, generator=g)


def rand_masks(shape, num_classes, seed):
    rng = np.random.default_rng(seed)
    return rng.integers(0, num_classes, size=shape)

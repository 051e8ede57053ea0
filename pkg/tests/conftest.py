import numpy as np
import pytest
import torch

torch.set_num_threads(2)

from ocdit.data import DatasetConfig, generate_dataset
from ocdit.vae import MaskVae, VaeConfig


@pytest.fixture(scope="session")
def micro_dataset():
    cfg = DatasetConfig(n_objects=10, n_train_objects=7, n_templates=2,
                        template_resolution=16, scene_resolution=32,
                        n_train_scenes=24, n_test_scenes=6, k_range=(3, 5),
                        duplicate_prob=0.0, seed=101)
    return generate_dataset(cfg)


@pytest.fixture(scope="session")
def micro_vae(micro_dataset):
    """Untrained but non-degenerate VAE matched to the micro dataset
    (32x32 masks, factor 8 -> 4x4 latent grid)."""
    torch.manual_seed(7)
    vae = MaskVae(VaeConfig(latent_channels=8, base_width=16, latent_scale=2.0))
    torch.nn.init.normal_(vae.to_moments.weight, std=0.05)
    vae.eval()
    return vae


def micro_train_kwargs():
    return dict(
        image_resolution=32, mask_resolution=32, batch_size=2,
        model=dict(embed_dim=32, n_blocks=1, n_heads=2, mlp_ratio=2),
        backbone=dict(patch_size=8, feature_dim=16, depth=1),
        diffusion=dict(num_steps=4),
    )

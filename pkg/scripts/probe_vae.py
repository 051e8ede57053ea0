"""Definitive VAE recipe run at acceptance scale; saves the checkpoint."""

import time
from pathlib import Path

import numpy as np
import torch

torch.set_num_threads(2)

from ocdit.data import DatasetConfig, generate_dataset, vae_training_masks
from ocdit.vae import VaeConfig, save_vae, train_vae

OUT = Path(__file__).parent / "vae_out"
OUT.mkdir(exist_ok=True)

dcfg = DatasetConfig(n_objects=40, n_train_objects=30, n_train_scenes=800, n_test_scenes=8,
                     k_range=(4, 8), duplicate_prob=0.0, seed=7)
ds = generate_dataset(dcfg)
masks = vae_training_masks(ds, "train")
rng = np.random.default_rng(0)
masks = masks[rng.choice(len(masks), 4000, replace=False)]
print(f"masks: {masks.shape}", flush=True)

t0 = time.time()
vae, stats = train_vae(masks, VaeConfig(), epochs=12, batch_size=48,
                       seed=0, log_path=OUT / "vae_rev3.jsonl")
save_vae(OUT / "vae_rev3.npz", vae)
print(f"{time.time()-t0:.0f}s iou={stats['roundtrip_iou']:.4f} "
      f"std={stats['scaled_latent_std']:.4f} mean={stats['scaled_latent_mean']:.4f}", flush=True)

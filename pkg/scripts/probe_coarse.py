"""Coarse-model probe with the conditioning fix: tracks loss, high-sigma
conditional error, and AP; saves checkpoints so results are inspectable."""

import time
from pathlib import Path

import numpy as np
import torch

torch.set_num_threads(2)

from ocdit.data import DatasetConfig, generate_dataset
from ocdit.diffusion import denoise
from ocdit.pipeline import EnsembleConfig, SegmenterBundle, evaluate_scenes
from ocdit.trainer import (TrainConfig, TrainState, build_coarse_batch, build_models,
                           lr_at, save_train_checkpoint, train_step)
from ocdit.vae import load_vae

OUT = Path(__file__).parent / "coarse_out"
OUT.mkdir(exist_ok=True)
t0 = time.time()

dcfg = DatasetConfig(n_objects=40, n_train_objects=30, n_train_scenes=800, n_test_scenes=8,
                     k_range=(4, 8), duplicate_prob=0.0, seed=7)
ds = generate_dataset(dcfg)
vae = load_vae(Path(__file__).parent / "vae_out" / "vae_rev2.npz")
print(f"[{time.time()-t0:.0f}s] dataset + vae ready", flush=True)

cfg = TrainConfig(variant="coarse", n_objects=4, capacity=8, pe_strategy="random_interval",
                  epochs=10, steps_per_epoch=400, batch_size=8, warmup_steps=200,
                  model=dict(embed_dim=128, n_blocks=3, n_heads=4),
                  backbone=dict(feature_dim=64, depth=2), seed=0)
model, backbone, uhead, diff = build_models(cfg, vae, dcfg.template_resolution, dcfg.n_templates)
opt = torch.optim.Adam(list(model.parameters()) + list(backbone.parameters())
                       + list(uhead.parameters()), lr=cfg.lr)
state = TrainState(model, backbone, uhead, opt, diff)
rng = np.random.default_rng(0)
srng = torch.Generator().manual_seed(1)
nrng = torch.Generator().manual_seed(2)
total = cfg.epochs * cfg.steps_per_epoch
bundle = SegmenterBundle(vae=vae, backbone=backbone, model=model, diffusion=diff, train_cfg=cfg)


def high_sigma_mse():
    b = build_coarse_batch(ds, np.random.default_rng(123), cfg, vae)
    x = b.latents
    sigma = torch.full((x.shape[0],), 40.0)
    noise = torch.randn(x.shape, generator=torch.Generator().manual_seed(5)) * 40.0
    with torch.no_grad():
        feats = backbone.extract(b.images)
        tf = backbone.extract_template_features(b.templates.reshape(-1, *b.templates.shape[-3:]))
        tf = tf.reshape(*b.templates.shape[:3], *tf.shape[1:])
        d = denoise(model, x + noise, sigma,
                    {"image_features": feats, "template_features": tf}, sigma_data=0.5)
    return float(((d - x) ** 2).mean()) / 0.25


losses = []
for step in range(total):
    b = build_coarse_batch(ds, rng, cfg, vae)
    losses.append(train_step(b, state, srng, nrng,
                             lr_at(step, total, cfg.lr, cfg.warmup_steps, cfg.anneal_start)))
    if (step + 1) % 200 == 0:
        print(f"[{time.time()-t0:.0f}s] step {step+1} loss(last200)={np.mean(losses[-200:]):.4f} "
              f"hi-sigma={high_sigma_mse():.3f}", flush=True)
    if (step + 1) % 800 == 0:
        for n_ens in (1, 4):
            rep = evaluate_scenes(bundle, ds, ds.scenes_of("test"),
                                  EnsembleConfig(n_ensemble=n_ens, n_aug=1), seed=99)
            print(f"[{time.time()-t0:.0f}s] step {step+1} AP@ens{n_ens}={rep.ap:.4f} "
                  f"thr50={rep.per_threshold[0.5]:.3f}", flush=True)
        save_train_checkpoint(OUT / f"step{step+1}.npz", cfg, state)
print("done", flush=True)

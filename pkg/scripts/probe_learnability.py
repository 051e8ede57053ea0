"""Quick learnability probe: small dataset, short VAE + coarse training,
AP on a handful of held-out scenes. Gates the full acceptance runs."""

import json
import time
from pathlib import Path

import numpy as np
import torch

torch.set_num_threads(2)

from ocdit.data import DatasetConfig, generate_dataset, vae_training_masks
from ocdit.pipeline import EnsembleConfig, SegmenterBundle, evaluate_scenes
from ocdit.trainer import TrainConfig, TrainState, build_coarse_batch, build_models, train_step, lr_at
from ocdit.vae import VaeConfig, train_vae

OUT = Path("/root/pkg/scripts/probe_out")
OUT.mkdir(parents=True, exist_ok=True)
log = open(OUT / "probe.log", "w")


def say(*a):
    print(*a, file=log, flush=True)
    print(*a, flush=True)


t0 = time.time()
dcfg = DatasetConfig(n_objects=40, n_train_objects=30, n_train_scenes=600, n_test_scenes=16,
                     k_range=(4, 8), duplicate_prob=0.0, seed=7)
ds = generate_dataset(dcfg)
say(f"[{time.time()-t0:.0f}s] dataset: {len(ds.scenes)} scenes")

masks = vae_training_masks(ds)
say(f"[{time.time()-t0:.0f}s] vae masks: {masks.shape}")
vae, stats = train_vae(masks, VaeConfig(), epochs=6, batch_size=64, seed=0,
                       log_path=OUT / "vae_metrics.jsonl")
say(f"[{time.time()-t0:.0f}s] vae: iou={stats['roundtrip_iou']:.4f} "
    f"std={stats['scaled_latent_std']:.4f} mean={stats['scaled_latent_mean']:.4f}")

cfg = TrainConfig(variant="coarse", n_objects=4, capacity=8, pe_strategy="random_interval",
                  epochs=6, steps_per_epoch=400, batch_size=8,
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
ens = EnsembleConfig(n_ensemble=4, n_aug=1)
losses = []
for step in range(total):
    b = build_coarse_batch(ds, rng, cfg, vae)
    loss = train_step(b, state, srng, nrng, lr_at(step, total, cfg.lr, cfg.warmup_steps, cfg.anneal_start))
    losses.append(loss)
    if (step + 1) % 100 == 0:
        say(f"[{time.time()-t0:.0f}s] step {step+1}: loss(last100)={np.mean(losses[-100:]):.4f}")
    if (step + 1) % 400 == 0:
        bundle = SegmenterBundle(vae=vae, backbone=backbone, model=model, diffusion=diff, train_cfg=cfg)
        rep = evaluate_scenes(bundle, ds, ds.scenes_of("test")[:8], ens, seed=99)
        say(f"[{time.time()-t0:.0f}s] step {step+1}: AP@ens4(8 scenes)={rep.ap:.4f} "
            f"per_thr50={rep.per_threshold[0.5]:.3f}")

say(json.dumps({"first500": float(np.mean(losses[:500])), "last500": float(np.mean(losses[-500:]))}))
say("done", time.time() - t0)

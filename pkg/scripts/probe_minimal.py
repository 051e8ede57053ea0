"""Minimal end-to-end check: easiest possible toy task, small model.
If this cannot reach AP > 0, the train->infer path has a bug."""

import time
from pathlib import Path

import numpy as np
import torch

torch.set_num_threads(2)

from ocdit.data import DatasetConfig, generate_dataset, vae_training_masks
from ocdit.pipeline import EnsembleConfig, SegmenterBundle, coarse_infer, evaluate_scenes, scene_templates
from ocdit.trainer import TrainConfig, TrainState, build_coarse_batch, build_models, lr_at, train_step
from ocdit.vae import VaeConfig, train_vae

OUT = Path(__file__).parent / "minimal_out"
OUT.mkdir(exist_ok=True)
t0 = time.time()

dcfg = DatasetConfig(n_objects=6, n_train_objects=4, n_templates=2, template_resolution=16,
                     scene_resolution=32, k_range=(2, 3), duplicate_prob=0.0,
                     n_train_scenes=300, n_test_scenes=8, seed=5)
ds = generate_dataset(dcfg)
masks = vae_training_masks(ds)
print(f"[{time.time()-t0:.0f}s] {len(masks)} masks", flush=True)
vae, stats = train_vae(masks, VaeConfig(latent_channels=16, base_width=16), epochs=8,
                       batch_size=32, seed=0, log_path=OUT / "vae.jsonl")
print(f"[{time.time()-t0:.0f}s] vae iou={stats['roundtrip_iou']:.4f} std={stats['scaled_latent_std']:.3f}", flush=True)

cfg = TrainConfig(variant="coarse", n_objects=2, capacity=2, pe_strategy="baseline_chunked",
                  image_resolution=32, mask_resolution=32, epochs=4, steps_per_epoch=300,
                  batch_size=8, model=dict(embed_dim=96, n_blocks=2, n_heads=4),
                  backbone=dict(feature_dim=48, depth=2), seed=0)
model, backbone, uhead, diff = build_models(cfg, vae, dcfg.template_resolution, dcfg.n_templates)
opt = torch.optim.Adam(list(model.parameters()) + list(backbone.parameters())
                       + list(uhead.parameters()), lr=cfg.lr)
state = TrainState(model, backbone, uhead, opt, diff)
rng = np.random.default_rng(0)
srng = torch.Generator().manual_seed(1)
nrng = torch.Generator().manual_seed(2)
total = cfg.epochs * cfg.steps_per_epoch
bundle = SegmenterBundle(vae=vae, backbone=backbone, model=model, diffusion=diff, train_cfg=cfg)
ens = EnsembleConfig(n_ensemble=4, n_aug=1, coarse_keep_threshold=0.2)

for step in range(total):
    b = build_coarse_batch(ds, rng, cfg, vae)
    loss = train_step(b, state, srng, nrng, lr_at(step, total, cfg.lr, cfg.warmup_steps, cfg.anneal_start))
    if (step + 1) % 150 == 0:
        rep = evaluate_scenes(bundle, ds, ds.scenes_of("test"), ens, seed=99)
        # peek at raw confidences on one scene
        scene = ds.scenes_of("test")[0]
        ids = sorted({i.object_id for i in scene.instances})
        preds = coarse_infer(scene.image, ids, scene_templates(ds, ids), bundle,
                             EnsembleConfig(n_ensemble=4, n_aug=1, coarse_keep_threshold=0.0001),
                             torch.Generator().manual_seed(0))
        confs = {p.object_id: round(p.confidence, 3) for p in preds}
        maxmap = {p.object_id: round(float(p.confidence_map.max()), 3) for p in preds}
        print(f"[{time.time()-t0:.0f}s] step {step+1} loss={loss:.3f} AP={rep.ap:.4f} "
              f"confs={confs} maxmap={maxmap}", flush=True)

torch.save({"model": model.state_dict(), "backbone": backbone.state_dict()}, OUT / "weights.pt")
print("done", flush=True)

"""Training loops for the coarse and refine diffusion models.

Coarse batches pick several nearby instances per scene (true positives
only) and crop either randomly or around the chosen objects; refine batches
crop a single jittered modal box and expose the model to false positives
(conditioning object absent from the crop, empty target mask). Targets are
scaled VAE mean-latents; the denoiser, backbone and uncertainty head train
jointly against the uncertainty-weighted preconditioned denoising loss.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import diffusion as dfn
from .backbone import BackboneConfig, PatchFeatureExtractor
from .checkpoint import load_checkpoint, load_state_dict_from_arrays, save_checkpoint, state_dict_to_arrays
from .data import MIN_VISIBLE_PIXELS, SceneSample, ToyDataset, select_conditioning_objects
from .diffusion import DiffusionConfig, UncertaintyHead, denoise, denoising_loss, sample_training_sigma, uncertainty_weighted_loss
from .model import ModelConfig, ObjectConditionedDenoiser
from .pos_scaling import ScalingStrategy, gather_codes, training_slot_indices
from .vae import MaskVae, load_vae


@dataclass
class TrainConfig:
    variant: str = "coarse"            # "coarse" | "refine"
    n_objects: int = 4                 # N_O slots per sample (refine: 1)
    image_resolution: int = 64
    mask_resolution: int = 64
    epochs: int = 30
    steps_per_epoch: int = 500
    batch_size: int = 8
    lr: float = 2e-4
    warmup_steps: int = 200
    anneal_start: float = 0.72
    rgb_aug_prob: float = 0.9
    background_aug_prob: float = 0.2
    random_crop_prob: float = 0.7
    crop_scale: tuple[float, float] = (0.5, 1.1)
    box_jitter: float = 0.15
    false_positive_prob: float = 0.3   # refine only
    pe_strategy: str = "baseline_chunked"
    capacity: int | None = None        # object-code table size; default n_objects
    seed: int = 0
    val_fraction: float = 0.02
    eval_every_epochs: int = 0         # 0 disables periodic AP evaluation
    eval_scenes: int = 8
    eval_ensemble: int = 1
    model: dict = field(default_factory=dict)      # ModelConfig overrides
    backbone: dict = field(default_factory=dict)   # BackboneConfig overrides
    diffusion: dict = field(default_factory=dict)  # DiffusionConfig overrides

    def validate(self) -> None:
        if self.variant not in ("coarse", "refine"):
            raise ValueError(f"variant must be coarse|refine, got {self.variant}")
        if self.variant == "refine" and self.n_objects != 1:
            raise ValueError("refine trains with a single object slot")
        if not 0 < self.anneal_start < 1:
            raise ValueError(f"anneal_start must be in (0,1), got {self.anneal_start}")
        ScalingStrategy(self.pe_strategy)


@dataclass
class TrainBatch:
    images: torch.Tensor        # (B, 3, H, W) float in [0,1]
    latents: torch.Tensor       # (B, N_O, d, h, w) scaled clean targets
    templates: torch.Tensor     # (B, N_O, N_T, 3, ht, wt)
    present: torch.Tensor       # (B, N_O) bool
    slot_positions: np.ndarray  # (B, N_O) float positions into the code table
    meta: dict = field(default_factory=dict)


def lr_at(step: int, total_steps: int, peak: float, warmup: int, anneal_start: float) -> float:
    """Linear warmup from 0, flat, then cosine annealing to 0 at total_steps."""
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    s0 = int(anneal_start * total_steps)
    if step < s0:
        return peak
    t = (step - s0) / max(total_steps - s0, 1)
    return peak * 0.5 * (1 + math.cos(math.pi * min(t, 1.0)))


# ---------------------------------------------------------------- cropping

def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    pil = Image.fromarray((img * 255).astype(np.uint8) if img.dtype != np.uint8 else img)
    return np.asarray(pil.resize((size, size), Image.BILINEAR)).astype(np.float32) / 255.0


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    pil = Image.fromarray(mask.astype(np.uint8) * 255)
    return np.asarray(pil.resize((size, size), Image.NEAREST)) > 127


def crop_window(arr: np.ndarray, y0: int, x0: int, side: int, pad_value=0) -> np.ndarray:
    """Crop a square window, replicate-padding the image if it overhangs."""
    h, w = arr.shape[:2]
    pad = max(0, -y0, -x0, y0 + side - h, x0 + side - w)
    if pad > 0:
        widths = ((pad, pad), (pad, pad)) + ((0, 0),) * (arr.ndim - 2)
        mode = "edge" if arr.ndim == 3 else "constant"
        arr = np.pad(arr, widths, mode=mode)
        y0 += pad
        x0 += pad
    return arr[y0:y0 + side, x0:x0 + side]


def square_box(y0: float, x0: float, y1: float, x1: float, bounds: int) -> tuple[int, int, int]:
    """Expand a box to a square window (y0, x0, side), clamped into bounds."""
    side = int(round(max(y1 - y0, x1 - x0)))
    side = max(8, min(side, bounds))
    cy, cx = (y0 + y1) / 2, (x0 + x1) / 2
    yy = int(round(cy - side / 2))
    xx = int(round(cx - side / 2))
    yy = min(max(yy, 0), bounds - side)
    xx = min(max(xx, 0), bounds - side)
    return yy, xx, side


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1


def rgb_augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Brightness / contrast / per-channel gain / additive noise."""
    out = img.astype(np.float32)
    out = out * rng.uniform(0.8, 1.2) + rng.uniform(-0.08, 0.08)
    out = (out - 0.5) * rng.uniform(0.85, 1.15) + 0.5
    out = out * rng.uniform(0.9, 1.1, size=(1, 1, 3))
    out = out + rng.normal(0, 0.02, size=out.shape)
    return np.clip(out, 0, 1).astype(np.float32)


# ---------------------------------------------------------------- batches

def _templates_for(dataset: ToyDataset, object_id: int) -> np.ndarray:
    t = dataset.templates[object_id].images
    return t.astype(np.float32) / 255.0  # (N_T, ht, wt, 3)


def _background_augment(img: np.ndarray, instances_mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    from .data import render_background
    bg, _ = render_background(rng, img.shape[0])
    out = img.copy()
    out[~instances_mask] = bg[~instances_mask]
    return out


def build_coarse_batch(dataset: ToyDataset, rng: np.random.Generator, cfg: TrainConfig,
                       vae: MaskVae, scenes: list[SceneSample] | None = None) -> TrainBatch:
    """Batch of multi-object samples where every slot is a visible instance."""
    scenes = dataset.scenes_of("train") if scenes is None else scenes
    images, mask_stacks, template_stacks, scales, plans = [], [], [], [], []
    while len(images) < cfg.batch_size:
        scene = scenes[int(rng.integers(0, len(scenes)))]
        res = scene.image.shape[0]
        img = scene.image.astype(np.float32) / 255.0

        if rng.random() < cfg.random_crop_prob:
            scale = float(rng.uniform(*cfg.crop_scale))
            side = max(8, int(round(scale * res)))
            y0 = int(rng.integers(min(0, res - side), max(1, res - side + 1)))
            x0 = int(rng.integers(min(0, res - side), max(1, res - side + 1)))
            visible = []
            for idx, inst in enumerate(scene.instances):
                m = crop_window(inst.mask, y0, x0, side)
                if m.sum() >= MIN_VISIBLE_PIXELS:
                    visible.append(idx)
            if len(visible) < cfg.n_objects:
                continue
            sub = [scene.instances[i] for i in visible]
            pick = select_conditioning_objects(
                SceneSample(scene.scene_id, scene.split, scene.image,
                            [type(inst)(inst.object_id, crop_window(inst.mask, y0, x0, side), inst.depth)
                             for inst in sub], scene.background_id),
                cfg.n_objects, rng)
            chosen = [sub[i] for i in pick.instance_indices]
            chosen_masks = [crop_window(inst.mask, y0, x0, side) for inst in chosen]
        else:
            if len(scene.instances) < cfg.n_objects:
                continue
            pick = select_conditioning_objects(scene, cfg.n_objects, rng)
            chosen = [scene.instances[i] for i in pick.instance_indices]
            boxes = [mask_bbox(inst.mask) for inst in chosen]
            y0b = min(b[0] for b in boxes); x0b = min(b[1] for b in boxes)
            y1b = max(b[2] for b in boxes); x1b = max(b[3] for b in boxes)
            j = cfg.box_jitter * max(y1b - y0b, x1b - x0b)
            y0b -= rng.uniform(0, j); x0b -= rng.uniform(0, j)
            y1b += rng.uniform(0, j); x1b += rng.uniform(0, j)
            y0, x0, side = square_box(y0b, x0b, y1b, x1b, res)
            scale = side / res
            chosen_masks = [crop_window(inst.mask, y0, x0, side) for inst in chosen]
            if any(m.sum() < MIN_VISIBLE_PIXELS for m in chosen_masks):
                continue

        crop_img = crop_window(img, y0, x0, side)
        masks = np.stack([resize_mask(m, cfg.mask_resolution) for m in chosen_masks])
        if masks.reshape(cfg.n_objects, -1).sum(1).min() == 0:
            continue
        crop_img = resize_image(crop_img, cfg.image_resolution)
        if rng.random() < cfg.background_aug_prob:
            all_masks = np.zeros(scene.instances[0].mask.shape, dtype=bool)
            for inst in scene.instances:
                all_masks |= inst.mask
            fg = resize_mask(crop_window(all_masks, y0, x0, side), cfg.image_resolution)
            crop_img = _background_augment(crop_img, fg, rng)
        if rng.random() < cfg.rgb_aug_prob:
            crop_img = rgb_augment(crop_img, rng)

        capacity = cfg.capacity or cfg.n_objects
        plan = training_slot_indices(ScalingStrategy(cfg.pe_strategy), rng, capacity, cfg.n_objects)
        images.append(crop_img)
        mask_stacks.append(masks)
        template_stacks.append(np.stack([_templates_for(dataset, inst.object_id) for inst in chosen]))
        plans.append(plan.positions)
        scales.append(scale)

    return _finalize_batch(images, mask_stacks, template_stacks, plans, vae,
                           present=np.ones((cfg.batch_size, cfg.n_objects), dtype=bool),
                           meta={"crop_scales": scales})


def build_refine_batch(dataset: ToyDataset, rng: np.random.Generator, cfg: TrainConfig,
                       vae: MaskVae, scenes: list[SceneSample] | None = None) -> TrainBatch:
    """Single-object modal-crop batch with false-positive exposure."""
    scenes = dataset.scenes_of("train") if scenes is None else scenes
    pool = dataset.train_object_ids
    images, mask_stacks, template_stacks, present, plans = [], [], [], [], []
    while len(images) < cfg.batch_size:
        scene = scenes[int(rng.integers(0, len(scenes)))]
        res = scene.image.shape[0]
        inst = scene.instances[int(rng.integers(0, len(scene.instances)))]
        y0b, x0b, y1b, x1b = mask_bbox(inst.mask)
        j = cfg.box_jitter * max(y1b - y0b, x1b - x0b)
        y0, x0, side = square_box(y0b - rng.uniform(0, j), x0b - rng.uniform(0, j),
                                  y1b + rng.uniform(0, j), x1b + rng.uniform(0, j), res)
        crop_mask = crop_window(inst.mask, y0, x0, side)
        if crop_mask.sum() < MIN_VISIBLE_PIXELS:
            continue

        is_fp = rng.random() < cfg.false_positive_prob
        if is_fp:
            in_crop = {i.object_id for i in scene.instances
                       if crop_window(i.mask, y0, x0, side).sum() > 0}
            candidates = [o for o in pool if o not in in_crop]
            if not candidates:
                continue
            cond_object = int(rng.choice(candidates))
            target = np.zeros((cfg.mask_resolution, cfg.mask_resolution), dtype=bool)
        else:
            cond_object = inst.object_id
            target = resize_mask(crop_mask, cfg.mask_resolution)
            if target.sum() == 0:
                continue

        crop_img = resize_image(crop_window(scene.image.astype(np.float32) / 255.0, y0, x0, side),
                                cfg.image_resolution)
        if rng.random() < cfg.rgb_aug_prob:
            crop_img = rgb_augment(crop_img, rng)

        images.append(crop_img)
        mask_stacks.append(target[None])
        template_stacks.append(_templates_for(dataset, cond_object)[None])
        present.append([not is_fp])
        plans.append(np.zeros(1))

    return _finalize_batch(images, mask_stacks, template_stacks, plans, vae,
                           present=np.array(present, dtype=bool), meta={})


def _finalize_batch(images, mask_stacks, template_stacks, plans, vae: MaskVae,
                    present: np.ndarray, meta: dict) -> TrainBatch:
    imgs = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()
    masks = torch.from_numpy(np.stack(mask_stacks))           # (B, N_O, Hm, Wm)
    b, n_o = masks.shape[:2]
    with torch.no_grad():
        lat = vae.encode_latent(masks.reshape(b * n_o, *masks.shape[2:]).float())
    latents = lat.reshape(b, n_o, *lat.shape[1:])
    templates = torch.from_numpy(np.stack(template_stacks)).permute(0, 1, 2, 5, 3, 4).contiguous()
    return TrainBatch(images=imgs, latents=latents, templates=templates,
                      present=torch.from_numpy(present),
                      slot_positions=np.stack(plans), meta=meta)


# ---------------------------------------------------------------- training

@dataclass
class TrainState:
    model: ObjectConditionedDenoiser
    backbone: PatchFeatureExtractor
    uncertainty: UncertaintyHead
    optimizer: torch.optim.Adam
    diffusion_cfg: DiffusionConfig
    step: int = 0

    def parameters(self):
        yield from self.model.parameters()
        yield from self.backbone.parameters()
        yield from self.uncertainty.parameters()


def build_models(cfg: TrainConfig, vae: MaskVae, template_resolution: int = 32,
                 n_templates: int = 4):
    bb_cfg = BackboneConfig(**cfg.backbone)
    grid = cfg.mask_resolution // vae.cfg.downsample_factor
    if cfg.image_resolution // bb_cfg.patch_size != grid:
        raise ValueError(
            f"feature grid {cfg.image_resolution // bb_cfg.patch_size} != latent grid {grid}; "
            "pick patch_size/downsample_factor so the grids match")
    t_grid = template_resolution // bb_cfg.patch_size
    model_kwargs = dict(
        capacity=cfg.capacity or cfg.n_objects,
        n_templates=n_templates,
        latent_channels=vae.cfg.latent_channels,
        feature_dim=bb_cfg.feature_dim,
        latent_grid=(grid, grid),
        template_grid=(t_grid, t_grid),
    )
    model_kwargs.update(cfg.model)
    mc = ModelConfig(**model_kwargs)
    torch.manual_seed(cfg.seed)
    model = ObjectConditionedDenoiser(mc)
    backbone = PatchFeatureExtractor(bb_cfg)
    uhead = UncertaintyHead()
    diff = DiffusionConfig(**cfg.diffusion)
    return model, backbone, uhead, diff


def train_step(batch: TrainBatch, state: TrainState, sigma_rng: torch.Generator,
               noise_rng: torch.Generator, lr: float) -> float:
    """One optimizer update of the uncertainty-weighted denoising loss."""
    model, backbone, uhead = state.model, state.backbone, state.uncertainty
    x = batch.latents
    b = x.shape[0]
    sigma = sample_training_sigma(sigma_rng, state.diffusion_cfg, b)
    noise = torch.randn(x.shape, generator=noise_rng) * sigma.view(b, 1, 1, 1, 1)
    y = x + noise

    feats = backbone.extract(batch.images)
    t_feats = backbone.extract_template_features(
        batch.templates.reshape(-1, *batch.templates.shape[-3:]))
    t_feats = t_feats.reshape(*batch.templates.shape[:3], *t_feats.shape[1:])
    codes_q = torch.stack([gather_codes(model.query_object_pe, p) for p in batch.slot_positions])
    codes_t = torch.stack([gather_codes(model.template_object_pe, p) for p in batch.slot_positions])
    cond = {"image_features": feats, "template_features": t_feats,
            "slot_codes_q": codes_q, "slot_codes_t": codes_t}

    def net(x_in, s, c):
        return model(x_in, s, c)

    d = denoise(net, y, sigma, cond, sigma_data=state.diffusion_cfg.sigma_data)
    raw = denoising_loss(d, x, sigma, sigma_data=state.diffusion_cfg.sigma_data)
    loss = uncertainty_weighted_loss(raw, uhead(sigma)).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at step {state.step}, sigma={sigma.tolist()}")

    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return float(loss.detach())


def _rng_state_arrays(sigma_rng, noise_rng, np_rng) -> dict[str, np.ndarray]:
    return {
        "rng/sigma": sigma_rng.get_state().numpy(),
        "rng/noise": noise_rng.get_state().numpy(),
        "rng/numpy": np.frombuffer(json.dumps(np_rng.bit_generator.state).encode(), dtype=np.uint8).copy(),
    }


def save_train_checkpoint(path: str | Path, cfg: TrainConfig, state: TrainState,
                          sigma_rng=None, noise_rng=None, np_rng=None, extra: dict | None = None) -> None:
    config = {
        "kind": "denoiser",
        "train_config": asdict(cfg),
        "model_config": asdict(state.model.cfg),
        "backbone_config": asdict(state.backbone.cfg),
        "diffusion_config": asdict(state.diffusion_cfg),
        "step": state.step,
        "extra": extra or {},
    }
    arrays = {}
    arrays.update(state_dict_to_arrays(state.model, "model"))
    arrays.update(state_dict_to_arrays(state.backbone, "backbone"))
    arrays.update(state_dict_to_arrays(state.uncertainty, "uncertainty"))
    if sigma_rng is not None:
        opt_state = state.optimizer.state_dict()
        for pid, st in opt_state["state"].items():
            arrays[f"opt/{pid}/exp_avg"] = st["exp_avg"].numpy()
            arrays[f"opt/{pid}/exp_avg_sq"] = st["exp_avg_sq"].numpy()
            arrays[f"opt/{pid}/step"] = st["step"].numpy()
        arrays.update(_rng_state_arrays(sigma_rng, noise_rng, np_rng))
    save_checkpoint(path, config, arrays)


def load_train_checkpoint(path: str | Path, vae: MaskVae, resume: bool = False):
    """Rebuild (cfg, TrainState) and optionally the rng states for resume."""
    config, arrays = load_checkpoint(path)
    if config.get("kind") != "denoiser":
        raise ValueError(f"not a denoiser checkpoint: {path}")
    tc = config["train_config"]
    tc["crop_scale"] = tuple(tc["crop_scale"])
    cfg = TrainConfig(**tc)
    mc_d = config["model_config"]
    mc_d["latent_grid"] = tuple(mc_d["latent_grid"])
    mc_d["template_grid"] = tuple(mc_d["template_grid"])
    model = ObjectConditionedDenoiser(ModelConfig(**mc_d))
    backbone = PatchFeatureExtractor(BackboneConfig(**config["backbone_config"]))
    uhead = UncertaintyHead()
    load_state_dict_from_arrays(model, arrays, "model")
    load_state_dict_from_arrays(backbone, arrays, "backbone")
    load_state_dict_from_arrays(uhead, arrays, "uncertainty")
    diff = DiffusionConfig(**config["diffusion_config"])
    opt = torch.optim.Adam([p for p in model.parameters()] + [p for p in backbone.parameters()]
                           + [p for p in uhead.parameters()], lr=cfg.lr)
    state = TrainState(model=model, backbone=backbone, uncertainty=uhead,
                       optimizer=opt, diffusion_cfg=diff, step=config["step"])
    rngs = None
    if resume:
        if "rng/sigma" not in arrays:
            raise ValueError(f"checkpoint {path} has no optimizer/rng state to resume from")
        params = [p for p in model.parameters()] + [p for p in backbone.parameters()] \
            + [p for p in uhead.parameters()]
        opt_sd = opt.state_dict()
        for pid in range(len(params)):
            if f"opt/{pid}/exp_avg" in arrays:
                opt_sd["state"][pid] = {
                    "step": torch.from_numpy(arrays[f"opt/{pid}/step"].copy()),
                    "exp_avg": torch.from_numpy(arrays[f"opt/{pid}/exp_avg"].copy()),
                    "exp_avg_sq": torch.from_numpy(arrays[f"opt/{pid}/exp_avg_sq"].copy()),
                }
        opt.load_state_dict(opt_sd)
        sigma_rng = torch.Generator()
        sigma_rng.set_state(torch.from_numpy(arrays["rng/sigma"].copy()))
        noise_rng = torch.Generator()
        noise_rng.set_state(torch.from_numpy(arrays["rng/noise"].copy()))
        np_rng = np.random.default_rng()
        np_rng.bit_generator.state = json.loads(arrays["rng/numpy"].tobytes().decode())
        rngs = (sigma_rng, noise_rng, np_rng)
    return cfg, state, config.get("extra", {}), rngs


def fit(cfg: TrainConfig, dataset: ToyDataset, vae: MaskVae, out_dir: str | Path,
        resume_from: str | Path | None = None, log_every: int = 50) -> Path:
    """Full training run; writes metrics JSONL plus best/last checkpoints.

    Returns the path of the best-by-validation-AP checkpoint (or the last
    one when periodic evaluation is disabled).
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vae.eval()

    if resume_from is not None:
        cfg_loaded, state, extra, rngs = load_train_checkpoint(resume_from, vae, resume=True)
        cfg = cfg_loaded
        sigma_rng, noise_rng, np_rng = rngs
        best_ap = extra.get("best_ap", -1.0)
    else:
        model, backbone, uhead, diff = build_models(cfg, vae, dataset.config.template_resolution,
                                                    dataset.config.n_templates)
        params = [p for p in model.parameters()] + [p for p in backbone.parameters()] \
            + [p for p in uhead.parameters()]
        opt = torch.optim.Adam(params, lr=cfg.lr)
        state = TrainState(model=model, backbone=backbone, uncertainty=uhead,
                           optimizer=opt, diffusion_cfg=diff)
        sigma_rng = torch.Generator().manual_seed(cfg.seed + 11)
        noise_rng = torch.Generator().manual_seed(cfg.seed + 23)
        np_rng = np.random.default_rng(cfg.seed + 37)
        best_ap = -1.0

    train_scenes = dataset.scenes_of("train")
    n_val = max(2, int(len(train_scenes) * cfg.val_fraction))
    val_scenes, fit_scenes = train_scenes[-n_val:], train_scenes[:-n_val]
    build = build_coarse_batch if cfg.variant == "coarse" else build_refine_batch

    total_steps = cfg.epochs * cfg.steps_per_epoch
    metrics_path = out_dir / "metrics.jsonl"
    log_f = open(metrics_path, "a")
    t0 = time.time()
    while state.step < total_steps:
        batch = build(dataset, np_rng, cfg, vae, scenes=fit_scenes)
        lr = lr_at(state.step, total_steps, cfg.lr, cfg.warmup_steps, cfg.anneal_start)
        loss = train_step(batch, state, sigma_rng, noise_rng, lr)
        if state.step % log_every == 0 or state.step == total_steps:
            print(json.dumps({"step": state.step, "loss": round(loss, 5), "lr": lr,
                              "elapsed_s": round(time.time() - t0, 1)}), file=log_f, flush=True)

        epoch_end = state.step % cfg.steps_per_epoch == 0
        if epoch_end:
            epoch = state.step // cfg.steps_per_epoch
            if cfg.eval_every_epochs and (epoch % cfg.eval_every_epochs == 0 or state.step == total_steps):
                ap = _validation_ap(cfg, state, vae, dataset, val_scenes)
                print(json.dumps({"step": state.step, "val_ap": round(ap, 4)}), file=log_f, flush=True)
                if ap >= best_ap:
                    best_ap = ap
                    save_train_checkpoint(out_dir / "best.npz", cfg, state,
                                          extra={"best_ap": best_ap})
            save_train_checkpoint(out_dir / "last.npz", cfg, state, sigma_rng, noise_rng, np_rng,
                                  extra={"best_ap": best_ap})
    log_f.close()
    if not (out_dir / "best.npz").exists():
        save_train_checkpoint(out_dir / "best.npz", cfg, state, extra={"best_ap": best_ap})
    return out_dir / "best.npz"


def _validation_ap(cfg: TrainConfig, state: TrainState, vae: MaskVae,
                   dataset: ToyDataset, scenes) -> float:
    from .pipeline import EnsembleConfig, SegmenterBundle, evaluate_scenes
    bundle = SegmenterBundle(vae=vae, backbone=state.backbone, model=state.model,
                             diffusion=state.diffusion_cfg, train_cfg=cfg)
    ens = EnsembleConfig(n_ensemble=cfg.eval_ensemble, n_aug=1)
    report = evaluate_scenes(bundle, dataset, scenes[:cfg.eval_scenes], ens, seed=123)
    return report.ap

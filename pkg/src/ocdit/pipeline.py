"""Coarse -> refine zero-shot inference with test-time ensembling.

Every (augmentation, ensemble seed) pair contributes one decoded confidence
map per conditioning object, aligned back into image coordinates; pixels are
aggregated as vote-count-normalized means over the passes that cover them.
Coarse predictions above a keep threshold yield modal boxes for the refine
stage, which re-segments each box conditioned on a single object (or on
every candidate object when labels are withheld, keeping the most confident
one).

Prediction files are line-delimited JSON, one record per prediction:
    {"scene_id", "object_id", "confidence", "rle": {"size": [H, W],
     "counts": [...]}, "provenance": {...}}
The RLE scheme is row-major with alternating run lengths, first run counting
zeros (a leading 0 means the mask starts with a foreground pixel).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import ToyDataset, SceneSample
from .diffusion import DiffusionConfig, denoise, stochastic_sample
from .metrics import ApReport, Detection, GroundTruthInstance, average_precision
from .model import ObjectConditionedDenoiser
from .backbone import PatchFeatureExtractor
from .pos_scaling import ScalingStrategy, chunk_objects, inference_encoding
from .trainer import TrainConfig, resize_image
from .vae import MaskVae


@dataclass
class EnsembleConfig:
    n_ensemble: int = 8
    n_aug: int = 1
    scheme: str = "full_image"     # full_image | crops6 | crops11 | plus_guided
    binarize_threshold: float = 0.5
    coarse_keep_threshold: float = 0.2
    refine_keep_threshold: float = 0.5

    def validate(self) -> None:
        if self.n_ensemble < 1 or self.n_aug < 1:
            raise ValueError("n_ensemble and n_aug must be >= 1")
        for t in (self.binarize_threshold, self.coarse_keep_threshold, self.refine_keep_threshold):
            if not 0 < t < 1:
                raise ValueError(f"thresholds must be in (0,1), got {t}")
        if self.scheme not in ("full_image", "crops6", "crops11", "plus_guided"):
            raise ValueError(f"unknown augmentation scheme {self.scheme}")


@dataclass
class SpatialAug:
    """Square crop window in image coordinates, run at the model resolution."""

    y0: int
    x0: int
    side: int

    def apply(self, image: np.ndarray, resolution: int) -> np.ndarray:
        crop = image[self.y0:self.y0 + self.side, self.x0:self.x0 + self.side]
        return resize_image(crop, resolution)

    def paste(self, conf: np.ndarray, image_shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        """Map a model-frame confidence map back; returns (map, coverage)."""
        pil = Image.fromarray(conf.astype(np.float32), mode="F")
        back = np.asarray(pil.resize((self.side, self.side), Image.BILINEAR))
        full = np.zeros(image_shape, dtype=np.float32)
        cover = np.zeros(image_shape, dtype=bool)
        full[self.y0:self.y0 + self.side, self.x0:self.x0 + self.side] = back
        cover[self.y0:self.y0 + self.side, self.x0:self.x0 + self.side] = True
        return full, cover


@dataclass
class InstancePrediction:
    object_id: int
    confidence_map: np.ndarray   # (H, W) float in [0,1]
    confidence: float
    provenance: dict = field(default_factory=dict)


@dataclass
class SegmenterBundle:
    """Everything one trained stage needs to run inference."""

    vae: MaskVae
    backbone: PatchFeatureExtractor
    model: ObjectConditionedDenoiser
    diffusion: DiffusionConfig
    train_cfg: TrainConfig

    def eval(self) -> "SegmenterBundle":
        self.vae.eval()
        self.backbone.eval()
        self.model.eval()
        return self


def spatial_augmentations(scheme: str, image_shape: tuple[int, int], n_aug: int) -> list[SpatialAug]:
    """Deterministic crop pyramid: full image plus concentric crops shrinking
    by 8% of the short side per level, cycling corner anchors."""
    h, w = image_shape
    side0 = min(h, w)
    augs = [SpatialAug(0, 0, side0)]
    if scheme == "full_image":
        return augs * n_aug  # repeated full-frame passes, fresh noise each
    margin = max(2, int(0.08 * side0))
    anchors = ["center", "tl", "br", "tr", "bl"]
    k = 1
    while len(augs) < n_aug:
        side = side0 - k * margin
        if side < side0 // 2:
            break
        a = anchors[(k - 1) % len(anchors)]
        y0 = (h - side) // 2 if a in ("center",) else (0 if a in ("tl", "tr") else h - side)
        x0 = (w - side) // 2 if a in ("center",) else (0 if a in ("tl", "bl") else w - side)
        augs.append(SpatialAug(y0, x0, side))
        k += 1
    return augs[:n_aug]


def guided_augmentation(predictions: list[InstancePrediction], image_shape: tuple[int, int],
                        binarize_threshold: float = 0.5) -> SpatialAug:
    """Tight box over the union of binarized predictions, padded 10%."""
    h, w = image_shape
    union = np.zeros(image_shape, dtype=bool)
    for p in predictions:
        union |= p.confidence_map > binarize_threshold
    if not union.any():
        return SpatialAug(0, 0, min(h, w))
    ys, xs = np.nonzero(union)
    y0, y1 = ys.min(), ys.max() + 1
    x0, x1 = xs.min(), xs.max() + 1
    pad = 0.10 * max(y1 - y0, x1 - x0)
    side = int(round(max(y1 - y0, x1 - x0) + 2 * pad))
    side = min(max(side, 8), min(h, w))
    cy, cx = (y0 + y1) / 2, (x0 + x1) / 2
    yy = min(max(int(round(cy - side / 2)), 0), h - side)
    xx = min(max(int(round(cx - side / 2)), 0), w - side)
    return SpatialAug(yy, xx, side)


def ensemble_aggregate(maps: list[np.ndarray], covers: list[np.ndarray]) -> np.ndarray:
    """Per-pixel mean over the passes whose augmentation covers the pixel."""
    if not maps:
        raise ValueError("need at least one pass")
    total = np.zeros_like(maps[0], dtype=np.float64)
    count = np.zeros_like(maps[0], dtype=np.int64)
    for m, c in zip(maps, covers):
        total += np.where(c, m, 0.0)
        count += c
    return (total / np.maximum(count, 1)).astype(np.float32)


def scalar_confidence(conf_map: np.ndarray, binarize_threshold: float) -> float:
    fg = conf_map > binarize_threshold
    if not fg.any():
        return 0.0
    return float(conf_map[fg].mean())


def _template_tensor(templates_by_object: dict[int, np.ndarray], object_ids: list[int]) -> torch.Tensor:
    stack = np.stack([templates_by_object[o] for o in object_ids])  # (N_O, N_T, ht, wt, 3)
    t = torch.from_numpy(stack.astype(np.float32))
    if t.max() > 1.5:
        t = t / 255.0
    return t.permute(0, 1, 4, 2, 3).contiguous()[None]  # (1, N_O, N_T, 3, ht, wt)


def _run_passes(bundle: SegmenterBundle, crop_img: np.ndarray, object_ids: list[int],
                templates_by_object: dict[int, np.ndarray], n_ensemble: int,
                rng: torch.Generator, slot_codes: tuple[torch.Tensor, torch.Tensor],
                collect_trajectory: bool = False):
    """All ensemble members of one augmentation in a single batched pass.

    Returns (maps, trajectory): maps (n_ensemble, N_O, Hm, Wm) in the crop
    frame; trajectory (num_steps, N_O, Hm, Wm) decoded from member 0 when
    requested.
    """
    tc = bundle.train_cfg
    model, vae = bundle.model, bundle.vae
    n_o = len(object_ids)
    img = torch.from_numpy(crop_img).permute(2, 0, 1)[None]
    with torch.no_grad():
        feats = bundle.backbone.extract(img)
        t_feats = bundle.backbone.extract_template_features(
            _template_tensor(templates_by_object, object_ids))
        codes_q, codes_t = slot_codes
        template_tokens = model.embed_templates(t_feats, codes_t)

        feats_b = feats.expand(n_ensemble, *feats.shape[1:])
        tokens_b = template_tokens.expand(n_ensemble, *template_tokens.shape[1:])
        cond = {"image_features": feats_b, "template_tokens": tokens_b,
                "slot_codes_q": codes_q}

        grid = tc.mask_resolution // vae.cfg.downsample_factor
        shape = (n_ensemble, n_o, vae.cfg.latent_channels, grid, grid)

        def denoise_fn(x, sigma, c):
            return denoise(model, x, sigma, c, sigma_data=bundle.diffusion.sigma_data)

        traj = stochastic_sample(denoise_fn, cond, bundle.diffusion, rng, shape=shape)
        final = traj[-1].reshape(n_ensemble * n_o, *shape[2:])
        maps = vae.decode(final).reshape(n_ensemble, n_o, tc.mask_resolution, tc.mask_resolution)
        trajectory = None
        if collect_trajectory:
            steps = traj[:, 0].reshape(-1, *shape[2:])
            dec = vae.decode(steps)
            trajectory = dec.reshape(traj.shape[0], n_o, tc.mask_resolution, tc.mask_resolution).numpy()
    return maps.numpy(), trajectory


def _resolve_slots(bundle: SegmenterBundle, n_objects: int):
    """Inference slot codes + object chunking per the trained strategy."""
    tc = bundle.train_cfg
    strategy = ScalingStrategy(tc.pe_strategy)
    n_train = tc.n_objects
    if strategy is ScalingStrategy.BASELINE_CHUNKED and n_objects > n_train:
        chunks = chunk_objects(n_objects, n_train)
    else:
        chunks = [list(range(n_objects))]
    codes_q = inference_encoding(strategy, bundle.model.query_object_pe, n_objects, n_train)
    codes_t = inference_encoding(strategy, bundle.model.template_object_pe, n_objects, n_train)
    return chunks, codes_q, codes_t


def coarse_infer(image: np.ndarray, object_ids: list[int],
                 templates_by_object: dict[int, np.ndarray], bundle: SegmenterBundle,
                 ens: EnsembleConfig, rng: torch.Generator,
                 collect_trajectory: bool = False):
    """Multi-object proposals over the full image.

    Returns a list of InstancePrediction (one surviving entry per object at
    most); with ``collect_trajectory``, also the decoded per-step maps of
    the first pass for visualization.
    """
    ens.validate()
    bundle.eval()
    tc = bundle.train_cfg
    h, w = image.shape[:2]
    img = image.astype(np.float32) / 255.0 if image.dtype == np.uint8 else image.astype(np.float32)

    scheme = ens.scheme
    base_augs = spatial_augmentations("crops11" if scheme == "plus_guided" else scheme,
                                      (h, w), ens.n_aug)
    chunks, codes_q, codes_t = _resolve_slots(bundle, len(object_ids))

    sums = {o: np.zeros((h, w), dtype=np.float64) for o in object_ids}
    counts = {o: np.zeros((h, w), dtype=np.int64) for o in object_ids}
    trajectory = None

    def accumulate(aug: SpatialAug):
        nonlocal trajectory
        crop = aug.apply(img, tc.image_resolution)
        for chunk in chunks:
            ids = [object_ids[i] for i in chunk]
            # chunks are contiguous prefix-style ranges; every chunk reuses
            # the first len(chunk) inference codes
            cq = codes_q[:len(chunk)][None]
            ct = codes_t[:len(chunk)][None]
            want_traj = collect_trajectory and trajectory is None
            maps, traj = _run_passes(bundle, crop, ids, templates_by_object,
                                     ens.n_ensemble, rng, (cq, ct), want_traj)
            if want_traj and traj is not None:
                trajectory = traj
            for e in range(ens.n_ensemble):
                for k, o in enumerate(ids):
                    m, c = aug.paste(maps[e, k], (h, w))
                    sums[o] += np.where(c, m, 0.0)
                    counts[o] += c

    for aug in base_augs:
        accumulate(aug)

    def current_predictions():
        preds = []
        for o in object_ids:
            agg = (sums[o] / np.maximum(counts[o], 1)).astype(np.float32)
            conf = scalar_confidence(agg, ens.binarize_threshold)
            preds.append(InstancePrediction(o, agg, conf))
        return preds

    if scheme == "plus_guided":
        alive = [p for p in current_predictions() if p.confidence >= ens.coarse_keep_threshold]
        accumulate(guided_augmentation(alive, (h, w), ens.binarize_threshold))

    out = []
    for p in current_predictions():
        if p.confidence >= ens.coarse_keep_threshold:
            p.provenance = {"stage": "coarse", "ensemble": ens.n_ensemble,
                            "augs": len(base_augs) + (1 if scheme == "plus_guided" else 0)}
            out.append(p)
    if collect_trajectory:
        return out, trajectory
    return out


def modal_boxes(predictions: list[InstancePrediction], binarize_threshold: float,
                image_shape: tuple[int, int]) -> list[tuple[int, tuple[int, int, int]]]:
    """Tight square window of each prediction's visible mask."""
    h, w = image_shape
    boxes = []
    for p in predictions:
        mask = p.confidence_map > binarize_threshold
        if not mask.any():
            continue
        ys, xs = np.nonzero(mask)
        side = int(max(ys.max() - ys.min() + 1, xs.max() - xs.min() + 1))
        side = min(max(side, 8), min(h, w))
        cy, cx = (ys.min() + ys.max() + 1) / 2, (xs.min() + xs.max() + 1) / 2
        y0 = min(max(int(round(cy - side / 2)), 0), h - side)
        x0 = min(max(int(round(cx - side / 2)), 0), w - side)
        boxes.append((p.object_id, (y0, x0, side)))
    return boxes


def _box_augs(box: tuple[int, int, int], n_aug: int, image_shape: tuple[int, int]) -> list[SpatialAug]:
    """The box itself plus alternating expanded/shrunk versions."""
    h, w = image_shape
    y0, x0, side = box
    factors = [1.0, 1.15, 0.9, 1.3, 0.8, 1.45, 0.72, 1.6, 0.65, 1.75, 0.6]
    augs = []
    for f in factors[:n_aug]:
        s = int(round(side * f))
        s = min(max(s, 8), min(h, w))
        cy, cx = y0 + side / 2, x0 + side / 2
        yy = min(max(int(round(cy - s / 2)), 0), h - s)
        xx = min(max(int(round(cx - s / 2)), 0), w - s)
        augs.append(SpatialAug(yy, xx, s))
    return augs


def refine_infer(image: np.ndarray, boxes: list[tuple[int | None, tuple[int, int, int]]],
                 candidates: list[int], templates_by_object: dict[int, np.ndarray],
                 bundle: SegmenterBundle, ens: EnsembleConfig, rng: torch.Generator,
                 label_mode: str = "with_labels") -> list[InstancePrediction]:
    """Single-object re-segmentation of modal boxes.

    with_labels: each box is refined conditioned on its assigned object.
    without_labels: each box is refined conditioned on every candidate and
    the most confident object wins the box. Pasted predictions are zero
    outside their box.
    """
    ens.validate()
    bundle.eval()
    if label_mode not in ("with_labels", "without_labels"):
        raise ValueError(f"label_mode must be with_labels|without_labels, got {label_mode}")
    tc = bundle.train_cfg
    h, w = image.shape[:2]
    img = image.astype(np.float32) / 255.0 if image.dtype == np.uint8 else image.astype(np.float32)
    codes_q = bundle.model.query_object_pe[:1][None]
    codes_t = bundle.model.template_object_pe[:1][None]

    out = []
    for assigned, box in boxes:
        augs = _box_augs(box, ens.n_aug, (h, w))
        objs = [assigned] if label_mode == "with_labels" else list(candidates)
        if label_mode == "with_labels" and assigned is None:
            raise ValueError("with_labels requires an object id per box")
        per_obj = []
        for o in objs:
            total = np.zeros((h, w), dtype=np.float64)
            count = np.zeros((h, w), dtype=np.int64)
            for aug in augs:
                crop = aug.apply(img, tc.image_resolution)
                maps, _ = _run_passes(bundle, crop, [o], templates_by_object,
                                      ens.n_ensemble, rng, (codes_q, codes_t))
                for e in range(ens.n_ensemble):
                    m, c = aug.paste(maps[e, 0], (h, w))
                    total += np.where(c, m, 0.0)
                    count += c
            agg = (total / np.maximum(count, 1)).astype(np.float32)
            per_obj.append(InstancePrediction(
                o, agg, scalar_confidence(agg, ens.binarize_threshold),
                {"stage": "refined", "ensemble": ens.n_ensemble, "augs": len(augs)}))
        best = max(per_obj, key=lambda p: p.confidence)
        if best.confidence >= ens.refine_keep_threshold:
            out.append(best)
    return out


# ---------------------------------------------------------------- RLE + files

def rle_encode(mask: np.ndarray) -> dict:
    """Row-major alternating run lengths, first run counts zeros."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    counts = []
    expected = False
    for value, n in _runs(flat):
        if value != expected:
            counts.append(0)  # empty run keeps the zero/one alternation
        counts.append(int(n))
        expected = not value
    if not counts:
        counts = [int(flat.size)]
    return {"size": [int(s) for s in mask.shape], "counts": counts}


def _runs(flat: np.ndarray):
    if flat.size == 0:
        return
    change = np.flatnonzero(np.diff(flat.astype(np.int8)))
    starts = np.concatenate([[0], change + 1])
    ends = np.concatenate([change + 1, [flat.size]])
    for s, e in zip(starts, ends):
        yield bool(flat[s]), e - s


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for n in rle["counts"]:
        if value:
            flat[pos:pos + n] = True
        pos += n
        value = not value
    if pos != h * w:
        raise ValueError(f"RLE length {pos} does not match size {h}x{w}")
    return flat.reshape(h, w)


def write_predictions(path: str | Path, per_scene: list[tuple[str, list[InstancePrediction]]],
                      binarize_threshold: float = 0.5) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for scene_id, preds in sorted(per_scene, key=lambda t: t[0]):
            for p in sorted(preds, key=lambda p: (p.object_id, -p.confidence)):
                mask = p.confidence_map > binarize_threshold
                rec = {"scene_id": scene_id, "object_id": int(p.object_id),
                       "confidence": float(p.confidence), "rle": rle_encode(mask),
                       "provenance": p.provenance}
                print(json.dumps(rec, sort_keys=True), file=f)


def read_predictions(path: str | Path) -> list[Detection]:
    dets = []
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            dets.append(Detection(scene_id=rec["scene_id"], object_id=rec["object_id"],
                                  mask=rle_decode(rec["rle"]), score=rec["confidence"]))
    return dets


# ---------------------------------------------------------------- evaluation

def scene_ground_truth(scene: SceneSample) -> list[GroundTruthInstance]:
    return [GroundTruthInstance(scene.scene_id, inst.object_id, inst.mask)
            for inst in scene.instances]


def scene_templates(dataset: ToyDataset, object_ids: list[int]) -> dict[int, np.ndarray]:
    return {o: dataset.templates[o].images for o in object_ids}


def infer_scene(bundle: SegmenterBundle, dataset: ToyDataset, scene: SceneSample,
                ens: EnsembleConfig, rng: torch.Generator,
                refine_bundle: SegmenterBundle | None = None) -> list[InstancePrediction]:
    object_ids = sorted({inst.object_id for inst in scene.instances})
    templates = scene_templates(dataset, object_ids)
    preds = coarse_infer(scene.image, object_ids, templates, bundle, ens, rng)
    if refine_bundle is not None:
        boxes = modal_boxes(preds, ens.binarize_threshold, scene.image.shape[:2])
        preds = refine_infer(scene.image, [(o, b) for o, b in boxes], object_ids,
                             templates, refine_bundle, ens, rng)
    return preds


def scene_seed(seed: int, scene_id: str) -> int:
    import zlib
    return (seed + zlib.crc32(scene_id.encode())) % (2**31)


def evaluate_scenes(bundle: SegmenterBundle, dataset: ToyDataset, scenes: list[SceneSample],
                    ens: EnsembleConfig, seed: int = 0,
                    refine_bundle: SegmenterBundle | None = None) -> ApReport:
    detections, gts = [], []
    for scene in scenes:
        rng = torch.Generator().manual_seed(scene_seed(seed, scene.scene_id))
        preds = infer_scene(bundle, dataset, scene, ens, rng, refine_bundle)
        for p in preds:
            mask = p.confidence_map > ens.binarize_threshold
            if mask.any():
                detections.append(Detection(scene.scene_id, p.object_id, mask, p.confidence))
        gts.extend(scene_ground_truth(scene))
    return average_precision(detections, gts)

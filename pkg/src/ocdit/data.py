"""Procedural toy objects, templates, and cluttered scenes with instance masks.

Objects are 2D shape programs (polygon / blob / ring / glyph) with a fill
pattern and a distinct color, rendered analytically on pixel grids, so every
mask is exactly binary and every dataset is bit-reproducible from its seed.
Scenes paint instances back-to-front; visible (modal) masks come from the
resulting id map, so instance masks are disjoint by construction.

On-disk layout (all images 8-bit PNG, masks single-channel {0, 255}):
    root/manifest.json
    root/objects/<id>/templates/<k>.png, root/objects/<id>/masks/<k>.png
    root/scenes/<scene_id>/image.png
    root/scenes/<scene_id>/masks/<instance>.png
    root/scenes/<scene_id>/meta.json
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

MIN_VISIBLE_PIXELS = 20

SHAPE_KINDS = ("polygon", "blob", "ring", "glyph")
PATTERN_KINDS = ("solid", "stripes", "dots")
GLYPH_VARIANTS = ("cross", "ell", "tee", "aitch")


class DatasetError(RuntimeError):
    pass


@dataclass
class ToyObject:
    object_id: int
    shape: str                    # one of SHAPE_KINDS
    shape_params: dict
    pattern: str                  # one of PATTERN_KINDS
    pattern_params: dict
    color_hsv: tuple[float, float, float]
    canonical_scale: float

    def attribute_triple(self):
        return (
            (self.shape, tuple(sorted(self.shape_params.items()))),
            (self.pattern, tuple(sorted(self.pattern_params.items()))),
            self.color_hsv,
        )


@dataclass
class TemplateSet:
    object_id: int
    images: np.ndarray  # (N_T, ht, wt, 3) uint8
    masks: np.ndarray   # (N_T, ht, wt) bool


@dataclass
class SceneInstance:
    object_id: int
    mask: np.ndarray    # (H, W) bool, visible part only
    depth: int          # paint order; higher paints later (on top)


@dataclass
class SceneSample:
    scene_id: str
    split: str
    image: np.ndarray   # (H, W, 3) uint8
    instances: list[SceneInstance]
    background_id: int


@dataclass
class DatasetConfig:
    n_objects: int = 40
    n_train_objects: int = 30
    n_templates: int = 4
    template_resolution: int = 32
    scene_resolution: int = 64
    k_range: tuple[int, int] = (4, 12)
    duplicate_prob: float = 0.15
    n_train_scenes: int = 2000
    n_test_scenes: int = 100
    seed: int = 0


@dataclass
class ToyDataset:
    config: DatasetConfig
    objects: dict[int, ToyObject]
    templates: dict[int, TemplateSet]
    scenes: list[SceneSample]
    train_object_ids: list[int]
    test_object_ids: list[int]

    def scenes_of(self, split: str) -> list[SceneSample]:
        return [s for s in self.scenes if s.split == split]


# ---------------------------------------------------------------- rendering

def _object_frame(res: int, center: tuple[float, float], angle: float, radius: float):
    """Pixel grid mapped into the object's unit frame."""
    ys, xs = np.mgrid[0:res, 0:res].astype(np.float64) + 0.5
    dx = (xs - center[1]) / radius
    dy = (ys - center[0]) / radius
    c, s = math.cos(-angle), math.sin(-angle)
    return dx * c - dy * s, dx * s + dy * c


def _shape_mask(obj: ToyObject, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.hypot(u, v)
    theta = np.arctan2(v, u)
    p = obj.shape_params
    if obj.shape == "polygon":
        k = p["sides"]
        sector = np.mod(theta - p["rot"], 2 * math.pi / k) - math.pi / k
        boundary = math.cos(math.pi / k) / np.cos(sector)
        return r <= boundary
    if obj.shape == "blob":
        boundary = p["base"] * (1 + p["amp"] * np.cos(p["lobes"] * theta + p["rot"]))
        return r <= boundary
    if obj.shape == "ring":
        return (r <= 0.95) & (r >= p["inner"])
    if obj.shape == "glyph":
        t = p["thickness"]
        variant = GLYPH_VARIANTS[p["variant"]]
        box = (np.abs(u) <= 0.9) & (np.abs(v) <= 0.9)
        if variant == "cross":
            return box & ((np.abs(u) <= t) | (np.abs(v) <= t))
        if variant == "ell":
            return box & (((u <= -0.9 + 2 * t)) | (v >= 0.9 - 2 * t))
        if variant == "tee":
            return box & ((np.abs(u) <= t) | (v <= -0.9 + 2 * t))
        return box & ((np.abs(u) >= 0.9 - 2 * t) | (np.abs(v) <= t))  # aitch
    raise ValueError(f"unknown shape {obj.shape}")


def _pattern_mask(obj: ToyObject, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    p = obj.pattern_params
    if obj.pattern == "solid":
        return np.zeros(u.shape, dtype=bool)
    if obj.pattern == "stripes":
        phi = p["angle"]
        coord = (u * math.cos(phi) + v * math.sin(phi)) / p["period"]
        return np.floor(coord).astype(np.int64) % 2 == 0
    if obj.pattern == "dots":
        g = p["spacing"]
        du = u / g - np.round(u / g)
        dv = v / g - np.round(v / g)
        return np.hypot(du, dv) * g <= p["dot_radius"]
    raise ValueError(f"unknown pattern {obj.pattern}")


def _hsv_rgb(h, s, v) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, min(max(s, 0), 1), min(max(v, 0), 1)))


def object_colors(obj: ToyObject) -> tuple[np.ndarray, np.ndarray]:
    h, s, v = obj.color_hsv
    base = _hsv_rgb(h, s, v)
    secondary = _hsv_rgb(h, s * 0.85, v - 0.38 if v > 0.5 else v + 0.38)
    return base, secondary


def render_object(obj: ToyObject, res: int, center, angle: float, radius: float):
    """Rasterize one instance: (mask bool (res,res), rgb float (res,res,3))."""
    u, v = _object_frame(res, center, angle, radius)
    mask = _shape_mask(obj, u, v)
    pattern = _pattern_mask(obj, u, v)
    base, secondary = object_colors(obj)
    rgb = np.where(pattern[..., None], secondary, base)
    return mask, rgb


# ---------------------------------------------------------------- library

def make_object_library(rng: np.random.Generator, n_objects: int,
                        n_train: int | None = None) -> tuple[dict[int, ToyObject], list[int], list[int]]:
    """Build pairwise-distinct objects plus a disjoint train/test id split.

    Hues are stratified over the library and shape/pattern/contrast cycle
    with coprime periods, so attribute-adjacent objects stay discriminable.
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    if n_train is None:
        n_train = max(1, (3 * n_objects) // 4)
    hue_bins = rng.permutation(n_objects)
    objects: dict[int, ToyObject] = {}
    for i in range(n_objects):
        hue = (hue_bins[i] + rng.uniform(0.25, 0.75)) / n_objects
        sat = 0.62 + 0.33 * ((i >> 1) % 2) + rng.uniform(-0.03, 0.03)
        val = 0.62 + 0.33 * (i % 2) + rng.uniform(-0.03, 0.03)
        shape = SHAPE_KINDS[i % 4]
        if shape == "polygon":
            sp = {"sides": int(rng.integers(3, 8)), "rot": float(rng.uniform(0, 2 * math.pi))}
        elif shape == "blob":
            sp = {"base": float(rng.uniform(0.75, 0.9)), "lobes": int(rng.integers(3, 7)),
                  "amp": float(rng.uniform(0.08, 0.22)), "rot": float(rng.uniform(0, 2 * math.pi))}
        elif shape == "ring":
            sp = {"inner": float(rng.uniform(0.35, 0.6))}
        else:
            sp = {"variant": int(rng.integers(0, len(GLYPH_VARIANTS))),
                  "thickness": float(rng.uniform(0.22, 0.34))}
        pattern = PATTERN_KINDS[i % 3]
        if pattern == "stripes":
            pp = {"angle": float(rng.uniform(0, math.pi)), "period": float(rng.uniform(0.3, 0.55))}
        elif pattern == "dots":
            pp = {"spacing": float(rng.uniform(0.4, 0.6)), "dot_radius": float(rng.uniform(0.1, 0.16))}
        else:
            pp = {}
        objects[i] = ToyObject(
            object_id=i, shape=shape, shape_params=sp, pattern=pattern, pattern_params=pp,
            color_hsv=(float(hue), float(min(sat, 1.0)), float(min(val, 1.0))),
            canonical_scale=float(rng.uniform(0.75, 1.3)),
        )
    triples = [objects[i].attribute_triple() for i in range(n_objects)]
    if len(set(triples)) != n_objects:
        raise RuntimeError("object attribute collision; vary the seed")
    order = rng.permutation(n_objects)
    train_ids = sorted(int(i) for i in order[:n_train])
    test_ids = sorted(int(i) for i in order[n_train:])
    return objects, train_ids, test_ids


# ---------------------------------------------------------------- templates

def render_templates(obj: ToyObject, n_templates: int, rng: np.random.Generator,
                     resolution: int = 32) -> TemplateSet:
    """Render evenly spaced (jittered) rotations, tight-crop to the
    foreground square, and resize; absolute object scale is deliberately
    discarded by the crop."""
    if n_templates < 1:
        raise ValueError("n_templates must be >= 1")
    canvas = 64
    images, masks = [], []
    for k in range(n_templates):
        angle = 2 * math.pi * k / n_templates + rng.uniform(-0.3, 0.3) * 2 * math.pi / n_templates
        radius = canvas * 0.34 * obj.canonical_scale * rng.uniform(0.85, 1.15)
        mask, rgb = render_object(obj, canvas, (canvas / 2, canvas / 2), angle, radius)
        img = np.full((canvas, canvas, 3), 0.82)
        img[mask] = rgb[mask]

        ys, xs = np.nonzero(mask)
        y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
        side = max(y1 - y0, x1 - x0)
        cy, cx = (y0 + y1) // 2, (x0 + x1) // 2
        y0 = np.clip(cy - side // 2, 0, canvas - side)
        x0 = np.clip(cx - side // 2, 0, canvas - side)
        crop_img = img[y0:y0 + side, x0:x0 + side]
        crop_mask = mask[y0:y0 + side, x0:x0 + side]

        pil = Image.fromarray((crop_img * 255).astype(np.uint8))
        images.append(np.asarray(pil.resize((resolution, resolution), Image.BILINEAR)))
        pil_m = Image.fromarray(crop_mask.astype(np.uint8) * 255)
        masks.append(np.asarray(pil_m.resize((resolution, resolution), Image.NEAREST)) > 127)
    images = np.stack(images)
    masks = np.stack(masks)
    if (masks.reshape(n_templates, -1).mean(axis=1) < 0.05).any():
        raise RuntimeError(f"template with <5% foreground for object {obj.object_id}")
    return TemplateSet(object_id=obj.object_id, images=images, masks=masks)


# ---------------------------------------------------------------- scenes

N_BACKGROUND_FAMILIES = 4


def render_background(rng: np.random.Generator, res: int) -> tuple[np.ndarray, int]:
    """Muted procedural background texture; returns (rgb float, family id)."""
    family = int(rng.integers(0, N_BACKGROUND_FAMILIES))
    hue = rng.uniform(0, 1)
    c0 = _hsv_rgb(hue, rng.uniform(0.04, 0.18), rng.uniform(0.3, 0.6))
    c1 = _hsv_rgb(hue + rng.uniform(-0.12, 0.12), rng.uniform(0.04, 0.18), rng.uniform(0.35, 0.7))
    if family == 0:  # smooth noise
        low = rng.random((res // 8, res // 8))
        img = np.asarray(Image.fromarray((low * 255).astype(np.uint8)).resize((res, res), Image.BILINEAR)) / 255.0
        rgb = c0[None, None] + (c1 - c0)[None, None] * img[..., None]
    elif family == 1:  # checker
        cell = int(rng.integers(6, 14))
        ys, xs = np.mgrid[0:res, 0:res]
        check = ((ys // cell + xs // cell) % 2).astype(np.float64)
        rgb = c0[None, None] + (c1 - c0)[None, None] * check[..., None]
    elif family == 2:  # diagonal stripes
        period = rng.uniform(8, 18)
        phi = rng.uniform(0, math.pi)
        ys, xs = np.mgrid[0:res, 0:res]
        coord = (xs * math.cos(phi) + ys * math.sin(phi)) / period
        stripe = (np.floor(coord).astype(np.int64) % 2).astype(np.float64)
        rgb = c0[None, None] + (c1 - c0)[None, None] * stripe[..., None]
    else:  # gradient
        ys, xs = np.mgrid[0:res, 0:res]
        g = (xs * rng.uniform(-1, 1) + ys * rng.uniform(-1, 1)) / res
        g = (g - g.min()) / max(np.ptp(g), 1e-9)
        rgb = c0[None, None] + (c1 - c0)[None, None] * g[..., None]
    return np.clip(rgb, 0, 1), family


def compose_scene(rng: np.random.Generator, objects: dict[int, ToyObject],
                  pool_ids: list[int], k_range: tuple[int, int], resolution: int,
                  duplicate_prob: float = 0.15, scene_id: str = "", split: str = "") -> SceneSample:
    """Place instances with random pose, painter's-order occlusion, and
    visible-mask recomputation; instances left with under 20 visible pixels
    are dropped from the instance list."""
    if not pool_ids:
        raise ValueError("object pool is empty")
    lo, hi = k_range
    for _attempt in range(20):
        k = int(rng.integers(lo, hi + 1))
        base = [int(i) for i in rng.permutation(pool_ids)[:min(k, len(pool_ids))]]
        ids = list(base)
        while len(ids) < k:
            ids.append(int(rng.choice(base)))
        if duplicate_prob > 0 and len(ids) >= 2 and rng.random() < duplicate_prob:
            ids[-1] = ids[0]

        bg, family = render_background(rng, resolution)
        canvas = bg.copy()
        id_map = np.full((resolution, resolution), -1, dtype=np.int64)
        for idx, oid in enumerate(ids):
            obj = objects[oid]
            center = (rng.uniform(0.12, 0.88) * resolution, rng.uniform(0.12, 0.88) * resolution)
            angle = rng.uniform(0, 2 * math.pi)
            radius = resolution * 0.14 * obj.canonical_scale * rng.uniform(0.8, 1.25)
            mask, rgb = render_object(obj, resolution, center, angle, radius)
            canvas[mask] = rgb[mask]
            id_map[mask] = idx

        instances = []
        for idx, oid in enumerate(ids):
            visible = id_map == idx
            if visible.sum() >= MIN_VISIBLE_PIXELS:
                instances.append(SceneInstance(object_id=oid, mask=visible, depth=idx))
        if instances:
            return SceneSample(scene_id=scene_id, split=split,
                               image=(canvas * 255).astype(np.uint8),
                               instances=instances, background_id=family)
    raise RuntimeError("could not compose a scene with visible instances")


@dataclass
class SlotSelection:
    instance_indices: list[int]     # indices into scene.instances
    absent_object_ids: list[int]    # padding slots trained as "not present"
    point: tuple[int, int]          # sampled foreground pixel (y, x)


def select_conditioning_objects(scene: SceneSample, n_slots: int, rng: np.random.Generator,
                                absent_pool: list[int] | None = None) -> SlotSelection:
    """Sample a foreground point, then pick instances weighted by
    exp(-dist(centroid, point) / tau) without replacement; pad missing slots
    with absent objects whose target masks are empty."""
    if not scene.instances:
        raise ValueError("scene has no instances")
    h, w = scene.instances[0].mask.shape
    tau = math.hypot(h, w) / 8.0

    fg = np.zeros((h, w), dtype=bool)
    for inst in scene.instances:
        fg |= inst.mask
    ys, xs = np.nonzero(fg)
    j = int(rng.integers(0, len(ys)))
    point = (int(ys[j]), int(xs[j]))

    centroids = []
    for inst in scene.instances:
        iy, ix = np.nonzero(inst.mask)
        centroids.append((iy.mean(), ix.mean()))
    dists = np.array([math.hypot(cy - point[0], cx - point[1]) for cy, cx in centroids])
    weights = np.exp(-dists / tau)

    n_pick = min(n_slots, len(scene.instances))
    chosen: list[int] = []
    avail = list(range(len(scene.instances)))
    w_cur = weights.copy()
    for _ in range(n_pick):
        p = w_cur[avail] / w_cur[avail].sum()
        pick = avail[int(rng.choice(len(avail), p=p))]
        chosen.append(pick)
        avail.remove(pick)

    absent: list[int] = []
    if len(chosen) < n_slots:
        present = {inst.object_id for inst in scene.instances}
        pool = [i for i in (absent_pool or []) if i not in present]
        need = n_slots - len(chosen)
        if len(pool) < need:
            raise ValueError(f"absent pool too small: need {need}, have {len(pool)}")
        absent = [int(i) for i in rng.choice(pool, size=need, replace=False)]
    return SlotSelection(instance_indices=chosen, absent_object_ids=absent, point=point)


# ---------------------------------------------------------------- generation

def generate_dataset(cfg: DatasetConfig) -> ToyDataset:
    """Full deterministic dataset: library, templates, train/test scenes."""
    lib_rng = np.random.default_rng([cfg.seed, 0])
    objects, train_ids, test_ids = make_object_library(lib_rng, cfg.n_objects, cfg.n_train_objects)

    templates = {}
    for oid in sorted(objects):
        t_rng = np.random.default_rng([cfg.seed, 1, oid])
        templates[oid] = render_templates(objects[oid], cfg.n_templates, t_rng,
                                          cfg.template_resolution)

    scenes = []
    for split, n_scenes, pool in (("train", cfg.n_train_scenes, train_ids),
                                  ("test", cfg.n_test_scenes, test_ids)):
        tag = 2 if split == "train" else 3
        for i in range(n_scenes):
            s_rng = np.random.default_rng([cfg.seed, tag, i])
            scenes.append(compose_scene(
                s_rng, objects, pool, cfg.k_range, cfg.scene_resolution,
                cfg.duplicate_prob, scene_id=f"{split}_{i:05d}", split=split))

    test_set = set(test_ids)
    for s in scenes:
        if s.split == "train":
            assert not ({i.object_id for i in s.instances} & test_set), \
                "zero-shot hygiene violated: test object in train scene"
    return ToyDataset(config=cfg, objects=objects, templates=templates, scenes=scenes,
                      train_object_ids=train_ids, test_object_ids=test_ids)


# ---------------------------------------------------------------- persistence

def _save_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def _load_mask(path: Path) -> np.ndarray:
    try:
        arr = np.asarray(Image.open(path))
    except Exception as e:
        raise DatasetError(f"unreadable mask file {path}: {e}") from e
    if arr.ndim != 2 or not np.isin(arr, (0, 255)).all():
        raise DatasetError(f"corrupted mask file {path}: values not in {{0, 255}}")
    return arr > 127


def write_dataset(dataset: ToyDataset, root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for oid, tset in dataset.templates.items():
        for k in range(len(tset.images)):
            _save_png(root / "objects" / str(oid) / "templates" / f"{k}.png", tset.images[k])
            _save_png(root / "objects" / str(oid) / "masks" / f"{k}.png",
                      tset.masks[k].astype(np.uint8) * 255)
    for scene in dataset.scenes:
        sdir = root / "scenes" / scene.scene_id
        _save_png(sdir / "image.png", scene.image)
        meta = {"scene_id": scene.scene_id, "split": scene.split,
                "background": scene.background_id,
                "instances": [{"index": i, "object_id": inst.object_id, "depth": inst.depth}
                              for i, inst in enumerate(scene.instances)]}
        sdir.mkdir(parents=True, exist_ok=True)
        (sdir / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        for i, inst in enumerate(scene.instances):
            _save_png(sdir / "masks" / f"{i}.png", inst.mask.astype(np.uint8) * 255)
    manifest = {
        "config": asdict(dataset.config),
        "objects": {str(oid): asdict(obj) for oid, obj in dataset.objects.items()},
        "train_object_ids": dataset.train_object_ids,
        "test_object_ids": dataset.test_object_ids,
        "scenes": {"train": [s.scene_id for s in dataset.scenes_of("train")],
                   "test": [s.scene_id for s in dataset.scenes_of("test")]},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_dataset(root: str | Path) -> ToyDataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"missing manifest: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed manifest {mpath}: {e}") from e

    cfg_d = manifest["config"]
    cfg_d["k_range"] = tuple(cfg_d["k_range"])
    cfg = DatasetConfig(**cfg_d)
    objects = {}
    for oid_s, od in manifest["objects"].items():
        od = dict(od)
        od["color_hsv"] = tuple(od["color_hsv"])
        objects[int(oid_s)] = ToyObject(**od)

    templates = {}
    for oid in sorted(objects):
        imgs, masks = [], []
        for k in range(cfg.n_templates):
            ipath = root / "objects" / str(oid) / "templates" / f"{k}.png"
            if not ipath.exists():
                raise DatasetError(f"missing template file {ipath}")
            imgs.append(np.asarray(Image.open(ipath)))
            masks.append(_load_mask(root / "objects" / str(oid) / "masks" / f"{k}.png"))
        templates[oid] = TemplateSet(object_id=oid, images=np.stack(imgs), masks=np.stack(masks))

    scenes = []
    for split in ("train", "test"):
        for sid in manifest["scenes"][split]:
            sdir = root / "scenes" / sid
            meta = json.loads((sdir / "meta.json").read_text())
            image = np.asarray(Image.open(sdir / "image.png"))
            instances = [SceneInstance(object_id=m["object_id"],
                                       mask=_load_mask(sdir / "masks" / f"{m['index']}.png"),
                                       depth=m["depth"])
                         for m in meta["instances"]]
            scenes.append(SceneSample(scene_id=sid, split=split, image=image,
                                      instances=instances, background_id=meta["background"]))

    listed = {s for split in ("train", "test") for s in manifest["scenes"][split]}
    on_disk = {p.name for p in (root / "scenes").iterdir() if p.is_dir()}
    if listed != on_disk:
        raise DatasetError(f"manifest/directory mismatch: {sorted(listed ^ on_disk)[:5]}")
    return ToyDataset(config=cfg, objects=objects, templates=templates, scenes=scenes,
                      train_object_ids=manifest["train_object_ids"],
                      test_object_ids=manifest["test_object_ids"])


def vae_training_masks(dataset: ToyDataset, split: str = "train") -> np.ndarray:
    """Binary masks for VAE training: scene instance masks plus template
    foreground masks upsampled to scene resolution (train split only keeps
    the zero-shot hygiene)."""
    res = dataset.config.scene_resolution
    keep_ids = set(dataset.train_object_ids if split == "train" else dataset.test_object_ids)
    masks = [inst.mask for s in dataset.scenes_of(split) for inst in s.instances]
    for oid, tset in dataset.templates.items():
        if oid not in keep_ids:
            continue
        for m in tset.masks:
            pil = Image.fromarray(m.astype(np.uint8) * 255)
            masks.append(np.asarray(pil.resize((res, res), Image.NEAREST)) > 127)
    return np.stack(masks).astype(np.uint8)

"""Operator surface: dataset generation, training, inference, evaluation,
ablation sweeps, and diffusion-trajectory visualization.

Every command writes a resolved-config snapshot next to its outputs and is
reproducible from that snapshot plus the seed. Exit codes: 0 success,
1 validation error, 2 runtime failure. OCDIT_NUM_THREADS caps torch's
worker threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .data import DatasetConfig, generate_dataset, read_dataset, write_dataset
from .diffusion import DiffusionConfig
from .metrics import average_precision
from .pipeline import (EnsembleConfig, SegmenterBundle, coarse_infer, infer_scene,
                       read_predictions, scene_ground_truth, scene_seed, scene_templates,
                       write_predictions)
from .pos_scaling import ScalingStrategy
from .trainer import TrainConfig, fit, load_train_checkpoint
from .vae import VaeConfig, load_vae, save_vae, train_vae


class ValidationError(Exception):
    pass


def _snapshot(out_dir: Path, name: str, config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(json.dumps(config, indent=1, sort_keys=True, default=str))


def _load_json_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {p}")
    return json.loads(p.read_text())


def load_bundle(ckpt_path: str | Path, vae_path: str | Path) -> SegmenterBundle:
    vae = load_vae(vae_path)
    cfg, state, _extra, _ = load_train_checkpoint(ckpt_path, vae)
    return SegmenterBundle(vae=vae, backbone=state.backbone, model=state.model,
                           diffusion=state.diffusion_cfg, train_cfg=cfg).eval()


# ---------------------------------------------------------------- commands

def cmd_generate_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ValidationError(f"output dir {out} is not empty (use --force)")
    if args.scenes <= 0:
        raise ValidationError("--scenes must be positive")
    overrides = _load_json_config(args.config)
    cfg = DatasetConfig(**{**dict(
        n_objects=args.objects, n_train_objects=args.train_objects,
        n_train_scenes=args.scenes, n_test_scenes=args.test_scenes,
        seed=args.seed), **overrides})
    if "k_range" in overrides:
        cfg.k_range = tuple(overrides["k_range"])
    dataset = generate_dataset(cfg)
    write_dataset(dataset, out)
    _snapshot(out, "resolved_config.json", {"command": "generate-data", "config": asdict(cfg)})
    n_train = len(dataset.scenes_of("train"))
    n_test = len(dataset.scenes_of("test"))
    print(f"dataset written to {out}: {cfg.n_objects} objects "
          f"({len(dataset.train_object_ids)} train / {len(dataset.test_object_ids)} test ids), "
          f"{n_train} train scenes, {n_test} test scenes")
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    dataset = read_dataset(args.dataset)
    if args.stage == "vae":
        overrides = _load_json_config(args.config)
        vcfg_fields = {k: v for k, v in overrides.get("vae", {}).items()}
        vcfg = VaeConfig(**vcfg_fields)
        from .data import vae_training_masks
        masks = vae_training_masks(dataset, "train")
        out.mkdir(parents=True, exist_ok=True)
        vae, stats = train_vae(masks, vcfg, epochs=args.epochs or 10, seed=args.seed,
                               log_path=out / "vae_metrics.jsonl")
        save_vae(out / "vae.npz", vae)
        _snapshot(out, "resolved_config.json",
                  {"command": "train vae", "vae_config": asdict(vcfg), "seed": args.seed,
                   "epochs": args.epochs or 10, "stats": stats})
        print(f"vae checkpoint: {out / 'vae.npz'}  roundtrip IoU {stats['roundtrip_iou']:.4f} "
              f"scaled latent std {stats['scaled_latent_std']:.4f}")
        return 0

    if not args.vae or not Path(args.vae).exists():
        raise ValidationError("training the diffusion model requires --vae pointing at a "
                              "trained VAE checkpoint (run `ocdit train vae` first)")
    try:
        ScalingStrategy(args.pe_strategy)
    except ValueError:
        raise ValidationError(
            f"invalid pe-strategy '{args.pe_strategy}'; choose one of: "
            + ", ".join(s.value for s in ScalingStrategy)) from None
    overrides = _load_json_config(args.config)
    base = dict(variant=args.stage, seed=args.seed, pe_strategy=args.pe_strategy)
    if args.stage == "refine":
        base["n_objects"] = 1
    if args.epochs:
        base["epochs"] = args.epochs
    if args.steps_per_epoch:
        base["steps_per_epoch"] = args.steps_per_epoch
    if args.capacity:
        base["capacity"] = args.capacity
    if args.n_objects and args.stage == "coarse":
        base["n_objects"] = args.n_objects
    merged = {**base, **overrides}
    for key in ("crop_scale",):
        if key in merged:
            merged[key] = tuple(merged[key])
    cfg = TrainConfig(**merged)
    vae = load_vae(args.vae)
    _snapshot(out, "resolved_config.json", {"command": f"train {args.stage}",
                                            "train_config": asdict(cfg)})
    best = fit(cfg, dataset, vae, out, resume_from=args.resume)
    print(f"checkpoint: {best}")
    return 0


def _ensemble_from_args(args) -> EnsembleConfig:
    ens = EnsembleConfig(n_ensemble=args.ensemble, n_aug=args.augs, scheme=args.aug_scheme)
    if args.coarse_keep is not None:
        ens.coarse_keep_threshold = args.coarse_keep
    if args.refine_keep is not None:
        ens.refine_keep_threshold = args.refine_keep
    ens.validate()
    return ens


def cmd_infer(args) -> int:
    dataset = read_dataset(args.dataset)
    bundle = load_bundle(args.checkpoint, args.vae)
    if args.steps or args.rho:
        d = asdict(bundle.diffusion)
        if args.steps:
            d["num_steps"] = args.steps
        if args.rho:
            d["rho"] = args.rho
        bundle.diffusion = DiffusionConfig(**d)
    refine_bundle = None
    if args.refine_checkpoint:
        refine_bundle = load_bundle(args.refine_checkpoint, args.vae)
    ens = _ensemble_from_args(args)
    scenes = dataset.scenes_of(args.split)
    if args.scenes:
        wanted = set(args.scenes.split(","))
        scenes = [s for s in scenes if s.scene_id in wanted]
        if not scenes:
            raise ValidationError(f"no scenes matched {args.scenes}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    per_scene = []
    for scene in scenes:
        rng = torch.Generator().manual_seed(scene_seed(args.seed, scene.scene_id))
        if args.visualize:
            object_ids = sorted({i.object_id for i in scene.instances})
            templates = scene_templates(dataset, object_ids)
            preds, traj = coarse_infer(scene.image, object_ids, templates, bundle, ens,
                                       rng, collect_trajectory=True)
            if refine_bundle is not None:
                preds = infer_scene(bundle, dataset, scene, ens,
                                    torch.Generator().manual_seed(scene_seed(args.seed, scene.scene_id)),
                                    refine_bundle)
            _save_trajectory_grid(out / f"viz_{scene.scene_id}.png", traj)
        else:
            preds = infer_scene(bundle, dataset, scene, ens, rng, refine_bundle)
        per_scene.append((scene.scene_id, preds))

    pred_path = out / "predictions.jsonl"
    write_predictions(pred_path, per_scene, ens.binarize_threshold)
    _snapshot(out, "resolved_config.json", {
        "command": "infer", "seed": args.seed, "split": args.split,
        "ensemble": asdict(ens), "diffusion": asdict(bundle.diffusion),
        "checkpoint": str(args.checkpoint), "refine_checkpoint": str(args.refine_checkpoint or ""),
    })
    print(f"predictions: {pred_path} ({sum(len(p) for _, p in per_scene)} instances "
          f"over {len(per_scene)} scenes)")
    return 0


def _save_trajectory_grid(path: Path, traj: np.ndarray) -> None:
    """One row per object slot, one column per sampler step."""
    from PIL import Image
    n_steps, n_slots, hm, wm = traj.shape
    grid = np.zeros((n_slots * hm, n_steps * wm), dtype=np.uint8)
    for s in range(n_steps):
        for k in range(n_slots):
            grid[k * hm:(k + 1) * hm, s * wm:(s + 1) * wm] = (np.clip(traj[s, k], 0, 1) * 255)
    Image.fromarray(grid).save(path)


def cmd_eval(args) -> int:
    dataset = read_dataset(args.dataset)
    detections = read_predictions(args.predictions)
    scenes = dataset.scenes_of(args.split)
    scene_ids = {s.scene_id for s in scenes}
    stray = {d.scene_id for d in detections} - scene_ids
    if stray:
        raise ValidationError(f"predictions reference scenes not in the {args.split} split: "
                              f"{sorted(stray)[:5]}")
    gts = [g for s in scenes for g in scene_ground_truth(s)]
    report = average_precision(detections, gts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ap_report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    _snapshot(out, "resolved_config.json", {"command": "eval", "predictions": str(args.predictions),
                                            "split": args.split})
    print(f"AP {report.ap:.4f}")
    for t in sorted(report.per_threshold):
        print(f"  IoU {t:.2f}: AP {report.per_threshold[t]:.4f}")
    return 0


ABLATION_AXES = {
    "steps": [3, 6, 9, 18, 36],
    "rho": [3, 5, 7, 9, 15],
    "ensemble": [1, 4, 8, 16],
    "pe": [s.value for s in ScalingStrategy],
}


def cmd_ablate(args) -> int:
    if args.axis not in ABLATION_AXES:
        raise ValidationError(f"unknown axis {args.axis}; choose from {sorted(ABLATION_AXES)}")
    dataset = read_dataset(args.dataset)
    scenes = dataset.scenes_of(args.split)
    if args.max_scenes:
        scenes = scenes[:args.max_scenes]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    values = ABLATION_AXES[args.axis]

    from .pipeline import evaluate_scenes
    rows = []
    if args.axis == "pe":
        ckpts = dict(kv.split("=", 1) for kv in args.pe_checkpoints or [])
        missing = [v for v in values if v not in ckpts]
        if missing:
            raise ValidationError(f"pe sweep needs --pe-checkpoint <strategy>=<path> for: {missing}")
        for strategy in values:
            bundle = load_bundle(ckpts[strategy], args.vae)
            bundle.train_cfg.pe_strategy = strategy
            ens = EnsembleConfig(n_ensemble=args.ensemble, n_aug=args.augs)
            report = evaluate_scenes(bundle, dataset, scenes, ens, seed=args.seed)
            rows.append((strategy, report.ap))
    else:
        bundle = load_bundle(args.checkpoint, args.vae)
        for v in values:
            d = asdict(bundle.diffusion)
            ens = EnsembleConfig(n_ensemble=args.ensemble, n_aug=args.augs)
            if args.axis == "steps":
                d["num_steps"] = v
            elif args.axis == "rho":
                d["rho"] = v
            else:
                ens.n_ensemble = v
            bundle.diffusion = DiffusionConfig(**d)
            report = evaluate_scenes(bundle, dataset, scenes, ens, seed=args.seed)
            rows.append((v, report.ap))

    csv_path = out / f"ablate_{args.axis}.csv"
    with open(csv_path, "w") as f:
        print(f"{args.axis},ap", file=f)
        for v, ap in rows:
            print(f"{v},{ap:.6f}", file=f)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs = list(range(len(rows)))
    ax.plot(xs, [ap for _, ap in rows], marker="o")
    ax.set_xticks(xs, [str(v) for v, _ in rows], rotation=30 if args.axis == "pe" else 0)
    ax.set_xlabel(args.axis)
    ax.set_ylabel("AP")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out / f"ablate_{args.axis}.png", dpi=120)
    plt.close(fig)

    _snapshot(out, "resolved_config.json", {"command": "ablate", "axis": args.axis,
                                            "seed": args.seed, "rows": rows})
    print(f"wrote {csv_path}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ocdit", description=__doc__)
    p.add_argument("--seed", type=int, default=None, dest="global_seed")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)

    g = sub.add_parser("generate-data", help="write a procedural toy dataset", parents=[common])
    g.add_argument("--out", required=True)
    g.add_argument("--objects", type=int, default=40)
    g.add_argument("--train-objects", type=int, default=30)
    g.add_argument("--scenes", type=int, default=2000)
    g.add_argument("--test-scenes", type=int, default=100)
    g.add_argument("--config", help="JSON overrides for DatasetConfig")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train the VAE or a diffusion stage", parents=[common])
    t.add_argument("stage", choices=["vae", "coarse", "refine"])
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--vae", help="VAE checkpoint (required for coarse/refine)")
    t.add_argument("--config", help="JSON overrides for TrainConfig / VaeConfig")
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps-per-epoch", type=int)
    t.add_argument("--n-objects", type=int)
    t.add_argument("--capacity", type=int)
    t.add_argument("--pe-strategy", default="baseline_chunked")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="run the inference pipeline over a split", parents=[common])
    i.add_argument("--dataset", required=True)
    i.add_argument("--checkpoint", required=True, help="coarse checkpoint")
    i.add_argument("--refine-checkpoint")
    i.add_argument("--vae", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--split", default="test")
    i.add_argument("--scenes", help="comma-separated scene ids (default: whole split)")
    i.add_argument("--ensemble", type=int, default=8)
    i.add_argument("--augs", type=int, default=1)
    i.add_argument("--aug-scheme", default="full_image")
    i.add_argument("--steps", type=int)
    i.add_argument("--rho", type=float)
    i.add_argument("--coarse-keep", type=float)
    i.add_argument("--refine-keep", type=float)
    i.add_argument("--visualize", action="store_true",
                   help="save per-step decoded trajectory grids")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score a predictions file against ground truth", parents=[common])
    e.add_argument("--dataset", required=True)
    e.add_argument("--predictions", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="sweep one axis and write CSV + plot", parents=[common])
    a.add_argument("--axis", required=True)
    a.add_argument("--dataset", required=True)
    a.add_argument("--checkpoint")
    a.add_argument("--pe-checkpoints", nargs="*", metavar="STRATEGY=PATH")
    a.add_argument("--vae", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--split", default="test")
    a.add_argument("--max-scenes", type=int, default=0)
    a.add_argument("--ensemble", type=int, default=4)
    a.add_argument("--augs", type=int, default=1)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("OCDIT_NUM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is None:
        args.seed = args.global_seed if args.global_seed is not None else 0
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

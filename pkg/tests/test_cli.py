import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ocdit.cli import main

MICRO_DATASET_OVERRIDES = {
    "n_templates": 2, "template_resolution": 16, "scene_resolution": 32,
    "k_range": [3, 4], "duplicate_prob": 0.0,
}

MICRO_TRAIN_OVERRIDES = {
    "image_resolution": 32, "mask_resolution": 32, "batch_size": 2,
    "epochs": 1, "steps_per_epoch": 2,
    "model": {"embed_dim": 32, "n_blocks": 1, "n_heads": 2, "mlp_ratio": 2},
    "backbone": {"patch_size": 8, "feature_dim": 16, "depth": 1},
    "diffusion": {"num_steps": 3},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Micro dataset + micro VAE + micro coarse checkpoint via the CLI."""
    root = tmp_path_factory.mktemp("cli")
    ds = root / "dataset"
    cfg_path = root / "ds.json"
    cfg_path.write_text(json.dumps(MICRO_DATASET_OVERRIDES))
    rc = main(["generate-data", "--out", str(ds), "--objects", "8", "--train-objects", "6",
               "--scenes", "10", "--test-scenes", "3", "--seed", "5", "--config", str(cfg_path)])
    assert rc == 0

    tcfg_path = root / "train.json"
    tcfg_path.write_text(json.dumps(MICRO_TRAIN_OVERRIDES))
    vae_dir = root / "vae"
    vcfg_path = root / "vae.json"
    vcfg_path.write_text(json.dumps({"vae": {"latent_channels": 8, "base_width": 16}}))
    rc = main(["train", "vae", "--dataset", str(ds), "--out", str(vae_dir),
               "--epochs", "1", "--config", str(vcfg_path), "--seed", "1"])
    assert rc == 0

    coarse_dir = root / "coarse"
    rc = main(["train", "coarse", "--dataset", str(ds), "--out", str(coarse_dir),
               "--vae", str(vae_dir / "vae.npz"), "--config", str(tcfg_path),
               "--n-objects", "2", "--capacity", "4", "--pe-strategy", "random_interval",
               "--seed", "2"])
    assert rc == 0
    return {"root": root, "dataset": ds, "vae": vae_dir / "vae.npz",
            "coarse": coarse_dir / "best.npz", "train_cfg": tcfg_path}


def test_generate_data_deterministic_manifest(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps(MICRO_DATASET_OVERRIDES))
    args = ["--out", None, "--objects", "6", "--train-objects", "4", "--scenes", "4",
            "--test-scenes", "2", "--seed", "9", "--config", str(cfg_path)]
    m = []
    for sub in ("a", "b"):
        a = list(args)
        a[1] = str(tmp_path / sub)
        assert main(["generate-data"] + a) == 0
        m.append((tmp_path / sub / "manifest.json").read_bytes())
    assert m[0] == m[1]


def test_generate_data_refuses_nonempty(workspace):
    rc = main(["generate-data", "--out", str(workspace["dataset"]), "--scenes", "2"])
    assert rc == 1


def test_generate_data_zero_scenes(tmp_path):
    rc = main(["generate-data", "--out", str(tmp_path / "z"), "--scenes", "0"])
    assert rc == 1
    assert not (tmp_path / "z").exists()


def test_train_requires_vae(workspace, tmp_path):
    rc = main(["train", "coarse", "--dataset", str(workspace["dataset"]),
               "--out", str(tmp_path / "x"), "--config", str(workspace["train_cfg"])])
    assert rc == 1


def test_train_invalid_pe_strategy(workspace, tmp_path, capsys):
    rc = main(["train", "coarse", "--dataset", str(workspace["dataset"]),
               "--out", str(tmp_path / "x"), "--vae", str(workspace["vae"]),
               "--config", str(workspace["train_cfg"]), "--pe-strategy", "bogus"])
    assert rc == 1
    err = capsys.readouterr().err
    for name in ("baseline_chunked", "baseline_direct", "test_time_interpolation",
                 "random_interval", "random_interpolation", "random_permutation"):
        assert name in err


def test_infer_eval_roundtrip(workspace, tmp_path):
    out = tmp_path / "infer"
    rc = main(["--seed", "3", "infer", "--dataset", str(workspace["dataset"]),
               "--checkpoint", str(workspace["coarse"]), "--vae", str(workspace["vae"]),
               "--out", str(out), "--ensemble", "1", "--augs", "1", "--coarse-keep", "0.01"])
    assert rc == 0
    pred = out / "predictions.jsonl"
    assert pred.exists()
    assert (out / "resolved_config.json").exists()

    ev = tmp_path / "eval"
    rc = main(["eval", "--dataset", str(workspace["dataset"]), "--predictions", str(pred),
               "--out", str(ev)])
    assert rc == 0
    report = json.loads((ev / "ap_report.json").read_text())
    assert 0 <= report["ap"] <= 1
    assert len(report["per_threshold"]) == 10


def test_infer_deterministic_byte_identical(workspace, tmp_path):
    outs = []
    for sub in ("r1", "r2"):
        out = tmp_path / sub
        rc = main(["--seed", "17", "infer", "--dataset", str(workspace["dataset"]),
                   "--checkpoint", str(workspace["coarse"]), "--vae", str(workspace["vae"]),
                   "--out", str(out), "--ensemble", "2", "--augs", "1",
                   "--coarse-keep", "0.01"])
        assert rc == 0
        outs.append((out / "predictions.jsonl").read_bytes())
    assert outs[0] == outs[1]


def test_infer_visualize_grid_columns(workspace, tmp_path):
    from PIL import Image
    out = tmp_path / "viz"
    rc = main(["infer", "--dataset", str(workspace["dataset"]),
               "--checkpoint", str(workspace["coarse"]), "--vae", str(workspace["vae"]),
               "--out", str(out), "--ensemble", "1", "--visualize"])
    assert rc == 0
    grids = list(out.glob("viz_*.png"))
    assert grids
    img = np.asarray(Image.open(grids[0]))
    assert img.shape[1] == 3 * 32  # num_steps columns at mask resolution


def test_eval_ground_truth_as_predictions_is_perfect(workspace, tmp_path):
    from ocdit.data import read_dataset
    from ocdit.pipeline import InstancePrediction, write_predictions
    ds = read_dataset(workspace["dataset"])
    per_scene = []
    for scene in ds.scenes_of("test"):
        preds = [InstancePrediction(inst.object_id, inst.mask.astype(np.float32), 1.0, {})
                 for inst in scene.instances]
        per_scene.append((scene.scene_id, preds))
    pred_path = tmp_path / "gt.jsonl"
    write_predictions(pred_path, per_scene)
    ev = tmp_path / "eval"
    rc = main(["eval", "--dataset", str(workspace["dataset"]), "--predictions", str(pred_path),
               "--out", str(ev)])
    assert rc == 0
    assert json.loads((ev / "ap_report.json").read_text())["ap"] == pytest.approx(1.0)


def test_eval_empty_predictions(workspace, tmp_path):
    pred = tmp_path / "empty.jsonl"
    pred.write_text("")
    ev = tmp_path / "eval"
    rc = main(["eval", "--dataset", str(workspace["dataset"]), "--predictions", str(pred),
               "--out", str(ev)])
    assert rc == 0
    assert json.loads((ev / "ap_report.json").read_text())["ap"] == 0.0


def test_eval_scene_mismatch(workspace, tmp_path):
    pred = tmp_path / "bad.jsonl"
    pred.write_text(json.dumps({"scene_id": "nonexistent_99", "object_id": 1,
                                "confidence": 0.5,
                                "rle": {"size": [2, 2], "counts": [4]},
                                "provenance": {}}) + "\n")
    rc = main(["eval", "--dataset", str(workspace["dataset"]), "--predictions", str(pred),
               "--out", str(tmp_path / "ev")])
    assert rc == 1


def test_ablate_steps_sweep(workspace, tmp_path, monkeypatch):
    import ocdit.cli as cli
    monkeypatch.setitem(cli.ABLATION_AXES, "steps", [3, 4])
    out = tmp_path / "ab"
    rc = main(["ablate", "--axis", "steps", "--dataset", str(workspace["dataset"]),
               "--checkpoint", str(workspace["coarse"]), "--vae", str(workspace["vae"]),
               "--out", str(out), "--ensemble", "1", "--max-scenes", "1"])
    assert rc == 0
    rows = (out / "ablate_steps.csv").read_text().strip().splitlines()
    assert rows[0] == "steps,ap" and len(rows) == 3
    assert (out / "ablate_steps.png").exists()


def test_ablate_unknown_axis(workspace, tmp_path):
    rc = main(["ablate", "--axis", "nope", "--dataset", str(workspace["dataset"]),
               "--vae", str(workspace["vae"]), "--out", str(tmp_path / "ab")])
    assert rc == 1


def test_resume_continues_step_count(workspace, tmp_path):
    from ocdit.trainer import load_train_checkpoint
    from ocdit.vae import load_vae
    out = tmp_path / "resumed"
    last = workspace["coarse"].parent / "last.npz"
    rc = main(["train", "coarse", "--dataset", str(workspace["dataset"]), "--out", str(out),
               "--vae", str(workspace["vae"]), "--config", str(workspace["train_cfg"]),
               "--resume", str(last)])
    assert rc == 0
    vae = load_vae(workspace["vae"])
    _, state, _, _ = load_train_checkpoint(out / "best.npz", vae)
    assert state.step == 2  # already complete: resume preserves the step count


def test_console_entrypoint():
    proc = subprocess.run([sys.executable, "-m", "ocdit.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "generate-data" in proc.stdout

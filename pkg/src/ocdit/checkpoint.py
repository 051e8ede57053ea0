"""Shared checkpoint container: one .npz holding named arrays + embedded JSON.

Layout:
    __config__          zero-dim unicode array with a JSON document
    <group>/<name>      float/int arrays (e.g. "vae/enc.0.weight")

The JSON document carries the dataclass configs needed to rebuild the
modules; array groups are namespaced per module so one file can hold the
denoiser, backbone and uncertainty head of a training run together with
optimizer state and rng snapshots for exact resume.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch


def save_checkpoint(path: str | Path, config: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"__config__": np.array(json.dumps(config, sort_keys=True))}
    for k, v in arrays.items():
        if k == "__config__":
            raise ValueError("'__config__' is reserved")
        payload[k] = np.asarray(v)
    with open(path, "wb") as f:
        np.savez_compressed(f, **payload)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        if "__config__" not in z:
            raise ValueError(f"not a checkpoint container (missing __config__): {path}")
        config = json.loads(str(z["__config__"]))
        arrays = {k: z[k] for k in z.files if k != "__config__"}
    return config, arrays


def state_dict_to_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_dict_from_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    state = {}
    want = prefix + "/"
    for k, v in arrays.items():
        if k.startswith(want):
            state[k[len(want):]] = torch.from_numpy(np.ascontiguousarray(v))
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise KeyError(f"checkpoint group '{prefix}' missing arrays: {sorted(missing)[:5]}")
    module.load_state_dict(state)

"""Patch-feature backbone for query images and object templates.

A small convolutional stand-in for a frozen pretrained ViT: a non-overlapping
patch embedding followed by residual 3x3 stages on the patch grid. Grid
convolutions use circular padding, so shifting the input by exactly one
patch shifts the feature grid by exactly one cell. Trains jointly with the
denoiser by default; ``frozen`` keeps it at its random initialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class BackboneConfig:
    patch_size: int = 8
    feature_dim: int = 96
    depth: int = 2  # residual stages on the patch grid
    frozen: bool = False


class GridResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, padding_mode="circular")
        self.norm2 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, padding_mode="circular")

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class PatchFeatureExtractor(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, cfg.feature_dim, cfg.patch_size, stride=cfg.patch_size)
        self.stages = nn.Sequential(*[GridResBlock(cfg.feature_dim) for _ in range(cfg.depth)])
        if cfg.frozen:
            for p in self.parameters():
                p.requires_grad_(False)

    def extract(self, image: torch.Tensor) -> torch.Tensor:
        """Feature grid of an RGB image batch.

        ``image``: (B, 3, H, W) in [0, 1] with H, W divisible by the patch
        size. Returns (B, d_f, H/p, W/p).
        """
        p = self.cfg.patch_size
        if image.ndim == 3:
            image = image[None]
        if image.shape[-1] % p or image.shape[-2] % p:
            raise ValueError(f"resolution {tuple(image.shape[-2:])} not divisible by patch size {p}")
        return self.stages(self.patch_embed(image))

    forward = extract

    def extract_template_features(self, templates: torch.Tensor) -> torch.Tensor:
        """Feature grids for a stacked template set.

        ``templates``: (N_O, N_T, 3, Ht, Wt) or with a leading batch dim.
        Returns the same leading dims with (d_f, Ht/p, Wt/p) per template.
        """
        lead = templates.shape[:-3]
        flat = templates.reshape(-1, *templates.shape[-3:])
        feats = self.extract(flat)
        return feats.reshape(*lead, *feats.shape[1:])

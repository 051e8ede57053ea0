"""beta-VAE over binary instance masks.

Compresses H x W binary masks into a (H/f, W/f, d) latent grid and decodes
latents back to per-pixel confidence maps in [0, 1]. The latent space is
standardized post-training by a single scalar so its per-element std matches
the diffusion sigma_data; the scale is applied on encode and undone on
decode, making diffusion-space latents and VAE-space latents exact inverses.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.transforms.v2 import functional as TF

from .checkpoint import load_checkpoint, load_state_dict_from_arrays, save_checkpoint, state_dict_to_arrays

BCE_EPS = 1e-6


@dataclass
class VaeConfig:
    latent_channels: int = 64
    downsample_factor: int = 8
    beta: float = 1e-5
    latent_scale: float = 1.0
    latent_shift: float = 0.0
    base_width: int = 32
    use_mean_latent: bool = True  # diffusion targets use the encoder mean

    def validate(self) -> None:
        f = self.downsample_factor
        if f < 1 or (f & (f - 1)) != 0:
            raise ValueError(f"downsample_factor must be a power of two, got {f}")
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    """Single-head self-attention over the spatial grid (bottleneck stage)."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(8, channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class MaskVae(nn.Module):
    """Convolutional encoder/decoder pair with a Gaussian latent."""

    def __init__(self, cfg: VaeConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w = cfg.base_width
        n_down = int(math.log2(cfg.downsample_factor))
        widths = [w + 16 * i for i in range(n_down + 1)]  # e.g. 32, 48, 64, 80

        enc: list[nn.Module] = [nn.Conv2d(1, widths[0], 3, padding=1)]
        for i in range(n_down):
            enc += [ResBlock(widths[i], widths[i]), nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)]
        enc += [ResBlock(widths[-1], widths[-1]), SelfAttention2d(widths[-1]), ResBlock(widths[-1], widths[-1])]
        self.encoder = nn.Sequential(*enc)
        self.to_moments = nn.Conv2d(widths[-1], 2 * cfg.latent_channels, 1)
        nn.init.zeros_(self.to_moments.weight)
        nn.init.zeros_(self.to_moments.bias)
        with torch.no_grad():
            # start with a tight posterior so early reconstructions are not
            # drowned in latent noise (beta is too small to need wide ones)
            self.to_moments.bias[cfg.latent_channels:] = -6.0

        dec: list[nn.Module] = [nn.Conv2d(cfg.latent_channels, widths[-1], 3, padding=1),
                                ResBlock(widths[-1], widths[-1]), SelfAttention2d(widths[-1]),
                                ResBlock(widths[-1], widths[-1])]
        for i in range(n_down, 0, -1):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(widths[i], widths[i - 1], 3, padding=1),
                    ResBlock(widths[i - 1], widths[i - 1])]
        out_conv = nn.Conv2d(widths[0], 1, 3, padding=1)
        # masks are mostly background; start the sigmoid near the base rate
        nn.init.constant_(out_conv.bias, -2.5)
        dec += [nn.GroupNorm(8, widths[0]), nn.SiLU(), out_conv]
        self.decoder = nn.Sequential(*dec)

    def _check_input(self, b: torch.Tensor) -> torch.Tensor:
        if b.ndim == 2:
            b = b[None, None]
        elif b.ndim == 3:
            b = b[:, None]
        f = self.cfg.downsample_factor
        if b.shape[-1] % f or b.shape[-2] % f:
            raise ValueError(f"mask resolution {tuple(b.shape[-2:])} not divisible by {f}")
        return b.float()

    def encode(self, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Raw (unscaled) posterior moments of a mask batch.

        Accepts (H, W), (B, H, W) or (B, 1, H, W); returns mean and logvar
        of shape (B, d, H/f, W/f).
        """
        b = self._check_input(b)
        mean, logvar = self.to_moments(self.encoder(b)).chunk(2, dim=1)
        return mean, logvar.clamp(-30, 20)

    def encode_latent(self, b: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
        """Diffusion-space latent of a mask: scaled mean (or sampled) code."""
        mean, logvar = self.encode(b)
        if not self.cfg.use_mean_latent:
            eps = torch.randn(mean.shape, generator=rng, dtype=mean.dtype)
            mean = mean + torch.exp(0.5 * logvar) * eps
        return (mean - self.cfg.latent_shift) * self.cfg.latent_scale

    def decode(self, x: torch.Tensor) -> torch.Tensor:
        """Confidence map in [0, 1] from a diffusion-space latent.

        Accepts (d, h, w) or (B, d, h, w); returns (B, H, W).
        """
        if x.ndim == 3:
            x = x[None]
        if x.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"expected {self.cfg.latent_channels} latent channels, got {x.shape[1]}")
        raw = x / self.cfg.latent_scale + self.cfg.latent_shift
        return torch.sigmoid(self.decoder(raw)).squeeze(1)

    def forward(self, b: torch.Tensor, rng: torch.Generator | None = None):
        """Training pass: sampled-latent reconstruction plus moments."""
        mean, logvar = self.encode(b)
        eps = torch.randn(mean.shape, generator=rng, dtype=mean.dtype)
        z = mean + torch.exp(0.5 * logvar) * eps
        recon = torch.sigmoid(self.decoder(z)).squeeze(1)
        return recon, mean, logvar


def elbo_loss(recon: torch.Tensor, b: torch.Tensor, mean: torch.Tensor,
              logvar: torch.Tensor, beta: float) -> torch.Tensor:
    """Bernoulli reconstruction + beta * KL(N(mean, var) || N(0, I)),
    both mean-reduced over their own elements."""
    if recon.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(recon.shape)} vs {tuple(b.shape)}")
    r = recon.clamp(BCE_EPS, 1 - BCE_EPS)
    b = b.float()
    bce = -(b * torch.log(r) + (1 - b) * torch.log(1 - r)).mean()
    kl = 0.5 * (mean**2 + torch.exp(logvar) - 1 - logvar).mean()
    return bce + beta * kl


def calibrate_latent_scale(vae: MaskVae, masks: torch.Tensor, batch_size: int = 64) -> float:
    """Standardize the latent space: center the population of mean-latents
    and scale so their per-element std is 0.5.

    ``masks``: (N, H, W) binary, N >= a few hundred for a stable estimate.
    Mutates vae.cfg.latent_scale / latent_shift and returns the scale.
    """
    vae.eval()
    sq_sum, mean_sum, count = 0.0, 0.0, 0
    with torch.no_grad():
        for i in range(0, len(masks), batch_size):
            m, _ = vae.encode(masks[i:i + batch_size])
            sq_sum += float((m.double() ** 2).sum())
            mean_sum += float(m.double().sum())
            count += m.numel()
    mean = mean_sum / count
    var = sq_sum / count - mean * mean
    std = math.sqrt(max(var, 0.0))
    if std < 1e-8:
        raise ValueError("degenerate latents: zero variance, cannot calibrate")
    vae.cfg.latent_shift = mean
    vae.cfg.latent_scale = 0.5 / std
    return vae.cfg.latent_scale


def augment_mask(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random flips + affine + perspective, nearest-resampled so the output
    stays binary."""
    t = torch.from_numpy(mask.astype(np.uint8))[None]
    if rng.random() < 0.5:
        t = torch.flip(t, dims=[-1])
    if rng.random() < 0.5:
        t = torch.flip(t, dims=[-2])
    if rng.random() < 0.8:
        t = TF.affine(
            t,
            angle=float(rng.uniform(-180, 180)),
            translate=[int(rng.integers(-4, 5)), int(rng.integers(-4, 5))],
            scale=float(rng.uniform(0.85, 1.25)),
            shear=[0.0],
            interpolation=TF.InterpolationMode.NEAREST,
        )
    if rng.random() < 0.25:
        h, w = t.shape[-2:]
        d = int(0.08 * min(h, w))
        start = [[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]]
        end = [[int(x + rng.integers(-d, d + 1)), int(y + rng.integers(-d, d + 1))] for x, y in start]
        t = TF.perspective(t, start, end, interpolation=TF.InterpolationMode.NEAREST)
    return t[0].numpy().astype(np.uint8)


def roundtrip_iou(vae: MaskVae, masks: torch.Tensor, threshold: float = 0.5,
                  batch_size: int = 64) -> float:
    """Mean IoU of binarize(decode(encode_latent(b))) against b."""
    vae.eval()
    ious = []
    with torch.no_grad():
        for i in range(0, len(masks), batch_size):
            b = masks[i:i + batch_size].float()
            rec = vae.decode(vae.encode_latent(b)) > threshold
            bb = b > 0.5
            inter = (rec & bb).flatten(1).sum(1).double()
            union = (rec | bb).flatten(1).sum(1).double()
            ious.extend((inter / union.clamp(min=1)).tolist())
    return float(np.mean(ious))


def train_vae(
    masks: np.ndarray,
    cfg: VaeConfig,
    *,
    epochs: int = 10,
    batch_size: int = 64,
    lr: float = 1e-3,
    warmup_steps: int = 50,
    seed: int = 0,
    holdout_fraction: float = 0.05,
    log_path: str | Path | None = None,
) -> tuple[MaskVae, dict]:
    """Train the mask VAE, calibrate the latent scale, report fidelity.

    ``masks``: (N, H, W) uint8/bool array of binary masks. Learning rate
    warms up linearly then cosine-anneals. Returns the trained model and a
    stats dict (final loss, roundtrip IoU on the holdout, calibrated scale,
    scaled latent std).
    """
    cfg.validate()
    torch.manual_seed(seed)
    vae = MaskVae(cfg)
    opt = torch.optim.Adam(vae.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    noise_rng = torch.Generator().manual_seed(seed + 1)

    n_hold = max(8, int(len(masks) * holdout_fraction))
    perm = rng.permutation(len(masks))
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    holdout = torch.from_numpy(masks[hold_idx].astype(np.float32))

    steps_per_epoch = max(1, len(train_idx) // batch_size)
    total_steps = epochs * steps_per_epoch
    log_f = open(log_path, "w") if log_path else None
    epoch_losses = []
    step = 0
    t0 = time.time()
    for epoch in range(epochs):
        order = rng.permutation(train_idx)
        losses = []
        for s in range(steps_per_epoch):
            if step < warmup_steps:
                cur_lr = lr * (step + 1) / warmup_steps
            else:
                t = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
                cur_lr = lr * 0.5 * (1 + math.cos(math.pi * t))
            for group in opt.param_groups:
                group["lr"] = cur_lr
            idx = order[s * batch_size:(s + 1) * batch_size]
            batch = np.stack([augment_mask(masks[i], rng) for i in idx])
            b = torch.from_numpy(batch.astype(np.float32))
            recon, mean, logvar = vae(b, rng=noise_rng)
            loss = elbo_loss(recon, b, mean, logvar, cfg.beta)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"VAE loss diverged at epoch {epoch} step {s}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            step += 1
        epoch_losses.append(float(np.mean(losses)))
        if log_f:
            print(json.dumps({"epoch": epoch, "loss": epoch_losses[-1],
                              "holdout_iou": round(roundtrip_iou(vae, holdout[:256]), 4),
                              "elapsed_s": round(time.time() - t0, 1)}), file=log_f, flush=True)

    calib = torch.from_numpy(masks[train_idx[:2000]].astype(np.float32))
    scale = calibrate_latent_scale(vae, calib)
    with torch.no_grad():
        lat = torch.cat([vae.encode_latent(calib[i:i + 64]) for i in range(0, min(len(calib), 1024), 64)])
    stats = {
        "epoch_losses": epoch_losses,
        "roundtrip_iou": roundtrip_iou(vae, holdout),
        "latent_scale": scale,
        "scaled_latent_std": float(lat.std()),
        "scaled_latent_mean": float(lat.mean()),
    }
    if log_f:
        print(json.dumps(stats), file=log_f, flush=True)
        log_f.close()
    return vae, stats


def save_vae(path: str | Path, vae: MaskVae) -> None:
    save_checkpoint(path, {"kind": "vae", "vae_config": asdict(vae.cfg)},
                    state_dict_to_arrays(vae, "vae"))


def load_vae(path: str | Path) -> MaskVae:
    config, arrays = load_checkpoint(path)
    if config.get("kind") != "vae":
        raise ValueError(f"not a VAE checkpoint: {path}")
    vae = MaskVae(VaeConfig(**config["vae_config"]))
    load_state_dict_from_arrays(vae, arrays, "vae")
    vae.eval()
    return vae

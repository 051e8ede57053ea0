"""Transformer denoiser conditioned on per-object template features.

Tokenization: each cell of an object slot's noisy latent grid, concatenated
with the image feature at that cell, becomes one query token; template
feature grids become template tokens. Decoder blocks run object-isolated
cross-attention (queries of slot i see only slot i's template tokens),
global self-attention over all slots' queries, and an MLP, each wrapped in
noise-conditioned adaptive layer norm with zero-initialized scale/shift/gate
so every block starts as the identity. A zero-initialized projection maps
tokens back to latent channels, making the untrained preconditioned
denoiser collapse to its skip path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import MPFourier


@dataclass
class ModelConfig:
    embed_dim: int = 256
    n_blocks: int = 4
    n_heads: int = 4
    capacity: int = 8              # max object slots the positional table holds
    n_templates: int = 4
    mlp_ratio: int = 4
    latent_channels: int = 64
    feature_dim: int = 96
    latent_grid: tuple[int, int] = (8, 8)      # base 2D-PE grid (interpolated at other sizes)
    template_grid: tuple[int, int] = (4, 4)
    # per-channel grid normalization whitens away the color identity the
    # template matching relies on; off by default
    normalize_image_features: bool = False

    def validate(self) -> None:
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")


def modulate(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    return x * (1 + gamma) + beta


class Attention(nn.Module):
    """Multi-head attention with inspectable row-stochastic weights."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, q_in: torch.Tensor, kv_in: torch.Tensor | None = None,
                return_weights: bool = False):
        if kv_in is None:
            kv_in = q_in
        b, nq, _ = q_in.shape
        nk = kv_in.shape[1]

        def split(t, n):
            return t.reshape(b, n, self.n_heads, self.head_dim).transpose(1, 2)

        q = split(self.to_q(q_in), nq)
        k = split(self.to_k(kv_in), nk)
        v = split(self.to_v(kv_in), nk)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, -1)
        out = self.proj(out)
        if return_weights:
            return out, attn
        return out


class DecoderBlock(nn.Module):
    """Cross-attention -> global self-attention -> MLP, all adaLN-modulated.

    The adaLN regression (9 x embed_dim outputs: scale/shift/gate for each
    of the three sub-layers) is zero-initialized, so at initialization every
    residual branch is gated off and the block is an exact identity.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.norm_cross = nn.LayerNorm(d, elementwise_affine=False)
        self.norm_self = nn.LayerNorm(d, elementwise_affine=False)
        self.norm_mlp = nn.LayerNorm(d, elementwise_affine=False)
        self.cross_attn = Attention(d, cfg.n_heads)
        self.self_attn = Attention(d, cfg.n_heads)
        self.mlp = nn.Sequential(
            nn.Linear(d, cfg.mlp_ratio * d), nn.GELU(approximate="tanh"),
            nn.Linear(cfg.mlp_ratio * d, d),
        )
        self.ada = nn.Linear(d, 9 * d)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def _ada(self, noise_emb: torch.Tensor):
        # (B, 9d) -> nine (B, 1, 1, d) broadcastable chunks
        return [c[:, None, None, :] for c in self.ada(noise_emb).chunk(9, dim=-1)]

    def cross_attend(self, queries: torch.Tensor, templates: torch.Tensor,
                     noise_emb: torch.Tensor) -> torch.Tensor:
        """Object-isolated cross-attention stage: (B, N_O, n_q, d) stays
        (B, N_O, n_q, d); slot i's queries only see templates[:, i]."""
        g, s, a = self._ada(noise_emb)[0:3]
        b, n_o, n_q, d = queries.shape
        q_mod = modulate(self.norm_cross(queries), g, s)
        out = self.cross_attn(q_mod.reshape(b * n_o, n_q, d),
                              templates.reshape(b * n_o, -1, d))
        return queries + a * out.reshape(b, n_o, n_q, d)

    def forward(self, queries: torch.Tensor, templates: torch.Tensor,
                noise_emb: torch.Tensor) -> torch.Tensor:
        b, n_o, n_q, d = queries.shape
        mods = self._ada(noise_emb)
        q_mod = modulate(self.norm_cross(queries), mods[0], mods[1])
        cross = self.cross_attn(q_mod.reshape(b * n_o, n_q, d),
                                templates.reshape(b * n_o, -1, d)).reshape(b, n_o, n_q, d)
        x = queries + mods[2] * cross

        seq = x.reshape(b, n_o * n_q, d)
        g, s, a = mods[3][:, 0], mods[4][:, 0], mods[5][:, 0]  # (B, 1, d)
        seq = seq + a * self.self_attn(modulate(self.norm_self(seq), g, s))
        g, s, a = mods[6][:, 0], mods[7][:, 0], mods[8][:, 0]
        seq = seq + a * self.mlp(modulate(self.norm_mlp(seq), g, s))
        return seq.reshape(b, n_o, n_q, d)


def interpolate_grid_codes(codes: torch.Tensor, base: tuple[int, int],
                           target: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resample 2D positional codes (h0*w0, d) to (h*w, d)."""
    if tuple(base) == tuple(target):
        return codes
    h0, w0 = base
    h, w = target
    grid = codes.reshape(1, h0, w0, -1).permute(0, 3, 1, 2)
    out = F.interpolate(grid, size=(h, w), mode="bilinear", align_corners=True)
    return out.permute(0, 2, 3, 1).reshape(h * w, -1)


class ObjectConditionedDenoiser(nn.Module):
    """The inner network F of the preconditioned denoiser."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.embed_dim
        hq, wq = cfg.latent_grid
        ht, wt = cfg.template_grid

        self.query_embed = nn.Linear(cfg.latent_channels + cfg.feature_dim, d)
        self.template_embed = nn.Conv2d(cfg.feature_dim, d, 3, padding=1)

        def pe(*shape):
            return nn.Parameter(0.02 * torch.randn(*shape, d))

        self.query_patch_pe = pe(hq * wq)
        self.query_object_pe = pe(cfg.capacity)
        self.template_patch_pe = pe(ht * wt)
        self.template_object_pe = pe(cfg.capacity)
        self.template_index_pe = pe(cfg.n_templates)

        self.noise_fourier = MPFourier(d)
        self.noise_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU())

        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.n_blocks))

        self.final_norm = nn.LayerNorm(d, elementwise_affine=False)
        self.final_ada = nn.Linear(d, 2 * d)
        self.final_proj = nn.Linear(d, cfg.latent_channels)
        nn.init.zeros_(self.final_ada.weight)
        nn.init.zeros_(self.final_ada.bias)
        nn.init.zeros_(self.final_proj.weight)
        nn.init.zeros_(self.final_proj.bias)

    def embed_noise(self, sigma: torch.Tensor) -> torch.Tensor:
        """(B,) positive noise levels -> (B, d) conditioning embedding."""
        if torch.any(sigma <= 0):
            raise ValueError("sigma must be positive")
        c_noise = torch.log(sigma) / 4.0
        return self.noise_mlp(self.noise_fourier(c_noise))

    def _slot_codes(self, table: torch.Tensor, n_o: int, codes: torch.Tensor | None) -> torch.Tensor:
        if codes is None:
            if n_o > self.cfg.capacity:
                raise ValueError(f"{n_o} object slots exceed capacity {self.cfg.capacity}")
            return table[:n_o]
        return codes

    def embed_queries(self, latents: torch.Tensor, image_features: torch.Tensor,
                      slot_codes: torch.Tensor | None = None) -> torch.Tensor:
        """Tokenize noisy latents with image features.

        ``latents``: (B, N_O, d_lat, h, w); ``image_features``: (B, d_f, h, w).
        ``slot_codes``: optional object positional codes, (N_O, d) or
        (B, N_O, d), resolved by a slot-scaling strategy; defaults to the
        first N_O trained codes. Returns (B, N_O, h*w, d).
        """
        b, n_o, _, h, w = latents.shape
        if image_features.shape[-2:] != (h, w):
            raise ValueError(f"feature grid {tuple(image_features.shape[-2:])} != latent grid {(h, w)}")
        feats = image_features
        if self.cfg.normalize_image_features:
            mu = feats.mean(dim=(-1, -2), keepdim=True)
            sd = feats.std(dim=(-1, -2), keepdim=True)
            feats = (feats - mu) / (sd + 1e-5)
        feats = feats[:, None].expand(b, n_o, *feats.shape[1:])
        cells = torch.cat([latents, feats], dim=2)              # (B, N_O, d_lat+d_f, h, w)
        cells = cells.flatten(3).transpose(2, 3)                # (B, N_O, h*w, d_lat+d_f)
        tokens = self.query_embed(cells)
        patch = interpolate_grid_codes(self.query_patch_pe, self.cfg.latent_grid, (h, w))
        obj = self._slot_codes(self.query_object_pe, n_o, slot_codes)
        if obj.ndim == 2:
            obj = obj[None]
        return tokens + patch[None, None] + obj[:, :, None, :]

    def embed_templates(self, template_features: torch.Tensor,
                        slot_codes: torch.Tensor | None = None) -> torch.Tensor:
        """Tokenize per-object template feature grids.

        ``template_features``: (B, N_O, N_T, d_f, ht, wt). Returns
        (B, N_O, N_T * ht * wt, d) with patch, object and template-index
        positional codes added.
        """
        b, n_o, n_t, d_f, ht, wt = template_features.shape
        if n_t != self.cfg.n_templates:
            raise ValueError(f"expected {self.cfg.n_templates} templates per object, got {n_t}")
        flat = template_features.reshape(b * n_o * n_t, d_f, ht, wt)
        tok = self.template_embed(flat).flatten(2).transpose(1, 2)   # (BNoNt, ht*wt, d)
        tok = tok.reshape(b, n_o, n_t, ht * wt, -1)
        patch = interpolate_grid_codes(self.template_patch_pe, self.cfg.template_grid, (ht, wt))
        obj = self._slot_codes(self.template_object_pe, n_o, slot_codes)
        if obj.ndim == 2:
            obj = obj[None]
        tok = tok + patch[None, None, None] + obj[:, :, None, None, :] \
            + self.template_index_pe[None, None, :, None, :]
        return tok.reshape(b, n_o, n_t * ht * wt, -1)

    def forward(
        self,
        latents: torch.Tensor,
        sigma,
        cond: dict,
    ) -> torch.Tensor:
        """F(c_in * x; sigma, cond) -> predicted latent residual basis.

        ``cond`` carries ``image_features`` (B, d_f, h, w) and either
        ``template_tokens`` (precomputed, (B, N_O, n, d)) or
        ``template_features`` (B, N_O, N_T, d_f, ht, wt); optional
        ``slot_codes_q`` / ``slot_codes_t`` select object positional codes.
        """
        b, n_o, _, h, w = latents.shape
        sigma = torch.as_tensor(sigma, dtype=latents.dtype)
        if sigma.ndim == 0:
            sigma = sigma.expand(b)
        noise_emb = self.embed_noise(sigma)
        queries = self.embed_queries(latents, cond["image_features"], cond.get("slot_codes_q"))
        templates = cond.get("template_tokens")
        if templates is None:
            templates = self.embed_templates(cond["template_features"], cond.get("slot_codes_t"))
        for block in self.blocks:
            queries = block(queries, templates, noise_emb)
        g, s = self.final_ada(noise_emb).chunk(2, dim=-1)
        out = self.final_proj(modulate(self.final_norm(queries), g[:, None, None], s[:, None, None]))
        return out.transpose(2, 3).reshape(b, n_o, -1, h, w)

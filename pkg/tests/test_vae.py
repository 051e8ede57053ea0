import math

import numpy as np
import pytest
import torch

from ocdit.vae import (MaskVae, VaeConfig, augment_mask, calibrate_latent_scale,
                       elbo_loss, load_vae, save_vae)

torch.set_num_threads(2)


def tiny_vae(scale=1.0, live_moments=False):
    torch.manual_seed(0)
    vae = MaskVae(VaeConfig(latent_channels=8, base_width=16, latent_scale=scale))
    if live_moments:
        # the moments head starts zero-initialized; give it variance so
        # calibration has something to measure on an untrained model
        torch.nn.init.normal_(vae.to_moments.weight, std=0.05)
    vae.eval()
    return vae


def blob_masks(n, res=64, seed=0):
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:res, 0:res]
    masks = []
    for _ in range(n):
        cy, cx = rng.uniform(16, 48, 2)
        r = rng.uniform(6, 16)
        masks.append(((ys - cy) ** 2 + (xs - cx) ** 2 <= r * r))
    return np.stack(masks).astype(np.uint8)


# ---------------------------------------------------------------- shapes

def test_latent_grid_shape():
    vae = tiny_vae()
    m = torch.from_numpy(blob_masks(3)).float()
    mean, logvar = vae.encode(m)
    assert mean.shape == (3, 8, 8, 8) and logvar.shape == mean.shape
    assert vae.decode(mean).shape == (3, 64, 64)


def test_encode_resolution_guard():
    vae = tiny_vae()
    with pytest.raises(ValueError):
        vae.encode(torch.zeros(1, 60, 60))


def test_decode_channel_guard():
    vae = tiny_vae()
    with pytest.raises(ValueError):
        vae.decode(torch.zeros(1, 5, 8, 8))


def test_encode_decode_deterministic():
    vae = tiny_vae()
    m = torch.from_numpy(blob_masks(2)).float()
    with torch.no_grad():
        m1, l1 = vae.encode(m)
        m2, l2 = vae.encode(m)
        assert torch.equal(m1, m2) and torch.equal(l1, l2)
        assert torch.equal(vae.decode(m1), vae.decode(m2))


def test_decode_bounded():
    vae = tiny_vae()
    with torch.no_grad():
        out = vae.decode(5 * torch.randn(2, 8, 8, 8, generator=torch.Generator().manual_seed(1)))
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


# ---------------------------------------------------------------- elbo

def test_elbo_zero_for_perfect_prediction():
    b = torch.from_numpy(blob_masks(1)).float()
    loss = elbo_loss(b, b, torch.zeros(1, 8, 8, 8), torch.zeros(1, 8, 8, 8), beta=1e-5)
    assert float(loss) == pytest.approx(0.0, abs=1e-5)


def test_elbo_kl_values():
    b = torch.zeros(1, 8, 8)
    recon = torch.full((1, 8, 8), 0.5)
    base = elbo_loss(recon, b, torch.zeros(1, 1, 1, 1), torch.zeros(1, 1, 1, 1), beta=1.0)
    shifted = elbo_loss(recon, b, torch.ones(1, 1, 1, 1), torch.zeros(1, 1, 1, 1), beta=1.0)
    # KL(N(1,1) || N(0,1)) = 0.5 per element, KL(N(0,1)||N(0,1)) = 0
    assert float(shifted - base) == pytest.approx(0.5, rel=1e-5)
    assert float(base) == pytest.approx(math.log(2.0), rel=1e-4)  # BCE of p=0.5


def test_elbo_nonnegative_random():
    g = torch.Generator().manual_seed(2)
    for _ in range(10):
        recon = torch.rand(1, 16, 16, generator=g)
        b = (torch.rand(1, 16, 16, generator=g) > 0.5).float()
        mean = torch.randn(1, 4, 2, 2, generator=g)
        logvar = torch.randn(1, 4, 2, 2, generator=g)
        assert float(elbo_loss(recon, b, mean, logvar, beta=1e-5)) >= 0


def test_elbo_shape_guard():
    with pytest.raises(ValueError):
        elbo_loss(torch.zeros(1, 8, 8), torch.zeros(1, 9, 9), torch.zeros(1), torch.zeros(1), 1e-5)


# ---------------------------------------------------------------- scaling

def test_calibration_ratio():
    vae = tiny_vae(live_moments=True)
    masks = torch.from_numpy(blob_masks(64)).float()
    with torch.no_grad():
        raw_mean, _ = vae.encode(masks)
    raw_std = float(raw_mean.std(correction=0))
    scale = calibrate_latent_scale(vae, masks)
    assert scale == pytest.approx(0.5 / raw_std, rel=1e-3)
    with torch.no_grad():
        scaled = vae.encode_latent(masks)
    assert float(scaled.std(correction=0)) == pytest.approx(0.5, rel=2e-2)


def test_calibration_degenerate():
    vae = tiny_vae()
    with torch.no_grad():
        vae.to_moments.weight.zero_()
        vae.to_moments.bias.zero_()
    with pytest.raises(ValueError):
        calibrate_latent_scale(vae, torch.from_numpy(blob_masks(16)).float())


def test_scale_roundtrip_invariance():
    # decode(encode) binarization unchanged when the scale is applied/undone
    vae1 = tiny_vae(scale=1.0)
    vae2 = tiny_vae(scale=0.25)  # same weights, different scale
    m = torch.from_numpy(blob_masks(4)).float()
    with torch.no_grad():
        out1 = vae1.decode(vae1.encode_latent(m))
        out2 = vae2.decode(vae2.encode_latent(m))
    assert float((out1 - out2).abs().max()) < 1e-5


# ---------------------------------------------------------------- augment

def test_augment_stays_binary():
    rng = np.random.default_rng(3)
    masks = blob_masks(10)
    for m in masks:
        out = augment_mask(m, rng)
        assert out.shape == m.shape
        assert set(np.unique(out)).issubset({0, 1})


# ---------------------------------------------------------------- persistence

def test_save_load_roundtrip(tmp_path):
    vae = tiny_vae(live_moments=True)
    calibrate_latent_scale(vae, torch.from_numpy(blob_masks(32)).float())
    path = tmp_path / "vae.npz"
    save_vae(path, vae)
    loaded = load_vae(path)
    assert loaded.cfg.latent_scale == pytest.approx(vae.cfg.latent_scale)
    m = torch.from_numpy(blob_masks(2)).float()
    with torch.no_grad():
        assert torch.allclose(loaded.encode_latent(m), vae.encode_latent(m))

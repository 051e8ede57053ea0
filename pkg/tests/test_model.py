import math

import pytest
import torch

from ocdit.diffusion import denoise, precondition
from ocdit.model import (Attention, DecoderBlock, ModelConfig, ObjectConditionedDenoiser,
                         interpolate_grid_codes)

torch.set_num_threads(2)


def micro_cfg(**kw):
    base = dict(embed_dim=64, n_blocks=2, n_heads=2, capacity=4, n_templates=2,
                mlp_ratio=2, latent_channels=8, feature_dim=16,
                latent_grid=(4, 4), template_grid=(2, 2))
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def net():
    torch.manual_seed(0)
    return ObjectConditionedDenoiser(micro_cfg())


def make_inputs(net, b=2, n_o=3, seed=1):
    g = torch.Generator().manual_seed(seed)
    cfg = net.cfg
    h, w = cfg.latent_grid
    ht, wt = cfg.template_grid
    latents = torch.randn(b, n_o, cfg.latent_channels, h, w, generator=g)
    feats = torch.randn(b, cfg.feature_dim, h, w, generator=g)
    t_feats = torch.randn(b, n_o, cfg.n_templates, cfg.feature_dim, ht, wt, generator=g)
    sigma = torch.rand(b, generator=g) * 10 + 0.1
    return latents, feats, t_feats, sigma


# ---------------------------------------------------------------- embeddings

def test_query_token_shape(net):
    latents, feats, _, _ = make_inputs(net, b=1, n_o=4)
    tokens = net.embed_queries(latents, feats)
    assert tokens.shape == (1, 4, 16, 64)


def test_query_slots_differ_only_by_object_code(net):
    latents, feats, _, _ = make_inputs(net, b=1, n_o=2)
    latents[:, 1] = latents[:, 0]
    tokens = net.embed_queries(latents, feats)
    code_diff = net.query_object_pe[1] - net.query_object_pe[0]
    assert not torch.allclose(tokens[0, 0], tokens[0, 1])
    assert torch.allclose(tokens[0, 1] - tokens[0, 0], code_diff.expand(16, -1), atol=1e-6)
    with torch.no_grad():
        net.query_object_pe.zero_()
        net.query_patch_pe.zero_()
    tokens = net.embed_queries(latents, feats)
    assert torch.allclose(tokens[0, 0], tokens[0, 1])


def test_query_grid_mismatch_raises(net):
    latents, feats, _, _ = make_inputs(net)
    with pytest.raises(ValueError):
        net.embed_queries(latents, feats[..., :2])


def test_template_token_shape_and_permutation(net):
    _, _, t_feats, _ = make_inputs(net, b=1, n_o=2)
    tokens = net.embed_templates(t_feats)
    n_t, cells = net.cfg.n_templates, 4
    assert tokens.shape == (1, 2, n_t * cells, 64)
    # swapping two templates of object 0 permutes only that object's axis
    swapped = t_feats.clone()
    swapped[:, 0, [0, 1]] = swapped[:, 0, [1, 0]]
    tok2 = net.embed_templates(swapped)
    view = tokens.reshape(1, 2, n_t, cells, 64)
    view2 = tok2.reshape(1, 2, n_t, cells, 64)
    assert torch.allclose(view2[0, 1], view[0, 1])
    delta_pe = net.template_index_pe[0] - net.template_index_pe[1]
    assert torch.allclose(view2[0, 0, 0], view[0, 0, 1] + delta_pe, atol=1e-6)


def test_template_zero_features_affine(net):
    cfg = net.cfg
    t_feats = torch.zeros(1, 2, cfg.n_templates, cfg.feature_dim, *cfg.template_grid)
    tokens = net.embed_templates(t_feats).reshape(1, 2, cfg.n_templates, 4, 64)
    bias = net.template_embed.bias
    expect = bias[None] + net.template_patch_pe.reshape(4, -1)[None]
    for o in range(2):
        for t in range(cfg.n_templates):
            manual = expect + net.template_object_pe[o] + net.template_index_pe[t]
            assert torch.allclose(tokens[0, o, t], manual[0] if manual.ndim == 3 else manual, atol=1e-6)


def test_template_ragged_count_raises(net):
    _, _, t_feats, _ = make_inputs(net)
    with pytest.raises(ValueError):
        net.embed_templates(t_feats[:, :, :1])


# ---------------------------------------------------------------- noise embed

def test_noise_embedding_deterministic_and_positive_domain(net):
    s = torch.tensor([0.5, 3.0])
    assert torch.equal(net.embed_noise(s), net.embed_noise(s))
    with pytest.raises(ValueError):
        net.embed_noise(torch.tensor([0.0]))


def test_noise_fourier_magnitude(net):
    c_noise = torch.log(torch.tensor([0.002, 0.5, 80.0])) / 4
    feats = net.noise_fourier(c_noise)
    d = net.cfg.embed_dim
    assert torch.allclose(feats.norm(dim=-1), torch.full((3,), math.sqrt(d)), rtol=1e-3)


# ---------------------------------------------------------------- blocks

def test_block_identity_at_init(net):
    block = net.blocks[0]
    g = torch.Generator().manual_seed(2)
    q = torch.randn(2, 3, 16, 64, generator=g)
    t = torch.randn(2, 3, 8, 64, generator=g)
    emb = torch.randn(2, 64, generator=g)
    out = block(q, t, emb)
    assert torch.equal(out, q)


@torch.no_grad()
def test_full_network_zero_at_init(net):
    latents, feats, t_feats, sigma = make_inputs(net)
    out = net(latents, sigma, {"image_features": feats, "template_features": t_feats})
    assert out.shape == latents.shape
    assert float(out.abs().max()) == 0.0
    d = denoise(net, latents, sigma, {"image_features": feats, "template_features": t_feats},
                sigma_data=0.5)
    c = precondition(sigma, 0.5)
    expect = c.c_skip.view(-1, 1, 1, 1, 1) * latents
    assert float((d - expect).abs().max()) < 1e-6


def _randomize(net, seed=9):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(0.05 * torch.randn(p.shape, generator=g))
    return net


def test_cross_attention_object_isolation(net):
    _randomize(net)
    latents, feats, t_feats, sigma = make_inputs(net)
    emb = net.embed_noise(sigma)
    q = net.embed_queries(latents, feats)
    t = net.embed_templates(t_feats)
    block = net.blocks[0]
    base = block.cross_attend(q, t, emb)
    t2 = t.clone()
    t2[:, 2] += torch.randn(t2[:, 2].shape, generator=torch.Generator().manual_seed(5))
    pert = block.cross_attend(q, t2, emb)
    assert torch.equal(base[:, 0], pert[:, 0])
    assert torch.equal(base[:, 1], pert[:, 1])
    assert not torch.allclose(base[:, 2], pert[:, 2])


def test_object_slot_permutation_equivariance(net):
    _randomize(net)
    b, n_o = 2, 4
    latents, feats, t_feats, sigma = make_inputs(net, b=b, n_o=n_o)
    perm = torch.tensor([2, 0, 3, 1])

    codes_q = net.query_object_pe[:n_o]
    codes_t = net.template_object_pe[:n_o]
    cond = {"image_features": feats, "template_features": t_feats,
            "slot_codes_q": codes_q, "slot_codes_t": codes_t}
    out = net(latents, sigma, cond)
    cond_p = {"image_features": feats, "template_features": t_feats[:, perm],
              "slot_codes_q": codes_q[perm], "slot_codes_t": codes_t[perm]}
    out_p = net(latents[:, perm], sigma, cond_p)
    assert float((out_p - out[:, perm]).abs().max()) < 1e-5


def test_attention_rows_are_distributions():
    torch.manual_seed(3)
    attn = Attention(32, 4)
    x = torch.randn(2, 7, 32)
    kv = torch.randn(2, 5, 32)
    _, w = attn(x, kv, return_weights=True)
    assert w.shape == (2, 4, 7, 5)
    assert float((w.sum(-1) - 1).abs().max()) < 1e-5
    assert float(w.min()) >= 0


# ---------------------------------------------------------------- flexibility

def test_runs_at_other_grid_with_interpolated_pe(net):
    _randomize(net)
    cfg = net.cfg
    g = torch.Generator().manual_seed(6)
    for grid in [(4, 4), (3, 6), (8, 8)]:
        h, w = grid
        latents = torch.randn(1, 2, cfg.latent_channels, h, w, generator=g)
        feats = torch.randn(1, cfg.feature_dim, h, w, generator=g)
        t_feats = torch.randn(1, 2, cfg.n_templates, cfg.feature_dim, *cfg.template_grid, generator=g)
        out = net(latents, torch.tensor([1.0]), {"image_features": feats,
                                                 "template_features": t_feats})
        assert out.shape == latents.shape


def test_interpolate_grid_codes_endpoints():
    codes = torch.arange(4, dtype=torch.float32).reshape(4, 1).repeat(1, 3)
    out = interpolate_grid_codes(codes, (2, 2), (2, 2))
    assert torch.equal(out, codes)
    up = interpolate_grid_codes(codes, (2, 2), (3, 3))
    assert up.shape == (9, 3)
    # corners preserved with align_corners interpolation
    assert torch.allclose(up.reshape(3, 3, 3)[0, 0], codes[0])
    assert torch.allclose(up.reshape(3, 3, 3)[2, 2], codes[3])


def test_forward_bitwise_stable(net):
    _randomize(net)
    latents, feats, t_feats, sigma = make_inputs(net)
    cond = {"image_features": feats, "template_features": t_feats}
    out1 = net(latents, sigma, cond)
    out2 = net(latents, sigma, cond)
    assert torch.equal(out1, out2)


def test_capacity_guard(net):
    latents, feats, t_feats, sigma = make_inputs(net, n_o=5)
    with pytest.raises(ValueError):
        net(latents, sigma, {"image_features": feats, "template_features": t_feats})


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=65, n_heads=4).validate()

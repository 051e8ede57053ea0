import json

import numpy as np
import pytest
import torch

from conftest import micro_train_kwargs
from ocdit.pipeline import (EnsembleConfig, InstancePrediction, SegmenterBundle, SpatialAug,
                            coarse_infer, ensemble_aggregate, guided_augmentation,
                            infer_scene, modal_boxes, read_predictions, refine_infer,
                            rle_decode, rle_encode, scalar_confidence, scene_templates,
                            spatial_augmentations, write_predictions)
from ocdit.trainer import TrainConfig, TrainState, build_models
from ocdit.pos_scaling import ScalingStrategy


@pytest.fixture(scope="module")
def micro_bundle(micro_dataset, micro_vae):
    cfg = TrainConfig(variant="coarse", n_objects=2, capacity=4,
                      pe_strategy="random_interval", seed=5, **micro_train_kwargs())
    model, backbone, uhead, diff = build_models(cfg, micro_vae, 16, 2)
    g = torch.Generator().manual_seed(6)
    with torch.no_grad():
        for p in list(model.parameters()) + list(backbone.parameters()):
            p.copy_(0.03 * torch.randn(p.shape, generator=g))
    return SegmenterBundle(vae=micro_vae, backbone=backbone, model=model,
                           diffusion=diff, train_cfg=cfg).eval()


# ---------------------------------------------------------------- aggregation

def test_aggregate_identical_passes_idempotent():
    m = np.random.default_rng(0).random((8, 8)).astype(np.float32)
    c = np.ones((8, 8), dtype=bool)
    agg = ensemble_aggregate([m, m, m], [c, c, c])
    assert np.allclose(agg, m)


def test_aggregate_mean_and_vote_normalization():
    a = np.full((4, 4), 0.2, dtype=np.float32)
    b = np.full((4, 4), 0.8, dtype=np.float32)
    cover_a = np.ones((4, 4), dtype=bool)
    cover_b = np.zeros((4, 4), dtype=bool)
    cover_b[:, :2] = True
    agg = ensemble_aggregate([a, b], [cover_a, cover_b])
    assert np.allclose(agg[:, :2], 0.5)   # doubly covered: mean of both
    assert np.allclose(agg[:, 2:], 0.2)   # single cover: that pass's value, not halved


def test_aggregate_uncovered_pixels_zero():
    m = np.full((4, 4), 0.6, dtype=np.float32)
    cover = np.zeros((4, 4), dtype=bool)
    cover[1:3, 1:3] = True
    agg = ensemble_aggregate([m], [cover])
    assert np.allclose(agg[1:3, 1:3], 0.6)
    assert np.allclose(agg[0], 0.0)


def test_scalar_confidence_rules():
    m = np.zeros((4, 4), dtype=np.float32)
    assert scalar_confidence(m, 0.5) == 0.0
    m[0, 0] = 0.9
    m[0, 1] = 0.7
    assert scalar_confidence(m, 0.5) == pytest.approx(0.8)


# ---------------------------------------------------------------- spatial augs

def test_spatial_augmentations_geometry():
    augs = spatial_augmentations("crops6", (64, 64), 6)
    assert len(augs) == 6
    assert (augs[0].y0, augs[0].x0, augs[0].side) == (0, 0, 64)
    sides = [a.side for a in augs]
    assert all(s1 >= s2 for s1, s2 in zip(sides, sides[1:]))
    full = spatial_augmentations("full_image", (64, 64), 3)
    assert len(full) == 3 and all(a.side == 64 for a in full)


def test_spatial_aug_inverse_identity():
    aug = SpatialAug(8, 16, 32)
    conf = np.random.default_rng(1).random((32, 32)).astype(np.float32)
    full, cover = aug.paste(conf, (64, 64))
    assert cover[8:40, 16:48].all() and cover.sum() == 32 * 32
    assert np.allclose(full[8:40, 16:48], conf, atol=1e-6)
    assert np.allclose(full[~cover], 0)


def test_guided_augmentation_covers_predictions():
    m = np.zeros((64, 64), dtype=np.float32)
    m[10:26, 12:28] = 0.9
    pred = InstancePrediction(0, m, 0.9)
    aug = guided_augmentation([pred], (64, 64))
    assert aug.y0 <= 10 and aug.x0 <= 12
    assert aug.y0 + aug.side >= 26 and aug.x0 + aug.side >= 28
    # no predictions -> full image
    fallback = guided_augmentation([], (64, 64))
    assert (fallback.y0, fallback.x0, fallback.side) == (0, 0, 64)


def test_modal_boxes_properties():
    m = np.zeros((64, 64), dtype=np.float32)
    m[4:14, 6:12] = 1.0
    m[40:50, 40:56] = 1.0  # second blob; one modal box covers both
    boxes = modal_boxes([InstancePrediction(3, m, 0.9)], 0.5, (64, 64))
    assert len(boxes) == 1
    oid, (y0, x0, side) = boxes[0]
    assert oid == 3
    assert y0 <= 4 and x0 <= 6 and y0 + side >= 50 and x0 + side >= 56
    assert side * side >= m.sum()
    # empty prediction skipped
    assert modal_boxes([InstancePrediction(1, np.zeros((64, 64), np.float32), 0.0)],
                       0.5, (64, 64)) == []


def test_full_frame_mask_gives_full_frame_box():
    m = np.ones((64, 64), dtype=np.float32)
    [(_, (y0, x0, side))] = modal_boxes([InstancePrediction(0, m, 1.0)], 0.5, (64, 64))
    assert (y0, x0, side) == (0, 0, 64)


# ---------------------------------------------------------------- rle

def test_rle_roundtrip_random():
    rng = np.random.default_rng(2)
    for _ in range(50):
        m = rng.random((rng.integers(1, 12), rng.integers(1, 12))) > 0.5
        assert np.array_equal(rle_decode(rle_encode(m)), m)


def test_rle_known_values():
    m = np.array([[1, 1], [0, 0]], dtype=bool)
    assert rle_encode(m) == {"size": [2, 2], "counts": [0, 2, 2]}
    z = np.zeros((2, 3), dtype=bool)
    assert rle_encode(z) == {"size": [2, 3], "counts": [6]}
    o = np.ones((1, 4), dtype=bool)
    assert rle_encode(o) == {"size": [1, 4], "counts": [0, 4]}


def test_rle_length_mismatch_raises():
    with pytest.raises(ValueError):
        rle_decode({"size": [2, 2], "counts": [3]})


# ---------------------------------------------------------------- predictions io

def test_predictions_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    m = rng.random((16, 16)).astype(np.float32)
    preds = [("scene_b", [InstancePrediction(2, m, 0.7, {"stage": "coarse"})]),
             ("scene_a", [InstancePrediction(1, m * 0.5, 0.3, {"stage": "coarse"})])]
    path = tmp_path / "pred.jsonl"
    write_predictions(path, preds, binarize_threshold=0.5)
    dets = read_predictions(path)
    assert [d.scene_id for d in dets] == ["scene_a", "scene_b"]  # sorted
    assert np.array_equal(dets[1].mask, m > 0.5)
    assert dets[1].score == pytest.approx(0.7)


# ---------------------------------------------------------------- inference

def test_coarse_infer_shapes_and_determinism(micro_bundle, micro_dataset):
    scene = micro_dataset.scenes_of("test")[0]
    object_ids = sorted({i.object_id for i in scene.instances})[:2]
    templates = scene_templates(micro_dataset, object_ids)
    ens = EnsembleConfig(n_ensemble=2, n_aug=1, coarse_keep_threshold=0.01)
    p1 = coarse_infer(scene.image, object_ids, templates, micro_bundle, ens,
                      torch.Generator().manual_seed(9))
    p2 = coarse_infer(scene.image, object_ids, templates, micro_bundle, ens,
                      torch.Generator().manual_seed(9))
    assert len(p1) == len(p2)
    for a, b in zip(p1, p2):
        assert a.object_id == b.object_id
        assert np.array_equal(a.confidence_map, b.confidence_map)
        assert a.confidence == b.confidence
    for p in p1:
        assert p.confidence_map.shape == scene.image.shape[:2]
        assert 0 <= p.confidence_map.min() and p.confidence_map.max() <= 1
        assert 0 <= p.confidence <= 1


def test_coarse_infer_single_pass_is_degenerate_ensemble(micro_bundle, micro_dataset):
    scene = micro_dataset.scenes_of("test")[0]
    object_ids = sorted({i.object_id for i in scene.instances})[:1]
    templates = scene_templates(micro_dataset, object_ids)
    ens = EnsembleConfig(n_ensemble=1, n_aug=1, coarse_keep_threshold=0.0001)
    preds, traj = coarse_infer(scene.image, object_ids, templates, micro_bundle, ens,
                               torch.Generator().manual_seed(10), collect_trajectory=True)
    assert traj.shape[0] == micro_bundle.diffusion.num_steps
    assert traj.shape[1] == 1


def test_coarse_infer_chunked_matches_object_count(micro_dataset, micro_vae):
    cfg = TrainConfig(variant="coarse", n_objects=2, capacity=2,
                      pe_strategy="baseline_chunked", seed=5, **micro_train_kwargs())
    model, backbone, uhead, diff = build_models(cfg, micro_vae, 16, 2)
    bundle = SegmenterBundle(vae=micro_vae, backbone=backbone, model=model,
                             diffusion=diff, train_cfg=cfg).eval()
    scene = max(micro_dataset.scenes_of("test"), key=lambda s: len({i.object_id for i in s.instances}))
    object_ids = sorted({i.object_id for i in scene.instances})
    assert len(object_ids) >= 3  # forces two chunks at n_train=2
    templates = scene_templates(micro_dataset, object_ids)
    ens = EnsembleConfig(n_ensemble=1, n_aug=1, coarse_keep_threshold=0.0001)
    preds = coarse_infer(scene.image, object_ids, templates, bundle, ens,
                         torch.Generator().manual_seed(11))
    assert {p.object_id for p in preds} <= set(object_ids)


def test_refine_with_labels_one_prediction_per_box(micro_bundle, micro_dataset):
    scene = micro_dataset.scenes_of("test")[0]
    inst = scene.instances[0]
    ys, xs = np.nonzero(inst.mask)
    box = (int(ys.min()), int(xs.min()), 16)
    templates = scene_templates(micro_dataset, [inst.object_id])
    ens = EnsembleConfig(n_ensemble=1, n_aug=1, refine_keep_threshold=0.0001)
    preds = refine_infer(scene.image, [(inst.object_id, box)], [inst.object_id],
                         templates, micro_bundle, ens, torch.Generator().manual_seed(12))
    assert len(preds) <= 1
    if preds:
        outside = preds[0].confidence_map.copy()
        outside[box[0]:box[0] + box[2], box[1]:box[1] + box[2]] = 0
        assert np.allclose(outside, 0)


def test_refine_without_labels_argmax(micro_bundle, micro_dataset):
    scene = micro_dataset.scenes_of("test")[0]
    object_ids = sorted({i.object_id for i in scene.instances})
    inst = scene.instances[0]
    ys, xs = np.nonzero(inst.mask)
    box = (int(ys.min()), int(xs.min()), 16)
    templates = scene_templates(micro_dataset, object_ids)
    ens = EnsembleConfig(n_ensemble=1, n_aug=1, refine_keep_threshold=0.0001)
    preds = refine_infer(scene.image, [(None, box)], object_ids, templates,
                         micro_bundle, ens, torch.Generator().manual_seed(13),
                         label_mode="without_labels")
    assert len(preds) <= 1  # argmax keeps one object per box
    with pytest.raises(ValueError):
        refine_infer(scene.image, [(None, box)], object_ids, templates, micro_bundle,
                     ens, torch.Generator().manual_seed(13), label_mode="bogus")


def test_ensemble_config_validation():
    with pytest.raises(ValueError):
        EnsembleConfig(n_ensemble=0).validate()
    with pytest.raises(ValueError):
        EnsembleConfig(binarize_threshold=1.5).validate()
    with pytest.raises(ValueError):
        EnsembleConfig(scheme="mystery").validate()

import math

import numpy as np
import pytest

from refnet.data import (AugmentPolicy, BatchSampler, DataConfig, SegDataset, ShapeInstance, ShapeSceneSpec,
                         augment, build_splits, generate_scene, index_checksum, load_mask, read_index,
                         sample_training_batch)
from refnet.morphology import AffineRanges

SMALL = DataConfig(size=32, n_target=12, n_open=12, n_heldout=6, k=3)


@pytest.fixture(scope="module")
def small_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    build_splits(SMALL, root, seed=1)
    return root


def test_generate_scene_deterministic():
    spec = ShapeSceneSpec(size=32)
    a_img, a_masks = generate_scene(spec, np.random.default_rng(3))
    b_img, b_masks = generate_scene(spec, np.random.default_rng(3))
    assert np.array_equal(a_img, b_img)
    assert all(ca == cb and np.array_equal(ma, mb) for (ca, ma), (cb, mb) in zip(a_masks, b_masks))
    assert a_img.shape == (32, 32, 3) and a_img.dtype == np.float32


def test_circle_area_oracle():
    spec = ShapeSceneSpec(size=64, categories=["circle"], noise=0.0)
    inst = [ShapeInstance("circle", (31.5, 31.5), 10.0, 0.0, (1.0, 0.0, 0.0))]
    _, masks = generate_scene(spec, np.random.default_rng(0), instances=inst)
    area = masks[0][1].sum()
    assert abs(area - math.pi * 100) <= 0.05 * math.pi * 100


def test_zero_objects_gives_empty_masks():
    spec = ShapeSceneSpec(size=32, objects_per_scene=(0, 0))
    img, masks = generate_scene(spec, np.random.default_rng(0))
    assert all(not m.any() for _, m in masks)
    assert img.std() < 0.2


def test_scene_spec_errors():
    with pytest.raises(ValueError):
        generate_scene(ShapeSceneSpec(size=8), np.random.default_rng(0))
    with pytest.raises(ValueError):
        generate_scene(ShapeSceneSpec(categories=["blob"]), np.random.default_rng(0))


def test_reference_counts(tmp_path):
    cfg = DataConfig(size=32, target_categories=["circle", "square"], n_target=2, n_open=2, n_heldout=1, k=10)
    recs = build_splits(cfg, tmp_path, seed=0)
    refs = [r for r in recs if r["split"] == "reference"]
    assert len(refs) == 20
    assert all(r["ref_category"] in r["categories"] for r in refs)


def test_overlap_rejected(tmp_path):
    cfg = DataConfig(target_categories=["circle"], open_categories=["circle", "star"])
    with pytest.raises(ValueError):
        build_splits(cfg, tmp_path)


def test_build_is_deterministic(small_root, tmp_path):
    other = tmp_path
    build_splits(SMALL, other, seed=1)
    a, b = read_index(small_root / "index.jsonl"), read_index(other / "index.jsonl")
    assert index_checksum(a) == index_checksum(b)
    assert (small_root / a[5]["path"]).read_bytes() == (other / b[5]["path"]).read_bytes()


def test_index_invariants(small_root):
    data = SegDataset(small_root)
    target = set(SMALL.target_categories)
    for i, r in enumerate(data.records):
        for c, p in r["masks"].items():
            m = load_mask(small_root / p)
            assert m.shape == data.images[i].shape[:2]
            assert set(np.unique(m)) <= {0, 1}
        if r["split"] == "reference":
            assert r["ref_category"] in target
        if r["split"] == "open_source":
            assert not set(r["categories"]) & target
    assert data.target_categories == SMALL.target_categories


def test_subsample_references(small_root):
    data = SegDataset(small_root)
    sub = data.subsample_references(1)
    assert len(sub.split("reference")) == 3
    assert len(sub.split("target")) == len(data.split("target"))


def test_augment_disabled_and_flip_involution():
    rng = np.random.default_rng(0)
    img = rng.random((16, 16, 3)).astype(np.float32)
    m = (rng.random((16, 16)) < 0.4).astype(np.uint8)
    a, b = augment(img, m, rng, AugmentPolicy(enabled=False))
    assert a is img and b is m
    flip = AugmentPolicy(affine=AffineRanges(0, 0, 0, 1.0), brightness=0, contrast=0)
    once = augment(img, m, rng, flip)
    twice = augment(*once, rng, flip)
    np.testing.assert_array_equal(twice[1], m)
    np.testing.assert_allclose(twice[0], img, atol=1e-6)


def test_augment_mask_stays_binary_and_bounded():
    rng = np.random.default_rng(1)
    spec = ShapeSceneSpec(size=64, categories=["square"], objects_per_scene=(1, 1))
    for _ in range(50):
        inst = [ShapeInstance("square", (32.0, 32.0), 10.0, 0.0, (0.2, 0.5, 0.9))]
        img, masks = generate_scene(spec, rng, inst)
        m = masks[0][1]
        a_img, a_m = augment(img, m, rng)
        assert set(np.unique(a_m)) <= {0, 1}
        assert 0.5 * m.sum() <= a_m.sum() <= 2.0 * m.sum()
        assert a_img.min() >= 0 and a_img.max() <= 1


def test_negative_ratio_extremes_and_statistics(small_root):
    data = SegDataset(small_root)
    rng = np.random.default_rng(0)
    for ratio in (0.0, 1.0):
        s = BatchSampler(data, ratio)
        _, _, _, neg, cats = s.target_pairs(rng, 40)
        assert np.all(neg == bool(ratio))
    s = BatchSampler(data, 0.25)
    draws = [s._pair(rng, s.target)[2] for _ in range(10_000)]
    assert abs(np.mean(draws) - 0.25) < 0.02
    with pytest.raises(ValueError):
        BatchSampler(data, 1.5)


def test_negative_pairs_really_lack_the_category(small_root):
    data = SegDataset(small_root)
    rng = np.random.default_rng(2)
    s = BatchSampler(data, 1.0)
    for _ in range(30):
        i, c, neg = s._pair(rng, s.target)
        assert neg and c not in data.records[i]["categories"]
        i, c, neg = s._pair(rng, s.labeled, neg_ratio=0.0)
        assert c in data.records[i]["categories"]


def test_training_batch_shapes_and_audit(small_root):
    reads = []
    data = SegDataset(small_root, audit=lambda rec, c: reads.append(rec["split"]))
    batch = sample_training_batch(data, np.random.default_rng(0), 6)
    assert batch.target_images.shape == (6, 3, 32, 32)
    assert batch.sup_masks.shape == (6, 32, 32)
    assert batch.open_images.shape == (6, 3, 32, 32)
    assert set(np.unique(batch.sup_masks)) <= {0.0, 1.0}
    assert reads and set(reads) <= {"reference", "open_source"}

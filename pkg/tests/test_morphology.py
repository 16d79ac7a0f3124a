import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from refnet.morphology import (AffineRanges, AffineTransform, apply_affine, boundary_weight_map, dilate,
                               disk_strel, erode, sample_affine)

from oracles import dilate_oracle, erode_oracle, strel_oracle, weight_map_oracle

masks16 = arrays(np.uint8, (16, 16), elements=st.integers(0, 1))


def as_set(offs):
    return {tuple(int(v) for v in o) for o in offs}


def cross5():
    m = np.zeros((5, 5), np.uint8)
    m[2, 1:4] = 1
    m[1:4, 2] = 1
    return m


def test_disk_strel_small_radii():
    assert as_set(disk_strel(0)) == {(0, 0)}
    assert as_set(disk_strel(1)) == {(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)}
    assert len(disk_strel(2)) == len(strel_oracle(2)) == 13


@pytest.mark.parametrize("r", range(0, 7))
def test_disk_strel_symmetry(r):
    offs = as_set(disk_strel(r))
    assert offs == strel_oracle(r)
    assert all((-dy, dx) in offs and (dy, -dx) in offs and (dx, dy) in offs for dy, dx in offs)


def test_negative_radius_rejected():
    m = np.zeros((4, 4), np.uint8)
    with pytest.raises(ValueError):
        dilate(m, -1)
    with pytest.raises(ValueError):
        erode(m, -1)
    with pytest.raises(ValueError):
        disk_strel(-2)


def test_dilate_examples():
    assert not dilate(np.zeros((5, 5), np.uint8), 3).any()
    dot = np.zeros((5, 5), np.uint8)
    dot[2, 2] = 1
    np.testing.assert_array_equal(dilate(dot, 1), cross5())
    rng = np.random.default_rng(0)
    m = (rng.random((9, 7)) < 0.4).astype(np.uint8)
    np.testing.assert_array_equal(dilate(m, 0), m)


def test_erode_examples():
    ones = np.ones((5, 5), np.uint8)
    np.testing.assert_array_equal(erode(ones, 2), ones)
    dot = np.zeros((5, 5), np.uint8)
    dot[2, 2] = 1
    np.testing.assert_array_equal(erode(cross5(), 1), dot)
    rng = np.random.default_rng(1)
    m = (rng.random((6, 8)) < 0.6).astype(np.uint8)
    np.testing.assert_array_equal(erode(m, 0), m)


def test_weight_map_examples():
    for const in (np.zeros((8, 8)), np.ones((8, 8))):
        assert not boundary_weight_map(const, 2).any()
    dot = np.zeros((5, 5), np.float32)
    dot[2, 2] = 0.9
    np.testing.assert_array_equal(boundary_weight_map(dot, 1), cross5())
    half = np.zeros((8, 8), np.float32)
    half[:, :4] = 1
    band = boundary_weight_map(half, 1)
    np.testing.assert_array_equal(band, weight_map_oracle(half, 1))
    expected = np.zeros((8, 8))
    expected[:, 3:5] = 1
    np.testing.assert_array_equal(band, expected)
    assert not boundary_weight_map(half, 0).any()


def test_weight_map_is_gradient_free():
    soft = torch.rand(1, 1, 8, 8, requires_grad=True)
    w = boundary_weight_map(soft, 1)
    assert not w.requires_grad


@pytest.mark.parametrize("r", [1, 2, 3])
def test_against_oracles_random(r):
    rng = np.random.default_rng(100 + r)
    for _ in range(20):
        m = (rng.random((16, 16)) < rng.uniform(0.1, 0.9)).astype(np.uint8)
        np.testing.assert_array_equal(dilate(m, r), dilate_oracle(m, r))
        np.testing.assert_array_equal(erode(m, r), erode_oracle(m, r))
        np.testing.assert_array_equal(boundary_weight_map(m.astype(np.float32), r), weight_map_oracle(m, r))


def test_torch_batch_matches_numpy():
    rng = np.random.default_rng(3)
    m = (rng.random((3, 1, 12, 12)) < 0.5).astype(np.float32)
    t = dilate(torch.from_numpy(m), 2)
    assert isinstance(t, torch.Tensor) and t.shape == (3, 1, 12, 12)
    for i in range(3):
        np.testing.assert_array_equal(t[i, 0].numpy(), dilate_oracle(m[i, 0], 2))


@settings(max_examples=40, deadline=None)
@given(masks16, st.integers(0, 3))
def test_extensivity_and_duality(m, r):
    d, e = dilate(m, r), erode(m, r)
    assert np.all(d >= m) and np.all(e <= m)
    np.testing.assert_array_equal(e, 1 - dilate(1 - m, r))


@settings(max_examples=40, deadline=None)
@given(masks16, masks16, st.integers(0, 3))
def test_monotonicity(a, b, r):
    small = a & b
    assert np.all(dilate(small, r) <= dilate(a, r))


# --- affine -----------------------------------------------------------------


def test_sample_affine_identity_and_determinism():
    A = sample_affine(np.random.default_rng(0), AffineRanges(0, 0, 0, 0))
    np.testing.assert_array_equal(A.matrix, [[1, 0, 0], [0, 1, 0]])
    a1 = sample_affine(np.random.default_rng(42))
    a2 = sample_affine(np.random.default_rng(42))
    np.testing.assert_array_equal(a1.matrix, a2.matrix)
    assert a1.flip == a2.flip


def test_sample_affine_ranges():
    rng = np.random.default_rng(7)
    draws = [sample_affine(rng, AffineRanges(rotation=30)) for _ in range(10_000)]
    rots = np.array([d.rotation for d in draws])
    scales = np.array([d.scale for d in draws])
    assert rots.min() >= -30 and rots.max() <= 30
    assert rots.min() < -29 and rots.max() > 29
    assert scales.min() >= 0.8 and scales.max() <= 1.2
    assert all(abs(d.det) > 1e-6 for d in draws)
    flips = np.mean([d.flip for d in draws])
    assert abs(flips - 0.5) < 0.03


def test_identity_is_bit_exact():
    rng = np.random.default_rng(0)
    img = rng.random((3, 11, 9)).astype(np.float32)
    m = (rng.random((11, 9)) < 0.5).astype(np.uint8)
    A = AffineTransform.identity()
    assert np.array_equal(apply_affine(img, A, "bilinear"), img)
    assert np.array_equal(apply_affine(img, A, "nearest"), img)
    assert np.array_equal(apply_affine(m, A, "nearest"), m)
    t = torch.from_numpy(img)
    assert torch.equal(apply_affine(t, A, "bilinear"), t)


@pytest.mark.parametrize("shape", [(8, 8), (7, 10)])
def test_half_turn_is_involution(shape):
    rng = np.random.default_rng(5)
    m = (rng.random(shape) < 0.5).astype(np.uint8)
    A = AffineTransform.from_params(rotation=180)
    once = apply_affine(m, A, "nearest")
    np.testing.assert_array_equal(once, m[::-1, ::-1])
    np.testing.assert_array_equal(apply_affine(once, A, "nearest"), m)


def test_quarter_turn_moves_pixel():
    m = np.zeros((5, 5), np.uint8)
    y0, x0 = 1, 4
    m[y0, x0] = 1
    out = apply_affine(m, AffineTransform.from_params(rotation=90), "nearest")
    # about the centre (2, 2): (dx, dy) -> (-dy, dx) with y pointing down
    dx, dy = x0 - 2, y0 - 2
    expected = np.zeros_like(m)
    expected[2 + dx, 2 - dy] = 1
    np.testing.assert_array_equal(out, expected)


def test_flip_twice_and_masks_stay_binary():
    rng = np.random.default_rng(9)
    m = (rng.random((10, 10)) < 0.5).astype(np.uint8)
    F = AffineTransform.from_params(flip=True)
    np.testing.assert_array_equal(apply_affine(m, F, "nearest"), m[:, ::-1])
    np.testing.assert_array_equal(apply_affine(apply_affine(m, F, "nearest"), F, "nearest"), m)
    A = AffineTransform.from_params(rotation=17, scale=1.1, translation=(0.05, -0.08))
    assert set(np.unique(apply_affine(m, A, "nearest"))) <= {0, 1}


def test_out_of_frame_fills_zero():
    img = np.ones((1, 8, 8), np.float32)
    out = apply_affine(img, AffineTransform.from_params(translation=(0.5, 0.0)), "nearest")
    assert not out[0, :, :4].any() and out[0, :, 4:].all()


def test_singular_rejected():
    A = AffineTransform(np.array([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]]))
    with pytest.raises(ValueError):
        apply_affine(np.zeros((4, 4)), A)
    with pytest.raises(ValueError):
        apply_affine(np.zeros((4, 4)), AffineTransform.identity(), mode="cubic")


def test_bilinear_is_differentiable():
    x = torch.rand(1, 1, 6, 6, requires_grad=True)
    A = AffineTransform.from_params(rotation=math.degrees(0.3))
    apply_affine(x, A).sum().backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()

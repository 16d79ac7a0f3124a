"""Binary morphology with disk structuring elements, and affine warps.

Every function accepts either a numpy array or a torch tensor whose last two
dimensions are (H, W) and returns the same kind of object. Masks are treated
as binary {0, 1} grids.

Border rules: dilation reads out-of-bounds pixels as 0 and erosion reads them
as 1, so constant masks are fixed points of both and
``erode(m, r) == 1 - dilate(1 - m, r)`` holds exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


def disk_strel(r: int) -> np.ndarray:
    """Offsets ``(dy, dx)`` of a digital disk of radius ``r``, shape (N, 2)."""
    if r < 0:
        raise ValueError(f"disk radius must be non-negative, got {r}")
    d = np.arange(-r, r + 1)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    inside = dy ** 2 + dx ** 2 <= r * r
    return np.stack([dy[inside], dx[inside]], axis=1)


def disk_kernel(r: int) -> np.ndarray:
    """Boolean (2r+1, 2r+1) footprint of :func:`disk_strel`."""
    offs = disk_strel(r)
    k = np.zeros((2 * r + 1, 2 * r + 1), dtype=bool)
    k[offs[:, 0] + r, offs[:, 1] + r] = True
    return k


def _as_tensor(m):
    if isinstance(m, torch.Tensor):
        return m, None
    arr = np.asarray(m)
    return torch.from_numpy(np.ascontiguousarray(arr)), arr.dtype


def _restore(t: torch.Tensor, np_dtype):
    if np_dtype is None:
        return t
    return t.numpy().astype(np_dtype, copy=False)


def _dilate_tensor(m: torch.Tensor, r: int) -> torch.Tensor:
    shape = m.shape
    h, w = shape[-2:]
    x = (m.detach() > 0.5).to(torch.float32).reshape(-1, 1, h, w)
    k = torch.from_numpy(disk_kernel(r).astype(np.float32))[None, None]
    # zero padding is the "outside reads 0" rule; sums of 0/1 are exact in float32
    hit = F.conv2d(x, k, padding=r) > 0.5
    return hit.reshape(shape)


def dilate(m, r: int):
    """Binary dilation by a disk of radius ``r``; output(p)=1 iff any disk
    neighbour of p is 1."""
    if r < 0:
        raise ValueError(f"dilation radius must be non-negative, got {r}")
    t, np_dtype = _as_tensor(m)
    dtype = t.dtype
    if r == 0:
        out = t.detach() > 0.5
    else:
        out = _dilate_tensor(t, r)
    return _restore(out.to(dtype), np_dtype)


def erode(m, r: int):
    """Binary erosion by a disk of radius ``r`` (dual of :func:`dilate`)."""
    if r < 0:
        raise ValueError(f"erosion radius must be non-negative, got {r}")
    t, np_dtype = _as_tensor(m)
    dtype = t.dtype
    if r == 0:
        out = t.detach() > 0.5
    else:
        out = ~_dilate_tensor(t.detach() <= 0.5, r)
    return _restore(out.to(dtype), np_dtype)


def boundary_weight_map(mask, r: int, threshold: float = 0.5):
    """Band of width ~2r around the boundary of ``mask``.

    Soft masks are binarized at ``threshold`` first. The result carries no
    gradient.
    """
    t, np_dtype = _as_tensor(mask)
    dtype = t.dtype if t.is_floating_point() else torch.float32
    binary = (t.detach() >= threshold).to(torch.float32)
    if r <= 0:
        return _restore(torch.zeros_like(binary).to(dtype), np_dtype)
    band = dilate(binary, r) - erode(binary, r)
    return _restore(band.to(dtype), np_dtype)


@dataclass
class AffineRanges:
    rotation: float = 30.0      # degrees, symmetric
    scale: float = 0.2          # scale drawn from [1 - scale, 1 + scale]
    translation: float = 0.1    # fraction of image size, symmetric
    flip_p: float = 0.5


@dataclass
class AffineTransform:
    """Forward map about the image centre: ``dst = M[:, :2] @ (src - c) + c + M[:, 2] * (W, H)``.

    The translation column is stored as a fraction of the image size so one
    transform applies at any resolution. Pixel coordinates are ``(x, y)``
    with y pointing down.
    """

    matrix: np.ndarray
    rotation: float = 0.0
    scale: float = 1.0
    translation: tuple = (0.0, 0.0)
    flip: bool = False

    @classmethod
    def from_params(cls, rotation=0.0, scale=1.0, translation=(0.0, 0.0), flip=False):
        th = math.radians(rotation)
        c, s = math.cos(th), math.sin(th)
        lin = scale * np.array([[c, -s], [s, c]])
        if flip:
            lin = lin @ np.array([[-1.0, 0.0], [0.0, 1.0]])
        mat = np.zeros((2, 3))
        mat[:, :2] = lin
        mat[:, 2] = translation
        return cls(mat, float(rotation), float(scale), tuple(float(t) for t in translation), bool(flip))

    @classmethod
    def identity(cls):
        return cls.from_params()

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix[:, :2]))


def sample_affine(rng: np.random.Generator, ranges: AffineRanges | None = None) -> AffineTransform:
    ranges = ranges or AffineRanges()
    rot = rng.uniform(-ranges.rotation, ranges.rotation)
    scale = rng.uniform(1.0 - ranges.scale, 1.0 + ranges.scale)
    trans = rng.uniform(-ranges.translation, ranges.translation, size=2)
    flip = bool(rng.random() < ranges.flip_p)
    return AffineTransform.from_params(rot, scale, tuple(trans), flip)


def _source_coords(A: AffineTransform, h: int, w: int):
    lin = A.matrix[:, :2]
    if abs(np.linalg.det(lin)) <= 1e-6:
        raise ValueError("affine transform is singular")
    inv = np.linalg.inv(lin)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    tx, ty = A.matrix[0, 2] * w, A.matrix[1, 2] * h
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    u = xs - cx - tx
    v = ys - cy - ty
    sx = inv[0, 0] * u + inv[0, 1] * v + cx
    sy = inv[1, 0] * u + inv[1, 1] * v + cy
    return sx, sy


def _gather(flat: torch.Tensor, yi: np.ndarray, xi: np.ndarray, h: int, w: int) -> torch.Tensor:
    valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
    idx = np.where(valid, yi * w + xi, 0).reshape(-1)
    out = flat[..., torch.from_numpy(idx)]
    keep = torch.from_numpy(valid.reshape(-1)).to(flat.dtype)
    return out * keep


def apply_affine(x, A: AffineTransform, mode: str = "bilinear"):
    """Inverse-warp ``x`` (spatial dims last) by ``A``; outside pixels become 0.

    Differentiable with respect to ``x`` for torch inputs.
    """
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    t, np_dtype = _as_tensor(x)
    h, w = t.shape[-2:]
    sx, sy = _source_coords(A, h, w)
    flat = t.reshape(*t.shape[:-2], h * w)
    if not flat.is_floating_point():
        flat = flat.to(torch.float32)
    if mode == "nearest":
        xi = np.floor(sx + 0.5).astype(np.int64)
        yi = np.floor(sy + 0.5).astype(np.int64)
        out = _gather(flat, yi, xi, h, w)
    else:
        x0 = np.floor(sx)
        y0 = np.floor(sy)
        fx = torch.from_numpy((sx - x0).reshape(-1)).to(flat.dtype)
        fy = torch.from_numpy((sy - y0).reshape(-1)).to(flat.dtype)
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        v00 = _gather(flat, y0, x0, h, w)
        v01 = _gather(flat, y0, x0 + 1, h, w)
        v10 = _gather(flat, y0 + 1, x0, h, w)
        v11 = _gather(flat, y0 + 1, x0 + 1, h, w)
        out = (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
               + v10 * (1 - fx) * fy + v11 * fx * fy)
    out = out.reshape(t.shape).to(t.dtype) if t.is_floating_point() else out.reshape(t.shape).round().to(t.dtype)
    return _restore(out, np_dtype)

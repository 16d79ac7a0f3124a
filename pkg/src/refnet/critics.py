"""Boundary critics and the (image, mask, masked image) triplets they score.

The outer critic looks at the object side of a mask (``m * x``) and learns
whether it carries background residue; the inner critic looks at the
background side (``(1 - m) * x``) for object residue. Real triplets come from
annotated open-source images, pseudo triplets dilate those annotations by a
random disk and are scored as fakes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .morphology import dilate, erode

SIDES = ("outer", "inner")


@dataclass
class Triplet:
    image: torch.Tensor         # (B, C, H, W)
    mask: torch.Tensor          # (B, 1, H, W)
    masked_image: torch.Tensor  # (B, C, H, W)
    side: str
    provenance: str

    def stacked(self) -> torch.Tensor:
        return torch.cat([self.image, self.mask, self.masked_image], dim=1)

    def detach(self) -> "Triplet":
        return Triplet(self.image.detach(), self.mask.detach(), self.masked_image.detach(),
                       self.side, self.provenance)

    def __len__(self):
        return self.image.shape[0]

    def take(self, n: int) -> "Triplet":
        return Triplet(self.image[:n], self.mask[:n], self.masked_image[:n], self.side, self.provenance)


def _prep(image, mask):
    if mask.dim() == image.dim() - 1:
        mask = mask.unsqueeze(-3)
    if image.dim() == 3:
        image, mask = image[None], mask[None]
    if image.shape[-2:] != mask.shape[-2:] or image.shape[0] != mask.shape[0]:
        raise ValueError(f"image {tuple(image.shape)} and mask {tuple(mask.shape)} disagree")
    return image, mask


def _check_side(side):
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}, got {side!r}")


def make_fake_triplet(image, soft_mask, side) -> Triplet:
    """Triplet from a predicted soft mask; gradients flow into the mask."""
    _check_side(side)
    image, m = _prep(image, soft_mask)
    if side == "inner":
        m = 1 - m
    return Triplet(image, m, m * image, side, "fake")


def make_real_triplet(image, mask, side) -> Triplet:
    _check_side(side)
    image, m = _prep(image, mask)
    m = m.detach()
    if not torch.all((m == 0) | (m == 1)):
        raise ValueError("real triplets need a binary ground-truth mask")
    if side == "inner":
        m = 1 - m
    return Triplet(image.detach(), m, m * image.detach(), side, "real")


def scaled_radius_range(size: int, base=(11, 55), base_size: int = 128) -> tuple[int, int]:
    """Pseudo-triplet radius range rescaled from ``base_size`` to ``size`` pixels."""
    lo = max(1, round(base[0] * size / base_size))
    hi = max(lo, round(base[1] * size / base_size))
    return lo, hi


def sample_pseudo_radius(rng: np.random.Generator, radius_range) -> int:
    lo, hi = radius_range
    return int(rng.integers(lo, hi + 1))


def make_pseudo_triplet(image, mask, radius, side, radius_range=None, morph="dilate") -> Triplet:
    """Triplet whose mask is the side mask grown by a disk of ``radius``.

    ``radius`` may be one int or one int per batch element. ``morph="erode"``
    shrinks the side mask instead.
    """
    _check_side(side)
    image, m = _prep(image, mask)
    m = m.detach()
    if not torch.all((m == 0) | (m == 1)):
        raise ValueError("pseudo triplets need a binary ground-truth mask")
    radii = [int(radius)] * m.shape[0] if np.isscalar(radius) else [int(r) for r in radius]
    if len(radii) != m.shape[0]:
        raise ValueError("one radius per batch element expected")
    if radius_range is not None:
        lo, hi = radius_range
        for r in radii:
            if not lo <= r <= hi:
                raise ValueError(f"radius {r} outside configured range [{lo}, {hi}]")
    if side == "inner":
        m = 1 - m
    op = {"dilate": dilate, "erode": erode}[morph]
    grown = torch.stack([op(m[i], r) for i, r in enumerate(radii)])
    image = image.detach()
    return Triplet(image, grown, grown * image, side, "pseudo")


def interpolate_triplets(real: Triplet, fake: Triplet, eps) -> Triplet:
    """Componentwise ``eps * real + (1 - eps) * fake``; ``eps`` scalar or per sample."""
    if real.side != fake.side:
        raise ValueError("cannot interpolate triplets from different sides")
    if real.image.shape != fake.image.shape:
        raise ValueError("triplet shapes differ")
    e = torch.as_tensor(eps, dtype=real.image.dtype)
    if torch.any(e < 0) or torch.any(e > 1):
        raise ValueError(f"interpolation weight must lie in [0, 1], got {eps}")
    if e.dim() == 1:
        e = e.view(-1, 1, 1, 1)

    def mix(a, b):
        return e * a + (1 - e) * b

    return Triplet(mix(real.image, fake.image), mix(real.mask, fake.mask),
                   mix(real.masked_image, fake.masked_image), real.side, "interpolated")


class BoundaryCritic(nn.Module):
    """Strided conv critic producing one unbounded score per triplet."""

    def __init__(self, image_channels: int = 3, width: int = 32, zero_init: bool = False):
        super().__init__()
        cin = 2 * image_channels + 1
        self.in_channels = cin
        chans = [cin, width, 2 * width, 4 * width, 4 * width]
        layers = []
        for a, b in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(a, b, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(chans[-1], 1)
        if zero_init:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"critic expects {self.in_channels} channels, got {x.shape[1]}")
        return self.head(self.features(x).mean(dim=(2, 3)))[:, 0]


def critic_score(critic: nn.Module, triplet) -> torch.Tensor:
    x = triplet.stacked() if isinstance(triplet, Triplet) else triplet
    return critic(x)


def init_critic(image_channels: int = 3, width: int = 32, seed: int = 0, zero_init: bool = False):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return BoundaryCritic(image_channels, width, zero_init)

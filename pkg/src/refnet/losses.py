"""Segmenter and critic objectives."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .critics import Triplet, critic_score, interpolate_triplets
from .morphology import AffineTransform, apply_affine, boundary_weight_map


@dataclass
class LossWeights:
    tau: float = 1.0    # Dice smoothing
    lam: float = 10.0   # gradient penalty
    xi: float = 1.0     # Dice
    zeta: float = 1.0   # MMD representation consistency
    eta: float = 1.0    # boundary-aware self-supervision
    adv: float = 1.0    # scale on both critic scores

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")


@dataclass
class MmdKernelConfig:
    bandwidths: list = field(default_factory=list)  # empty -> median heuristic
    multipliers: tuple = (0.5, 1.0, 2.0)


def dice_loss(pred, target, tau: float = 1.0, reduction: str = "mean"):
    """``1 - (2|p∩m| + tau) / (|p| + |m| + tau)`` with soft sums, per sample.

    Inputs of shape (H, W) give a scalar; leading dims are treated as a batch.
    """
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    target = target.to(pred.dtype)
    inter = (pred * target).flatten(-2).sum(-1)
    card = pred.flatten(-2).sum(-1) + target.flatten(-2).sum(-1)
    loss = 1 - (2 * inter + tau) / (card + tau)
    if reduction == "none" or loss.dim() == 0:
        return loss
    return loss.mean()


def _sqdist(a, b):
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def median_bandwidth(a, b) -> float:
    z = torch.cat([a, b]).detach()
    d = _sqdist(z, z)
    off = d[~torch.eye(len(z), dtype=torch.bool)]
    off = off[off > 0]
    if off.numel() == 0:
        return 1.0
    return math.sqrt(float(off.median()))


def mmd_loss(feat_a, feat_b, cfg: MmdKernelConfig | None = None):
    """Biased squared MMD with a sum of RBF kernels ``exp(-|x-y|^2 / (2 s^2))``."""
    cfg = cfg or MmdKernelConfig()
    if feat_a.dim() != 2 or feat_b.dim() != 2:
        raise ValueError("MMD inputs must be (n, d) sets of vectors")
    if len(feat_a) == 0 or len(feat_b) == 0:
        raise ValueError("MMD needs non-empty sample sets")
    if feat_a.shape[1] != feat_b.shape[1]:
        raise ValueError(f"dimension mismatch {feat_a.shape[1]} vs {feat_b.shape[1]}")
    if cfg.bandwidths:
        sigmas = list(cfg.bandwidths)
    else:
        base = median_bandwidth(feat_a, feat_b)
        sigmas = [base * m for m in cfg.multipliers]
    daa, dbb, dab = _sqdist(feat_a, feat_a), _sqdist(feat_b, feat_b), _sqdist(feat_a, feat_b)
    total = 0.0
    for s in sigmas:
        g = 1.0 / (2.0 * s * s)
        total = total + torch.exp(-g * daa).mean() + torch.exp(-g * dbb).mean() - 2 * torch.exp(-g * dab).mean()
    return total


def self_supervision_loss(model, image, ref_image, ref_mask, A: AffineTransform, r: int, pred=None):
    """Boundary-weighted equivariance error between ``F(Ax)`` and ``A F(x)``.

    ``pred`` may hold an already computed ``F(x)`` of shape (B, 1, H, W).
    Weight maps are constants. Returns the squared error averaged over pixels.
    """
    if pred is None:
        pred = model(image, ref_image, ref_mask)
    warped_pred = model(apply_affine(image, A, "bilinear"), ref_image, ref_mask)
    w = boundary_weight_map(pred, r)
    w_warped = boundary_weight_map(warped_pred, r)
    diff = w_warped * warped_pred - apply_affine(w * pred, A, "bilinear")
    return (diff ** 2).mean()


def gradient_penalty(critic, real: Triplet, fake: Triplet, eps, lam: float = 10.0):
    """``lam * E[(||grad D(I)||_2 - 1)^2]`` at ``I = eps*real + (1-eps)*fake``."""
    if lam == 0:
        return torch.zeros((), dtype=real.image.dtype)
    mixed = interpolate_triplets(real, fake, eps)
    x = mixed.stacked().detach().requires_grad_(True)
    score = critic_score(critic, x)
    (grad,) = torch.autograd.grad(score.sum(), x, create_graph=True)
    norms = grad.flatten(1).norm(2, dim=1)
    return lam * ((norms - 1) ** 2).mean()


def critic_loss(critic, fake: Triplet, pseudo: Triplet | None, real: Triplet, eps, lam: float = 10.0, side=None):
    """``½ D(fake) + ½ D(pseudo) - D(real) + GP``.

    Without pseudo triplets the fake term takes the full weight.
    """
    sides = {fake.side, real.side} | ({pseudo.side} if pseudo is not None else set())
    if len(sides) != 1 or (side is not None and sides != {side}):
        raise ValueError(f"triplets from mixed sides: {sorted(sides)}")
    d_fake = critic_score(critic, fake).mean()
    d_real = critic_score(critic, real).mean()
    if pseudo is not None:
        d_pseudo = critic_score(critic, pseudo).mean()
        adv = 0.5 * d_fake + 0.5 * d_pseudo - d_real
    else:
        adv = d_fake - d_real
    return adv + gradient_penalty(critic, real, fake, eps, lam)


@dataclass
class SegLossParts:
    dice: torch.Tensor | float = 0.0
    rep: torch.Tensor | float = 0.0
    sel: torch.Tensor | float = 0.0
    d_outer: torch.Tensor | float = 0.0
    d_inner: torch.Tensor | float = 0.0

    def as_floats(self) -> dict:
        return {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in vars(self).items()}


def total_seg_loss(parts: SegLossParts, weights: LossWeights | None = None):
    """``xi*dice + zeta*rep + eta*sel - adv*(D_outer + D_inner)``."""
    weights = weights or LossWeights()
    bad = [k for k, v in parts.as_floats().items() if not math.isfinite(v)]
    if bad:
        raise FloatingPointError(f"non-finite segmenter loss terms: {bad} ({parts.as_floats()})")
    return (weights.xi * parts.dice + weights.zeta * parts.rep + weights.eta * parts.sel
            - weights.adv * (parts.d_outer + parts.d_inner))

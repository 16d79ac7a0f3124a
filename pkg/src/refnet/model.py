"""Two-branch reference segmentation network.

One encoder embeds both the target image and the masked reference image
(a single parameter set called twice). The reference features are pooled,
broadcast over the target bottleneck and concatenated with it; the decoder
upsamples with skip connections from the target branch only and emits a
one-channel logistic mask.
"""
from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

CKPT_MAGIC = b"REFNET-CKPT-1"

# keeps the logistic output strictly inside (0, 1) even when float32 saturates
OUTPUT_EPS = 1e-6


@dataclass
class ArchConfig:
    in_channels: int = 3
    base_width: int = 32
    depth: int = 4
    max_width_mult: int = 4
    groups: int = 8
    concat: str = "pooled"  # or "spatial"
    ref_pool: str = "global"  # or "masked"
    inject: str = "bottleneck"  # or "all": also feed the pooled reference to every decoder level
    ref_levels: str = "last"  # or "all": pool every encoder level and concatenate

    def widths(self) -> list[int]:
        return [self.base_width * min(2 ** i, self.max_width_mult) for i in range(self.depth + 1)]

    def validate(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.in_channels < 1 or self.base_width < 1 or self.max_width_mult < 1:
            raise ValueError("channel counts must be positive")
        if self.concat not in ("pooled", "spatial"):
            raise ValueError(f"unknown concat mode {self.concat!r}")
        if self.ref_pool not in ("global", "masked") or self.inject not in ("bottleneck", "all"):
            raise ValueError("unknown reference pooling or injection mode")
        if self.ref_levels not in ("last", "all"):
            raise ValueError(f"unknown ref_levels {self.ref_levels!r}")
        if self.concat != "pooled" and (self.inject == "all" or self.ref_levels == "all"):
            raise ValueError("multi-level conditioning needs pooled concatenation")
        if self.groups < 0:
            raise ValueError("groups must be >= 0")
        for wd in self.widths():
            if self.groups and wd % self.groups:
                raise ValueError(f"width {wd} is not divisible by {self.groups} norm groups")

    def cond_dim(self) -> int:
        w = self.widths()
        return sum(w) if self.ref_levels == "all" else w[-1]

    @property
    def stride(self) -> int:
        return 2 ** self.depth


def _norm(groups, c):
    return nn.GroupNorm(groups, c) if groups else nn.Identity()


def _block(cin, cout, groups):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        _norm(groups, cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        _norm(groups, cout),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        w = arch.widths()
        self.stem = _block(arch.in_channels, w[0], arch.groups)
        self.downs = nn.ModuleList(_block(w[i], w[i + 1], arch.groups) for i in range(arch.depth))

    def forward(self, x):
        feats = [self.stem(x)]
        for down in self.downs:
            feats.append(down(F.max_pool2d(feats[-1], 2)))
        return feats


class Decoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        w = arch.widths()
        cd = arch.cond_dim()
        self.fuse = nn.Sequential(
            nn.Conv2d(w[-1] + cd, w[-1], 3, padding=1),
            _norm(arch.groups, w[-1]),
            nn.ReLU(inplace=True),
        )
        extra = cd if arch.inject == "all" else 0
        self.inject = arch.inject == "all"
        self.ups = nn.ModuleList(
            _block(w[i + 1] + w[i] + extra, w[i], arch.groups) for i in reversed(range(arch.depth))
        )
        self.head = nn.Conv2d(w[0], 1, 1)

    def forward(self, feats, cond):
        y = self.fuse(torch.cat([feats[-1], cond], dim=1))
        vec = cond.mean(dim=(2, 3), keepdim=True)
        for up, skip in zip(self.ups, reversed(feats[:-1])):
            y = F.interpolate(y, scale_factor=2, mode="nearest")
            parts = [y, skip]
            if self.inject:
                parts.append(vec.expand(-1, -1, *skip.shape[-2:]))
            y = up(torch.cat(parts, dim=1))
        return self.head(y)


class RefSegNet(nn.Module):
    def __init__(self, arch: ArchConfig | None = None):
        super().__init__()
        arch = arch or ArchConfig()
        arch.validate()
        self.arch = arch
        self.encoder = Encoder(arch)
        self.decoder = Decoder(arch)

    def _check(self, x):
        h, w = x.shape[-2:]
        s = self.arch.stride
        if x.dim() != 4 or x.shape[1] != self.arch.in_channels:
            raise ValueError(f"expected (B, {self.arch.in_channels}, H, W) input, got {tuple(x.shape)}")
        if h % s or w % s:
            raise ValueError(f"input {h}x{w} is not divisible by the encoder stride {s}")

    def encode(self, x):
        """Bottleneck features, shape (B, d, H/2^depth, W/2^depth)."""
        self._check(x)
        return self.encoder(x)[-1]

    def embed(self, feats, mask=None):
        """Pool an encoder feature list to one vector per sample.

        ``ref_pool="masked"`` averages over the (downsampled) mask instead of
        the whole grid; ``ref_levels="all"`` concatenates every level.
        """
        levels = feats if self.arch.ref_levels == "all" else feats[-1:]
        out = []
        for f in levels:
            if self.arch.ref_pool == "masked" and mask is not None:
                w = F.adaptive_avg_pool2d(mask, f.shape[-2:])
                out.append((f * w).sum(dim=(2, 3)) / w.sum(dim=(2, 3)).clamp_min(1e-6))
            else:
                out.append(f.mean(dim=(2, 3)))
        return torch.cat(out, dim=1)

    def pooled(self, x, mask=None):
        """Representation vector of ``x``, the same embedding used for references."""
        self._check(x)
        if mask is not None and mask.dim() == 3:
            mask = mask[:, None]
        return self.embed(self.encoder(x), mask)

    def condition(self, feats, ref_feats, ref_vec):
        if self.arch.concat == "pooled":
            return ref_vec[..., None, None].expand(-1, -1, *feats.shape[-2:])
        if ref_feats.shape[-2:] != feats.shape[-2:]:
            raise ValueError("spatial concatenation needs equal target/reference resolution")
        return ref_feats

    def forward(self, image, ref_image, ref_mask, return_ref=False):
        """Soft mask in (0, 1) for ``image`` conditioned on ``ref_image * ref_mask``."""
        self._check(image)
        self._check(ref_image)
        if self.arch.concat == "spatial" and image.shape[-2:] != ref_image.shape[-2:]:
            raise ValueError("target and reference resolution differ")
        if ref_mask.dim() == 3:
            ref_mask = ref_mask[:, None]
        feats = self.encoder(image)
        ref_feats = self.encoder(ref_image * ref_mask)
        ref_vec = self.embed(ref_feats, ref_mask)
        logits = self.decoder(feats, self.condition(feats[-1], ref_feats[-1], ref_vec))
        out = OUTPUT_EPS + (1 - 2 * OUTPUT_EPS) * torch.sigmoid(logits)
        if return_ref:
            return out, ref_vec
        return out


def init_model(arch: ArchConfig | None = None, seed: int = 0) -> RefSegNet:
    arch = arch or ArchConfig()
    arch.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return RefSegNet(arch)


def segment(model: RefSegNet, image, ref_image, ref_mask):
    """Convenience wrapper for a single (C, H, W) sample or a batch."""
    single = image.dim() == 3
    if single:
        image, ref_image, ref_mask = image[None], ref_image[None], ref_mask[None]
    if image.shape[0] != ref_image.shape[0]:
        raise ValueError("target and reference batch sizes differ")
    out = model(image, ref_image, ref_mask)
    return out[0, 0] if single else out[:, 0]


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, payload: dict):
    """Write ``payload`` (tensors, dicts, numbers) behind the magic header."""
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + b"\n")
        f.write(buf.getvalue())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        data = f.read()
    head = CKPT_MAGIC + b"\n"
    if not data.startswith(head):
        raise ValueError(f"{path} is not a REFNET-CKPT-1 checkpoint")
    return torch.load(io.BytesIO(data[len(head):]), map_location="cpu", weights_only=False)


def arch_to_dict(arch: ArchConfig) -> dict:
    return asdict(arch)


def model_from_checkpoint(ckpt: dict, arch: ArchConfig | None = None) -> RefSegNet:
    stored = ArchConfig(**ckpt["arch"])
    if arch is not None and arch != stored:
        raise ValueError(f"architecture mismatch: checkpoint has {stored}, config asks for {arch}")
    model = RefSegNet(stored)
    model.load_state_dict(ckpt["model"])
    return model

"""Experiment configuration and its YAML round trip.

A config file has up to three sections, all optional::

    data:  DataConfig fields (scene generation)
    arch:  ArchConfig fields (segmenter shape)
    train: TrainConfig fields (optimisation, loss weights, ablations)

Unknown keys anywhere are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import DataConfig
from .losses import LossWeights
from .model import ArchConfig

# ablation name -> toggle field
ABLATIONS = {
    "self": "self_supervision",
    "cond": "condition",
    "pseu": "pseudo_triplet",
    "inner": "inner_critic",
    "outer": "outer_critic",
    "dice": "dice_supervision",
}


@dataclass
class TrainConfig:
    # loss weights
    tau: float = 1.0
    lam: float = 10.0
    xi: float = 1.0
    zeta: float = 1.0
    eta: float = 1.0
    adv: float = 1.0
    # schedule
    max_iterations: int = 2000
    n_critic: int = 5
    alternation: str = "ratio"  # "ratio": n_critic critic updates per segmenter update; "swap": blocks of n_critic
    batch_size: int = 64
    target_batch: int = 0       # 0 -> batch_size
    critic_batch: int = 0       # 0 -> batch_size
    auto_shrink: bool = True
    # optimisers
    seg_lr: float = 1e-4
    seg_betas: tuple = (0.9, 0.999)
    critic_lr: float = 1e-4
    critic_betas: tuple = (0.0, 0.9)
    critic_width: int = 32
    # sampling
    seed: int = 0
    k: int = 10
    neg_ratio: float = 0.25
    augment: bool = True
    # self-supervision
    sel_radius: int = 2
    affine_rotation: float = 30.0
    affine_scale: float = 0.2
    affine_translation: float = 0.1
    affine_flip_p: float = 0.5
    # pseudo triplets; empty -> [11, 55] rescaled from 128 px
    pseudo_radius: tuple = ()
    pseudo_morph: str = "dilate"
    # ablation toggles
    self_supervision: bool = True
    condition: bool = True
    pseudo_triplet: bool = True
    inner_critic: bool = True
    outer_critic: bool = True
    dice_supervision: bool = True
    mmd: bool = True
    mmd_stop_grad: bool = True
    # bookkeeping
    checkpoint_every: int = 200
    eval_reference: str = "first"  # or "average"

    def validate(self):
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if self.seg_lr <= 0 or self.critic_lr <= 0:
            raise ValueError("learning rates must be > 0")
        if self.alternation not in ("ratio", "swap"):
            raise ValueError(f"unknown alternation mode {self.alternation!r}")
        if self.pseudo_morph not in ("dilate", "erode"):
            raise ValueError(f"unknown pseudo_morph {self.pseudo_morph!r}")
        if self.eval_reference not in ("first", "average"):
            raise ValueError(f"unknown eval_reference {self.eval_reference!r}")
        if not 0 <= self.neg_ratio <= 1:
            raise ValueError("neg_ratio must lie in [0, 1]")
        if self.max_iterations < 0 or self.batch_size < 1:
            raise ValueError("max_iterations must be >= 0 and batch_size >= 1")
        self.loss_weights()

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            tau=self.tau,
            lam=self.lam,
            xi=self.xi if self.dice_supervision else 0.0,
            zeta=self.zeta if self.mmd else 0.0,
            eta=self.eta if self.self_supervision else 0.0,
            adv=self.adv,
        )

    def ablate(self, *names) -> "TrainConfig":
        changes = {}
        for n in names:
            if n not in ABLATIONS:
                raise ValueError(f"unknown ablation {n!r}; valid: {', '.join(ABLATIONS)}")
            changes[ABLATIONS[n]] = False
        return dataclasses.replace(self, **changes)


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


_SECTIONS = {"data": DataConfig, "arch": ArchConfig, "train": TrainConfig}


def _coerce(cls, name, value):
    default = {f.name: f for f in dataclasses.fields(cls)}[name]
    proto = default.default if default.default is not dataclasses.MISSING else default.default_factory()
    if isinstance(proto, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(proto, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def section_from_dict(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {unknown}")
    return cls(**{k: _coerce(cls, k, v) for k, v in d.items()})


def config_from_dict(d: dict | None) -> ExperimentConfig:
    d = d or {}
    unknown = sorted(set(d) - set(_SECTIONS))
    if unknown:
        raise ValueError(f"unknown config sections: {unknown}")
    cfg = ExperimentConfig(**{k: section_from_dict(cls, d.get(k) or {}) for k, cls in _SECTIONS.items()})
    cfg.arch.validate()
    cfg.train.validate()
    return cfg


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, list):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {k: _plain(dataclasses.asdict(getattr(cfg, k))) for k in _SECTIONS}


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return config_from_dict(yaml.safe_load(Path(path).read_text()))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def smoke_config(**train_overrides) -> ExperimentConfig:
    """Desk-scale preset used by the acceptance runs: small widths and batches so
    a full run fits in minutes on one CPU core."""
    train = TrainConfig(
        max_iterations=1000,
        batch_size=8,
        target_batch=4,
        critic_batch=4,
        critic_width=8,
        seg_lr=1e-3,
        adv=0.01,
        zeta=0.01,
    )
    train = dataclasses.replace(train, **train_overrides)
    arch = ArchConfig(base_width=8, groups=1, ref_pool="masked", inject="all", ref_levels="all")
    return ExperimentConfig(DataConfig(), arch, train)


PRESETS = {"default": ExperimentConfig, "smoke": smoke_config}

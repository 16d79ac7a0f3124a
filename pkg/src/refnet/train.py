"""Alternating training of the segmenter and the two boundary critics."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .critics import (SIDES, critic_score, init_critic, make_fake_triplet, make_pseudo_triplet,
                      make_real_triplet, scaled_radius_range)
from .data import AugmentPolicy, BatchSampler, SegDataset
from .losses import SegLossParts, critic_loss, dice_loss, mmd_loss, self_supervision_loss, total_seg_loss
from .model import ArchConfig, init_model, load_checkpoint, save_checkpoint
from .morphology import AffineRanges, sample_affine

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.pt"
LOG_NAME = "log.jsonl"


class TrainingDiverged(RuntimeError):
    pass


def _t(a):
    return torch.from_numpy(np.ascontiguousarray(a))


class Trainer:
    """Owns the segmenter, the critics, their optimisers and the RNG streams.

    ``critic_update`` and ``segmenter_update`` each perform exactly one
    optimiser step on their side and return the log record they produced.
    """

    def __init__(self, cfg: TrainConfig, arch: ArchConfig, data: SegDataset, out_dir=None):
        cfg.validate()
        self.cfg = cfg
        self.arch = arch
        self.data = data.subsample_references(cfg.k)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.weights = cfg.loss_weights()
        self.rng = np.random.default_rng(cfg.seed)
        self.gen = torch.Generator().manual_seed(cfg.seed + 7919)
        self.model = init_model(arch, cfg.seed)
        self.sides = [s for s in SIDES if getattr(cfg, f"{s}_critic")]
        self.critics = {s: init_critic(arch.in_channels, cfg.critic_width, seed=cfg.seed + 1 + i)
                        for i, s in enumerate(SIDES) if s in self.sides}
        self.seg_opt = torch.optim.Adam(self.model.parameters(), lr=cfg.seg_lr, betas=tuple(cfg.seg_betas))
        self.critic_opts = {s: torch.optim.Adam(c.parameters(), lr=cfg.critic_lr, betas=tuple(cfg.critic_betas))
                            for s, c in self.critics.items()}
        self.sampler = BatchSampler(self.data, cfg.neg_ratio, AugmentPolicy(enabled=cfg.augment))
        self.affine_ranges = AffineRanges(cfg.affine_rotation, cfg.affine_scale,
                                          cfg.affine_translation, cfg.affine_flip_p)
        size = self.data.images[0].shape[0]
        self.radius_range = tuple(cfg.pseudo_radius) if cfg.pseudo_radius else scaled_radius_range(size)
        batch = cfg.batch_size
        if cfg.auto_shrink:
            batch = max(1, min(batch, len(self.sampler.labeled)))
        self.batch = batch
        self.target_batch = cfg.target_batch or batch
        self.critic_batch = cfg.critic_batch or batch
        self.step = 0
        self.records: list[dict] = []
        self._t0 = time.time()

    # -- forward helpers -------------------------------------------------

    def _segment(self, image, ref_image, ref_mask, return_ref=False):
        if not self.cfg.condition:
            ref_mask = torch.zeros_like(ref_mask)
        return self.model(image, ref_image, ref_mask, return_ref=return_ref)

    def _emit(self, rec):
        rec["wall"] = round(time.time() - self._t0, 4)
        self.records.append(rec)
        if self.out_dir is not None:
            with open(self.out_dir / LOG_NAME, "a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec

    # -- updates ---------------------------------------------------------

    def critic_update(self, update_index: int = 0) -> list[dict]:
        """One optimiser step for every enabled critic on a fresh batch."""
        if not self.critics:
            return []
        n = self.critic_batch
        imgs, rimgs, rmasks, _, _ = self.sampler.target_pairs(self.rng, n, neg_ratio=0.0)
        oimgs, omasks = self.sampler.open_pairs(self.rng, n)
        imgs, rimgs, rmasks = _t(imgs), _t(rimgs), _t(rmasks)
        oimgs, omasks = _t(oimgs), _t(omasks)
        with torch.no_grad():
            pred = self._segment(imgs, rimgs, rmasks)
        out = []
        for side in self.sides:
            critic, opt = self.critics[side], self.critic_opts[side]
            fake = make_fake_triplet(imgs, pred, side)
            real = make_real_triplet(oimgs, omasks, side)
            pseudo = None
            if self.cfg.pseudo_triplet:
                lo, hi = self.radius_range
                radii = self.rng.integers(lo, hi + 1, size=n)
                pseudo = make_pseudo_triplet(oimgs, omasks, radii, side, self.radius_range, self.cfg.pseudo_morph)
            eps = torch.rand(n, generator=self.gen)
            loss = critic_loss(critic, fake, pseudo, real, eps, self.cfg.lam, side)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite {side} critic loss at step {self.step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            out.append(self._emit({"event": "critic", "step": self.step, "critic": side,
                                   "update": update_index, "loss": loss.item()}))
        return out

    def segmenter_update(self) -> dict:
        cfg, w = self.cfg, self.weights
        for c in self.critics.values():
            c.requires_grad_(False)
        try:
            parts = self._seg_parts()
            total = total_seg_loss(parts, w)
            self.seg_opt.zero_grad(set_to_none=True)
            total.backward()
            self.seg_opt.step()
        finally:
            for c in self.critics.values():
                c.requires_grad_(True)
        rec = {"event": "segmenter", "step": self.step, "total": total.item(), **parts.as_floats()}
        self.step += 1
        return self._emit(rec)

    def _seg_parts(self) -> SegLossParts:
        cfg, w = self.cfg, self.weights
        parts = SegLossParts()
        rng = self.rng
        if w.xi > 0:
            imgs, masks, rimgs, rmasks, _ = self.sampler.supervised_pairs(rng, self.batch)
            pred = self._segment(_t(imgs), _t(rimgs), _t(rmasks))
            parts.dice = dice_loss(pred[:, 0], _t(masks), w.tau)
        if w.zeta > 0 or w.eta > 0 or self.critics:
            imgs, rimgs, rmasks, neg, _ = self.sampler.target_pairs(rng, self.target_batch)
            imgs, rimgs, rmasks = _t(imgs), _t(rimgs), _t(rmasks)
            pos = torch.from_numpy(~neg)
            pred, ref_vec = self._segment(imgs, rimgs, rmasks, return_ref=True)
            if w.zeta > 0 and pos.any():
                parts.rep = self._representation_loss(imgs[pos], pred[pos], ref_vec[pos])
            if w.eta > 0:
                A = sample_affine(rng, self.affine_ranges)
                parts.sel = self_supervision_loss(self._segment, imgs, rimgs, rmasks, A, cfg.sel_radius, pred=pred)
            if pos.any():
                for side in self.sides:
                    fake = make_fake_triplet(imgs[pos], pred[pos], side)
                    score = critic_score(self.critics[side], fake).mean()
                    setattr(parts, f"d_{side}", score)
        return parts

    def _representation_loss(self, imgs, pred, ref_vec):
        """MMD between segmented-object and reference embeddings.

        With ``mmd_stop_grad`` the encoder acts as a fixed feature map here:
        gradients reach the soft mask through the masked input but not the
        encoder weights, which could otherwise shrink the loss by making
        every embedding identical.
        """
        if not self.cfg.mmd_stop_grad:
            return mmd_loss(self.model.pooled(pred * imgs, pred), ref_vec)
        enc = self.model.encoder
        flags = [p.requires_grad for p in enc.parameters()]
        enc.requires_grad_(False)
        try:
            obj_vec = self.model.pooled(pred * imgs, pred)
        finally:
            for p, f in zip(enc.parameters(), flags):
                p.requires_grad_(f)
        return mmd_loss(obj_vec, ref_vec.detach())

    # -- schedule --------------------------------------------------------

    def iteration(self):
        """One unit of the alternating schedule in ``ratio`` mode."""
        for j in range(self.cfg.n_critic):
            self.critic_update(j)
        return self.segmenter_update()

    def run(self, max_iterations=None):
        stop = self.cfg.max_iterations if max_iterations is None else max_iterations
        every = max(1, self.cfg.checkpoint_every)
        try:
            while self.step < stop:
                if self.cfg.alternation == "ratio":
                    self.iteration()
                else:
                    if self.critics:
                        for j in range(self.cfg.n_critic):
                            self.critic_update(j)
                    for _ in range(min(self.cfg.n_critic, stop - self.step)):
                        self.segmenter_update()
                if self.out_dir is not None and self.step % every == 0:
                    self.save()
        except FloatingPointError as exc:
            self._emit({"event": "abort", "step": self.step, "reason": str(exc)})
            raise TrainingDiverged(f"training diverged at step {self.step}: {exc}") from exc
        if self.out_dir is not None:
            self.save()
        return self

    # -- persistence -----------------------------------------------------

    def state(self) -> dict:
        return {
            "arch": dataclasses.asdict(self.arch),
            "train_config": dataclasses.asdict(self.cfg),
            "model": self.model.state_dict(),
            "critics": {s: c.state_dict() for s, c in self.critics.items()},
            "seg_opt": self.seg_opt.state_dict(),
            "critic_opts": {s: o.state_dict() for s, o in self.critic_opts.items()},
            "np_rng": self.rng.bit_generator.state,
            "torch_gen": self.gen.get_state(),
            "step": self.step,
            "references": {c: [self.data.records[i]["id"] for i in self.data.references(c)]
                           for c in self.data.target_categories},
        }

    def save(self, path=None):
        path = Path(path) if path is not None else self.out_dir / CHECKPOINT_NAME
        tmp = path.with_suffix(".tmp")
        save_checkpoint(tmp, self.state())
        tmp.replace(path)
        return path

    def load_state(self, ckpt: dict):
        if ckpt["arch"] != dataclasses.asdict(self.arch):
            raise ValueError(f"architecture mismatch: checkpoint {ckpt['arch']} vs config {dataclasses.asdict(self.arch)}")
        self.model.load_state_dict(ckpt["model"])
        self.seg_opt.load_state_dict(ckpt["seg_opt"])
        for s, c in self.critics.items():
            c.load_state_dict(ckpt["critics"][s])
            self.critic_opts[s].load_state_dict(ckpt["critic_opts"][s])
        self.rng.bit_generator.state = ckpt["np_rng"]
        self.gen.set_state(ckpt["torch_gen"])
        self.step = ckpt["step"]


def read_log(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def train(cfg: TrainConfig, arch: ArchConfig, data: SegDataset, out_dir=None, resume: bool = False,
          max_iterations=None) -> Trainer:
    """Build a trainer and run it; with ``resume`` continue from ``out_dir``'s checkpoint."""
    trainer = Trainer(cfg, arch, data, out_dir)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt_path = out / CHECKPOINT_NAME
        log_path = out / LOG_NAME
        if resume and ckpt_path.exists():
            trainer.load_state(load_checkpoint(ckpt_path))
            kept = [r for r in read_log(log_path) if r["step"] < trainer.step] if log_path.exists() else []
            with open(log_path, "w") as f:
                for r in kept:
                    f.write(json.dumps(r, sort_keys=True) + "\n")
            log.info("resumed from step %d", trainer.step)
        else:
            log_path.write_text("")
            trainer.save()
    return trainer.run(max_iterations)

"""Binary segmentation metrics and the held-out evaluation protocol."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .data import SegDataset

THRESHOLD = 0.5


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def confusion_counts(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def metrics_from_counts(c: ConfusionCounts) -> dict:
    """PA, MPA, MIoU and FWIoU over the {background, object} classes.

    A class that appears in neither prediction nor ground truth is left out
    of the MPA and MIoU means; a class absent from the ground truth has no
    pixel accuracy and is left out of MPA.
    """
    n = c.total
    if n == 0:
        raise ValueError("cannot compute metrics from empty counts")
    # per class: (true positives, gt count, predicted count)
    classes = {"background": (c.tn, c.tn + c.fp, c.tn + c.fn), "object": (c.tp, c.tp + c.fn, c.tp + c.fp)}
    acc, iou, fw = [], {}, 0.0
    for name, (hit, gt_n, pred_n) in classes.items():
        if gt_n == 0 and pred_n == 0:
            continue
        union = gt_n + pred_n - hit
        iou[name] = hit / union
        if gt_n:
            acc.append(hit / gt_n)
        fw += gt_n / n * iou[name]
    return {
        "PA": (c.tp + c.tn) / n,
        "MPA": float(np.mean(acc)),
        "MIoU": float(np.mean(list(iou.values()))),
        "FWIoU": fw,
        "IoU_object": iou.get("object"),
        "IoU_background": iou.get("background"),
    }


def _block(counts: ConfusionCounts) -> dict:
    return {**metrics_from_counts(counts), "counts": asdict(counts)}


@torch.no_grad()
def predict_batch(model, images, ref_images, ref_masks) -> np.ndarray:
    model.eval()
    out = model(torch.from_numpy(images), torch.from_numpy(ref_images), torch.from_numpy(ref_masks))
    return out[:, 0].numpy()


def evaluate(model, data: SegDataset, split: str = "heldout", reference: str = "first",
             oracle: bool = False, batch: int = 32) -> dict:
    """Segment every (image, present category) pair of ``split`` and score it.

    ``reference="first"`` conditions on the first reference record of the
    category; ``"average"`` averages the soft masks over all references.
    ``oracle=True`` replaces the model by the ground truth (test hook).
    """
    if reference not in ("first", "average"):
        raise ValueError(f"unknown reference mode {reference!r}")
    cats = data.target_categories
    refs = {}
    for c in cats:
        idx = data.references(c)
        if not idx:
            raise ValueError(f"category {c!r} has no reference sample")
        refs[c] = idx[:1] if reference == "first" else idx
    per_cat = {c: ConfusionCounts() for c in cats}
    jobs = [(i, c) for i in data.split(split) for c in data.records[i]["categories"]]
    for c in cats:
        todo = [i for i, cc in jobs if cc == c]
        for s in range(0, len(todo), batch):
            chunk = todo[s:s + batch]
            gts = np.stack([data.mask(i, c) for i in chunk])
            if oracle:
                soft = gts.astype(np.float32)
            else:
                imgs = np.stack([data.images[i].transpose(2, 0, 1) for i in chunk]).astype(np.float32)
                soft = 0.0
                for r in refs[c]:
                    rimg = np.repeat(data.images[r].transpose(2, 0, 1)[None], len(chunk), 0).astype(np.float32)
                    rmask = np.repeat(data.mask(r, c)[None].astype(np.float32), len(chunk), 0)
                    soft = soft + predict_batch(model, imgs, rimg, rmask)
                soft = soft / len(refs[c])
            for pred, gt in zip(soft >= THRESHOLD, gts):
                per_cat[c] = per_cat[c] + confusion_counts(pred, gt)
    total = ConfusionCounts()
    for c in cats:
        total = total + per_cat[c]
    return {
        "split": split,
        "reference": reference,
        "n_pairs": len(jobs),
        "overall": _block(total),
        "per_category": {c: _block(per_cat[c]) for c in cats if per_cat[c].total},
    }


def write_report(report: dict, path):
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


def summary_line(report: dict) -> str:
    m = report["overall"]
    return f"PA={m['PA']:.4f} MPA={m['MPA']:.4f} MIoU={m['MIoU']:.4f} FWIoU={m['FWIoU']:.4f}"

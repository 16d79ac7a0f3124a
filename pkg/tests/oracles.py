"""Slow, obviously-correct reference implementations used only by the tests."""
import itertools

import numpy as np


def strel_oracle(r):
    return {(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= r * r}


def dilate_oracle(m, r):
    h, w = m.shape
    offs = strel_oracle(r)
    out = np.zeros_like(m)
    for y, x in itertools.product(range(h), range(w)):
        out[y, x] = any(0 <= y + dy < h and 0 <= x + dx < w and m[y + dy, x + dx] for dy, dx in offs)
    return out


def erode_oracle(m, r):
    h, w = m.shape
    offs = strel_oracle(r)
    out = np.zeros_like(m)
    for y, x in itertools.product(range(h), range(w)):
        # outside pixels read as 1
        out[y, x] = all(not (0 <= y + dy < h and 0 <= x + dx < w) or m[y + dy, x + dx] for dy, dx in offs)
    return out


def translate_dilate(m, r):
    """Union of the mask shifted by every strel offset (set definition, no convolution)."""
    m = np.asarray(m).astype(bool)
    h, w = m.shape
    out = np.zeros_like(m)
    for dy, dx in strel_oracle(r):
        # out[y, x] |= m[y + dy, x + dx] where the source is inside the frame
        ys, xs = slice(max(0, -dy), min(h, h - dy)), slice(max(0, -dx), min(w, w - dx))
        ys2, xs2 = slice(max(0, dy), min(h, h + dy)), slice(max(0, dx), min(w, w + dx))
        out[ys, xs] |= m[ys2, xs2]
    return out.astype(np.uint8)


def translate_erode(m, r):
    """Intersection of shifted copies; samples outside the frame count as inside the mask."""
    m = np.asarray(m).astype(bool)
    h, w = m.shape
    out = np.ones_like(m)
    for dy, dx in strel_oracle(r):
        shifted = np.ones_like(m)
        ys, xs = slice(max(0, -dy), min(h, h - dy)), slice(max(0, -dx), min(w, w - dx))
        ys2, xs2 = slice(max(0, dy), min(h, h + dy)), slice(max(0, dx), min(w, w + dx))
        shifted[ys, xs] = m[ys2, xs2]
        out &= shifted
    return out.astype(np.uint8)


def weight_map_oracle(soft, r):
    b = (np.asarray(soft) >= 0.5).astype(np.uint8)
    return dilate_oracle(b, r) - erode_oracle(b, r)


def counts_oracle(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(np.asarray(pred).ravel().tolist(), np.asarray(gt).ravel().tolist()):
        if p and g:
            tp += 1
        elif p and not g:
            fp += 1
        elif not p and g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def metrics_oracle(pred, gt):
    """Per-pixel counting over the two classes, written independently of the package."""
    pred = np.asarray(pred).astype(bool).ravel()
    gt = np.asarray(gt).astype(bool).ravel()
    n = pred.size
    correct = sum(1 for p, g in zip(pred, gt) if p == g)
    accs, ious, fw = [], [], 0.0
    for cls in (False, True):
        in_gt = sum(1 for g in gt if g == cls)
        in_pred = sum(1 for p in pred if p == cls)
        both = sum(1 for p, g in zip(pred, gt) if p == cls and g == cls)
        either = sum(1 for p, g in zip(pred, gt) if p == cls or g == cls)
        if either == 0:
            continue
        ious.append(both / either)
        if in_gt:
            accs.append(both / in_gt)
        fw += in_gt / n * (both / either)
    return {"PA": correct / n, "MPA": sum(accs) / len(accs), "MIoU": sum(ious) / len(ious), "FWIoU": fw}

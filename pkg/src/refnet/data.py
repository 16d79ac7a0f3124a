"""Synthetic shape scenes, the on-disk dataset format and batch sampling.

Dataset directory layout::

    <root>/images/<id>.png              RGB, 8-bit, lossless
    <root>/masks/<category>/<id>.png    single channel, 0 or 255
    <root>/index.jsonl                  one record per image
    <root>/dataset.json                 categories and the generating config

Index records look like ``{"id": ..., "path": ..., "masks": {cat: path},
"categories": [...], "split": ..., "ref_category": ...}``. ``split`` is one of
``target`` (unlabelled for training; masks kept for evaluation only),
``reference`` (K annotated samples per target category, ``ref_category`` set),
``open_source`` (annotated, category-disjoint) or ``heldout``.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .morphology import AffineRanges, apply_affine, sample_affine

SPLITS = ("target", "reference", "open_source", "heldout")
SUPERSAMPLE = 4

DEFAULT_PALETTE = {
    "circle": (0.90, 0.25, 0.20),
    "square": (0.20, 0.55, 0.90),
    "triangle": (0.25, 0.80, 0.30),
    "cross": (0.90, 0.80, 0.20),
    "star": (0.75, 0.30, 0.85),
    "ring": (0.20, 0.85, 0.85),
    "diamond": (0.95, 0.55, 0.15),
    "hexagon": (0.55, 0.40, 0.25),
}
SHAPES = tuple(DEFAULT_PALETTE)


@dataclass
class ShapeSceneSpec:
    size: int = 64
    categories: list = field(default_factory=lambda: ["circle", "square", "triangle"])
    objects_per_scene: tuple = (1, 3)
    object_size: tuple = (0.22, 0.40)   # diameter as a fraction of the canvas
    color_jitter: float = 0.10
    noise: float = 0.04
    palette: dict = field(default_factory=dict)  # overrides DEFAULT_PALETTE
    random_colors: bool = False  # draw each instance's base colour from the whole palette

    def color(self, category):
        return self.palette.get(category, DEFAULT_PALETTE[category])

    def validate(self):
        unknown = [c for c in self.categories if c not in SHAPES]
        if unknown:
            raise ValueError(f"unknown shape categories {unknown}; known: {list(SHAPES)}")
        lo, hi = self.objects_per_scene
        if lo < 0 or hi < lo:
            raise ValueError(f"bad objects_per_scene {self.objects_per_scene}")
        if self.object_size[0] * self.size < 4 or self.object_size[1] > 1.0:
            raise ValueError(f"canvas {self.size}px too small for object size range {self.object_size}")


@dataclass
class ShapeInstance:
    category: str
    center: tuple   # (x, y) in pixels
    radius: float   # pixels
    angle: float = 0.0  # degrees
    color: tuple = (1.0, 1.0, 1.0)


def _polygon(n, radius, angle, cx, cy, inner=None):
    pts = []
    k = 2 * n if inner else n
    for i in range(k):
        th = math.radians(angle) + 2 * math.pi * i / k - math.pi / 2
        rr = radius if not inner or i % 2 == 0 else radius * inner
        pts.append((cx + rr * math.cos(th), cy + rr * math.sin(th)))
    return pts


def _cross(radius, angle, cx, cy, arm=0.35):
    a = radius * arm
    r = radius
    base = [(-a, -r), (a, -r), (a, -a), (r, -a), (r, a), (a, a), (a, r), (-a, r), (-a, a), (-r, a), (-r, -a), (-a, -a)]
    th = math.radians(angle)
    c, s = math.cos(th), math.sin(th)
    return [(cx + c * x - s * y, cy + s * x + c * y) for x, y in base]


def _draw(draw: ImageDraw.ImageDraw, inst: ShapeInstance, scale: int):
    cx, cy = inst.center[0] * scale + (scale - 1) / 2, inst.center[1] * scale + (scale - 1) / 2
    r = inst.radius * scale
    cat = inst.category
    if cat == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
    elif cat == "ring":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
        ri = 0.5 * r
        draw.ellipse([cx - ri, cy - ri, cx + ri, cy + ri], fill=0)
    elif cat == "square":
        draw.polygon(_polygon(4, r, inst.angle + 45, cx, cy), fill=255)
    elif cat == "diamond":
        draw.polygon(_polygon(4, r, inst.angle, cx, cy), fill=255)
    elif cat == "triangle":
        draw.polygon(_polygon(3, r, inst.angle, cx, cy), fill=255)
    elif cat == "hexagon":
        draw.polygon(_polygon(6, r, inst.angle, cx, cy), fill=255)
    elif cat == "star":
        draw.polygon(_polygon(5, r, inst.angle, cx, cy, inner=0.45), fill=255)
    elif cat == "cross":
        draw.polygon(_cross(r, inst.angle, cx, cy), fill=255)
    else:
        raise ValueError(f"unknown shape {cat!r}")


def rasterize(inst: ShapeInstance, size: int) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of one shape on a size x size canvas."""
    big = Image.new("L", (size * SUPERSAMPLE, size * SUPERSAMPLE), 0)
    _draw(ImageDraw.Draw(big), inst, SUPERSAMPLE)
    cov = np.asarray(big, dtype=np.float64) / 255.0
    return cov.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def _background(spec: ShapeSceneSpec, rng):
    base = rng.uniform(0.05, 0.35, size=3)
    tilt = rng.uniform(-0.08, 0.08, size=(2, 3))
    yy, xx = np.meshgrid(np.linspace(-1, 1, spec.size), np.linspace(-1, 1, spec.size), indexing="ij")
    return base + yy[..., None] * tilt[0] + xx[..., None] * tilt[1]


def sample_instances(spec: ShapeSceneSpec, rng: np.random.Generator) -> list[ShapeInstance]:
    lo, hi = spec.objects_per_scene
    n = int(rng.integers(lo, hi + 1))
    out: list[ShapeInstance] = []
    for _ in range(n):
        cat = spec.categories[int(rng.integers(len(spec.categories)))]
        radius = 0.5 * spec.size * rng.uniform(*spec.object_size)
        # a few tries to keep objects from piling onto each other
        for _attempt in range(20):
            c = rng.uniform(radius * 0.8, spec.size - radius * 0.8, size=2)
            if all(np.hypot(*(c - np.array(o.center))) > 0.8 * (radius + o.radius) for o in out):
                break
        base = spec.color(SHAPES[int(rng.integers(len(SHAPES)))] if spec.random_colors else cat)
        color = np.clip(np.array(base) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), 0, 1)
        out.append(ShapeInstance(cat, (float(c[0]), float(c[1])), float(radius),
                                 float(rng.uniform(0, 360)), tuple(color)))
    return out


def render_scene(spec: ShapeSceneSpec, instances, rng: np.random.Generator):
    """Paint ``instances`` in order; later shapes occlude earlier ones."""
    img = _background(spec, rng)
    masks = {c: np.zeros((spec.size, spec.size), np.uint8) for c in spec.categories}
    owner = np.full((spec.size, spec.size), -1)
    for i, inst in enumerate(instances):
        cov = rasterize(inst, spec.size)
        img = img * (1 - cov[..., None]) + cov[..., None] * np.asarray(inst.color)
        owner[cov >= 0.5] = i
    for i, inst in enumerate(instances):
        masks[inst.category] |= (owner == i).astype(np.uint8)
    img = img + rng.normal(0, spec.noise, img.shape)
    img = np.clip(img, 0, 1).astype(np.float32)
    return img, [(c, masks[c]) for c in spec.categories]


def generate_scene(spec: ShapeSceneSpec, rng: np.random.Generator, instances=None):
    """Random scene: an (H, W, 3) image in [0, 1] and one (category, mask)
    pair per category in ``spec.categories`` (all-zero when the category is absent)."""
    spec.validate()
    if instances is None:
        instances = sample_instances(spec, rng)
    return render_scene(spec, instances, rng)


# --------------------------------------------------------------------------
# on-disk datasets


@dataclass
class DataConfig:
    size: int = 64
    target_categories: list = field(default_factory=lambda: ["circle", "square", "triangle"])
    open_categories: list = field(default_factory=lambda: ["diamond", "hexagon", "star"])
    n_target: int = 200
    n_open: int = 300
    n_heldout: int = 60
    k: int = 10
    objects_per_scene: tuple = (1, 3)
    object_size: tuple = (0.22, 0.40)
    noise: float = 0.04
    color_jitter: float = 0.10
    require_disjoint: bool = True
    open_random_colors: bool = True  # open-source colours carry no category information

    def spec(self, categories, random_colors=False) -> ShapeSceneSpec:
        return ShapeSceneSpec(self.size, list(categories), tuple(self.objects_per_scene),
                              tuple(self.object_size), self.color_jitter, self.noise,
                              random_colors=random_colors)


def _save_png(arr: np.ndarray, path: Path):
    if arr.ndim == 3:
        Image.fromarray(np.round(arr * 255).astype(np.uint8), "RGB").save(path)
    else:
        Image.fromarray((arr > 0).astype(np.uint8) * 255, "L").save(path)


def build_splits(cfg: DataConfig, out_dir, seed: int = 0) -> list[dict]:
    """Generate all splits under ``out_dir`` and return the index records."""
    overlap = set(cfg.target_categories) & set(cfg.open_categories)
    if cfg.require_disjoint and overlap:
        raise ValueError(f"target and open-source categories overlap: {sorted(overlap)}")
    if cfg.k < 0:
        raise ValueError("k must be >= 0")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    target_spec = cfg.spec(cfg.target_categories)
    open_spec = cfg.spec(cfg.open_categories, random_colors=cfg.open_random_colors)
    records: list[dict] = []

    def add(split, spec, idx, ref_category=None, require=None):
        # regenerate until the scene contains ``require`` (reference samples)
        while True:
            img, masks = generate_scene(spec, rng)
            masks = [(c, m) for c, m in masks if m.any()]
            cats = [c for c, _ in masks]
            if require is None or require in cats:
                break
        rid = f"{split}_{idx:05d}"
        path = f"images/{rid}.png"
        _save_png(img, out / path)
        mpaths = {}
        for c, m in masks:
            (out / "masks" / c).mkdir(parents=True, exist_ok=True)
            mpaths[c] = f"masks/{c}/{rid}.png"
            _save_png(m, out / mpaths[c])
        rec = {"id": rid, "path": path, "masks": mpaths, "categories": cats, "split": split}
        if ref_category is not None:
            rec["ref_category"] = ref_category
        records.append(rec)

    n = 0
    for c in cfg.target_categories:
        for _ in range(cfg.k):
            add("reference", target_spec, n, ref_category=c, require=c)
            n += 1
    for i in range(cfg.n_target):
        add("target", target_spec, i)
    for i in range(cfg.n_open):
        add("open_source", open_spec, i)
    for i in range(cfg.n_heldout):
        add("heldout", target_spec, i)

    write_index(out / "index.jsonl", records)
    meta = {"target_categories": list(cfg.target_categories),
            "open_categories": list(cfg.open_categories),
            "seed": seed, "config": asdict(cfg)}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return records


def write_index(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_index(path) -> list[dict]:
    with open(path) as f:
        recs = [json.loads(line) for line in f if line.strip()]
    for r in recs:
        if r.get("split") not in SPLITS:
            raise ValueError(f"record {r.get('id')} has unknown split {r.get('split')!r}")
    return recs


def index_checksum(records) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(json.dumps(r, sort_keys=True).encode())
    return h.hexdigest()


def load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def load_mask(path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.uint8)


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("REFNET_NUM_WORKERS", "1")))
    except ValueError:
        return 1


class SegDataset:
    """In-memory view of a dataset directory.

    Masks are decoded lazily through :meth:`mask`, which reports every read
    to ``audit`` when one is installed; training code must never read masks
    of ``target`` or ``heldout`` records.
    """

    def __init__(self, root, records=None, audit=None):
        self.root = Path(root)
        self.records = records if records is not None else read_index(self.root / "index.jsonl")
        meta_path = self.root / "dataset.json"
        self.meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        self.audit = audit
        with ThreadPoolExecutor(max_workers=num_workers()) as pool:
            self.images = list(pool.map(lambda r: load_image(self.root / r["path"]), self.records))
        self._masks: dict[tuple, np.ndarray] = {}
        self.by_id = {r["id"]: i for i, r in enumerate(self.records)}

    def __len__(self):
        return len(self.records)

    def split(self, name) -> list[int]:
        return [i for i, r in enumerate(self.records) if r["split"] == name]

    @property
    def target_categories(self) -> list[str]:
        if "target_categories" in self.meta:
            return list(self.meta["target_categories"])
        return sorted({r["ref_category"] for r in self.records if r["split"] == "reference"})

    def mask(self, i: int, category: str) -> np.ndarray:
        rec = self.records[i]
        if self.audit is not None:
            self.audit(rec, category)
        key = (i, category)
        if key not in self._masks:
            p = rec["masks"].get(category)
            if p is None:
                h, w = self.images[i].shape[:2]
                self._masks[key] = np.zeros((h, w), np.uint8)
            else:
                self._masks[key] = load_mask(self.root / p)
        return self._masks[key]

    def references(self, category, k=None) -> list[int]:
        idx = [i for i in self.split("reference") if self.records[i]["ref_category"] == category]
        return idx if k is None else idx[:k]

    def subsample_references(self, k: int) -> "SegDataset":
        """Keep only the first ``k`` reference records of each category."""
        keep, seen = [], {}
        for r in self.records:
            if r["split"] == "reference":
                c = r["ref_category"]
                seen[c] = seen.get(c, 0) + 1
                if seen[c] > k:
                    continue
            keep.append(r)
        sub = object.__new__(SegDataset)
        sub.root, sub.meta, sub.audit, sub.records = self.root, self.meta, self.audit, keep
        sub.images = [self.images[self.by_id[r["id"]]] for r in keep]
        sub._masks = {}
        sub.by_id = {r["id"]: i for i, r in enumerate(keep)}
        return sub


# --------------------------------------------------------------------------
# augmentation and batches


@dataclass
class AugmentPolicy:
    enabled: bool = True
    affine: AffineRanges = field(default_factory=AffineRanges)
    brightness: float = 0.1
    contrast: float = 0.1


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy | None = None):
    """Same geometric warp on both inputs, photometric jitter on the image only."""
    policy = policy or AugmentPolicy()
    if not policy.enabled:
        return image, mask
    A = sample_affine(rng, policy.affine)
    img = apply_affine(np.ascontiguousarray(image.transpose(2, 0, 1)), A, "bilinear").transpose(1, 2, 0)
    m = apply_affine(mask, A, "nearest")
    b = rng.uniform(-policy.brightness, policy.brightness)
    c = rng.uniform(1 - policy.contrast, 1 + policy.contrast)
    img = np.clip((img - 0.5) * c + 0.5 + b, 0, 1).astype(np.float32)
    return img, (m > 0).astype(mask.dtype)


@dataclass
class Batch:
    # (image, reference) pairs from the unlabelled target split; no GT
    target_images: np.ndarray
    target_ref_images: np.ndarray
    target_ref_masks: np.ndarray
    target_negative: np.ndarray
    target_categories: list
    # annotated pairs drawn from the reference split, for Dice supervision
    sup_images: np.ndarray
    sup_masks: np.ndarray
    sup_ref_images: np.ndarray
    sup_ref_masks: np.ndarray
    sup_negative: np.ndarray
    # open-source annotated samples for real / pseudo triplets
    open_images: np.ndarray
    open_masks: np.ndarray


class BatchSampler:
    """Draws training batches; never touches masks of target images."""

    def __init__(self, data: SegDataset, neg_ratio: float = 0.25, augment_policy: AugmentPolicy | None = None):
        if not 0.0 <= neg_ratio <= 1.0:
            raise ValueError(f"neg_ratio must lie in [0, 1], got {neg_ratio}")
        self.data = data
        self.neg_ratio = neg_ratio
        self.policy = augment_policy or AugmentPolicy()
        self.categories = data.target_categories
        self.refs = {c: data.references(c) for c in self.categories}
        missing = [c for c, r in self.refs.items() if not r]
        if missing:
            raise ValueError(f"no reference samples for categories {missing}")
        self.target = data.split("target")
        self.labeled = data.split("reference")
        self.open = [(i, c) for i in data.split("open_source") for c in data.records[i]["categories"]]
        if not self.target or not self.open:
            raise ValueError("target and open-source splits must be non-empty")

    def _pick_category(self, rng, present, negative):
        pool = [c for c in self.categories if (c in present) != negative]
        if not pool:
            return None
        return pool[int(rng.integers(len(pool)))]

    def _reference(self, rng, category, exclude=None):
        pool = [i for i in self.refs[category] if i != exclude] or self.refs[category]
        i = pool[int(rng.integers(len(pool)))]
        return self.data.images[i], self.data.mask(i, category)

    def _pair(self, rng, indices, neg_ratio=None):
        ratio = self.neg_ratio if neg_ratio is None else neg_ratio
        negative = bool(rng.random() < ratio)
        while True:
            i = indices[int(rng.integers(len(indices)))]
            cat = self._pick_category(rng, self.data.records[i]["categories"], negative)
            if cat is not None:
                return i, cat, negative

    def target_pairs(self, rng, n, neg_ratio=None):
        imgs, rimgs, rmasks, neg, cats = [], [], [], [], []
        for _ in range(n):
            i, cat, negative = self._pair(rng, self.target, neg_ratio)
            ri, rm = self._reference(rng, cat)
            imgs.append(self.data.images[i])
            rimgs.append(ri)
            rmasks.append(rm)
            neg.append(negative)
            cats.append(cat)
        return _chw(imgs), _chw(rimgs), np.stack(rmasks).astype(np.float32), np.array(neg), cats

    def supervised_pairs(self, rng, n):
        imgs, masks, rimgs, rmasks, neg = [], [], [], [], []
        for _ in range(n):
            i, cat, negative = self._pair(rng, self.labeled)
            img, m = augment(self.data.images[i], self.data.mask(i, cat), rng, self.policy)
            ri, rm = self._reference(rng, cat, exclude=i)
            imgs.append(img)
            masks.append(m)
            rimgs.append(ri)
            rmasks.append(rm)
            neg.append(negative)
        return (_chw(imgs), np.stack(masks).astype(np.float32), _chw(rimgs),
                np.stack(rmasks).astype(np.float32), np.array(neg))

    def open_pairs(self, rng, n):
        imgs, masks = [], []
        for _ in range(n):
            i, c = self.open[int(rng.integers(len(self.open)))]
            imgs.append(self.data.images[i])
            masks.append(self.data.mask(i, c))
        return _chw(imgs), np.stack(masks).astype(np.float32)

    def sample(self, rng, batch: int, n_target=None, n_open=None) -> Batch:
        n_target = batch if n_target is None else n_target
        n_open = batch if n_open is None else n_open
        t = self.target_pairs(rng, n_target)
        s = self.supervised_pairs(rng, batch)
        o = self.open_pairs(rng, n_open)
        return Batch(*t, *s, *o)


def _chw(images) -> np.ndarray:
    return np.ascontiguousarray(np.stack(images).transpose(0, 3, 1, 2)).astype(np.float32)


def sample_training_batch(data: SegDataset, rng, batch: int, neg_ratio: float = 0.25, policy=None) -> Batch:
    return BatchSampler(data, neg_ratio, policy).sample(rng, batch)

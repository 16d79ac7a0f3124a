"""Command-line entry point: ``refnet <command> [options]``.

Commands: gen-data, train, eval, predict, sweep. Exit codes are 0 on
success, 2 on usage errors and 1 on runtime failures.

Config files are YAML with optional ``data``, ``arch`` and ``train``
sections mirroring :class:`DataConfig`, :class:`ArchConfig` and
:class:`TrainConfig`. ``--set section.field=value`` overrides a single
field (value parsed as YAML) and always wins over the file.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from PIL import Image

from .config import ABLATIONS, PRESETS, ExperimentConfig, config_from_dict, config_to_dict, dump_config
from .data import SegDataset, build_splits, load_image, load_mask
from .evaluate import evaluate, summary_line, write_report
from .model import load_checkpoint, model_from_checkpoint
from .train import CHECKPOINT_NAME, LOG_NAME, read_log, train

log = logging.getLogger("refnet")


class UsageError(Exception):
    pass


# -- config handling ----------------------------------------------------------


def build_config(args) -> ExperimentConfig:
    base = PRESETS[getattr(args, "preset", "default") or "default"]()
    d = config_to_dict(base)
    if getattr(args, "config", None):
        loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        if not isinstance(loaded, dict):
            raise UsageError(f"{args.config}: expected a mapping at top level")
        for section, fields in loaded.items():
            if section not in d:
                raise UsageError(f"unknown config section {section!r}")
            d[section].update(fields or {})
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in d:
            raise UsageError(f"--set expects section.field=value, got {item!r}")
        if name not in d[section]:
            raise UsageError(f"unknown field {key!r}")
        d[section][name] = yaml.safe_load(raw)
    try:
        return config_from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# -- plots ------------------------------------------------------------------


def plot_losses(log_path, out_png):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    recs = [r for r in read_log(log_path) if r["event"] == "segmenter"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("total", "dice", "rep", "sel", "d_outer", "d_inner"):
        ys = [r[key] for r in recs]
        if any(ys):
            ax.plot([r["step"] for r in recs], ys, label=key, lw=0.8)
    ax.set_xlabel("segmenter step")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_iou(report, out_png):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cats = sorted(report["per_category"])
    vals = [report["per_category"][c]["IoU_object"] or 0.0 for c in cats]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(cats, vals)
    ax.set_ylim(0, 1)
    ax.set_ylabel("object IoU")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args):
    cfg = build_config(args)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeError(f"cannot create {out}: {exc}") from exc
    recs = build_splits(cfg.data, out, seed=args.seed)
    print(f"wrote {len(recs)} records to {out}")


def _train_config(args, cfg: ExperimentConfig):
    train_cfg = cfg.train
    if args.ablate:
        train_cfg = train_cfg.ablate(*args.ablate)
    if args.k is not None:
        train_cfg = dataclasses.replace(train_cfg, k=args.k)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    if args.max_iterations is not None:
        train_cfg = dataclasses.replace(train_cfg, max_iterations=args.max_iterations)
    return train_cfg


def cmd_train(args):
    cfg = build_config(args)
    train_cfg = _train_config(args, cfg)
    data = SegDataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    full = ExperimentConfig(cfg.data, cfg.arch, train_cfg)
    (out / "config.yaml").write_text(dump_config(full))
    trainer = train(train_cfg, cfg.arch, data, out, resume=args.resume)
    print(f"trained to step {trainer.step}; checkpoint {out / CHECKPOINT_NAME}")
    if args.plot:
        plot_losses(out / LOG_NAME, out / "losses.png")


def _load_model(path, arch=None):
    ckpt = load_checkpoint(path)
    return model_from_checkpoint(ckpt, arch), ckpt


def cmd_eval(args):
    data = SegDataset(args.data)
    model = None
    if not args.oracle_stub:
        arch = build_config(args).arch if args.config else None
        model, _ = _load_model(args.checkpoint, arch)
    report = evaluate(model, data, split=args.split, reference=args.reference, oracle=args.oracle_stub)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        write_report(report, args.report)
    print(summary_line(report))
    if args.plot:
        plot_iou(report, args.plot)


def _pad_to(x: torch.Tensor, stride: int):
    h, w = x.shape[-2:]
    ph, pw = (-h) % stride, (-w) % stride
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return x, (h, w)


def cmd_predict(args):
    model, _ = _load_model(args.checkpoint)
    model.eval()
    img = torch.from_numpy(load_image(args.image).transpose(2, 0, 1))[None]
    rimg = torch.from_numpy(load_image(args.reference_image).transpose(2, 0, 1))[None]
    rmask = torch.from_numpy(load_mask(args.reference_mask).astype(np.float32))[None, None]
    if rmask.shape[-2:] != rimg.shape[-2:]:
        raise ValueError("reference image and mask sizes differ")
    stride = model.arch.stride
    if any(s % stride for s in (*img.shape[-2:], *rimg.shape[-2:])):
        warnings.warn(f"input size not divisible by {stride}; padding by reflection and cropping back")
    img, (h, w) = _pad_to(img, stride)
    rimg, _ = _pad_to(rimg, stride)
    rmask, _ = _pad_to(rmask, stride)
    with torch.no_grad():
        soft = model(img, rimg, rmask)[0, 0, :h, :w].numpy()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(((soft >= 0.5) * 255).astype(np.uint8), "L").save(out)
    if args.soft_out:
        np.save(args.soft_out, soft.astype(np.float32))
    print(f"wrote {out} ({h}x{w}, foreground {float((soft >= 0.5).mean()):.4f})")


def cmd_sweep(args):
    """Train one run per ablation (or per target-category count) and tabulate."""
    cfg = build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if args.categories:
        cats = cfg.data.target_categories
        for n in range(1, len(cats) + 1):
            sub = dataclasses.replace(cfg.data, target_categories=cats[:n])
            ddir = out / f"data_{n}"
            build_splits(sub, ddir, seed=args.seed)
            data = SegDataset(ddir)
            trainer = train(cfg.train, cfg.arch, data, out / f"run_{n}")
            rep = evaluate(trainer.model, data, reference=cfg.train.eval_reference)
            write_report(rep, out / f"run_{n}" / "report.json")
            rows.append({"run": f"{n} categories", "MIoU": rep["overall"]["MIoU"],
                         **{c: v["IoU_object"] for c, v in rep["per_category"].items()}})
    else:
        data = SegDataset(args.data)
        for name in ["full", *args.ablations]:
            tcfg = cfg.train if name == "full" else cfg.train.ablate(name)
            trainer = train(tcfg, cfg.arch, data, out / name)
            rep = evaluate(trainer.model, data, reference=cfg.train.eval_reference)
            write_report(rep, out / name / "report.json")
            rows.append({"run": name, **{k: rep["overall"][k] for k in ("PA", "MPA", "MIoU", "FWIoU")}})
    (out / "sweep.json").write_text(json.dumps(rows, indent=2) + "\n")
    keys = list(dict.fromkeys(k for r in rows for k in r))
    print("\t".join(keys))
    for r in rows:
        print("\t".join(f"{r[k]:.4f}" if isinstance(r.get(k), float) else str(r.get(k, "")) for k in keys))


# -- parser -----------------------------------------------------------------


def _common(p, config=True):
    if config:
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--preset", choices=sorted(PRESETS), default="default", help="base configuration")
        p.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE", help="override one field")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refnet", description="Reference-guided segmentation on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    _common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the segmenter and critics")
    _common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), default=[],
                   help="switch off one component (repeatable)")
    t.add_argument("--k", type=int, help="labelled references per category")
    t.add_argument("--seed", type=int)
    t.add_argument("--max-iterations", type=int)
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    t.add_argument("--plot", action="store_true", help="write losses.png next to the log")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a split")
    _common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--report")
    e.add_argument("--split", default="heldout")
    e.add_argument("--reference", choices=["first", "average"], default="first")
    e.add_argument("--oracle-stub", action="store_true", help="score the ground truth itself (test hook)")
    e.add_argument("--plot", help="write a per-category IoU bar chart to this file")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="segment one image given a reference")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--reference-image", required=True)
    r.add_argument("--reference-mask", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--soft-out", help="also save the soft mask as .npy")
    r.set_defaults(func=cmd_predict)

    s = sub.add_parser("sweep", help="ablation or incremental-category sweep")
    _common(s)
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--ablations", nargs="*", choices=sorted(ABLATIONS), default=["dice", "inner", "outer"])
    s.add_argument("--categories", action="store_true", help="sweep the number of target categories")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and not args.oracle_stub and not args.checkpoint:
        parser.error("eval needs --checkpoint unless --oracle-stub is given")
    if args.command == "sweep" and not args.categories and not args.data:
        parser.error("sweep needs --data unless --categories is given")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"refnet: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"refnet: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

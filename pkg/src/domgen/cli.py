"""Command-line entry point: ``domgen {generate,train,evaluate,features}``.

Configuration is resolved as preset -> ``--config`` file -> command-line flags,
and the result is written to ``config.resolved.json`` in every output
directory.  Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import DatasetError, DomainLabel, Split, filter_images, generate_synthetic_dataset, load_dataset, write_dataset
from .model import ConfigError, ModelConfig

log = logging.getLogger("domgen")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(args, section_overrides: dict | None = None) -> dict:
    """Merge preset, config file and flag overrides into one run config."""
    from .train import load_preset

    cfg = load_preset(args.preset)
    cfg.setdefault("seed", 0)
    if args.config:
        path = Path(args.config)
        try:
            cfg = _merge(cfg, json.loads(path.read_text()))
        except FileNotFoundError as exc:
            raise UsageError(f"config file {path} does not exist") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if args.seed is not None:
        cfg["seed"] = args.seed
    for sec, vals in (section_overrides or {}).items():
        cfg[sec] = _merge(cfg.get(sec, {}), {k: v for k, v in vals.items() if v is not None})
    cfg["preset"] = args.preset
    return cfg


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty; pass --force to write into it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, cfg: dict) -> None:
    (out / "config.resolved.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")


def _load_images(path):
    if path is None:
        raise UsageError("--data is required")
    return load_dataset(path)


def _dense_domains(images, keep_ids):
    """Keep the given domains and renumber them 0..k-1 in ascending id order."""
    keep_ids = sorted(set(keep_ids))
    remap = {}
    for new, old in enumerate(keep_ids):
        src = next((im.domain for im in images if im.domain.id == old), None)
        if src is None:
            raise DatasetError(f"dataset has no domain with id {old}")
        remap[old] = DomainLabel(new, src.name, src.labeled)
    return [replace(im, domain=remap[im.domain.id]) for im in images if im.domain.id in remap]


# --------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = resolve_config(args, {"data": {
        "num_domains": args.domains, "images_per_domain": args.images, "image_size": args.image_size,
        "unlabeled_domains": args.unlabeled,
    }})
    d = cfg["data"]
    bad = [u for u in d["unlabeled_domains"] if not 0 <= u < d["num_domains"]]
    if bad:
        raise UsageError(f"--unlabeled ids {bad} outside 0..{d['num_domains'] - 1}")
    out = _prepare_out(args.out, args.force)
    images = generate_synthetic_dataset(
        d["num_domains"], d["images_per_domain"], d["image_size"], tuple(d["objects_per_image_range"]),
        unlabeled_domains=d["unlabeled_domains"], seed=cfg["seed"],
    )
    write_dataset(images, out)
    _write_resolved(out, {"command": "generate", **cfg})
    digest = hashlib.sha256((out / "dataset.json").read_bytes()).hexdigest()[:16]
    print(f"wrote {len(images)} images to {out} (manifest sha256 {digest})")
    for dom in sorted({im.domain for im in images}, key=lambda x: x.id):
        rows = [im for im in images if im.domain == dom]
        per_split = {s.value: sum(im.split == s for im in rows) for s in Split}
        n_mit = sum(len(im.mitoses) for im in rows)
        tag = "labeled" if dom.labeled else "unlabeled"
        print(f"  domain {dom.id} {dom.name:12s} {tag:9s} images={len(rows)} {per_split} mitoses={n_mit}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import TrainConfig, fit

    cfg = resolve_config(args, {"train": {
        "mode": args.mode, "epochs": args.epochs, "steps_per_epoch": args.steps_per_epoch,
        "max_lr": args.max_lr, "num_workers": args.workers,
    }})
    if args.data is not None:
        cfg["dataset"] = str(args.data)
    if args.holdout is not None:
        cfg["holdout"] = list(args.holdout)
    cfg.setdefault("holdout", [])
    images = _load_images(cfg.get("dataset"))
    all_ids = sorted({im.domain.id for im in images})
    train_ids = [i for i in all_ids if i not in set(cfg["holdout"])]
    if not train_ids:
        raise UsageError("--holdout removes every domain")
    images = _dense_domains(images, train_ids)
    cfg["train"]["seed"] = cfg["seed"]
    cfg["model"]["num_domains"] = len(train_ids)
    try:
        tc = TrainConfig.from_dict(cfg["train"])
        mc = ModelConfig.from_dict(cfg["model"])
    except TypeError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    out = _prepare_out(args.out, args.force)
    _write_resolved(out, {"command": "train", **cfg})
    progress = print if not args.quiet else None
    res = fit(images, mc, tc, out, progress=progress)
    print(
        f"best epoch {res.best.epoch} val_mean_aucpr={res.best.val_mean_aucpr:.4f} "
        f"operating_point={res.operating_point:.4f} -> {out / 'best.ckpt'}"
    )
    return EXIT_OK


def _checkpoint_domains(meta) -> list[dict]:
    return meta.get("extra", {}).get("domains", [])


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_predictions, save_predictions, predict, domain_curves, match_all, select_operating_point
    from .model import load_checkpoint
    from .plots import plot_bootstrap, plot_pr_curves

    cfg = resolve_config(args, {"eval": {"radius_px": args.radius, "n_resamples": args.resamples}})
    ev = cfg["eval"]
    model, meta = load_checkpoint(args.checkpoint)
    extra = meta.get("extra", {})
    normalize = bool(extra.get("normalize", False))
    images = _load_images(args.data)
    test = filter_images(images, split=Split(args.split))
    if not test:
        raise DatasetError(f"dataset {args.data} has no {args.split} images")
    seen = [d["name"] for d in _checkpoint_domains(meta)]

    op = args.operating_point
    op_source = "flag"
    if op is None and "operating_point" in extra:
        op, op_source = float(extra["operating_point"]), "checkpoint"
    if op is None:
        val = [im for im in filter_images(images, split=Split.VALIDATION) if im.domain.labeled and im.domain.name in seen]
        if not val:
            raise UsageError(
                "no operating point stored in the checkpoint and no validation data for its domains; "
                "pass --operating-point"
            )
        curves = domain_curves(match_all(predict(model, val, normalize=normalize), val, ev["radius_px"]), val)
        if not curves:
            raise UsageError("validation data has no mitoses; pass --operating-point")
        op, op_source = select_operating_point(curves), "validation"

    out = _prepare_out(args.out, args.force)
    cfg.update({"command": "evaluate", "checkpoint": str(args.checkpoint), "dataset": str(args.data),
                "split": args.split, "operating_point": op})
    _write_resolved(out, cfg)
    preds = predict(model, test, normalize=normalize)
    save_predictions(preds, out / "predictions.json")
    report = evaluate_predictions(
        preds, test, op, radius_px=ev["radius_px"], n_resamples=ev["n_resamples"], rng=cfg["seed"], seen_domains=seen,
    )
    report.write(out / "report.json")
    plot_pr_curves(report.curves, out / "pr_curves.png", {k: v.get("seen", True) for k, v in report.per_domain.items()})
    plot_bootstrap(report.bootstrap, out / "bootstrap_f1.png")

    print(f"operating point {op:.4f} ({op_source}), radius {ev['radius_px']:g}px")
    print(f"{'domain':14s} {'group':7s} {'prec':>7s} {'recall':>7s} {'f1':>7s} {'aucpr':>7s}")
    for name, row in report.per_domain.items():
        group = "seen" if row.get("seen") else "unseen"
        auc = "-" if row["aucpr"] is None else f"{row['aucpr']:.4f}"
        print(f"{name:14s} {group:7s} {row['precision']:7.4f} {row['recall']:7.4f} {row['f1']:7.4f} {auc:>7s}")
    a = report.aggregate
    print(f"{'all':14s} {'':7s} {a['precision']:7.4f} {a['recall']:7.4f} {a['f1']:7.4f} {report.mean_aucpr:7.4f}")
    return EXIT_OK


def cmd_features(args) -> int:
    from .evaluation import domain_probe, export_features, project_2d
    from .model import load_checkpoint
    from .plots import plot_feature_scatter

    cfg = resolve_config(args, {"eval": {"patches_per_image": args.patches}})
    model, meta = load_checkpoint(args.checkpoint)
    normalize = bool(meta.get("extra", {}).get("normalize", False))
    images = _load_images(args.data)
    subset = filter_images(images, split=Split(args.split))
    if not subset:
        raise DatasetError(f"dataset {args.data} has no {args.split} images")
    out = _prepare_out(args.out, args.force)
    cfg.update({"command": "features", "checkpoint": str(args.checkpoint), "dataset": str(args.data), "split": args.split})
    _write_resolved(out, cfg)
    rng = np.random.default_rng(cfg["seed"])
    feats = export_features(model, subset, cfg["eval"]["patches_per_image"], rng, normalize=normalize)
    feats.write_csv(out / "features.csv")
    proj = project_2d(feats)
    names = {im.domain.id: im.domain.name for im in subset}
    plot_feature_scatter(proj, out / "features_2d.png", names)
    n_dom = len(np.unique(feats.domain_ids))
    print(f"wrote {len(feats)} feature rows to {out / 'features.csv'}")
    if n_dom >= 2:
        acc = domain_probe(feats, 0.5, rng)
        (out / "probe.json").write_text(json.dumps({"accuracy": acc, "num_domains": n_dom, "chance": 1.0 / n_dom}) + "\n")
        print(f"probe accuracy {acc:.4f} chance=1/{n_dom}={1.0 / n_dom:.4f}")
    else:
        print("probe skipped: features cover a single domain")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _global_flags(parser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="JSON config merged over the preset")
    parser.add_argument("--seed", type=int, default=d(None), help="random seed")
    parser.add_argument("--out", "-o", default=d(None), help="output directory")
    parser.add_argument("--preset", choices=("desk", "paper"), default=d("desk"))
    parser.add_argument("--force", action="store_true", default=d(False), help="write into a non-empty --out")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="domgen", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    _global_flags(ap, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic multi-domain dataset")
    g.add_argument("--domains", type=_positive_int)
    g.add_argument("--images", type=_positive_int, help="images per domain")
    g.add_argument("--image-size", type=_positive_int)
    g.add_argument("--unlabeled", type=int, nargs="*", help="domain ids without annotations")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train a detector")
    t.add_argument("--data", help="dataset directory (or 'dataset' in --config)")
    t.add_argument("--mode", choices=("reference", "strong", "weak"))
    t.add_argument("--holdout", type=int, nargs="*", help="domain ids to leave out of training")
    t.add_argument("--epochs", type=_positive_int)
    t.add_argument("--steps-per-epoch", type=_positive_int)
    t.add_argument("--max-lr", type=_positive_float)
    t.add_argument("--workers", type=_positive_int, help="batch-building threads")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=[s.value for s in Split], default="test")
    e.add_argument("--radius", type=_positive_float, help="matching radius in pixels")
    e.add_argument("--operating-point", type=float)
    e.add_argument("--resamples", type=_positive_int, help="bootstrap resamples")
    e.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("features", parents=[common], help="export encoder features and run the domain probe")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--split", choices=[s.value for s in Split], default="test")
    f.add_argument("--patches", type=_positive_int, help="patches per image")
    f.set_defaults(func=cmd_features)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.out is None:
        parser.error("--out is required")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"domgen {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DatasetError, ValueError, KeyError, OSError) as exc:
        print(f"domgen {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line pipeline driver.

Subcommands cover the full workflow: ``phantom gen`` writes a synthetic
dataset, ``preprocess`` turns polar frames into Cartesian tissue scenes,
``train`` fits a network, ``segment`` applies a checkpoint, ``crossval``
runs the k-fold protocol, and ``eval`` scores prediction maps against
ground truth.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
divergence during training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, dataset, imagefiles
from .errors import (
    ConfigError,
    OctPlaqueError,
    PhantomSpecError,
    TrainingDivergenceError,
)
from .evaluation import (
    confusion_matrix,
    cross_validate,
    evaluate_scene,
    format_report,
    make_overlay,
    overall_accuracy,
    segment_image,
    write_confusion_csv,
)
from .network import build_plaquenet, load_checkpoint
from .phantom import PhantomSpec, generate_dataset, load_phantom_spec
from .preprocess import extract_tissue_scene
from .training import TrainConfig, load_train_config, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


def _default_seed(value: int | None) -> int:
    """Explicit flag wins; OCT_PLAQNET_SEED is the environment fallback."""
    if value is not None:
        return value
    env = os.environ.get("OCT_PLAQNET_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"OCT_PLAQNET_SEED={env!r} is not an integer")
    return 0


def write_manifest(out_dir, command: str, args: dict) -> None:
    """Record everything needed to reproduce the run, before it starts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "octplaque",
        "version": __version__,
        "command": command,
        "arguments": {k: str(v) if isinstance(v, Path) else v
                      for k, v in args.items()},
        "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "numpy_version": np.__version__,
        "argv": sys.argv[1:],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _resolve_train_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config is not None:
        cfg = load_train_config(args.config, cfg)
    overrides = {}
    for name in ("learning_rate", "momentum", "batch_size", "max_iterations",
                 "augmentation_period", "validation_period", "optimizer_mode",
                 "val_patches_per_image"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    overrides["seed"] = _default_seed(args.seed)
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def cmd_phantom_gen(args) -> int:
    spec = PhantomSpec()
    if args.spec is not None:
        if not Path(args.spec).exists():
            raise ConfigError(f"spec file not found: {args.spec}")
        spec = load_phantom_spec(args.spec)
    else:
        spec.validate()
    seed = _default_seed(args.seed)
    write_manifest(args.out, "phantom gen",
                   {"spec": args.spec, "count": args.count, "seed": seed,
                    "resolved_spec": {**asdict(spec)}})
    ids = generate_dataset(spec, args.count, args.out, seed)
    print(f"wrote {len(ids)} phantom(s) to {args.out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    stems = dataset.polar_stems(args.in_dir)
    if not stems:
        raise OctPlaqueError(f"no .pgm images found in {args.in_dir}")
    write_manifest(args.out, "preprocess",
                   {"in": args.in_dir, "out": args.out, "images": len(stems)})
    ok, failed = 0, 0
    for stem in stems:
        try:
            polar, labels = dataset.load_polar(args.in_dir, stem)
            scene = extract_tissue_scene(polar, labels)
            dataset.save_scene(scene, args.out, stem)
            ok += 1
        except OctPlaqueError as exc:
            failed += 1
            print(f"skipping {stem}: {exc}", file=sys.stderr)
    print(f"preprocessed {ok}/{len(stems)} image(s)")
    if ok == 0:
        raise OctPlaqueError("all images failed preprocessing")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    stems, scenes = dataset.load_scenes(args.data)
    labeled = [s for s in scenes if s.labels is not None]
    if not labeled:
        raise OctPlaqueError(f"no labeled scenes in {args.data}")
    out = Path(args.out)
    write_manifest(out, "train",
                   {"data": args.data, "images": len(labeled),
                    "config": asdict(cfg)})
    net = build_plaquenet(seed=cfg.seed)
    res = train(
        net, labeled, labeled, cfg,
        checkpoint_path=out / "checkpoint.bin",
        log_path=out / "train_log.csv",
        progress=_make_progress(args.quiet),
    )
    print(f"best validation accuracy {res.best_val_accuracy:.4f} "
          f"at iteration {res.best_iteration}")
    return EXIT_OK


def _make_progress(quiet: bool):
    if quiet:
        return None

    def progress(row):
        if row.get("val_accuracy", "") != "":
            print(f"iter {row['iteration'] + 1}: loss {row['loss']:.4f} "
                  f"val_acc {row['val_accuracy']:.4f}", flush=True)
        elif "fold" in row:
            print(f"fold {row['fold']}: accuracy {row['fold_accuracy']:.4f}",
                  flush=True)
    return progress


def _load_net(checkpoint_path):
    net, metadata = load_checkpoint(checkpoint_path)
    return net, metadata


def cmd_segment(args) -> int:
    net, _ = _load_net(args.checkpoint)
    stems, scenes = dataset.load_scenes(args.data)
    out = Path(args.out)
    write_manifest(out, "segment",
                   {"checkpoint": args.checkpoint, "data": args.data,
                    "images": len(stems)})
    pooled = None
    for stem, scene in zip(stems, scenes):
        pred = segment_image(net, scene)
        imagefiles.write_pgm(pred, out / f"{stem}_pred.pgm")
        imagefiles.write_rgb(make_overlay(scene, pred), out / f"{stem}_overlay.png")
        if scene.labels is not None:
            cm = confusion_matrix(scene.labels[scene.mask], pred[scene.mask])
            pooled = cm if pooled is None else pooled + cm
    if pooled is not None:
        (out / "report.txt").write_text(format_report(pooled) + "\n")
        write_confusion_csv(pooled, out / "confusion.csv")
        print(format_report(pooled))
    else:
        print(f"segmented {len(stems)} image(s)")
    return EXIT_OK


def cmd_crossval(args) -> int:
    cfg = _resolve_train_config(args)
    stems, scenes = dataset.load_scenes(args.data)
    labeled = [s for s in scenes if s.labels is not None]
    if len(labeled) < args.folds:
        raise OctPlaqueError(
            f"need at least {args.folds} labeled scenes, found {len(labeled)}"
        )
    out = Path(args.out)
    write_manifest(out, "crossval",
                   {"data": args.data, "folds": args.folds,
                    "config": asdict(cfg)})
    cv = cross_validate(labeled, cfg, n_folds=args.folds,
                        net_seed=cfg.seed, fold_seed=cfg.seed,
                        progress=_make_progress(args.quiet))
    for fr in cv.folds:
        write_confusion_csv(fr.confusion, out / f"fold{fr.fold}_confusion.csv")
        (out / f"fold{fr.fold}_report.txt").write_text(
            format_report(fr.confusion) + "\n"
        )
    write_confusion_csv(cv.pooled_confusion, out / "confusion.csv")
    (out / "report.txt").write_text(format_report(cv.pooled_confusion) + "\n")
    print(format_report(cv.pooled_confusion))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.checkpoint is not None:
        net, _ = _load_net(args.checkpoint)
        stems, scenes = dataset.load_scenes(args.data)
        labeled = [(st, sc) for st, sc in zip(stems, scenes) if sc.labels is not None]
        if not labeled:
            raise OctPlaqueError(f"no labeled scenes in {args.data}")
        write_manifest(args.out, "eval",
                       {"checkpoint": args.checkpoint, "data": args.data})
        pooled = None
        for stem, scene in labeled:
            _, cm = evaluate_scene(net, scene)
            pooled = cm if pooled is None else pooled + cm
    else:
        # score existing prediction maps against ground truth
        stems, scenes = dataset.load_scenes(args.data)
        write_manifest(args.out, "eval",
                       {"predictions": args.predictions, "data": args.data})
        pooled = None
        for stem, scene in zip(stems, scenes):
            pred_path = Path(args.predictions) / f"{stem}_pred.pgm"
            if scene.labels is None or not pred_path.exists():
                continue
            pred = imagefiles.read_gray(pred_path)
            cm = confusion_matrix(scene.labels[scene.mask], pred[scene.mask])
            pooled = cm if pooled is None else pooled + cm
        if pooled is None:
            raise OctPlaqueError("no (prediction, label) pairs to score")
    out = Path(args.out)
    write_confusion_csv(pooled, out / "confusion.csv")
    (out / "report.txt").write_text(format_report(pooled) + "\n")
    print(format_report(pooled))
    return EXIT_OK


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-iterations", dest="max_iterations", type=int)
    p.add_argument("--augmentation-period", dest="augmentation_period", type=int)
    p.add_argument("--validation-period", dest="validation_period", type=int)
    p.add_argument("--optimizer-mode", dest="optimizer_mode",
                   choices=("standard", "convex"))
    p.add_argument("--val-patches-per-image", dest="val_patches_per_image", type=int)
    p.add_argument("--seed", type=int, default=None,
                   help="default: $OCT_PLAQNET_SEED, else 0")
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="octplaque",
        description="Plaque tissue characterization for intravascular "
                    "OCT pullback frames.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    phantom = sub.add_parser("phantom", help="synthetic dataset tools")
    phantom_sub = phantom.add_subparsers(dest="phantom_command", required=True)
    gen = phantom_sub.add_parser("gen", help="generate a labeled phantom set")
    gen.add_argument("--spec", help="phantom spec file (key = value)")
    gen.add_argument("--count", type=int, default=25)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=None)
    gen.set_defaults(func=cmd_phantom_gen)

    pre = sub.add_parser("preprocess", help="polar frames -> Cartesian scenes")
    pre.add_argument("--in", dest="in_dir", required=True)
    pre.add_argument("--out", required=True)
    pre.set_defaults(func=cmd_preprocess)

    tr = sub.add_parser("train", help="fit a network on preprocessed scenes")
    tr.add_argument("--data", required=True, help="preprocessed scene directory")
    tr.add_argument("--out", required=True)
    _add_train_flags(tr)
    tr.set_defaults(func=cmd_train)

    seg = sub.add_parser("segment", help="apply a checkpoint to scenes")
    seg.add_argument("--checkpoint", required=True)
    seg.add_argument("--data", required=True)
    seg.add_argument("--out", required=True)
    seg.set_defaults(func=cmd_segment)

    cv = sub.add_parser("crossval", help="k-fold cross-validation protocol")
    cv.add_argument("--data", required=True)
    cv.add_argument("--out", required=True)
    cv.add_argument("--folds", type=int, default=5)
    _add_train_flags(cv)
    cv.set_defaults(func=cmd_crossval)

    ev = sub.add_parser("eval", help="score predictions against ground truth")
    ev.add_argument("--data", required=True, help="scene directory with labels")
    ev.add_argument("--out", required=True)
    group = ev.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", help="segment then score with this model")
    group.add_argument("--predictions", help="directory of *_pred.pgm maps")
    ev.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; remap to our usage code
        return EXIT_USAGE if exc.code not in (0, None) else 0
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except TrainingDivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, PhantomSpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OctPlaqueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

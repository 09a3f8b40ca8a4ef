"""Command-line interface.

Subcommands cover the full workflow: scan a dataset, plan folds, fine-tune a
branch, build a fused model, train on one split, run cross-validation,
evaluate a checkpoint, render class-activation overlays and benchmark
inference latency. Settings resolve from a TOML file, CXRFUSION_* environment
variables and command-line flags, in that order of precedence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from cxrfusion.backbones import load_pretrained, supported_backbones, truncate_and_freeze
from cxrfusion.bench import benchmark_inference
from cxrfusion.config import Config, _parse_env_value, config_hash, load_config
from cxrfusion.data import load_and_preprocess, make_folds, scan_dataset, split_train_val
from cxrfusion.exceptions import CxrFusionError
from cxrfusion.fusion import VARIANTS, HeadConfig, build_ensemble, count_parameters
from cxrfusion.gradcam import DEFAULT_LAYER, SCORE_MODES, grad_cam, save_gradcam
from cxrfusion.labels import CLASS_NAMES
from cxrfusion.manifest import load_checkpoint, save_checkpoint
from cxrfusion.metrics import MetricsReport, build_report
from cxrfusion.training import (
    _prepare_branches,
    _resolve_weights,
    evaluate_entries,
    finetune,
    run_cross_validation,
    train_ensemble,
)

log = logging.getLogger(__name__)


def _print_table(csv_text: str) -> None:
    rows = [line.split(",") for line in csv_text.strip().splitlines()]
    widths = [max(len(row[i]) for row in rows if i < len(row))
              for i in range(max(len(r) for r in rows))]
    for row in rows:
        print("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())


def _print_report(report: MetricsReport) -> None:
    _print_table(report.to_csv())


def _config_from_args(args) -> Config:
    overrides: dict[str, object] = {}
    mapping = [
        ("root", "dataset.root", str),
        ("out", "output.dir", str),
        ("variant", "model.variant", None),
        ("weights", "model.weights", str),
        ("k", "folds.k", None),
        ("seed", "folds.seed", None),
        ("val_fraction", "folds.val_fraction", None),
        ("ci_n_mode", "report.ci_n_mode", None),
    ]
    for attr, dotted, conv in mapping:
        value = getattr(args, attr, None)
        if value is not None:
            overrides[dotted] = conv(value) if conv else value
    for pair in getattr(args, "set", None) or []:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise CxrFusionError(f"--set expects KEY=VALUE, got {pair!r}")
        overrides[key] = _parse_env_value(raw)
    return load_config(getattr(args, "config", None), overrides=overrides)


def _load_base_image(path: Path, size: int = 224) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB").resize((size, size), Image.Resampling.BILINEAR))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_scan(args) -> int:
    index = scan_dataset(args.root)
    for name, count in zip(CLASS_NAMES, index.class_counts()):
        print(f"{name:<16} {count:>6}")
    print(f"{'total':<16} {len(index):>6}")
    return 0


def cmd_folds(args) -> int:
    index = scan_dataset(args.root)
    plan = make_folds(index, k=args.k, seed=args.seed)
    out = Path(args.out)
    plan.save(out)
    print(f"wrote {out}")
    for fold, size in enumerate(plan.fold_sizes()):
        counts = [0] * len(CLASS_NAMES)
        for entry in plan.folds[fold]:
            counts[entry.label] += 1
        print(f"fold {fold}: {size} items {tuple(counts)}")
    return 0


def cmd_finetune(args) -> int:
    config = _config_from_args(args)
    index = scan_dataset(config.dataset_root)
    train_entries, val_entries = split_train_val(
        index.entries, config.val_fraction, seed=config.seed)
    backbone = load_pretrained(args.backbone, weights=config.weights, seed=config.seed)
    tuned, history = finetune(backbone, train_entries, val_entries,
                              hp=config.finetune, seed=config.seed,
                              augment_policy=config.augment)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    weights_path = out / f"{args.backbone}.pt"
    torch.save(tuned.model.state_dict(), weights_path)
    (out / f"{args.backbone}_history.json").write_text(
        json.dumps(history.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(f"wrote {weights_path}")
    if history.best_val_accuracy is not None:
        print(f"best validation accuracy: {history.best_val_accuracy:.4f}")
    return 0


def cmd_build(args) -> int:
    config = _config_from_args(args)
    names = VARIANTS[config.variant]
    branches = [
        truncate_and_freeze(load_pretrained(
            name, weights=_resolve_weights(config.weights, name), seed=config.seed))
        for name in names
    ]
    model = build_ensemble(branches, HeadConfig(kernel_size=config.head_kernel_size),
                           seed=config.seed)
    out = Path(config.out_dir)
    path, _ = save_checkpoint(out / f"{config.variant}.pt", model,
                              extra={"variant": config.variant, "config_sha256": config_hash(config)})
    total, trainable = count_parameters(model)
    print(f"wrote {path}")
    print(f"parameters: {total} total, {trainable} trainable")
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    index = scan_dataset(config.dataset_root)
    train_entries, val_entries = split_train_val(
        index.entries, config.val_fraction, seed=config.seed)
    generators = _prepare_branches(
        VARIANTS[config.variant], config.weights, config.finetune,
        train_entries, val_entries, seed=config.seed, augment_policy=config.augment)
    model = build_ensemble(list(generators),
                           HeadConfig(kernel_size=config.head_kernel_size), seed=config.seed)
    history = train_ensemble(model, train_entries, val_entries,
                             hp=config.ensemble, seed=config.seed,
                             augment_policy=config.augment)
    out = Path(config.out_dir)
    path, _ = save_checkpoint(
        out / "checkpoints" / f"{config.variant}.pt", model,
        extra={"variant": config.variant, "config_sha256": config_hash(config),
               "history": history.to_dict()})
    print(f"wrote {path}")
    if history.epoch_train_loss:
        print(f"epoch train loss: {[round(v, 4) for v in history.epoch_train_loss]}")
    if history.best_val_accuracy is not None:
        print(f"best validation accuracy: {history.best_val_accuracy:.4f}")
    return 0


def cmd_crossval(args) -> int:
    config = _config_from_args(args)
    report = run_cross_validation(
        config.dataset_root, config.out_dir,
        variant=config.variant, k=config.k, seed=config.seed,
        val_fraction=config.val_fraction, weights=config.weights,
        finetune_per_fold=config.finetune_per_fold,
        finetune_hp=config.finetune, ensemble_hp=config.ensemble,
        augment_policy=config.augment,
        head_config=HeadConfig(kernel_size=config.head_kernel_size),
        ci_n_mode=config.ci_n_mode,
    )
    for result in report.fold_results:
        print(f"fold {result.fold}: accuracy {result.accuracy:.4f} "
              f"({result.n_test} test items, {result.duration_s:.1f}s)")
    for failure in report.failures:
        print(f"fold {failure['fold']} FAILED: {failure['error']}", file=sys.stderr)
    if report.metrics is not None:
        print()
        _print_report(report.metrics)
    print(f"\nreports written under {Path(config.out_dir) / 'reports'}")
    return 1 if report.failures else 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    index = scan_dataset(args.root)
    confusion = evaluate_entries(model, index.entries, batch_size=args.batch_size)
    report = build_report(confusion, ci_n_mode=args.ci_n_mode)
    _print_report(report)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        if out.suffix == ".json":
            out.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
        else:
            out.write_text(report.to_csv(), encoding="utf-8")
        print(f"\nwrote {out}")
    return 0


def _parse_target(raw: str | None) -> int | None:
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        pass
    for idx, name in enumerate(CLASS_NAMES):
        if raw.casefold() == name.casefold():
            return idx
    raise CxrFusionError(
        f"unknown class {raw!r}; expected an index or one of {list(CLASS_NAMES)}")


def cmd_gradcam(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    image_path = Path(args.image)
    image = load_and_preprocess(image_path)
    cam = grad_cam(model, image,
                   class_index=_parse_target(args.target),
                   layer=args.layer, score_mode=args.score_mode)
    stem = Path(args.out) if args.out else image_path.with_name(image_path.stem + "_cam")
    base = _load_base_image(image_path)
    png, sidecar = save_gradcam(stem, cam, base, alpha=args.alpha,
                                extra={"image": str(image_path)})
    print(f"wrote {png} and {sidecar}")
    print(f"predicted: {CLASS_NAMES[cam.predicted]} "
          f"(mapped class: {CLASS_NAMES[cam.class_index]}, "
          f"{cam.score_mode} score {cam.score:.4f})")
    return 0


def cmd_bench(args) -> int:
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        label = Path(args.checkpoint).stem
    else:
        names = VARIANTS[args.variant]
        branches = [
            truncate_and_freeze(load_pretrained(
                name, weights=_resolve_weights(args.weights, name), seed=args.seed))
            for name in names
        ]
        model = build_ensemble(branches, seed=args.seed)
        label = args.variant
    index = scan_dataset(args.root)
    paths = [e.path for e in index.entries[:args.limit]]
    report = benchmark_inference(model, paths, warmup=args.warmup,
                                 repeats=args.repeats, label=label)
    print(report.summary())
    if args.out:
        path = report.save(args.out)
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cxrfusion",
        description="3-class chest radiograph classification with fused CNN branches.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress details")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    config_parent = argparse.ArgumentParser(add_help=False)
    config_parent.add_argument("--config", type=Path, help="TOML settings file")
    config_parent.add_argument("--set", action="append", metavar="KEY=VALUE",
                               help="override any setting by dotted key")
    config_parent.add_argument("--root", help="dataset root (class-per-directory tree)")
    config_parent.add_argument("--out", help="output directory")
    config_parent.add_argument("--seed", type=int, help="master seed")
    config_parent.add_argument("--weights",
                               help="'imagenet', 'random', a state-dict file or a directory "
                                    "of <backbone>.pt files")
    config_parent.add_argument("--val-fraction", dest="val_fraction", type=float,
                               help="fraction of the training pool held out for validation")

    p = sub.add_parser("scan", help="index a dataset tree and print class counts")
    p.add_argument("root")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("folds", help="write a stratified k-fold plan")
    p.add_argument("root")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="fold_plan.json")
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("finetune", parents=[config_parent],
                       help="fine-tune one backbone and save its weights")
    p.add_argument("--backbone", required=True, choices=supported_backbones())
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("build", parents=[config_parent],
                       help="assemble a fused model without training the head")
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("train", parents=[config_parent],
                       help="train a fused model on a single train/validation split")
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("crossval", parents=[config_parent],
                       help="run k-fold cross-validation and report pooled metrics")
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--k", type=int)
    p.add_argument("--ci-n-mode", dest="ci_n_mode", choices=("total", "per_class"))
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("eval", help="score a checkpoint on a labeled dataset tree")
    p.add_argument("checkpoint")
    p.add_argument("root")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--ci-n-mode", dest="ci_n_mode", choices=("total", "per_class"),
                   default="total")
    p.add_argument("--out", help="write the report (.json or .csv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcam", help="render a class-activation overlay for one image")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--target", help="class index or name (default: predicted class)")
    p.add_argument("--layer", default=DEFAULT_LAYER)
    p.add_argument("--score-mode", dest="score_mode", choices=SCORE_MODES, default="logit")
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--out", help="output stem (default: <image>_cam)")
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("bench", help="measure per-image inference latency")
    p.add_argument("--checkpoint")
    p.add_argument("--variant", choices=sorted(VARIANTS), default="cvdnet3")
    p.add_argument("--weights", default="random")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--root", required=True)
    p.add_argument("--limit", type=int, default=10, help="number of images to time")
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(message)s",
    )
    try:
        return args.func(args)
    except CxrFusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Fine-tuning, fused-head training and the k-fold cross-validation driver.

Protocol per fold: split the training pool into train/validation, fine-tune
each branch network end to end (optional), truncate and freeze the branches,
assemble the fused model, train its head, and score the held-out fold. Fold
confusion matrices are pooled before computing the final report so every
image in the dataset is counted exactly once as a test item.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from cxrfusion.backbones import (
    Backbone,
    classifier_parameter_names,
    load_pretrained,
    replace_classifier,
    truncate_and_freeze,
)
from cxrfusion.data import (
    AugmentPolicy,
    DatasetEntry,
    FoldPlan,
    make_folds,
    scan_dataset,
    split_train_val,
)
from cxrfusion.exceptions import CxrFusionError, EvaluationError, ModelBuildError
from cxrfusion.fusion import (
    VARIANTS,
    FusedClassifier,
    HeadConfig,
    build_ensemble,
    weighted_ce_from_logits,
)
from cxrfusion.labels import DEFAULT_CLASS_WEIGHTS, N_CLASSES
from cxrfusion.manifest import save_checkpoint, sha256_of_file
from cxrfusion.metrics import (
    ConfusionMatrix3,
    MetricsReport,
    build_report,
    sum_confusions,
)
from cxrfusion.optimize import Hyperparams, ImageBatches, TensorBatches, TrainHistory, fit
from cxrfusion.seeding import derive_seed

log = logging.getLogger(__name__)


def _loss_fn(class_weights: tuple[float, ...]):
    def loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return weighted_ce_from_logits(logits, labels, class_weights)
    return loss


# ---------------------------------------------------------------------------
# Stage 1: branch fine-tuning
# ---------------------------------------------------------------------------


def finetune(
    backbone: Backbone,
    train_entries,
    val_entries,
    hp: Hyperparams | None = None,
    seed: int = 0,
    augment_policy: AugmentPolicy | None = None,
) -> tuple[Backbone, TrainHistory]:
    """Fine-tune a full backbone classifier on the 3-class task.

    The classifier layer is replaced (seeded) if the backbone still has its
    original output width; replaced-layer parameters train at
    hp.new_layer_lr_factor times the base rate. hp.max_epochs=0 is a no-op
    that still marks the backbone as prepared for truncation.

    Returns:
        (finetuned backbone, history). The model object is shared with the
        input backbone; only the returned wrapper carries finetuned=True.
    """
    hp = (hp or Hyperparams.finetune_defaults()).validated()
    if backbone.num_classes != N_CLASSES:
        backbone = replace_classifier(backbone, N_CLASSES, seed=derive_seed(seed, "head-swap", backbone.spec.name))
    torch.manual_seed(derive_seed(seed, "finetune", backbone.spec.name))
    train = ImageBatches(train_entries, hp.batch_size, seed=derive_seed(seed, "finetune-batches", backbone.spec.name),
                         augment_policy=augment_policy, normalization=backbone.normalization)
    val = None
    if val_entries:
        val = ImageBatches(val_entries, hp.batch_size, normalization=backbone.normalization, shuffle=False)
    boosted = tuple(classifier_parameter_names(backbone))
    history = fit(backbone.model, train, val, hp, _loss_fn(hp.class_weights), boosted_prefixes=boosted)
    return dataclasses.replace(backbone, finetuned=True), history


# ---------------------------------------------------------------------------
# Stage 2: fused-head training
# ---------------------------------------------------------------------------


def _cached_features(model: FusedClassifier, entries, batch_size: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Concatenated branch features for a set of entries, computed once."""
    batches = ImageBatches(entries, batch_size, normalization=model.branches[0].normalization, shuffle=False)
    feats = []
    labels = []
    with torch.no_grad():
        for x, y in batches.batches(epoch=None):
            feats.append(model.features(x))
            labels.append(y)
    return torch.cat(feats), torch.cat(labels)


def train_ensemble(
    model: FusedClassifier,
    train_entries,
    val_entries,
    hp: Hyperparams | None = None,
    seed: int = 0,
    augment_policy: AugmentPolicy | None = None,
    cache_features: bool | None = None,
) -> TrainHistory:
    """Train the fused model's head; branches stay frozen throughout.

    When augmentation is off (policy None or identity) the branch features of
    every image are constant across epochs, so they are computed once and the
    head is trained on the cached maps. cache_features=None selects that
    automatically; forcing True under a non-identity policy is an error.
    """
    hp = (hp or Hyperparams.ensemble_defaults()).validated()
    static_inputs = augment_policy is None or augment_policy.is_identity()
    if cache_features is None:
        cache_features = static_inputs
    if cache_features and not static_inputs:
        raise ValueError("cache_features requires augmentation to be identity")

    torch.manual_seed(derive_seed(seed, "head-train"))
    loss_fn = _loss_fn(hp.class_weights)
    if cache_features:
        x_train, y_train = _cached_features(model, train_entries, hp.batch_size)
        train = TensorBatches(x_train, y_train, hp.batch_size, seed=derive_seed(seed, "head-batches"))
        val = None
        if val_entries:
            x_val, y_val = _cached_features(model, val_entries, hp.batch_size)
            val = TensorBatches(x_val, y_val, hp.batch_size, shuffle=False)
        return fit(model.head, train, val, hp, loss_fn)

    train = ImageBatches(train_entries, hp.batch_size, seed=derive_seed(seed, "head-batches"),
                         augment_policy=augment_policy, normalization=model.branches[0].normalization)
    val = None
    if val_entries:
        val = ImageBatches(val_entries, hp.batch_size, normalization=model.branches[0].normalization, shuffle=False)
    return fit(model, train, val, hp, loss_fn)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate_entries(model: FusedClassifier, entries, batch_size: int = 32) -> ConfusionMatrix3:
    """Confusion matrix of a model over labeled entries.

    Raises:
        EvaluationError: the entry list is empty.
    """
    entries = tuple(entries)
    if not entries:
        raise EvaluationError("evaluation set is empty")
    batches = ImageBatches(entries, batch_size, normalization=model.branches[0].normalization, shuffle=False)
    model.eval()
    refs = []
    preds = []
    with torch.no_grad():
        for x, y in batches.batches(epoch=None):
            preds.append(model(x).argmax(dim=1).numpy())
            refs.append(y.numpy())
    return ConfusionMatrix3.from_pairs(np.concatenate(refs), np.concatenate(preds))


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    n_train: int
    n_val: int
    n_test: int
    confusion: ConfusionMatrix3
    accuracy: float
    history: TrainHistory
    checkpoint: str | None
    duration_s: float

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "n_test": self.n_test,
            "confusion": self.confusion.counts.tolist(),
            "accuracy": self.accuracy,
            "history": self.history.to_dict(),
            "checkpoint": self.checkpoint,
            "duration_s": self.duration_s,
        }


@dataclass
class CVReport:
    """Pooled outcome of a k-fold run, with per-fold details and failures."""

    variant: str
    k: int
    seed: int
    fold_results: list[FoldResult] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    pooled: ConfusionMatrix3 | None = None
    metrics: MetricsReport | None = None

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "k": self.k,
            "seed": self.seed,
            "folds_completed": len(self.fold_results),
            "failures": self.failures,
            "pooled_confusion": None if self.pooled is None else self.pooled.counts.tolist(),
            "metrics": None if self.metrics is None else self.metrics.to_dict(),
            "folds": [r.to_dict() for r in self.fold_results],
        }

    def save(self, out_dir: Path | str) -> Path:
        """Write reports/cv_report.json (+ metrics.csv when metrics exist)."""
        reports = Path(out_dir) / "reports"
        reports.mkdir(parents=True, exist_ok=True)
        path = reports / "cv_report.json"
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        if self.metrics is not None:
            (reports / "metrics.csv").write_text(self.metrics.to_csv(), encoding="utf-8")
        return path


def _resolve_weights(weights: str | Path, name: str) -> str | Path:
    """Map a weights source to one branch: a directory means <dir>/<name>.pt."""
    if isinstance(weights, (str, Path)) and Path(weights).is_dir():
        return Path(weights) / f"{name}.pt"
    return weights


def _prepare_branches(
    names: tuple[str, ...],
    weights: str | Path,
    finetune_hp: Hyperparams,
    train_entries,
    val_entries,
    seed: int,
    augment_policy: AugmentPolicy | None,
):
    """Load, optionally fine-tune, then truncate and freeze each branch."""
    generators = []
    for name in names:
        backbone = load_pretrained(name, weights=_resolve_weights(weights, name),
                                   seed=derive_seed(seed, "branch-init", name))
        if finetune_hp.max_epochs > 0:
            backbone, history = finetune(backbone, train_entries, val_entries,
                                         hp=finetune_hp, seed=seed, augment_policy=augment_policy)
            log.info("fine-tuned %s: %d iterations, best val acc %s",
                     name, history.iterations, history.best_val_accuracy)
        generators.append(truncate_and_freeze(backbone))
    return generators


def run_cross_validation(
    dataset_root: Path | str,
    out_dir: Path | str,
    variant: str = "cvdnet3",
    k: int = 5,
    seed: int = 0,
    val_fraction: float = 0.10,
    weights: str | Path = "imagenet",
    finetune_per_fold: bool = True,
    finetune_hp: Hyperparams | None = None,
    ensemble_hp: Hyperparams | None = None,
    augment_policy: AugmentPolicy | None = None,
    head_config: HeadConfig | None = None,
    ci_n_mode: str = "total",
    extra_aliases: dict[str, int] | None = None,
) -> CVReport:
    """Full stratified k-fold cross-validation of one fused variant.

    Every fold trains from scratch; a fold failure is recorded and the
    remaining folds still run. finetune_per_fold=False fine-tunes the branch
    networks once on fold 0's training split and reuses the frozen generators
    everywhere, which is cheaper but lets fold-0 training images inform the
    features used when they later appear as test items; the per-fold default
    has no such leakage. Set finetune_hp.max_epochs=0 to skip fine-tuning.

    Writes folds/fold_plan.json, checkpoints/fold<i>.pt(+.json) and
    reports/cv_report.json + reports/metrics.csv under out_dir.

    Raises:
        ModelBuildError: unknown variant name.
        DatasetLayoutError, FoldPlanError: propagated from dataset scanning
            and fold planning, since no fold can run without them.
    """
    if variant not in VARIANTS:
        raise ModelBuildError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    names = VARIANTS[variant]
    finetune_hp = (finetune_hp or Hyperparams.finetune_defaults()).validated()
    ensemble_hp = (ensemble_hp or Hyperparams.ensemble_defaults()).validated()
    if augment_policy is None:
        augment_policy = AugmentPolicy()
    out_dir = Path(out_dir)

    index = scan_dataset(dataset_root, extra_aliases=extra_aliases)
    log.info("dataset: %d images, class counts %s", len(index), index.class_counts())
    plan = make_folds(index, k=k, seed=seed)
    plan_path = out_dir / "folds" / "fold_plan.json"
    plan.save(plan_path)
    plan_hash = sha256_of_file(plan_path)

    report = CVReport(variant=variant, k=k, seed=seed)
    shared_generators = None

    for fold in range(k):
        started = time.perf_counter()
        try:
            train_pool = plan.train_entries(fold)
            train_entries, val_entries = split_train_val(
                train_pool, fraction=val_fraction, seed=derive_seed(seed, "fold", fold))

            if finetune_per_fold or shared_generators is None:
                generators = _prepare_branches(
                    names, weights, finetune_hp, train_entries, val_entries,
                    seed=derive_seed(seed, "fold", fold) if finetune_per_fold else seed,
                    augment_policy=augment_policy)
                if not finetune_per_fold:
                    shared_generators = generators
            else:
                generators = shared_generators

            model = build_ensemble(list(generators), head_config, seed=derive_seed(seed, "fold", fold))
            history = train_ensemble(model, train_entries, val_entries, hp=ensemble_hp,
                                     seed=derive_seed(seed, "fold", fold),
                                     augment_policy=augment_policy)

            test_entries = plan.test_entries(fold)
            confusion = evaluate_entries(model, test_entries, batch_size=ensemble_hp.batch_size)
            checkpoint, _ = save_checkpoint(
                out_dir / "checkpoints" / f"fold{fold}.pt", model,
                extra={
                    "fold": fold,
                    "variant": variant,
                    "seed": seed,
                    "fold_plan_sha256": plan_hash,
                    "hyperparams": {"finetune": vars(finetune_hp), "ensemble": vars(ensemble_hp)},
                    "history": history.to_dict(),
                })
            result = FoldResult(
                fold=fold,
                n_train=len(train_entries),
                n_val=len(val_entries),
                n_test=len(test_entries),
                confusion=confusion,
                accuracy=confusion.micro_accuracy(),
                history=history,
                checkpoint=str(checkpoint),
                duration_s=time.perf_counter() - started,
            )
            report.fold_results.append(result)
            log.info("fold %d: accuracy %.4f over %d test items (%.1fs)",
                     fold, result.accuracy, result.n_test, result.duration_s)
        except CxrFusionError as exc:
            log.error("fold %d failed: %s", fold, exc)
            report.failures.append({"fold": fold, "type": type(exc).__name__, "error": str(exc)})

    if report.fold_results:
        report.pooled = sum_confusions([r.confusion for r in report.fold_results])
        report.metrics = build_report(report.pooled, ci_n_mode=ci_n_mode)
    report.save(out_dir)
    return report

"""Release acceptance checks, one per shipping criterion.

Every test prints a single PASS/FAIL line with the measured values (shown
under -s or -rA); the assert carries the same message. The full-scale
five-fold reproduction is optional: it needs the real dataset on disk and
serious compute, so it is gated behind CXRFUSION_DATASET__ROOT and skipped
everywhere else.
"""

import os
import time

import numpy as np
import pytest
import torch

from cxrfusion.backbones import BACKBONES, load_pretrained, truncate_and_freeze
from cxrfusion.bench import benchmark_inference
from cxrfusion.data import load_and_preprocess, make_folds, scan_dataset, split_train_val
from cxrfusion.fusion import (
    VARIANTS,
    build_ensemble,
    count_parameters,
    weighted_ce_from_logits,
)
from cxrfusion.labels import DEFAULT_CLASS_WEIGHTS
from cxrfusion.manifest import load_checkpoint
from cxrfusion.metrics import ConfusionMatrix3, ci_halfwidth, macro_average, per_class_metrics
from cxrfusion.optimize import Hyperparams, adam_param_groups
from cxrfusion.training import run_cross_validation, train_ensemble

from test_fusion import _pure_function_head, fd_relative_errors
from test_gradcam import PoolProbe, one_hot_channel_fc

from cxrfusion.gradcam import grad_cam

# Frozen reference rows: pooled five-fold confusion matrices and the macro
# percentages they must reproduce (tpr, ppv, spec, f1, acc).
REFERENCE_ROWS = {
    "efficientnetb0": (
        [[213, 6, 0], [3, 1314, 24], [2, 77, 1266]],
        {"tpr": 96.46, "ppv": 96.63, "spec": 97.66, "f1": 96.55, "acc": 97.43},
    ),
    "ensemble1": (
        [[215, 4, 0], [2, 1322, 17], [5, 74, 1266]],
        {"tpr": 96.96, "ppv": 96.65, "spec": 97.89, "f1": 96.81, "acc": 97.66},
    ),
    "ensemble3": (
        [[216, 3, 0], [2, 1324, 15], [4, 50, 1291]],
        {"tpr": 97.78, "ppv": 97.43, "spec": 98.48, "f1": 97.61, "acc": 98.30},
    ),
}

# (proportion, n, expected percent half-width at 95%)
CI_CASES = (
    (0.9830, 2905, 0.47),
    (0.9778, 2905, 0.53),
    (0.9761, 2905, 0.55),
    (0.9908, 581, 0.77),
)

BRANCH_CHANNELS = (
    ("squeezenet", 512),
    ("shufflenet", 544),
    ("mobilenetv2", 1280),
    ("efficientnetb0", 1280),
)

SMOKE_HP = Hyperparams(batch_size=4, max_epochs=3, learn_rate=1e-2,
                       validation_frequency=4)

DATASET_ENV = "CXRFUSION_DATASET__ROOT"


def check(tag: str, ok: bool, detail: str) -> None:
    print(f"{tag}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{tag}: {detail}"


@pytest.fixture(scope="module")
def generators():
    return {
        name: truncate_and_freeze(load_pretrained(name, weights="random", seed=11))
        for name in BACKBONES
    }


@pytest.fixture(scope="module")
def ensemble3(generators):
    return build_ensemble([generators[n] for n in VARIANTS["cvdnet3"]], seed=5)


def test_criterion_1_metrics_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for matrix, expected in REFERENCE_ROWS.values():
        cm = ConfusionMatrix3(counts=np.array(matrix, dtype=np.int64))
        macro = macro_average(per_class_metrics(cm))
        for key, value in expected.items():
            worst = max(worst, abs(getattr(macro, key) * 100.0 - value))
    elapsed = time.perf_counter() - t0
    check("criterion 1 metrics oracle",
          worst <= 0.05 and elapsed < 1.0,
          f"max deviation {worst:.4f} pp over {len(REFERENCE_ROWS)} matrices, {elapsed:.3f} s")


def test_criterion_2_confidence_intervals():
    worst = max(abs(ci_halfwidth(p, n) * 100.0 - expected) for p, n, expected in CI_CASES)
    check("criterion 2 confidence intervals",
          worst <= 0.01,
          f"max half-width deviation {worst:.4f} pp over {len(CI_CASES)} cases")


def test_criterion_3_shape_contract():
    t0 = time.perf_counter()
    x = torch.randn(1, 3, 224, 224, generator=torch.Generator().manual_seed(0))
    problems = []
    built = {}
    for name, channels in BRANCH_CHANNELS:
        built[name] = truncate_and_freeze(load_pretrained(name, weights="random", seed=11))
        with torch.no_grad():
            shape = tuple(built[name](x).shape)
        if shape != (1, channels, 7, 7):
            problems.append(f"{name} emitted {shape}")
    for variant, width in (("cvdnet1", 1792), ("cvdnet3", 2336)):
        model = build_ensemble([built[n] for n in VARIANTS[variant]], seed=7)
        with torch.no_grad():
            fused = tuple(model.features(x).shape)
            logits = tuple(model(x).shape)
        if fused != (1, width, 7, 7):
            problems.append(f"{variant} fused {fused}")
        if logits != (1, 3):
            problems.append(f"{variant} logits {logits}")
    elapsed = time.perf_counter() - t0
    check("criterion 3 shape contract",
          not problems and elapsed < 30.0,
          "; ".join(problems) or f"512/544/1280/1280 and 1792/2336 at 7x7, {elapsed:.1f} s")


def test_criterion_4_parameter_budget(ensemble3):
    total, trainable = count_parameters(ensemble3)
    relative = abs(total - 5_620_000) / 5_620_000
    head = ensemble3.head
    closed_form = head.config.trainable_param_count(head.in_channels)
    actual = sum(p.numel() for p in head.parameters())
    check("criterion 4 parameter budget",
          relative <= 0.10 and closed_form == actual == trainable,
          f"total {total:,} ({relative:.2%} from 5.62M), "
          f"head {actual:,} == closed form {closed_form:,}")


def test_criterion_5_freeze_and_gradient_contract(ensemble3):
    branch_state = {k: v.clone() for k, v in ensemble3.branches.state_dict().items()}
    head_state = {k: v.clone() for k, v in ensemble3.head.state_dict().items()}
    optimizer = torch.optim.Adam(adam_param_groups(
        ensemble3, Hyperparams(batch_size=4, max_epochs=1, learn_rate=1e-3)))
    x = torch.randn(4, 3, 224, 224, generator=torch.Generator().manual_seed(1))
    y = torch.tensor([0, 1, 2, 1])
    loss = weighted_ce_from_logits(ensemble3(x), y, DEFAULT_CLASS_WEIGHTS)
    loss.backward()
    optimizer.step()
    branches_frozen = all(
        torch.equal(v, branch_state[k])
        for k, v in ensemble3.branches.state_dict().items()
    )
    head_changed = any(
        not torch.equal(v, head_state[k])
        for k, v in ensemble3.head.state_dict().items()
    )
    # later criteria reuse this model, so put the head back as it was
    ensemble3.head.load_state_dict(head_state)
    ensemble3.zero_grad(set_to_none=True)

    torch.manual_seed(3)
    worst = 0.0
    for _ in range(20):
        head = _pure_function_head()
        x64 = torch.randn(3, 8, 7, 7, dtype=torch.float64)
        y64 = torch.randint(0, 3, (3,))
        worst = max(worst, max(fd_relative_errors(head, x64, y64)))
    check("criterion 5 freeze and gradient contract",
          branches_frozen and head_changed and worst <= 1e-3,
          f"branches frozen {branches_frozen}, head stepped {head_changed}, "
          f"max FD relative error {worst:.2e} over 20 instances")


def test_criterion_6_fold_hygiene(reference_size_index):
    plan = make_folds(reference_size_index, k=5, seed=9)
    again = make_folds(reference_size_index, k=5, seed=9)
    other = make_folds(reference_size_index, k=5, seed=10)

    fold_paths = [tuple(e.path for e in fold) for fold in plan.folds]
    sizes = [len(p) for p in fold_paths]
    disjoint = all(
        not set(fold_paths[i]) & set(fold_paths[j])
        for i in range(5) for j in range(i + 1, 5)
    )
    covered = len(set().union(*map(set, fold_paths))) == len(reference_size_index)
    spreads = []
    for label in range(3):
        counts = [sum(e.label == label for e in fold) for fold in plan.folds]
        spreads.append(max(counts) - min(counts))
    reproducible = fold_paths == [tuple(e.path for e in fold) for fold in again.folds]
    seed_sensitive = fold_paths != [tuple(e.path for e in fold) for fold in other.folds]
    check("criterion 6 fold hygiene",
          sizes == [581] * 5 and disjoint and covered
          and max(spreads) <= 1 and reproducible and seed_sensitive,
          f"sizes {sizes}, disjoint {disjoint}, covered {covered}, "
          f"class spread <= {max(spreads)}, reproducible {reproducible}")


def test_criterion_7_training_smoke(generators, separable_tree):
    t0 = time.perf_counter()
    index = scan_dataset(separable_tree)
    train, val = split_train_val(index.entries, 0.2, seed=3)
    model = build_ensemble([generators[n] for n in VARIANTS["cvdnet3"]], seed=5)
    history = train_ensemble(model, train, val, hp=SMOKE_HP, seed=5)
    elapsed = time.perf_counter() - t0
    losses = history.epoch_train_loss
    decreasing = len(losses) == 3 and losses[0] > losses[1] > losses[2]
    check("criterion 7 training smoke",
          len(index) >= 60 and decreasing
          and history.best_val_accuracy == 1.0 and elapsed < 120.0,
          f"{len(index)} images, losses {[round(l, 4) for l in losses]}, "
          f"best val accuracy {history.best_val_accuracy:.4f}, {elapsed:.1f} s")


def test_criterion_8_gradcam_properties(ensemble3, separable_tree):
    index = scan_dataset(separable_tree)
    image = load_and_preprocess(index.entries[0].path)
    cam = grad_cam(ensemble3, image)
    raw_ok = cam.raw.shape == (7, 7) and bool((cam.raw >= 0).all())

    # scaling the target logit by a positive constant must not move the
    # normalized map
    target = cam.class_index
    fc = ensemble3.head.fc
    row_w, row_b = fc.weight[target].clone(), fc.bias[target].clone()
    with torch.no_grad():
        fc.weight[target] *= 10.0
        fc.bias[target] *= 10.0
    scaled = grad_cam(ensemble3, image, class_index=target)
    with torch.no_grad():
        fc.weight[target] = row_w
        fc.bias[target] = row_b
    invariant = float(np.abs(scaled.heatmap - cam.heatmap).max()) <= 1e-6

    # a class whose score only ever loses from the probe activations has no
    # positive evidence anywhere, so the map must be identically zero
    probe = PoolProbe()
    with torch.no_grad():
        probe.fc.weight.copy_(-one_hot_channel_fc(0))
    rng = np.random.default_rng(5)
    negative_image = rng.uniform(0.0, 1.0, size=(8, 8, 3)).astype(np.float32)
    zero_cam = grad_cam(probe, negative_image, class_index=0, layer="probe", target_size=8)
    all_zero = not zero_cam.raw.any() and not zero_cam.heatmap.any()

    check("criterion 8 gradcam properties",
          raw_ok and invariant and all_zero,
          f"raw 7x7 non-negative {raw_ok}, scale invariant {invariant}, "
          f"all-negative map zero {all_zero}")


@pytest.mark.skipif(DATASET_ENV not in os.environ,
                    reason=f"set {DATASET_ENV} to the dataset root to run the "
                           "full five-fold reproduction (needs the real data "
                           "and heavy compute; not part of the regular suite)")
def test_criterion_9_full_scale_reproduction(tmp_path):
    root = os.environ[DATASET_ENV]
    report = run_cross_validation(root, tmp_path / "cv", variant="cvdnet3", k=5, seed=0)
    assert not report.failures, report.failures
    accuracy = report.metrics.macro.acc * 100.0

    # latency is hardware-specific: measured and reported, never asserted
    model, _ = load_checkpoint(tmp_path / "cv" / "checkpoints" / "fold0.pt")
    paths = [e.path for e in scan_dataset(root).entries[:20]]
    print(benchmark_inference(model, paths, label="cvdnet3").summary())

    check("criterion 9 full-scale reproduction",
          abs(accuracy - 98.30) <= 1.5,
          f"macro accuracy {accuracy:.2f} vs 98.30 +/- 1.5")

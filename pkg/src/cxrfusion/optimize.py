"""Training engine: hyperparameters, batch sources and the fit loop.

One engine trains both the full backbone classifiers (fine-tuning) and the
fused-model head. The loop is plain mini-batch ADAM with iteration-based
validation, a constant learn rate, no early stopping, and best-validation-
accuracy checkpoint selection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
import torch
from torch import nn

from cxrfusion.data import (
    IMAGENET_NORMALIZATION,
    AugmentPolicy,
    DatasetEntry,
    Normalization,
    augment,
    load_and_preprocess,
)
from cxrfusion.exceptions import TrainingDivergedError
from cxrfusion.labels import DEFAULT_CLASS_WEIGHTS, N_CLASSES
from cxrfusion.seeding import rng_for

LossFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


# ---------------------------------------------------------------------------
# Hyperparameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Hyperparams:
    """Optimizer settings for one training stage.

    new_layer_lr_factor multiplies the learn rate of freshly replaced layers
    during fine-tuning; it is None for the fused-head stage, where every
    trainable parameter is new. L2 regularization applies to weight tensors
    only (biases and normalization affine parameters are excluded).
    """

    optimizer: str = "adam"
    batch_size: int = 32
    max_epochs: int = 10
    learn_rate: float = 1e-3
    l2: float = 1e-4
    new_layer_lr_factor: float | None = None
    class_weights: tuple[float, ...] = DEFAULT_CLASS_WEIGHTS
    validation_frequency: int = 65
    shuffle: bool = True

    @classmethod
    def finetune_defaults(cls) -> "Hyperparams":
        return cls(learn_rate=1e-4, new_layer_lr_factor=10.0)

    @classmethod
    def ensemble_defaults(cls) -> "Hyperparams":
        return cls(learn_rate=1e-3, new_layer_lr_factor=None)

    def problems(self) -> list[str]:
        out = []
        if self.optimizer != "adam":
            out.append(f"optimizer must be 'adam', got {self.optimizer!r}")
        if self.batch_size < 1:
            out.append(f"batch_size must be positive, got {self.batch_size}")
        if self.max_epochs < 0:
            out.append(f"max_epochs must be non-negative, got {self.max_epochs}")
        if not self.learn_rate > 0:
            out.append(f"learn_rate must be positive, got {self.learn_rate}")
        if self.l2 < 0:
            out.append(f"l2 must be non-negative, got {self.l2}")
        if self.new_layer_lr_factor is not None and not self.new_layer_lr_factor > 0:
            out.append(f"new_layer_lr_factor must be positive, got {self.new_layer_lr_factor}")
        if len(self.class_weights) != N_CLASSES or any(w < 0 for w in self.class_weights):
            out.append(f"class_weights must be {N_CLASSES} non-negative values")
        if self.validation_frequency < 1:
            out.append(f"validation_frequency must be positive, got {self.validation_frequency}")
        return out

    def validated(self) -> "Hyperparams":
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))
        return self


# ---------------------------------------------------------------------------
# Batch sources
# ---------------------------------------------------------------------------


class TensorBatches:
    """Batches over in-memory tensors (images or cached feature maps)."""

    def __init__(self, x: torch.Tensor, y: torch.Tensor, batch_size: int,
                 seed: int = 0, shuffle: bool = True):
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"x and y disagree on item count: {x.shape[0]} vs {y.shape[0]}")
        self.x = x
        self.y = y
        self.batch_size = int(batch_size)
        self.seed = seed
        self.shuffle = shuffle

    @property
    def n_items(self) -> int:
        return int(self.x.shape[0])

    def batches(self, epoch: int | None = None) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        order = np.arange(self.n_items)
        if epoch is not None and self.shuffle:
            order = rng_for(self.seed, "order", epoch).permutation(self.n_items)
        for start in range(0, self.n_items, self.batch_size):
            idx = torch.as_tensor(order[start:start + self.batch_size])
            yield self.x[idx], self.y[idx]


class ImageBatches:
    """Batches decoded from disk, optionally re-augmented every epoch.

    Augmentation draws one independent RNG stream per (epoch, item), so
    parallel loaders would see identical transforms and every epoch sees fresh
    draws. Passing epoch=None (evaluation) disables shuffling and augmentation.
    """

    def __init__(
        self,
        entries: tuple[DatasetEntry, ...] | list[DatasetEntry],
        batch_size: int,
        seed: int = 0,
        augment_policy: AugmentPolicy | None = None,
        normalization: Normalization = IMAGENET_NORMALIZATION,
        shuffle: bool = True,
    ):
        self.entries = tuple(entries)
        self.batch_size = int(batch_size)
        self.seed = seed
        self.augment_policy = augment_policy
        self.normalization = normalization
        self.shuffle = shuffle

    @property
    def n_items(self) -> int:
        return len(self.entries)

    def batches(self, epoch: int | None = None) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        order = np.arange(self.n_items)
        if epoch is not None and self.shuffle:
            order = rng_for(self.seed, "order", epoch).permutation(self.n_items)
        use_augment = (
            epoch is not None
            and self.augment_policy is not None
            and not self.augment_policy.is_identity()
        )
        for start in range(0, self.n_items, self.batch_size):
            chunk = order[start:start + self.batch_size]
            imgs = []
            labels = []
            for i in chunk:
                entry = self.entries[int(i)]
                img = load_and_preprocess(entry.path, normalization=self.normalization)
                if use_augment:
                    img = augment(img, self.augment_policy, rng_for(self.seed, "augment", epoch, int(i)))
                imgs.append(img)
                labels.append(entry.label)
            x = torch.from_numpy(np.stack(imgs).transpose(0, 3, 1, 2).copy())
            y = torch.as_tensor(labels, dtype=torch.long)
            yield x, y


# ---------------------------------------------------------------------------
# History
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationRecord:
    iteration: int
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainHistory:
    epoch_train_loss: list[float] = field(default_factory=list)
    validations: list[ValidationRecord] = field(default_factory=list)
    best_val_accuracy: float | None = None
    best_iteration: int | None = None
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "epoch_train_loss": self.epoch_train_loss,
            "validations": [vars(v) for v in self.validations],
            "best_val_accuracy": self.best_val_accuracy,
            "best_iteration": self.best_iteration,
            "iterations": self.iterations,
        }


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


def adam_param_groups(
    model: nn.Module,
    hp: Hyperparams,
    boosted_prefixes: tuple[str, ...] = (),
) -> list[dict]:
    """Parameter groups with L2 on weights only and boosted new-layer rates."""

    def is_boosted(name: str) -> bool:
        return any(name.startswith(p) for p in boosted_prefixes)

    factor = hp.new_layer_lr_factor or 1.0
    groups: dict[tuple[bool, bool], list[torch.Tensor]] = {}
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        key = (is_boosted(name), param.ndim > 1)
        groups.setdefault(key, []).append(param)
    out = []
    for (boosted, decay), params in groups.items():
        out.append({
            "params": params,
            "lr": hp.learn_rate * (factor if boosted else 1.0),
            "weight_decay": hp.l2 if decay else 0.0,
        })
    return out


def evaluate_model(model: nn.Module, batches, loss_fn: LossFn) -> tuple[float, float]:
    """(mean loss, accuracy) of a model over an evaluation pass."""
    model.eval()
    total_loss = 0.0
    correct = 0
    n = 0
    with torch.no_grad():
        for x, y in batches.batches(epoch=None):
            logits = model(x)
            loss = loss_fn(logits, y)
            total_loss += float(loss) * y.shape[0]
            correct += int((logits.argmax(dim=1) == y).sum())
            n += y.shape[0]
    if n == 0:
        raise ValueError("evaluation received no items")
    return total_loss / n, correct / n


def fit(
    model: nn.Module,
    train,
    val,
    hp: Hyperparams,
    loss_fn: LossFn,
    boosted_prefixes: tuple[str, ...] = (),
) -> TrainHistory:
    """Mini-batch ADAM over max_epochs with periodic validation.

    Validates every hp.validation_frequency iterations and once more after the
    final iteration; the weights with the best validation accuracy are
    restored into the model before returning (earliest best wins ties). With
    val=None the final weights stand. max_epochs=0 leaves the model untouched.

    Raises:
        TrainingDivergedError: loss became non-finite.
    """
    hp = hp.validated()
    history = TrainHistory()
    if hp.max_epochs == 0:
        return history

    optimizer = torch.optim.Adam(adam_param_groups(model, hp, boosted_prefixes), lr=hp.learn_rate)
    best_state: dict | None = None
    iteration = 0
    last_validated = -1

    def run_validation(epoch: int, train_loss: float) -> None:
        nonlocal best_state, last_validated
        val_loss, val_acc = evaluate_model(model, val, loss_fn)
        model.train()
        history.validations.append(ValidationRecord(
            iteration=iteration, epoch=epoch,
            train_loss=train_loss, val_loss=val_loss, val_accuracy=val_acc,
        ))
        last_validated = iteration
        if history.best_val_accuracy is None or val_acc > history.best_val_accuracy:
            history.best_val_accuracy = val_acc
            history.best_iteration = iteration
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    model.train()
    for epoch in range(hp.max_epochs):
        epoch_losses = []
        for x, y in train.batches(epoch):
            logits = model(x)
            loss = loss_fn(logits, y)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(epoch, iteration + 1, loss_value)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            iteration += 1
            epoch_losses.append(loss_value)
            if val is not None and iteration % hp.validation_frequency == 0:
                run_validation(epoch, loss_value)
        if epoch_losses:
            history.epoch_train_loss.append(float(np.mean(epoch_losses)))

    if val is not None and iteration > 0 and last_validated != iteration:
        run_validation(hp.max_epochs - 1, history.epoch_train_loss[-1])

    history.iterations = iteration
    if best_state is not None:
        model.load_state_dict(best_state)
    return history

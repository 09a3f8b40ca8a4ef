"""Fused classifier: frozen parallel branches, depth concatenation, small head.

A single 224x224x3 input is broadcast to every branch; branch feature maps are
concatenated along the channel axis in a canonical branch order, then classified
by the only trainable part of the network:

    BatchNorm -> ReLU -> Conv(3 filters, spatial preserving) -> BatchNorm ->
    ReLU -> FC(147 -> 3) -> softmax at prediction time

Training operates on logits through a fused log-softmax; softmax probabilities
are materialized only for prediction and the public loss helper.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from cxrfusion.backbones import FeatureMapGenerator
from cxrfusion.exceptions import ModelBuildError
from cxrfusion.labels import DEFAULT_CLASS_WEIGHTS, N_CLASSES
from cxrfusion.seeding import derive_seed

# Model variants, each a set of branch backbones fused by depth concatenation.
VARIANTS: dict[str, tuple[str, ...]] = {
    "cvdnet1": ("squeezenet", "efficientnetb0"),
    "cvdnet2": ("squeezenet", "mobilenetv2", "efficientnetb0"),
    "cvdnet3": ("squeezenet", "shufflenet", "efficientnetb0"),
    "squeezenet": ("squeezenet",),
    "shufflenet": ("shufflenet",),
    "mobilenetv2": ("mobilenetv2",),
    "efficientnetb0": ("efficientnetb0",),
}

# Canonical concatenation order; the middle slot holds whichever mid-size
# backbone the variant uses.
_BRANCH_RANK = {"squeezenet": 0, "shufflenet": 1, "mobilenetv2": 1, "efficientnetb0": 2}

CLAMP_EPS = 1e-12


@dataclass(frozen=True)
class HeadConfig:
    """Trainable head configuration. kernel_size must be odd so the conv can
    preserve the 7x7 spatial extent with 'same' padding."""

    kernel_size: int = 1
    num_classes: int = N_CLASSES
    spatial: int = 7

    def trainable_param_count(self, in_channels: int) -> int:
        """Closed-form count: conv + two batch-norm affine sets + FC."""
        k = self.kernel_size
        conv = in_channels * k * k * self.num_classes + self.num_classes
        bn1 = 2 * in_channels
        bn2 = 2 * self.num_classes
        fc_in = self.num_classes * self.spatial * self.spatial
        fc = fc_in * self.num_classes + self.num_classes
        return conv + bn1 + bn2 + fc


class FusionHead(nn.Module):
    """BN -> ReLU -> 1x1-ish conv to 3 maps -> BN -> ReLU -> FC(147 -> 3)."""

    def __init__(self, in_channels: int, config: HeadConfig):
        super().__init__()
        if config.kernel_size % 2 == 0 or config.kernel_size < 1:
            raise ModelBuildError(
                f"head kernel_size must be a positive odd integer, got {config.kernel_size}"
            )
        self.config = config
        self.in_channels = in_channels
        pad = config.kernel_size // 2
        self.bn1 = nn.BatchNorm2d(in_channels)
        self.relu1 = nn.ReLU()
        self.conv = nn.Conv2d(in_channels, config.num_classes, config.kernel_size,
                              stride=1, padding=pad)
        self.bn2 = nn.BatchNorm2d(config.num_classes)
        self.relu2 = nn.ReLU()
        self.fc = nn.Linear(config.num_classes * config.spatial ** 2, config.num_classes)

    def reset_parameters(self, generator: torch.Generator) -> None:
        nn.init.kaiming_uniform_(self.conv.weight, a=5 ** 0.5, generator=generator)
        nn.init.zeros_(self.conv.bias)
        nn.init.kaiming_uniform_(self.fc.weight, a=5 ** 0.5, generator=generator)
        nn.init.zeros_(self.fc.bias)
        for bn in (self.bn1, self.bn2):
            nn.init.ones_(bn.weight)
            nn.init.zeros_(bn.bias)
            bn.reset_running_stats()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.relu1(self.bn1(x))
        x = self.relu2(self.bn2(self.conv(x)))
        return self.fc(torch.flatten(x, 1))


class FusedClassifier(nn.Module):
    """Frozen branches plus one trainable FusionHead."""

    def __init__(self, branches: list[FeatureMapGenerator], head: FusionHead):
        super().__init__()
        self.branches = nn.ModuleList(branches)
        self.head = head

    @property
    def branch_names(self) -> tuple[str, ...]:
        return tuple(b.name for b in self.branches)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Concatenated branch feature maps for an NCHW batch."""
        _check_input(x)
        return torch.cat([b(x) for b in self.branches], dim=1)

    def head_forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.head(feats)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def _check_input(x: torch.Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != 224 or x.shape[3] != 224:
        raise ValueError(
            f"expected an Nx3x224x224 batch, got {tuple(x.shape)}"
        )


def build_ensemble(
    branches: list[FeatureMapGenerator],
    head_config: HeadConfig | None = None,
    seed: int = 0,
) -> FusedClassifier:
    """Assemble branches (re-ordered canonically) and a freshly seeded head.

    Raises:
        ModelBuildError: no branches, duplicate branches, mismatched branch
            spatial extents, or an invalid head configuration.
    """
    if not branches:
        raise ModelBuildError("at least one branch is required")
    names = [b.name for b in branches]
    if len(set(names)) != len(names):
        raise ModelBuildError(f"duplicate branches: {names}")
    for b in branches:
        if b.name not in _BRANCH_RANK:
            raise ModelBuildError(f"branch {b.name!r} has no canonical position")

    ordered = sorted(branches, key=lambda b: (_BRANCH_RANK[b.name], b.name))
    head_config = head_config or HeadConfig()

    spatial = {(b.spec.output_shape[0], b.spec.output_shape[1]) for b in ordered}
    if len(spatial) != 1:
        detail = {b.name: b.spec.output_shape for b in ordered}
        raise ModelBuildError(f"branch spatial extents differ, cannot concatenate: {detail}")
    side = next(iter(spatial))[0]
    if side != head_config.spatial:
        raise ModelBuildError(
            f"branches emit {side}x{side} maps but the head expects "
            f"{head_config.spatial}x{head_config.spatial}"
        )

    in_channels = sum(b.out_channels for b in ordered)
    head = FusionHead(in_channels, head_config)
    gen = torch.Generator().manual_seed(derive_seed(seed, "head-init", tuple(b.name for b in ordered)))
    head.reset_parameters(gen)
    return FusedClassifier(list(ordered), head)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    """Softmax probabilities, argmax label (ties to the lowest index), logits."""

    probs: np.ndarray
    label: int
    logits: np.ndarray


def batch_to_tensor(batch: np.ndarray) -> torch.Tensor:
    """Convert an Nx224x224x3 (HWC) float batch to an NCHW torch tensor."""
    arr = np.asarray(batch, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[1:] != (224, 224, 3):
        raise ValueError(f"expected an Nx224x224x3 batch, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def predict(model: FusedClassifier, batch: np.ndarray | torch.Tensor) -> list[Prediction]:
    """Run the model on a batch and return one Prediction per item."""
    if isinstance(batch, torch.Tensor):
        x = batch
    else:
        x = batch_to_tensor(batch)
    model.eval()
    with torch.no_grad():
        logits = model(x)
        probs = F.softmax(logits, dim=1)
    probs_np = probs.cpu().numpy()
    logits_np = logits.cpu().numpy()
    return [
        Prediction(probs=probs_np[i], label=int(np.argmax(probs_np[i])), logits=logits_np[i])
        for i in range(probs_np.shape[0])
    ]


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def _check_loss_inputs(n: int, labels, weights) -> None:
    if len(weights) != N_CLASSES or any(w < 0 for w in weights):
        raise ValueError(f"weights must be {N_CLASSES} non-negative values, got {weights}")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels must be a length-{n} vector, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
        raise ValueError(f"labels must lie in [0, {N_CLASSES})")


def weighted_cross_entropy(
    probs: np.ndarray | torch.Tensor,
    labels,
    weights=DEFAULT_CLASS_WEIGHTS,
    eps: float = CLAMP_EPS,
):
    """Class-weighted cross entropy from probabilities.

    loss = -(1/N) * sum_n w[y_n] * log(max(probs[n, y_n], eps))

    The mean divides by N, not by the summed weights. Accepts torch tensors
    (differentiable) or numpy arrays (returns float).
    """
    if isinstance(probs, torch.Tensor):
        n = probs.shape[0]
        _check_loss_inputs(n, labels if not isinstance(labels, torch.Tensor) else labels.cpu().numpy(), weights)
        y = labels if isinstance(labels, torch.Tensor) else torch.as_tensor(np.asarray(labels), dtype=torch.long)
        w = torch.as_tensor(weights, dtype=probs.dtype, device=probs.device)
        picked = probs[torch.arange(n), y].clamp_min(eps)
        return -(w[y] * torch.log(picked)).mean()
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != N_CLASSES:
        raise ValueError(f"probs must be Nx{N_CLASSES}, got {arr.shape}")
    n = arr.shape[0]
    _check_loss_inputs(n, labels, weights)
    y = np.asarray(labels, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    picked = np.maximum(arr[np.arange(n), y], eps)
    return float(-(w[y] * np.log(picked)).mean())


def weighted_ce_from_logits(
    logits: torch.Tensor,
    labels: torch.Tensor,
    weights=DEFAULT_CLASS_WEIGHTS,
) -> torch.Tensor:
    """Same loss computed from logits through a fused log-softmax."""
    n = logits.shape[0]
    logp = F.log_softmax(logits, dim=1)
    w = torch.as_tensor(weights, dtype=logits.dtype, device=logits.device)
    picked = logp[torch.arange(n), labels]
    return -(w[labels] * picked).mean()


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------


def count_parameters(model: nn.Module) -> tuple[int, int]:
    """(total, trainable) parameter counts."""
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return total, trainable


def parameter_breakdown(model: FusedClassifier) -> dict[str, int]:
    """Per-branch and head parameter counts plus totals."""
    out: dict[str, int] = {}
    for b in model.branches:
        out[f"branch:{b.name}"] = b.parameter_count()
    out["head"] = sum(p.numel() for p in model.head.parameters())
    total, trainable = count_parameters(model)
    out["total"] = total
    out["trainable"] = trainable
    return out

"""Single-image inference latency measurement.

Timings are wall-clock per-image milliseconds on the current machine, batch
size 1, reported as mean and std over repeat averages. Absolute numbers are
only comparable between runs on identical hardware and thread settings, so
every report embeds a hardware note.
"""

from __future__ import annotations

import json
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from cxrfusion.data import IMAGENET_NORMALIZATION, Normalization, load_and_preprocess
from cxrfusion.exceptions import BenchmarkError


def hardware_note() -> dict:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "python": platform.python_version(),
        "torch": torch.__version__,
        "torch_threads": torch.get_num_threads(),
    }


@dataclass
class BenchReport:
    """Per-image latency statistics, milliseconds."""

    label: str
    n_images: int
    warmup: int
    repeats: int
    forward_ms_mean: float
    forward_ms_std: float
    end_to_end_ms_mean: float
    end_to_end_ms_std: float
    hardware: dict = field(default_factory=hardware_note)

    def to_dict(self) -> dict:
        return dict(vars(self))

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path

    def summary(self) -> str:
        return (
            f"{self.label}: forward {self.forward_ms_mean:.2f} ms/image "
            f"(std {self.forward_ms_std:.2f}), end-to-end "
            f"{self.end_to_end_ms_mean:.2f} ms/image (std {self.end_to_end_ms_std:.2f}); "
            f"{self.n_images} images x {self.repeats} repeats, batch size 1"
        )


def _stats(repeat_means: list[float]) -> tuple[float, float]:
    arr = np.asarray(repeat_means, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def benchmark_inference(
    model: nn.Module,
    paths,
    warmup: int = 3,
    repeats: int = 10,
    label: str = "model",
    normalization: Normalization = IMAGENET_NORMALIZATION,
) -> BenchReport:
    """Time batch-1 inference over a set of image files.

    The forward-only figure times model(x) on pre-decoded tensors; the
    end-to-end figure re-runs decode + preprocess + forward per image. Each
    figure averages per-image time within a repeat, then reports mean/std
    across repeats (std is 0.0 for repeats=1).

    Raises:
        BenchmarkError: no images, or warmup/repeats out of range.
    """
    paths = [Path(p) for p in paths]
    if not paths:
        raise BenchmarkError("benchmark needs at least one image")
    if repeats < 1:
        raise BenchmarkError(f"repeats must be >= 1, got {repeats}")
    if warmup < 0:
        raise BenchmarkError(f"warmup must be >= 0, got {warmup}")

    model.eval()
    tensors = [
        torch.from_numpy(
            load_and_preprocess(p, normalization=normalization).transpose(2, 0, 1).copy()
        )[None]
        for p in paths
    ]

    with torch.no_grad():
        for _ in range(warmup):
            model(tensors[0])

        forward_means = []
        for _ in range(repeats):
            start = time.perf_counter()
            for x in tensors:
                model(x)
            forward_means.append((time.perf_counter() - start) * 1000.0 / len(tensors))

        end_to_end_means = []
        for _ in range(repeats):
            start = time.perf_counter()
            for p in paths:
                img = load_and_preprocess(p, normalization=normalization)
                x = torch.from_numpy(img.transpose(2, 0, 1).copy())[None]
                model(x)
            end_to_end_means.append((time.perf_counter() - start) * 1000.0 / len(paths))

    fwd_mean, fwd_std = _stats(forward_means)
    e2e_mean, e2e_std = _stats(end_to_end_means)
    return BenchReport(
        label=label,
        n_images=len(paths),
        warmup=warmup,
        repeats=repeats,
        forward_ms_mean=fwd_mean,
        forward_ms_std=fwd_std,
        end_to_end_ms_mean=e2e_mean,
        end_to_end_ms_std=e2e_std,
    )

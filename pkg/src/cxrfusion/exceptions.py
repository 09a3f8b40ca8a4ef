"""Exception types raised across the package."""

from __future__ import annotations


class CxrFusionError(Exception):
    """Base class for all package errors."""


class DatasetLayoutError(CxrFusionError):
    """Dataset root is missing, malformed, or a class directory is absent/empty."""


class ImageLoadError(CxrFusionError):
    """An image file is missing, unreadable, or not a decodable PNG."""


class FoldPlanError(CxrFusionError):
    """Fold construction or fold-plan (de)serialization failed."""


class ConfigError(CxrFusionError):
    """Configuration is invalid. Collects every offending key, not just the first."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


class ModelBuildError(CxrFusionError):
    """Model assembly failed (unsupported name, branch mismatch, bad head config)."""


class AnchorNotFoundError(ModelBuildError):
    """Truncation anchor is not present in the network graph."""

    def __init__(self, anchor: str, candidates: list[str]):
        self.anchor = anchor
        self.candidates = list(candidates)
        shown = ", ".join(self.candidates[:20])
        more = "" if len(self.candidates) <= 20 else f", ... ({len(self.candidates)} total)"
        super().__init__(f"anchor {anchor!r} not found; candidate layers: {shown}{more}")


class WeightsUnavailableError(ModelBuildError):
    """Requested pretrained weights cannot be loaded from the configured source."""


class TrainingDivergedError(CxrFusionError):
    """Loss became non-finite during optimization."""

    def __init__(self, epoch: int, iteration: int, loss_value: float):
        self.epoch = epoch
        self.iteration = iteration
        self.loss_value = loss_value
        super().__init__(
            f"training diverged at epoch {epoch}, iteration {iteration}: loss={loss_value!r}"
        )


class EvaluationError(CxrFusionError):
    """Evaluation could not run (for example an empty fold)."""


class BenchmarkError(CxrFusionError):
    """Latency benchmark received invalid inputs."""

"""Run configuration: TOML file, environment overrides and validation.

Precedence, lowest to highest: built-in defaults, TOML file, CXRFUSION_*
environment variables, explicit overrides (command-line flags). Environment
keys use __ as the section separator, e.g. CXRFUSION_FOLDS__K=3 sets folds.k
and CXRFUSION_TRAIN__ENSEMBLE__LEARN_RATE=0.01 sets train.ensemble.learn_rate.
Every problem in a configuration is reported at once, not just the first.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from cxrfusion.data import AugmentPolicy
from cxrfusion.exceptions import ConfigError
from cxrfusion.fusion import VARIANTS
from cxrfusion.optimize import Hyperparams

ENV_PREFIX = "CXRFUSION_"

CI_N_MODES = ("total", "per_class")


@dataclass(frozen=True)
class Config:
    """Resolved settings for training and cross-validation runs."""

    dataset_root: str = ""
    out_dir: str = "out"
    k: int = 5
    seed: int = 0
    val_fraction: float = 0.10
    variant: str = "cvdnet3"
    weights: str = "imagenet"
    head_kernel_size: int = 1
    finetune_per_fold: bool = True
    ci_n_mode: str = "total"
    finetune: Hyperparams = field(default_factory=Hyperparams.finetune_defaults)
    ensemble: Hyperparams = field(default_factory=Hyperparams.ensemble_defaults)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def to_dict(self) -> dict:
        return {
            "dataset": {"root": self.dataset_root},
            "output": {"dir": self.out_dir},
            "folds": {"k": self.k, "seed": self.seed, "val_fraction": self.val_fraction},
            "model": {
                "variant": self.variant,
                "weights": self.weights,
                "head_kernel_size": self.head_kernel_size,
            },
            "train": {
                "finetune_per_fold": self.finetune_per_fold,
                "finetune": dict(vars(self.finetune)),
                "ensemble": dict(vars(self.ensemble)),
            },
            "report": {"ci_n_mode": self.ci_n_mode},
            "augment": dict(vars(self.augment)),
        }


# dotted key -> (Config attribute, expected type)
_SCALAR_SCHEMA: dict[str, tuple[str, type]] = {
    "dataset.root": ("dataset_root", str),
    "output.dir": ("out_dir", str),
    "folds.k": ("k", int),
    "folds.seed": ("seed", int),
    "folds.val_fraction": ("val_fraction", float),
    "model.variant": ("variant", str),
    "model.weights": ("weights", str),
    "model.head_kernel_size": ("head_kernel_size", int),
    "train.finetune_per_fold": ("finetune_per_fold", bool),
    "report.ci_n_mode": ("ci_n_mode", str),
}

_HP_TYPES = {
    "optimizer": str,
    "batch_size": int,
    "max_epochs": int,
    "learn_rate": float,
    "l2": float,
    "new_layer_lr_factor": float,
    "class_weights": tuple,
    "validation_frequency": int,
    "shuffle": bool,
}

_AUG_TYPES = {
    "reflect_x": bool,
    "reflect_y": bool,
    "rotation_deg": tuple,
    "scale": tuple,
    "translate_px": tuple,
}


def _known_keys() -> set[str]:
    keys = set(_SCALAR_SCHEMA)
    for stage in ("finetune", "ensemble"):
        keys.update(f"train.{stage}.{name}" for name in _HP_TYPES)
    keys.update(f"augment.{name}" for name in _AUG_TYPES)
    return keys


_KNOWN = _known_keys()


def _flatten(tree: dict, prefix: str = "") -> dict[str, object]:
    flat: dict[str, object] = {}
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def _parse_env_value(raw: str) -> object:
    try:
        return json.loads(raw)
    except (json.JSONDecodeError, ValueError):
        return raw


def env_overrides(environ=None) -> dict[str, object]:
    """CXRFUSION_* variables as dotted-key settings, JSON-decoded per value."""
    environ = os.environ if environ is None else environ
    out: dict[str, object] = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        dotted = name[len(ENV_PREFIX):].lower().replace("__", ".")
        out[dotted] = _parse_env_value(raw)
    return out


def _coerce(dotted: str, value: object, want: type, problems: list[str]):
    if want is bool:
        if isinstance(value, bool):
            return value
        problems.append(f"{dotted}: expected a boolean, got {value!r}")
        return None
    if want is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{dotted}: expected an integer, got {value!r}")
            return None
        return value
    if want is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{dotted}: expected a number, got {value!r}")
            return None
        return float(value)
    if want is str:
        if not isinstance(value, str):
            problems.append(f"{dotted}: expected a string, got {value!r}")
            return None
        return value
    if want is tuple:
        if not isinstance(value, (list, tuple)) or any(
            isinstance(v, bool) or not isinstance(v, (int, float)) for v in value
        ):
            problems.append(f"{dotted}: expected a list of numbers, got {value!r}")
            return None
        return tuple(float(v) for v in value)
    raise AssertionError(f"unhandled schema type {want}")


def _apply(settings: dict[str, object]):
    """Split validated dotted settings into constructor kwargs."""
    problems: list[str] = []
    top: dict[str, object] = {}
    hp_kwargs: dict[str, dict[str, object]] = {"finetune": {}, "ensemble": {}}
    aug_kwargs: dict[str, object] = {}

    for dotted, value in sorted(settings.items()):
        if dotted in _SCALAR_SCHEMA:
            attr, want = _SCALAR_SCHEMA[dotted]
            got = _coerce(dotted, value, want, problems)
            if got is not None:
                top[attr] = got
        elif dotted.startswith(("train.finetune.", "train.ensemble.")):
            _, stage, name = dotted.split(".", 2)
            want = _HP_TYPES[name]
            if name == "new_layer_lr_factor" and value is None:
                hp_kwargs[stage][name] = None
                continue
            got = _coerce(dotted, value, want, problems)
            if got is not None:
                hp_kwargs[stage][name] = got
        elif dotted.startswith("augment."):
            name = dotted.split(".", 1)[1]
            got = _coerce(dotted, value, _AUG_TYPES[name], problems)
            if got is not None:
                if _AUG_TYPES[name] is tuple and len(got) != 2:
                    problems.append(f"{dotted}: expected [low, high], got {value!r}")
                else:
                    aug_kwargs[name] = got
        else:
            raise AssertionError(f"unvalidated key {dotted}")
    return top, hp_kwargs, aug_kwargs, problems


def _validate(config: Config) -> list[str]:
    problems = []
    if config.k < 2:
        problems.append(f"folds.k: must be >= 2, got {config.k}")
    if not 0.0 < config.val_fraction < 1.0:
        problems.append(f"folds.val_fraction: must lie in (0, 1), got {config.val_fraction}")
    if config.variant not in VARIANTS:
        problems.append(f"model.variant: unknown variant {config.variant!r}; "
                        f"expected one of {sorted(VARIANTS)}")
    if config.head_kernel_size < 1 or config.head_kernel_size % 2 == 0:
        problems.append(f"model.head_kernel_size: must be a positive odd integer, "
                        f"got {config.head_kernel_size}")
    if config.ci_n_mode not in CI_N_MODES:
        problems.append(f"report.ci_n_mode: must be one of {CI_N_MODES}, got {config.ci_n_mode!r}")
    for stage, hp in (("finetune", config.finetune), ("ensemble", config.ensemble)):
        problems.extend(f"train.{stage}.{p}" for p in hp.problems())
    for name in ("rotation_deg", "scale", "translate_px"):
        lo, hi = getattr(config.augment, name)
        if lo > hi:
            problems.append(f"augment.{name}: low bound {lo} exceeds high bound {hi}")
    if config.augment.scale[0] <= 0:
        problems.append(f"augment.scale: bounds must be positive, got {config.augment.scale}")
    return problems


def load_config(
    path: str | Path | None = None,
    environ=None,
    overrides: dict[str, object] | None = None,
) -> Config:
    """Resolve a Config from file, environment and explicit overrides.

    Args:
        path: optional TOML file.
        environ: environment mapping (defaults to os.environ).
        overrides: dotted-key settings with the highest precedence.

    Raises:
        ConfigError: listing every unknown key, type error and invalid value.
    """
    problems: list[str] = []
    settings: dict[str, object] = {}

    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError([f"config file {path} does not exist"])
        try:
            with open(path, "rb") as fh:
                tree = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"config file {path} is not valid TOML: {exc}"]) from exc
        settings.update(_flatten(tree))

    settings.update(env_overrides(environ))
    if overrides:
        settings.update(overrides)

    unknown = sorted(set(settings) - _KNOWN)
    problems.extend(f"unknown setting {key!r}" for key in unknown)
    known = {k: v for k, v in settings.items() if k in _KNOWN}

    # settings that fail coercion fall back to their defaults, so the config
    # is always constructible and value validation can run in the same pass
    top, hp_kwargs, aug_kwargs, coerce_problems = _apply(known)
    problems.extend(coerce_problems)
    config = Config(
        **top,
        finetune=replace(Hyperparams.finetune_defaults(), **hp_kwargs["finetune"]),
        ensemble=replace(Hyperparams.ensemble_defaults(), **hp_kwargs["ensemble"]),
        augment=AugmentPolicy(**aug_kwargs),
    )
    problems.extend(_validate(config))
    if problems:
        raise ConfigError(problems)
    return config


def config_hash(config: Config) -> str:
    """Stable digest of the resolved settings, for manifests and reports."""
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

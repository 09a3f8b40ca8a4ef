"""Checkpoint persistence: fused-model weights plus a JSON manifest sidecar.

A checkpoint is two files: <stem>.pt holding the state dict and the minimal
structure needed to rebuild the module graph, and <stem>.json holding a
human-readable manifest (branch anchors, shapes, parameter counts, provenance
and any caller-supplied training context).
"""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path

import torch

from cxrfusion import __version__
from cxrfusion.backbones import load_pretrained, truncate_and_freeze
from cxrfusion.exceptions import ModelBuildError
from cxrfusion.fusion import FusedClassifier, HeadConfig, build_ensemble, count_parameters
from cxrfusion.labels import CLASS_NAMES

FORMAT_VERSION = 1


def sha256_of_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def build_manifest(model: FusedClassifier, extra: dict | None = None) -> dict:
    """Describe a fused model: structure, shapes, counts and provenance."""
    total, trainable = count_parameters(model)
    head = model.head
    manifest = {
        "kind": "fused-classifier",
        "format_version": FORMAT_VERSION,
        "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "package_version": __version__,
        "class_order": list(CLASS_NAMES),
        "input_size": [224, 224, 3],
        "branches": [
            {
                "name": b.name,
                "depth_layers": b.spec.depth_layers,
                "anchor": b.spec.anchor,
                "anchor_module": b.spec.anchor_module,
                "output_shape": list(b.spec.output_shape),
                "weights_origin": b.origin,
                "parameters": b.parameter_count(),
                "normalization": {"mean": list(b.normalization.mean), "std": list(b.normalization.std)},
            }
            for b in model.branches
        ],
        "head": {
            "kernel_size": head.config.kernel_size,
            "in_channels": head.in_channels,
            "trainable_parameters": head.config.trainable_param_count(head.in_channels),
        },
        "parameters": {"total": total, "trainable": trainable},
    }
    if extra:
        manifest.update(extra)
    return manifest


def save_checkpoint(path: str | Path, model: FusedClassifier, extra: dict | None = None) -> tuple[Path, Path]:
    """Write <path> (.pt appended if missing) and its .json manifest sidecar.

    Returns:
        (weights_path, manifest_path)
    """
    path = Path(path)
    if path.suffix != ".pt":
        path = path.with_suffix(".pt")
    path.parent.mkdir(parents=True, exist_ok=True)
    head = model.head
    payload = {
        "format_version": FORMAT_VERSION,
        "branches": [{"name": b.name, "weights_origin": b.origin} for b in model.branches],
        "head": {
            "kernel_size": head.config.kernel_size,
            "num_classes": head.config.num_classes,
            "spatial": head.config.spatial,
        },
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)
    manifest = build_manifest(model, extra)
    manifest_path = path.with_suffix(".json")
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path, manifest_path


def load_checkpoint(path: str | Path) -> tuple[FusedClassifier, dict]:
    """Rebuild a fused model from a checkpoint written by save_checkpoint.

    The module graph is reconstructed from the recorded branch names and head
    configuration, then every weight (branches included) is overwritten from
    the stored state dict, so no pretrained download is needed.

    Returns:
        (model, manifest) where manifest is the sidecar dict, or {} if the
        sidecar file is missing.

    Raises:
        ModelBuildError: the file is not a recognized checkpoint.
    """
    path = Path(path)
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or "state_dict" not in payload or "branches" not in payload:
        raise ModelBuildError(f"{path} is not a fused-classifier checkpoint")
    if payload.get("format_version") != FORMAT_VERSION:
        raise ModelBuildError(
            f"checkpoint format {payload.get('format_version')!r} is not supported "
            f"(expected {FORMAT_VERSION})"
        )
    branches = [
        truncate_and_freeze(load_pretrained(spec["name"], weights="random", seed=0))
        for spec in payload["branches"]
    ]
    model = build_ensemble(branches, HeadConfig(**payload["head"]))
    model.load_state_dict(payload["state_dict"])
    for module, spec in zip(model.branches, payload["branches"]):
        module.origin = spec["weights_origin"]
    model.eval()
    manifest_path = path.with_suffix(".json")
    manifest = {}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    return model, manifest

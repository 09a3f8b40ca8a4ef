"""Class-activation heatmaps for the fused classifier.

The map for class c at a chosen layer is relu(sum_k w_k A_k) where A_k are
the layer's activation channels and w_k is the spatial mean of d(score_c)/dA_k.
The default layer is the head's post-conv activation (head.relu2), whose three
7x7 channels sit directly under the final FC layer; any dotted module path
works, including layers inside a branch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from PIL import Image

from cxrfusion.backbones import resolve_module

DEFAULT_LAYER = "head.relu2"
SCORE_MODES = ("logit", "softmax")


@dataclass(frozen=True)
class GradCamMap:
    """A class-activation map plus the context it was computed in.

    raw is the unnormalized map at layer resolution; heatmap is bilinearly
    upsampled to the requested size and min-max normalized into [0, 1] (an
    all-zero map stays all zero).
    """

    raw: np.ndarray
    heatmap: np.ndarray
    layer: str
    score_mode: str
    class_index: int
    predicted: int
    score: float

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "score_mode": self.score_mode,
            "class_index": self.class_index,
            "predicted": self.predicted,
            "score": self.score,
            "raw_shape": list(self.raw.shape),
            "raw": self.raw.tolist(),
        }


def grad_cam(
    model: nn.Module,
    image: np.ndarray,
    class_index: int | None = None,
    layer: str = DEFAULT_LAYER,
    score_mode: str = "logit",
    target_size: int = 224,
) -> GradCamMap:
    """Gradient-weighted class-activation map for one preprocessed image.

    Args:
        model: any module mapping an NCHW batch to (N, n_classes) logits.
        image: HWC float array as produced by load_and_preprocess.
        class_index: class whose evidence to map; None uses the predicted one.
        layer: dotted path of the activation layer to weight.
        score_mode: "logit" differentiates the raw class score, "softmax" the
            normalized probability (which subtracts evidence for other classes).

    Raises:
        AnchorNotFoundError: layer does not name a module in the model.
        ValueError: unknown score_mode or non-HWC image.
    """
    if score_mode not in SCORE_MODES:
        raise ValueError(f"score_mode must be one of {SCORE_MODES}, got {score_mode!r}")
    if image.ndim != 3:
        raise ValueError(f"expected an HWC image, got shape {image.shape}")
    module = resolve_module(model, layer)

    captured: dict[str, torch.Tensor] = {}

    def keep_output(_mod, _inp, out):
        captured["acts"] = out

    handle = module.register_forward_hook(keep_output)
    try:
        model.eval()
        x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))[None]).float()
        # grad must flow to layers inside frozen branches too, so track the input
        x.requires_grad_(True)
        with torch.enable_grad():
            logits = model(x)
            predicted = int(logits.argmax(dim=1))
            target = predicted if class_index is None else int(class_index)
            if not 0 <= target < logits.shape[1]:
                raise ValueError(f"class_index must lie in [0, {logits.shape[1]}), got {target}")
            if score_mode == "softmax":
                score = torch.softmax(logits, dim=1)[0, target]
            else:
                score = logits[0, target]
            acts = captured["acts"]
            grads = torch.autograd.grad(score, acts)[0]
    finally:
        handle.remove()

    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = torch.relu((weights * acts).sum(dim=1, keepdim=True))
    raw = cam[0, 0].detach().numpy().astype(np.float32)

    upsampled = torch.nn.functional.interpolate(
        cam.detach(), size=(target_size, target_size), mode="bilinear", align_corners=False
    )[0, 0].numpy()
    peak = float(upsampled.max())
    heatmap = (upsampled / peak if peak > 0 else upsampled).astype(np.float32)

    return GradCamMap(
        raw=raw,
        heatmap=heatmap,
        layer=layer,
        score_mode=score_mode,
        class_index=target,
        predicted=predicted,
        score=score.item(),
    )


def _warm_lut() -> np.ndarray:
    """256-entry blue-to-red colormap, values in [0, 1]."""
    x = np.linspace(0.0, 1.0, 256)
    r = np.clip(1.5 - np.abs(4 * x - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * x - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * x - 1), 0, 1)
    return np.stack([r, g, b], axis=1)


_LUT = _warm_lut()


def colorize(heatmap: np.ndarray) -> np.ndarray:
    """Map a [0, 1] heatmap to float RGB colors in [0, 1]."""
    idx = np.clip(np.round(heatmap * 255), 0, 255).astype(np.int64)
    return _LUT[idx]


def render_overlay(base: np.ndarray, heatmap: np.ndarray, alpha: float = 0.4) -> np.ndarray:
    """Blend a heatmap over an RGB image, weighting by map intensity.

    out = base * (1 - alpha * m) + color(m) * alpha * m, so cold regions show
    the untouched radiograph and hot regions the colormap.

    Args:
        base: HWC uint8 RGB image.
        heatmap: HW float map in [0, 1] with the same spatial size as base.
        alpha: maximum blend strength, in [0, 1].

    Returns:
        HWC uint8 RGB overlay.
    """
    if base.ndim != 3 or base.shape[2] != 3:
        raise ValueError(f"base must be HWC RGB, got shape {base.shape}")
    if heatmap.shape != base.shape[:2]:
        raise ValueError(
            f"heatmap shape {heatmap.shape} does not match image {base.shape[:2]}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    m = (alpha * heatmap)[..., None]
    blended = base.astype(np.float64) * (1 - m) + colorize(heatmap) * 255.0 * m
    return np.clip(np.round(blended), 0, 255).astype(np.uint8)


def save_gradcam(
    stem: str | Path,
    cam: GradCamMap,
    base: np.ndarray,
    alpha: float = 0.4,
    extra: dict | None = None,
) -> tuple[Path, Path]:
    """Write <stem>.png (overlay) and <stem>.json (map + context).

    Returns:
        (png_path, json_path)
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    overlay = render_overlay(base, cam.heatmap, alpha=alpha)
    png_path = stem.with_suffix(".png")
    Image.fromarray(overlay, mode="RGB").save(png_path)
    payload = cam.to_dict()
    payload["alpha"] = alpha
    if extra:
        payload.update(extra)
    json_path = stem.with_suffix(".json")
    json_path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return png_path, json_path

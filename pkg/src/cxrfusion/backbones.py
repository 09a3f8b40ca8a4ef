"""Backbone loading, head replacement, truncation and freezing.

Four ImageNet classifier families are supported. Each is truncated at a fixed
anchor layer and frozen into a feature-map generator for 224x224x3 input:

    squeezenet      final fire-module concat + appended 2x2/2 ceil max-pool -> 7x7x512
    shufflenet      final element-wise addition (pre-ReLU)                  -> 7x7x544
    mobilenetv2     final pre-pooling activation                            -> 7x7x1280
    efficientnetb0  final head activation before pooling                    -> 7x7x1280

Weight sources: "random" (fresh initialization), "imagenet" (torchvision
download, where published weights exist) or a local state-dict file. A frozen
generator stays in eval mode permanently so stored batch-norm statistics never
drift during downstream training.
"""

from __future__ import annotations

import urllib.error
from dataclasses import dataclass, replace
from pathlib import Path

import torch
from torch import nn
from torchvision import models as tv_models

from cxrfusion.data import IMAGENET_NORMALIZATION, Normalization
from cxrfusion.exceptions import AnchorNotFoundError, ModelBuildError, WeightsUnavailableError
from cxrfusion.seeding import derive_seed
from cxrfusion.shufflenet import ShuffleNetV1, ShuffleNetV1Trunk


@dataclass(frozen=True)
class BackboneSpec:
    """Published facts about one backbone plus its truncation recipe."""

    name: str
    depth_layers: int
    param_count_m: float
    input_size: tuple[int, int, int]
    anchor: str
    anchor_module: str
    post_anchor_ops: tuple[str, ...]
    output_shape: tuple[int, int, int]  # (H, W, C)

    @property
    def out_channels(self) -> int:
        return self.output_shape[2]


BACKBONES: dict[str, BackboneSpec] = {
    "squeezenet": BackboneSpec(
        name="squeezenet",
        depth_layers=18,
        param_count_m=1.24,
        input_size=(224, 224, 3),
        anchor="final fire-module depth concatenation",
        anchor_module="features.12",
        post_anchor_ops=("maxpool k2 s2 ceil",),
        output_shape=(7, 7, 512),
    ),
    "shufflenet": BackboneSpec(
        name="shufflenet",
        depth_layers=50,
        param_count_m=1.4,
        input_size=(224, 224, 3),
        anchor="final element-wise addition (pre-ReLU)",
        anchor_module="stage4.3",
        post_anchor_ops=(),
        output_shape=(7, 7, 544),
    ),
    "mobilenetv2": BackboneSpec(
        name="mobilenetv2",
        depth_layers=53,
        param_count_m=3.5,
        input_size=(224, 224, 3),
        anchor="final pre-pooling activation",
        anchor_module="features.18",
        post_anchor_ops=(),
        output_shape=(7, 7, 1280),
    ),
    "efficientnetb0": BackboneSpec(
        name="efficientnetb0",
        depth_layers=82,
        param_count_m=5.3,
        input_size=(224, 224, 3),
        anchor="final head activation before pooling",
        anchor_module="features.8",
        post_anchor_ops=(),
        output_shape=(7, 7, 1280),
    ),
}

_TORCHVISION_BUILDERS = {
    "squeezenet": (tv_models.squeezenet1_1, "SqueezeNet1_1_Weights"),
    "mobilenetv2": (tv_models.mobilenet_v2, "MobileNet_V2_Weights"),
    "efficientnetb0": (tv_models.efficientnet_b0, "EfficientNet_B0_Weights"),
}


@dataclass
class Backbone:
    """A classifier network together with its spec and weight provenance."""

    spec: BackboneSpec
    model: nn.Module
    weights_origin: str
    num_classes: int
    normalization: Normalization = IMAGENET_NORMALIZATION
    finetuned: bool = False


def supported_backbones() -> list[str]:
    return list(BACKBONES)


def load_pretrained(name: str, weights: str | Path = "imagenet", seed: int | None = None) -> Backbone:
    """Construct a backbone classifier with the requested weights.

    Args:
        name: one of supported_backbones().
        weights: "imagenet", "random", or a path to a state-dict file.
        seed: optional seed for "random" initialization.

    Raises:
        ModelBuildError: unknown backbone name.
        WeightsUnavailableError: requested weights cannot be obtained; the
            message carries fetch instructions.
    """
    if name not in BACKBONES:
        raise ModelBuildError(
            f"unknown backbone {name!r}; supported: {sorted(BACKBONES)}"
        )
    spec = BACKBONES[name]

    if seed is not None:
        torch.manual_seed(derive_seed(seed, "backbone-init", name))

    if isinstance(weights, Path) or (isinstance(weights, str) and weights not in ("imagenet", "random")):
        return _load_from_file(spec, Path(weights))

    if name == "shufflenet":
        model = ShuffleNetV1(num_classes=1000)
        if weights == "imagenet":
            raise WeightsUnavailableError(
                "no published torch checkpoint exists for this ShuffleNet (v1) "
                "configuration; convert weights from another framework and pass "
                "weights=<path to a state-dict .pt file>, or use weights='random'"
            )
        return Backbone(spec=spec, model=model, weights_origin="random", num_classes=1000)

    builder, weights_enum_name = _TORCHVISION_BUILDERS[name]
    if weights == "random":
        model = builder(weights=None)
        return Backbone(spec=spec, model=model, weights_origin="random", num_classes=1000)

    weights_enum = getattr(tv_models, weights_enum_name).IMAGENET1K_V1
    try:
        model = builder(weights=weights_enum)
    except (urllib.error.URLError, OSError) as exc:
        raise WeightsUnavailableError(
            f"cannot download ImageNet weights for {name!r}: {exc}. "
            f"Fetch {weights_enum.url} on a machine with network access, place "
            f"it under {torch.hub.get_dir()}/checkpoints/, or pass "
            f"weights=<path> / weights='random'."
        ) from exc
    return Backbone(spec=spec, model=model, weights_origin="imagenet", num_classes=1000)


# classifier weight tensor per backbone, used to size a model for a state dict
_CLASSIFIER_WEIGHT_KEY = {
    "squeezenet": "classifier.1.weight",
    "shufflenet": "fc.weight",
    "mobilenetv2": "classifier.1.weight",
    "efficientnetb0": "classifier.1.weight",
}


def _load_from_file(spec: BackboneSpec, path: Path) -> Backbone:
    if not path.exists():
        raise WeightsUnavailableError(
            f"weights file {path} does not exist; provide a state-dict saved "
            f"with torch.save(model.state_dict(), ...)"
        )
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
        key = _CLASSIFIER_WEIGHT_KEY[spec.name]
        num_classes = int(state[key].shape[0])
        if spec.name == "shufflenet":
            model: nn.Module = ShuffleNetV1(num_classes=num_classes)
        else:
            builder, _ = _TORCHVISION_BUILDERS[spec.name]
            model = builder(weights=None, num_classes=num_classes)
        model.load_state_dict(state)
    except WeightsUnavailableError:
        raise
    except Exception as exc:
        raise WeightsUnavailableError(f"cannot load weights from {path}: {exc}") from exc
    return Backbone(spec=spec, model=model, weights_origin=f"file:{path}", num_classes=num_classes)


# ---------------------------------------------------------------------------
# Head replacement
# ---------------------------------------------------------------------------


def replace_classifier(backbone: Backbone, num_classes: int = 3, seed: int = 0) -> Backbone:
    """Swap the classifier head for a fresh num_classes one.

    Returns a Backbone sharing the trunk weights, with the replacement module
    freshly initialized from the given seed. The names of the replaced
    parameters are what the fine-tune stage boosts with its learn-rate factor.
    """
    model = backbone.model
    gen = torch.Generator().manual_seed(derive_seed(seed, "head-replace", backbone.spec.name))
    name = backbone.spec.name
    if name == "squeezenet":
        old = model.classifier[1]
        new = nn.Conv2d(old.in_channels, num_classes, kernel_size=1)
        _init_conv(new, gen)
        model.classifier[1] = new
    elif name == "shufflenet":
        new = nn.Linear(model.fc.in_features, num_classes)
        _init_linear(new, gen)
        model.fc = new
    else:  # mobilenetv2, efficientnetb0
        old = model.classifier[-1]
        new = nn.Linear(old.in_features, num_classes)
        _init_linear(new, gen)
        model.classifier[-1] = new
    return replace(backbone, num_classes=num_classes)


def _init_conv(conv: nn.Conv2d, gen: torch.Generator) -> None:
    nn.init.kaiming_uniform_(conv.weight, a=5**0.5, generator=gen)
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


def _init_linear(linear: nn.Linear, gen: torch.Generator) -> None:
    nn.init.kaiming_uniform_(linear.weight, a=5**0.5, generator=gen)
    nn.init.zeros_(linear.bias)


def classifier_parameter_names(backbone: Backbone) -> list[str]:
    """Fully-qualified parameter names belonging to the classifier head."""
    prefix = "fc." if backbone.spec.name == "shufflenet" else "classifier.1."
    return [n for n, _ in backbone.model.named_parameters() if n.startswith(prefix)]


# ---------------------------------------------------------------------------
# Truncation
# ---------------------------------------------------------------------------


class FeatureMapGenerator(nn.Module):
    """A frozen truncated backbone emitting fixed-shape feature maps.

    The module is permanently in eval mode: train(mode) is a no-op that keeps
    batch-norm layers on their stored statistics, and every parameter has
    requires_grad False.
    """

    def __init__(self, name: str, spec: BackboneSpec, trunk: nn.Module,
                 normalization: Normalization, origin: str):
        super().__init__()
        self.name = name
        self.spec = spec
        self.trunk = trunk
        self.normalization = normalization
        self.origin = origin
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True) -> "FeatureMapGenerator":
        return super().train(False)

    @property
    def out_channels(self) -> int:
        return self.spec.out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk(x)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def resolve_module(model: nn.Module, dotted: str) -> nn.Module:
    """Look up a submodule by dotted path.

    Raises:
        AnchorNotFoundError: no module lives at that path; the error lists
            candidate module names.
    """
    node: nn.Module = model
    for part in dotted.split("."):
        children = dict(node.named_children())
        if part not in children:
            raise AnchorNotFoundError(dotted, [n for n, _ in model.named_modules() if n])
        node = children[part]
    return node


def truncate_and_freeze(backbone: Backbone) -> FeatureMapGenerator:
    """Cut the classifier at its anchor and freeze the trunk.

    Raises:
        AnchorNotFoundError: the anchor module path is absent from the model
            graph; the error lists candidate layer names.
    """
    spec = backbone.spec
    model = backbone.model
    resolve_module(model, spec.anchor_module)  # validates the anchor exists

    if spec.name == "squeezenet":
        trunk: nn.Module = nn.Sequential(
            model.features,
            nn.MaxPool2d(kernel_size=2, stride=2, ceil_mode=True),
        )
    elif spec.name == "shufflenet":
        trunk = ShuffleNetV1Trunk(model)
    else:
        trunk = model.features

    origin = backbone.weights_origin + ("+finetuned" if backbone.finetuned else "")
    return FeatureMapGenerator(
        name=spec.name,
        spec=spec,
        trunk=trunk,
        normalization=backbone.normalization,
        origin=origin,
    )

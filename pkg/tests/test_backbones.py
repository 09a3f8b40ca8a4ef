"""Backbone loading, truncation anchors, freeze contract."""

import dataclasses

import pytest
import torch

from cxrfusion.backbones import (
    BACKBONES,
    Backbone,
    classifier_parameter_names,
    load_pretrained,
    replace_classifier,
    supported_backbones,
    truncate_and_freeze,
)
from cxrfusion.exceptions import (
    AnchorNotFoundError,
    ModelBuildError,
    WeightsUnavailableError,
)


@pytest.fixture(scope="module")
def generators():
    out = {}
    for name in supported_backbones():
        backbone = load_pretrained(name, weights="random", seed=0)
        out[name] = truncate_and_freeze(backbone)
    return out


def test_unknown_backbone_rejected():
    with pytest.raises(ModelBuildError, match="unknown backbone"):
        load_pretrained("resnet50", weights="random")


def test_shufflenet_imagenet_weights_error_carries_instructions():
    with pytest.raises(WeightsUnavailableError, match="state-dict"):
        load_pretrained("shufflenet", weights="imagenet")


def test_missing_weights_file_error(tmp_path):
    with pytest.raises(WeightsUnavailableError, match="does not exist"):
        load_pretrained("squeezenet", weights=str(tmp_path / "none.pt"))


def test_weights_file_roundtrip(tmp_path):
    b = load_pretrained("shufflenet", weights="random", seed=3)
    path = tmp_path / "w.pt"
    torch.save(b.model.state_dict(), path)
    again = load_pretrained("shufflenet", weights=str(path))
    assert again.weights_origin == f"file:{path}"
    for (k1, v1), (k2, v2) in zip(
        b.model.state_dict().items(), again.model.state_dict().items()
    ):
        assert k1 == k2
        assert torch.equal(v1, v2)


def test_random_init_seed_deterministic():
    a = load_pretrained("squeezenet", weights="random", seed=11)
    b = load_pretrained("squeezenet", weights="random", seed=11)
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


@pytest.mark.parametrize("name", ["squeezenet", "shufflenet", "mobilenetv2", "efficientnetb0"])
def test_generator_output_shapes(generators, name):
    gen = generators[name]
    h, w, c = gen.spec.output_shape
    x = torch.randn(2, 3, 224, 224)
    with torch.no_grad():
        out = gen(x)
    assert tuple(out.shape) == (2, c, h, w)


def test_trunk_excludes_classifier_parameters(generators):
    # closed-form count for conv1 plus the three shuffle stages; the 545,000
    # parameters of the 544->1000 FC head must not ride along
    assert generators["shufflenet"].parameter_count() == 869960
    for name, gen in generators.items():
        full = sum(
            p.numel()
            for p in load_pretrained(name, weights="random").model.parameters()
        )
        assert gen.parameter_count() < full


def test_squeezenet_pooling_halves_thirteen_to_seven(generators):
    backbone = load_pretrained("squeezenet", weights="random", seed=0)
    x = torch.randn(1, 3, 224, 224)
    with torch.no_grad():
        pre = backbone.model.features(x)
        post = generators["squeezenet"](x)
    assert tuple(pre.shape)[2:] == (13, 13)
    assert tuple(post.shape)[2:] == (7, 7)


def test_generator_value_ranges(generators):
    x = torch.randn(1, 3, 224, 224)
    with torch.no_grad():
        sq = generators["squeezenet"](x)
        mb = generators["mobilenetv2"](x)
        sh = generators["shufflenet"](x)
    # Post-activation anchors are non-negative; the pre-ReLU addition is not.
    assert float(sq.min()) >= 0.0
    assert float(mb.min()) >= 0.0
    assert float(sh.min()) < 0.0


def test_generators_frozen_and_pinned_to_eval(generators):
    for gen in generators.values():
        assert all(not p.requires_grad for p in gen.parameters())
        gen.train(True)
        assert not gen.training
        assert all(not m.training for m in gen.modules())


def test_generator_buffers_stable_across_forwards(generators):
    gen = generators["shufflenet"]
    before = {k: v.clone() for k, v in gen.state_dict().items()}
    gen.train(True)
    with torch.no_grad():
        gen(torch.randn(2, 3, 224, 224))
    after = gen.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_generator_deterministic_forward(generators):
    x = torch.randn(1, 3, 224, 224)
    for gen in generators.values():
        with torch.no_grad():
            a = gen(x)
            b = gen(x)
        assert torch.equal(a, b)


@pytest.mark.parametrize(
    "name,published_m",
    [("squeezenet", 1.24), ("shufflenet", 1.4), ("mobilenetv2", 3.5), ("efficientnetb0", 5.3)],
)
def test_published_classifier_param_counts(name, published_m):
    backbone = load_pretrained(name, weights="random")
    total = sum(p.numel() for p in backbone.model.parameters())
    assert abs(total / 1e6 - published_m) / published_m < 0.05
    assert BACKBONES[name].param_count_m == published_m


def test_anchor_missing_lists_candidates():
    backbone = load_pretrained("squeezenet", weights="random")
    bad_spec = dataclasses.replace(BACKBONES["squeezenet"], anchor_module="features.99")
    bad = Backbone(
        spec=bad_spec,
        model=backbone.model,
        weights_origin="random",
        num_classes=1000,
    )
    with pytest.raises(AnchorNotFoundError) as err:
        truncate_and_freeze(bad)
    assert "features.12" in err.value.candidates


@pytest.mark.parametrize("name", ["squeezenet", "shufflenet", "mobilenetv2", "efficientnetb0"])
def test_replace_classifier_three_way_head(name):
    backbone = replace_classifier(load_pretrained(name, weights="random", seed=1), num_classes=3)
    assert backbone.num_classes == 3
    x = torch.randn(2, 3, 224, 224)
    backbone.model.eval()
    with torch.no_grad():
        logits = backbone.model(x)
    assert tuple(logits.shape) == (2, 3)
    head_names = classifier_parameter_names(backbone)
    assert head_names, "replaced head exposes no parameters"
    named = dict(backbone.model.named_parameters())
    assert all(n in named for n in head_names)
    out_dims = {named[n].shape[0] for n in head_names}
    assert out_dims == {3}


def test_replace_classifier_preserves_trunk_weights():
    before = load_pretrained("efficientnetb0", weights="random", seed=5)
    trunk_before = {k: v.clone() for k, v in before.model.features.state_dict().items()}
    after = replace_classifier(before, num_classes=3)
    trunk_after = after.model.features.state_dict()
    assert all(torch.equal(trunk_before[k], trunk_after[k]) for k in trunk_before)

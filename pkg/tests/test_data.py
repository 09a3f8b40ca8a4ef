"""Dataset scanning, preprocessing and augmentation."""

import numpy as np
import pytest

from cxrfusion.data import (
    IDENTITY_POLICY,
    IMAGENET_NORMALIZATION,
    AugmentPolicy,
    AugmentSample,
    Normalization,
    apply_augment,
    augment,
    load_and_preprocess,
    sample_augment,
    scan_dataset,
)
from cxrfusion.exceptions import DatasetLayoutError, ImageLoadError
from cxrfusion.seeding import derive_seed, rng_for

from conftest import build_class_tree, write_png

PLAIN = Normalization(mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0), source="none")


# ---------------------------------------------------------------------------
# Scanning
# ---------------------------------------------------------------------------


def test_scan_counts_and_order(class_tree):
    index = scan_dataset(class_tree)
    assert index.class_counts() == (6, 7, 8)
    assert len(index) == 21
    labels = [e.label for e in index.entries]
    assert labels == sorted(labels)
    paths = [e.path for e in index.entries]
    assert paths == sorted(paths, key=lambda p: (index.entries[paths.index(p)].label, p))
    again = scan_dataset(class_tree)
    assert again.entries == index.entries


def test_scan_missing_class_directory_named_in_error(tmp_path):
    (tmp_path / "COVID-19").mkdir()
    write_png(tmp_path / "COVID-19" / "a.png")
    (tmp_path / "Viral Pneumonia").mkdir()
    write_png(tmp_path / "Viral Pneumonia" / "b.png")
    with pytest.raises(DatasetLayoutError, match="Normal"):
        scan_dataset(tmp_path)


def test_scan_empty_class_directory_rejected(tmp_path):
    build_class_tree(tmp_path, counts=(2, 2, 2))
    for p in (tmp_path / "NORMAL").iterdir():
        p.unlink()
    with pytest.raises(DatasetLayoutError, match="Normal"):
        scan_dataset(tmp_path)


def test_scan_nonexistent_root(tmp_path):
    with pytest.raises(DatasetLayoutError):
        scan_dataset(tmp_path / "nope")


def test_scan_ignores_non_png_and_unknown_dirs(tmp_path):
    build_class_tree(tmp_path, counts=(2, 2, 2))
    (tmp_path / "COVID-19" / "notes.txt").write_text("x")
    (tmp_path / "scratch").mkdir()
    index = scan_dataset(tmp_path)
    assert index.class_counts() == (2, 2, 2)


def test_scan_extra_alias(tmp_path):
    build_class_tree(tmp_path, counts=(2, 2, 2))
    import shutil

    shutil.move(str(tmp_path / "NORMAL"), str(tmp_path / "clear-lungs"))
    with pytest.raises(DatasetLayoutError):
        scan_dataset(tmp_path)
    index = scan_dataset(tmp_path, extra_aliases={"clear-lungs": 1})
    assert index.class_counts() == (2, 2, 2)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def test_preprocess_output_contract(tmp_path):
    p = write_png(tmp_path / "a.png", size=1024)
    out = load_and_preprocess(p)
    assert out.shape == (224, 224, 3)
    assert out.dtype == np.float32
    assert np.all(np.isfinite(out))


def test_preprocess_target_size_input_identity(tmp_path):
    rng = np.random.default_rng(5)
    p = write_png(tmp_path / "a.png", size=224, rng=rng)
    from PIL import Image

    raw = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
    out = load_and_preprocess(p, normalization=PLAIN)
    assert np.allclose(out, raw, atol=1e-7)


def test_preprocess_constant_gray_analytic(tmp_path):
    p = write_png(tmp_path / "g.png", value=128)
    out = load_and_preprocess(p)
    expected = (128.0 / 255.0 - np.array(IMAGENET_NORMALIZATION.mean)) / np.array(
        IMAGENET_NORMALIZATION.std
    )
    for c in range(3):
        assert np.allclose(out[:, :, c], expected[c], atol=1e-5)


def test_preprocess_grayscale_replicated(tmp_path):
    from PIL import Image

    arr = np.random.default_rng(2).integers(0, 256, size=(64, 64), dtype=np.uint8)
    p = tmp_path / "gray.png"
    Image.fromarray(arr, mode="L").save(p)
    out = load_and_preprocess(p, normalization=PLAIN)
    assert out.shape == (224, 224, 3)
    assert np.array_equal(out[:, :, 0], out[:, :, 1])
    assert np.array_equal(out[:, :, 1], out[:, :, 2])


def test_preprocess_corrupt_and_missing(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_text("this is not a png")
    with pytest.raises(ImageLoadError, match="bad.png"):
        load_and_preprocess(bad)
    with pytest.raises(ImageLoadError):
        load_and_preprocess(tmp_path / "missing.png")


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def _noise_image(seed=0, size=32):
    return np.random.default_rng(seed).normal(size=(size, size, 3)).astype(np.float32)


def test_identity_policy_is_bit_exact():
    img = _noise_image()
    out = augment(img, IDENTITY_POLICY, np.random.default_rng(0))
    assert np.array_equal(out, img)


def test_translate_shifts_content_and_zero_fills():
    img = _noise_image(seed=1, size=64)
    policy = AugmentPolicy(
        reflect_x=False, reflect_y=False,
        rotation_deg=(0.0, 0.0), scale=(1.0, 1.0), translate_px=(3.0, 3.0),
    )
    out = augment(img, policy, np.random.default_rng(0))
    assert np.allclose(out[3:, 3:, :], img[:-3, :-3, :], atol=1e-5)
    assert np.all(out[:3, :, :] == 0)
    assert np.all(out[:, :3, :] == 0)


def test_reflect_twice_recovers_original():
    img = _noise_image(seed=2)
    once = apply_augment(img, AugmentSample(flip_x=True))
    twice = apply_augment(once, AugmentSample(flip_x=True))
    assert np.array_equal(twice, img)
    once = apply_augment(img, AugmentSample(flip_y=True))
    twice = apply_augment(once, AugmentSample(flip_y=True))
    assert np.array_equal(twice, img)


def test_sample_ranges_respected():
    policy = AugmentPolicy()
    rng = np.random.default_rng(3)
    for _ in range(200):
        s = sample_augment(policy, rng)
        assert -30.0 <= s.angle_deg <= 30.0
        assert 0.75 <= s.scale <= 1.25
        assert -3.0 <= s.tx <= 3.0
        assert -3.0 <= s.ty <= 3.0


def test_augment_deterministic_per_stream_and_fresh_per_call():
    img = _noise_image(seed=4)
    policy = AugmentPolicy()
    a = augment(img, policy, rng_for(77, "aug", 0))
    b = augment(img, policy, rng_for(77, "aug", 0))
    assert np.array_equal(a, b)
    rng = rng_for(77, "aug", 0)
    first = augment(img, policy, rng)
    second = augment(img, policy, rng)
    assert not np.array_equal(first, second)


def test_augment_preserves_shape_dtype():
    img = _noise_image(seed=5, size=224)
    out = augment(img, AugmentPolicy(), np.random.default_rng(9))
    assert out.shape == img.shape
    assert out.dtype == np.float32


def test_rotation_fills_corners_with_zero():
    img = np.ones((64, 64, 3), dtype=np.float32)
    policy = AugmentPolicy(
        reflect_x=False, reflect_y=False,
        rotation_deg=(45.0, 45.0), scale=(1.0, 1.0), translate_px=(0.0, 0.0),
    )
    out = augment(img, policy, np.random.default_rng(0))
    assert out[0, 0, 0] == 0.0
    assert out[-1, -1, 0] == 0.0
    assert out[32, 32, 0] == pytest.approx(1.0, abs=1e-5)


# ---------------------------------------------------------------------------
# Seed derivation
# ---------------------------------------------------------------------------


def test_derive_seed_stable_and_distinct():
    assert derive_seed(1, "folds") == derive_seed(1, "folds")
    assert derive_seed(1, "folds") != derive_seed(2, "folds")
    assert derive_seed(1, "folds") != derive_seed(1, "split")
    assert derive_seed(1, "aug", 0) != derive_seed(1, "aug", 1)
    assert 0 <= derive_seed(123456789, "x", 42) < 2**32

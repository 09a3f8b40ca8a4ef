"""Dataset scanning, image preprocessing, fold construction and augmentation.

The on-disk layout is one directory per class under a single root, for example
``<root>/COVID-19/*.png``, ``<root>/NORMAL/*.png`` and
``<root>/Viral Pneumonia/*.png``. Directory names are matched
case-insensitively through the alias table in :mod:`cxrfusion.labels`.

Images are decoded with Pillow, resized to the model input size with
anti-aliased bilinear interpolation, scaled to [0, 1] and normalized with the
per-channel statistics of the pretraining corpus. Grayscale sources are
replicated to three channels. All functions here are pure per-item functions:
they are safe to call from a parallel worker pool as long as each worker
derives its own RNG stream via :func:`cxrfusion.seeding.rng_for`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image, UnidentifiedImageError

from cxrfusion.exceptions import DatasetLayoutError, FoldPlanError, ImageLoadError
from cxrfusion.labels import CLASS_NAMES, N_CLASSES, class_index_for_dirname
from cxrfusion.seeding import derive_seed

INPUT_SIZE = 224

# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Normalization:
    """Per-channel mean/std applied after scaling pixels to [0, 1]."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    source: str

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std), "source": self.source}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(mean=tuple(d["mean"]), std=tuple(d["std"]), source=str(d["source"]))


IMAGENET_NORMALIZATION = Normalization(
    mean=(0.485, 0.456, 0.406),
    std=(0.229, 0.224, 0.225),
    source="imagenet",
)


# ---------------------------------------------------------------------------
# Index
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetEntry:
    path: Path
    label: int


@dataclass(frozen=True)
class DatasetIndex:
    """Deterministic listing of every image, sorted by (class, path)."""

    root: Path
    entries: tuple[DatasetEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def class_counts(self) -> tuple[int, ...]:
        counts = [0] * N_CLASSES
        for e in self.entries:
            counts[e.label] += 1
        return tuple(counts)

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)


def scan_dataset(root: Path | str, extra_aliases: dict[str, int] | None = None) -> DatasetIndex:
    """Build a DatasetIndex from a class-per-directory tree.

    Args:
        root: dataset root containing one subdirectory per class.
        extra_aliases: additional directory-name aliases, mapping a name to a
            class index.

    Raises:
        DatasetLayoutError: root missing, a class directory absent, or a class
            directory holds no PNG files. The message names the directory.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetLayoutError(f"dataset root {root} does not exist or is not a directory")

    per_class_dirs: dict[int, list[Path]] = {i: [] for i in range(N_CLASSES)}
    for child in sorted(root.iterdir()):
        if not child.is_dir():
            continue
        idx = class_index_for_dirname(child.name, extra_aliases)
        if idx is not None:
            per_class_dirs[idx].append(child)

    missing = [CLASS_NAMES[i] for i in range(N_CLASSES) if not per_class_dirs[i]]
    if missing:
        found = sorted(p.name for p in root.iterdir() if p.is_dir())
        raise DatasetLayoutError(
            f"no directory found for class(es) {missing} under {root}; "
            f"subdirectories present: {found}"
        )

    entries: list[DatasetEntry] = []
    for idx in range(N_CLASSES):
        class_files: list[Path] = []
        for d in per_class_dirs[idx]:
            class_files.extend(p for p in d.iterdir() if p.is_file() and p.suffix.lower() == ".png")
        if not class_files:
            dirs = [str(d) for d in per_class_dirs[idx]]
            raise DatasetLayoutError(f"no PNG images for class {CLASS_NAMES[idx]!r} in {dirs}")
        entries.extend(DatasetEntry(path=p, label=idx) for p in sorted(class_files))

    return DatasetIndex(root=root, entries=tuple(entries))


# ---------------------------------------------------------------------------
# Loading and preprocessing
# ---------------------------------------------------------------------------


def load_and_preprocess(
    path: Path | str,
    target_size: int = INPUT_SIZE,
    normalization: Normalization = IMAGENET_NORMALIZATION,
) -> np.ndarray:
    """Decode one image to a normalized float32 HWC tensor.

    Resizing uses Pillow's anti-aliased bilinear filter and is skipped when the
    source already matches target_size, so a target-sized input passes through
    the resize stage unchanged.

    Raises:
        ImageLoadError: the file is missing or cannot be decoded.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (target_size, target_size):
                im = im.resize((target_size, target_size), Image.Resampling.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except FileNotFoundError as exc:
        raise ImageLoadError(f"image file not found: {path}") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageLoadError(f"cannot decode image {path}: {exc}") from exc

    arr /= 255.0
    mean = np.asarray(normalization.mean, dtype=np.float32)
    std = np.asarray(normalization.std, dtype=np.float32)
    out = (arr - mean) / std
    if not np.all(np.isfinite(out)):
        raise ImageLoadError(f"non-finite values after preprocessing {path}")
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    """Random transform ranges. Components are applied in a fixed order:
    reflect, rotate, scale, translate. Out-of-frame pixels are zero filled.
    """

    reflect_x: bool = True
    reflect_y: bool = True
    rotation_deg: tuple[float, float] = (-30.0, 30.0)
    scale: tuple[float, float] = (0.75, 1.25)
    translate_px: tuple[float, float] = (-3.0, 3.0)

    def is_identity(self) -> bool:
        return (
            not self.reflect_x
            and not self.reflect_y
            and self.rotation_deg == (0.0, 0.0)
            and self.scale == (1.0, 1.0)
            and self.translate_px == (0.0, 0.0)
        )


IDENTITY_POLICY = AugmentPolicy(
    reflect_x=False,
    reflect_y=False,
    rotation_deg=(0.0, 0.0),
    scale=(1.0, 1.0),
    translate_px=(0.0, 0.0),
)


@dataclass(frozen=True)
class AugmentSample:
    """One concrete draw from an AugmentPolicy."""

    flip_x: bool = False
    flip_y: bool = False
    angle_deg: float = 0.0
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0


def sample_augment(policy: AugmentPolicy, rng: np.random.Generator) -> AugmentSample:
    """Draw one transform. Draw order is fixed: flip_x, flip_y, angle, scale,
    tx, ty; disabled components consume no draws.
    """
    flip_x = bool(rng.integers(0, 2)) if policy.reflect_x else False
    flip_y = bool(rng.integers(0, 2)) if policy.reflect_y else False
    lo, hi = policy.rotation_deg
    angle = float(rng.uniform(lo, hi)) if lo != hi else float(lo)
    lo, hi = policy.scale
    scale = float(rng.uniform(lo, hi)) if lo != hi else float(lo)
    lo, hi = policy.translate_px
    tx = float(rng.uniform(lo, hi)) if lo != hi else float(lo)
    ty = float(rng.uniform(lo, hi)) if lo != hi else float(lo)
    return AugmentSample(flip_x=flip_x, flip_y=flip_y, angle_deg=angle, scale=scale, tx=tx, ty=ty)


def apply_augment(img: np.ndarray, sample: AugmentSample) -> np.ndarray:
    """Apply one drawn transform to an HWC float32 image.

    Reflections first, then one combined rotate/scale/translate warp about the
    image center with bilinear interpolation and zero border fill. An identity
    sample returns the input values bit-exactly.
    """
    if img.ndim != 3:
        raise ValueError(f"expected HWC image, got shape {img.shape}")
    out = img
    if sample.flip_x:
        out = out[:, ::-1, :]
    if sample.flip_y:
        out = out[::-1, :, :]
    needs_warp = sample.angle_deg != 0.0 or sample.scale != 1.0 or sample.tx != 0.0 or sample.ty != 0.0
    if needs_warp:
        h, w = out.shape[:2]
        center = ((w - 1) / 2.0, (h - 1) / 2.0)
        m = cv2.getRotationMatrix2D(center, sample.angle_deg, sample.scale)
        m[0, 2] += sample.tx
        m[1, 2] += sample.ty
        out = cv2.warpAffine(
            np.ascontiguousarray(out),
            m,
            (w, h),
            flags=cv2.INTER_LINEAR,
            borderMode=cv2.BORDER_CONSTANT,
            borderValue=0,
        )
    return np.ascontiguousarray(out, dtype=np.float32)


def augment(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Draw fresh transform parameters and apply them to one image."""
    return apply_augment(img, sample_augment(policy, rng))


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    """Stratified k-fold assignment over a dataset index.

    folds holds per-fold tuples of DatasetEntry. Folds are disjoint, cover the
    index, differ in size by at most one item and hold per-class counts that
    differ by at most one across folds.
    """

    k: int
    seed: int
    folds: tuple[tuple[DatasetEntry, ...], ...]

    def fold_sizes(self) -> list[int]:
        return [len(f) for f in self.folds]

    def test_entries(self, fold: int) -> tuple[DatasetEntry, ...]:
        self._check_fold(fold)
        return self.folds[fold]

    def train_entries(self, fold: int) -> tuple[DatasetEntry, ...]:
        """Every entry outside the given test fold, in fold order."""
        self._check_fold(fold)
        out: list[DatasetEntry] = []
        for i, f in enumerate(self.folds):
            if i != fold:
                out.extend(f)
        return tuple(out)

    def _check_fold(self, fold: int) -> None:
        if not 0 <= fold < self.k:
            raise FoldPlanError(f"fold must lie in [0, {self.k}), got {fold}")

    def save(self, path: Path | str) -> None:
        payload = {
            "k": self.k,
            "seed": self.seed,
            "class_order": list(CLASS_NAMES),
            "folds": [[str(e.path) for e in fold] for fold in self.folds],
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2))

    @classmethod
    def load(cls, path: Path | str) -> "FoldPlan":
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FoldPlanError(f"cannot read fold plan {path}: {exc}") from exc
        for key in ("k", "seed", "folds"):
            if key not in payload:
                raise FoldPlanError(f"fold plan {path} is missing key {key!r}")
        folds = []
        for fold_paths in payload["folds"]:
            fold = []
            for p in fold_paths:
                label = class_index_for_dirname(Path(p).parent.name)
                if label is None:
                    raise FoldPlanError(
                        f"fold plan entry {p} has an unrecognized class directory"
                    )
                fold.append(DatasetEntry(path=Path(p), label=label))
            folds.append(tuple(fold))
        plan = cls(k=int(payload["k"]), seed=int(payload["seed"]), folds=tuple(folds))
        if plan.k != len(plan.folds):
            raise FoldPlanError(f"fold plan {path} declares k={plan.k} but holds {len(plan.folds)} folds")
        return plan


def make_folds(index: DatasetIndex, k: int, seed: int) -> FoldPlan:
    """Stratified k-fold split, deterministic for a given seed.

    Per class, items are shuffled and dealt base = n_c // k to every fold; the
    remainder goes one item each to the currently least-loaded folds (ties to
    the lowest fold id). This keeps overall fold sizes within one item of each
    other and per-class counts within one across folds.

    Raises:
        FoldPlanError: k < 2 or some class has fewer than k items.
    """
    if k < 2:
        raise FoldPlanError(f"k must be at least 2, got {k}")
    counts = index.class_counts()
    for c, count in enumerate(counts):
        if count < k:
            raise FoldPlanError(
                f"class {CLASS_NAMES[c]!r} has {count} items, fewer than k={k}"
            )

    rng = np.random.default_rng(derive_seed(seed, "folds"))
    folds: list[list[DatasetEntry]] = [[] for _ in range(k)]
    for c in range(N_CLASSES):
        class_entries = [e for e in index.entries if e.label == c]
        order = rng.permutation(len(class_entries))
        shuffled = [class_entries[i] for i in order]
        base, remainder = divmod(len(shuffled), k)
        by_load = sorted(range(k), key=lambda f: (len(folds[f]), f))
        extra = set(by_load[:remainder])
        pos = 0
        for f in range(k):
            take = base + (1 if f in extra else 0)
            folds[f].extend(shuffled[pos:pos + take])
            pos += take

    return FoldPlan(k=k, seed=seed, folds=tuple(tuple(f) for f in folds))


def split_train_val(
    entries: tuple[DatasetEntry, ...] | list[DatasetEntry],
    fraction: float = 0.10,
    seed: int = 0,
) -> tuple[tuple[DatasetEntry, ...], tuple[DatasetEntry, ...]]:
    """Random train/validation split of a training pool.

    The validation count is round(fraction * len(entries)) with half-up
    rounding. The draw is seeded and plain random (not stratified).
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    entries = tuple(entries)
    n_val = int(len(entries) * fraction + 0.5)
    rng = np.random.default_rng(derive_seed(seed, "train-val-split"))
    order = rng.permutation(len(entries))
    val_idx = set(order[:n_val].tolist())
    train = tuple(e for i, e in enumerate(entries) if i not in val_idx)
    val = tuple(e for i, e in enumerate(entries) if i in val_idx)
    return train, val

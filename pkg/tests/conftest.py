"""Shared fixtures: synthetic on-disk datasets and in-memory indexes."""

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from cxrfusion.data import DatasetEntry, DatasetIndex
from cxrfusion.labels import CLASS_NAMES

# Directory names exercise case-insensitive matching and the space alias.
TREE_DIRS = ("COVID-19", "NORMAL", "Viral Pneumonia")


def write_png(path: Path, size: int = 224, value=None, rng=None) -> Path:
    """Write one RGB PNG; constant-valued or random-noise content."""
    path.parent.mkdir(parents=True, exist_ok=True)
    if value is not None:
        arr = np.full((size, size, 3), value, dtype=np.uint8)
    else:
        rng = rng or np.random.default_rng(0)
        arr = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)
    return path


def build_class_tree(root: Path, counts=(6, 7, 8), size: int = 224, seed: int = 0) -> Path:
    """Create a small class-per-directory PNG tree under root."""
    rng = np.random.default_rng(seed)
    for dirname, count in zip(TREE_DIRS, counts):
        for i in range(count):
            write_png(root / dirname / f"img_{i:03d}.png", size=size, rng=rng)
    return root


def build_separable_tree(root: Path, per_class: int = 20, size: int = 224, seed: int = 0) -> Path:
    """Tree whose classes are trivially separable by dominant color."""
    rng = np.random.default_rng(seed)
    base_colors = ((220, 30, 30), (30, 220, 30), (30, 30, 220))
    for dirname, color in zip(TREE_DIRS, base_colors):
        for i in range(per_class):
            noise = rng.integers(-20, 21, size=(size, size, 3))
            arr = np.clip(np.array(color) + noise, 0, 255).astype(np.uint8)
            (root / dirname).mkdir(parents=True, exist_ok=True)
            Image.fromarray(arr, mode="RGB").save(root / dirname / f"img_{i:03d}.png")
    return root


@pytest.fixture(scope="session")
def class_tree(tmp_path_factory) -> Path:
    return build_class_tree(tmp_path_factory.mktemp("tree"))


@pytest.fixture(scope="session")
def separable_tree(tmp_path_factory) -> Path:
    return build_separable_tree(tmp_path_factory.mktemp("separable"))


def synthetic_index(counts=(219, 1341, 1345)) -> DatasetIndex:
    """In-memory index with given per-class counts; paths are not created."""
    entries = []
    for c, count in enumerate(counts):
        for i in range(count):
            entries.append(
                DatasetEntry(path=Path(f"/synthetic/{CLASS_NAMES[c]}/img_{i:05d}.png"), label=c)
            )
    return DatasetIndex(root=Path("/synthetic"), entries=tuple(entries))


@pytest.fixture(scope="session")
def reference_size_index() -> DatasetIndex:
    return synthetic_index()

"""Canonical class labels and their fixed index order.

Class indices are alphabetical over the canonical names and every confusion
matrix, loss weight vector and prediction in the package uses this order.
"""

from __future__ import annotations

CLASS_NAMES: tuple[str, ...] = ("COVID-19", "Normal", "Viral-Pneumonia")
N_CLASSES: int = len(CLASS_NAMES)

COVID19: int = 0
NORMAL: int = 1
VIRAL_PNEUMONIA: int = 2

# Per-class loss weights, index-aligned with CLASS_NAMES. The minority class
# carries most of the weight.
DEFAULT_CLASS_WEIGHTS: tuple[float, ...] = (0.75, 0.10, 0.15)

# Dataset directories are matched case-insensitively after normalizing spaces
# and underscores to hyphens; these aliases map normalized names to an index.
DIRECTORY_ALIASES: dict[str, int] = {
    "covid-19": COVID19,
    "covid19": COVID19,
    "covid": COVID19,
    "normal": NORMAL,
    "healthy": NORMAL,
    "viral-pneumonia": VIRAL_PNEUMONIA,
    "viralpneumonia": VIRAL_PNEUMONIA,
    "pneumonia-viral": VIRAL_PNEUMONIA,
}


def normalize_dirname(name: str) -> str:
    """Lower-case a directory name and collapse spaces/underscores to hyphens."""
    out = name.strip().casefold()
    for ch in (" ", "_"):
        out = out.replace(ch, "-")
    while "--" in out:
        out = out.replace("--", "-")
    return out


def class_index_for_dirname(name: str, extra_aliases: dict[str, int] | None = None) -> int | None:
    """Map a directory name to a class index, or None if unrecognized."""
    table = dict(DIRECTORY_ALIASES)
    if extra_aliases:
        table.update({normalize_dirname(k): v for k, v in extra_aliases.items()})
    return table.get(normalize_dirname(name))

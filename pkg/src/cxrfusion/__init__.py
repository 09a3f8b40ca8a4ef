"""Three-branch fused CNN toolkit for 3-class chest X-ray classification."""

__version__ = "0.1.0"

from cxrfusion.labels import CLASS_NAMES, N_CLASSES

__all__ = ["CLASS_NAMES", "N_CLASSES", "__version__"]

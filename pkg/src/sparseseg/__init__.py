"""Few-shot semantic segmentation from sparse pixel annotations."""

from .data import (
    BACKGROUND,
    FOREGROUND,
    UNKNOWN,
    FewShotTask,
    Sample,
    SegTask,
    SparseMask,
    TaskDistribution,
)
from .network import MiniUNet, NetworkSpec
from .sparsify import SparsifyConfig

__all__ = [
    "BACKGROUND",
    "FOREGROUND",
    "UNKNOWN",
    "FewShotTask",
    "MiniUNet",
    "NetworkSpec",
    "Sample",
    "SegTask",
    "SparseMask",
    "SparsifyConfig",
    "TaskDistribution",
]

__version__ = "0.1.0"

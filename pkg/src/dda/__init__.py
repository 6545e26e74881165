"""Direct domain adaptation: reciprocal image transforms, a desk-scale
classifier harness and PCA diagnostics of the source/target shift."""

from .core import (
    DegenerateImageError,
    DomainStats,
    TransformConfig,
    compute_stats,
    renormalize,
    transform_source,
    transform_target,
)
from .datasets import Dataset, PatchBank

__version__ = "0.1.0"

__all__ = [
    "DegenerateImageError",
    "DomainStats",
    "TransformConfig",
    "compute_stats",
    "renormalize",
    "transform_source",
    "transform_target",
    "Dataset",
    "PatchBank",
]

"""Hierarchical Vision Transformer toolkit for slide-level ISUP grading.

Three stacked ViT stages (patch, region, slide) with freezable prefixes,
factorized attention heatmaps, tissue preprocessing and evaluation tools.
"""

from .factorization import DegenerateBlendError, factorize
from .hvit import GLOBAL, LOCAL, FreezeScheme, Geometry, HViTModel, build_model, forward_slide
from .vit import ViTConfig

__version__ = "0.1.0"

__all__ = [
    "GLOBAL",
    "LOCAL",
    "DegenerateBlendError",
    "FreezeScheme",
    "Geometry",
    "HViTModel",
    "ViTConfig",
    "build_model",
    "factorize",
    "forward_slide",
]

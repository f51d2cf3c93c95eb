"""Factorized attention heatmaps.

Each stage's CLS attention is broadcast to the pixels it covers, min-max
rescaled over the slide, and blended with weight ``gamma`` for finetuned
stages and ``1 - gamma`` for frozen ones, divided by the total weight
``beta = n_frozen * (1 - gamma) + n_finetuned * gamma``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .hvit import AttentionBundle, Geometry

LEVELS = ("patch", "region", "slide")
DEFAULT_GAMMA = 0.7


class DegenerateBlendError(ValueError):
    """The blend weights sum to zero (gamma = 1 with every stage frozen, or gamma = 0 with none)."""


@dataclass
class LevelPixelField:
    values: np.ndarray  # float [H, W]
    level: str
    frozen: bool
    covered: np.ndarray | None = None  # bool [H, W]; None means every pixel

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"unknown level {self.level!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.covered is not None and self.covered.shape != self.values.shape:
            raise ValueError("coverage mask shape differs from field shape")


def upsample_to_pixels(field, footprint: int, extent: int | None = None) -> np.ndarray:
    """Nearest-neighbour broadcast: each token value fills a ``footprint`` x ``footprint`` block.

    ``extent``, when given, is the expected pixel side of the result (e.g. the
    region size) and must equal the token grid side times the footprint.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise ValueError(f"expected a 2-D token grid, got shape {field.shape}")
    if footprint < 1:
        raise ValueError("footprint must be positive")
    if extent is not None and (field.shape[0] * footprint != extent or field.shape[1] * footprint != extent):
        raise ValueError(
            f"token grid {field.shape} with {footprint}px footprint does not tile a {extent}px region"
        )
    return np.repeat(np.repeat(field, footprint, axis=0), footprint, axis=1)


def region_token_grids(bundle: AttentionBundle, geometry: Geometry, r: int) -> dict[str, tuple[np.ndarray, int]]:
    """Token grids of region ``r`` for each level, with their pixel footprints."""
    g, m = geometry.patches_per_side, geometry.minipatches_per_side
    patch = np.asarray(bundle.patch_attn[r]).reshape(g, g, m, m).transpose(0, 2, 1, 3).reshape(g * m, g * m)
    return {
        "patch": (patch, geometry.minipatch_size),
        "region": (np.asarray(bundle.region_attn[r]).reshape(g, g), geometry.patch_size),
        "slide": (np.full((1, 1), float(bundle.slide_attn[r])), geometry.region_size),
    }


def bundle_to_fields(
    bundle: AttentionBundle,
    geometry: Geometry,
    coords: Sequence[tuple[int, int]],
    canvas: tuple[int, int],
) -> list[LevelPixelField]:
    """Materialize each level's attention over a ``canvas`` (height, width) of slide pixels."""
    s = geometry.region_size
    h, w = canvas
    if len(coords) != len(bundle.slide_attn):
        raise ValueError("one coordinate per region is required")
    covered = np.zeros((h, w), bool)
    planes = {lvl: np.zeros((h, w)) for lvl in LEVELS}
    for r, (x, y) in enumerate(coords):
        if x + s > w or y + s > h:
            raise ValueError(f"region at ({x}, {y}) exceeds canvas {canvas}")
        covered[y : y + s, x : x + s] = True
        for lvl, (grid, fp) in region_token_grids(bundle, geometry, r).items():
            planes[lvl][y : y + s, x : x + s] = upsample_to_pixels(grid, fp, s)
    return [LevelPixelField(planes[l], l, f, covered) for l, f in zip(LEVELS, bundle.frozen_flags)]


def normalize_level(f: LevelPixelField) -> LevelPixelField:
    """Min-max rescale to [0, 1] over covered pixels; a constant field maps to 0.5."""
    cov = np.ones(f.values.shape, bool) if f.covered is None else f.covered
    out = np.zeros_like(f.values)
    if cov.any():
        vals = f.values[cov]
        lo, hi = vals.min(), vals.max()
        out[cov] = 0.5 if hi == lo else (vals - lo) / (hi - lo)
    return LevelPixelField(out, f.level, f.frozen, f.covered)


def blend_weights(frozen: Sequence[bool], gamma: float) -> np.ndarray:
    """Per-level weights ``(gamma if finetuned else 1 - gamma) / beta``."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    raw = np.array([(1.0 - gamma) if fz else gamma for fz in frozen], dtype=np.float64)
    n = sum(bool(fz) for fz in frozen)
    beta = n * (1.0 - gamma) + (len(frozen) - n) * gamma
    if beta == 0.0:
        raise DegenerateBlendError(
            f"blend weights vanish for gamma={gamma} with {n} of {len(frozen)} levels frozen"
        )
    return raw / beta


def factorize(fields: Sequence[LevelPixelField], gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Per-pixel gamma-weighted blend of level fields."""
    if not fields:
        raise ValueError("no fields to blend")
    shape = fields[0].values.shape
    if any(f.values.shape != shape for f in fields):
        raise ValueError("fields cover different pixel domains")
    weights = blend_weights([f.frozen for f in fields], gamma)
    # weights sum to one, so blend offsets from the first level: equal inputs come back exactly
    ref = fields[0].values
    out = ref.copy()
    for wt, f in zip(weights[1:], fields[1:]):
        out += wt * (f.values - ref)
    return out


def gamma_sweep(fields: Sequence[LevelPixelField], gammas: Sequence[float]) -> list[np.ndarray]:
    return [factorize(fields, g) for g in gammas]


@lru_cache(maxsize=8)
def colormap_lut(name: str = "jet") -> np.ndarray:
    """256-entry uint8 RGB lookup table for a matplotlib colormap."""
    from matplotlib import colormaps

    rgba = colormaps[name](np.linspace(0.0, 1.0, 256))
    lut = np.rint(rgba[:, :3] * 255.0).astype(np.uint8)
    lut.flags.writeable = False
    return lut


def render_heatmap(field, base_image, colormap: str = "jet", alpha: float = 0.5, mask=None) -> np.ndarray:
    """Alpha-blend the colour-mapped field (values in [0, 1]) over an RGB base image.

    Pixels outside ``mask`` keep the base colour.
    """
    field = np.asarray(field, dtype=np.float64)
    base = np.asarray(base_image, dtype=np.uint8)
    if base.ndim != 3 or base.shape[:2] != field.shape:
        raise ValueError(f"field {field.shape} and image {base.shape} differ in size")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    idx = np.rint(np.clip(field, 0.0, 1.0) * 255.0).astype(np.intp)
    color = colormap_lut(colormap)[idx].astype(np.float64)
    out = np.rint((1.0 - alpha) * base + alpha * color).astype(np.uint8)
    if mask is not None:
        keep = ~np.asarray(mask, bool)
        out[keep] = base[keep]
    return out

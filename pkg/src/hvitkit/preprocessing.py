"""Tissue segmentation, region extraction and synthetic graded slides."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .hvit import Geometry
from .pnm import read_ppm, write_ppm

WHITE = 255
TARGET_SPACING = 0.5


@dataclass
class SlideRaster:
    pixels: np.ndarray  # uint8 [H, W, 3]
    spacing: float = TARGET_SPACING  # microns per pixel
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"slide pixels must be [H, W, 3], got {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise ValueError("slide pixels must be 8-bit")
        if min(self.pixels.shape[:2]) < 1:
            raise ValueError("slide must be at least 1x1")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class TissueMask:
    mask: np.ndarray  # bool [H, W]

    @property
    def shape(self):
        return self.mask.shape


@dataclass(frozen=True)
class SegmentParams:
    sat_threshold: int = 20  # out of 255
    median_kernel: int = 7
    min_hole_area: int = 64  # px^2

    def __post_init__(self):
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ValueError("median_kernel must be a positive odd integer")


@dataclass
class RegionSet:
    """Retained regions in row-major grid order."""

    region_size: int
    coords: list[tuple[int, int]]  # top-left (x, y)
    regions: list[np.ndarray]  # uint8 [S, S, 3]
    fractions: list[float]

    def __len__(self) -> int:
        return len(self.coords)

    def pixels(self) -> np.ndarray:
        return np.stack(self.regions) if self.regions else np.zeros((0, self.region_size, self.region_size, 3), np.uint8)


def read_slide(path, spacing: float = TARGET_SPACING) -> SlideRaster:
    return SlideRaster(read_ppm(path), spacing)


def write_slide(path, slide: SlideRaster) -> None:
    write_ppm(path, slide.pixels)


def rescale_to_spacing(slide: SlideRaster, target: float = TARGET_SPACING, tolerance: float = 0.05) -> SlideRaster:
    """Box-filter resample when the slide spacing is off target by more than ``tolerance``."""
    ratio = slide.spacing / target
    if abs(ratio - 1.0) <= tolerance:
        return slide
    w = max(1, int(round(slide.width * ratio)))
    h = max(1, int(round(slide.height * ratio)))
    interp = cv2.INTER_AREA if ratio < 1 else cv2.INTER_LINEAR
    out = cv2.resize(slide.pixels, (w, h), interpolation=interp)
    return SlideRaster(out, target, dict(slide.meta))


def segment_tissue(slide: SlideRaster, params: SegmentParams = SegmentParams()) -> TissueMask:
    """Threshold the median-filtered HSV saturation channel, then fill small holes."""
    sat = cv2.cvtColor(np.ascontiguousarray(slide.pixels), cv2.COLOR_RGB2HSV)[..., 1]
    if params.median_kernel > 1:
        sat = cv2.medianBlur(sat, params.median_kernel)
    mask = sat > params.sat_threshold
    if params.min_hole_area > 0 and mask.any():
        mask = _fill_small_holes(mask, params.min_hole_area)
    return TissueMask(mask)


def _fill_small_holes(mask: np.ndarray, min_area: int) -> np.ndarray:
    labels, n = ndimage.label(~mask)
    if n == 0:
        return mask
    border = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    fill = sizes < min_area
    fill[0] = False
    fill[border] = False
    return mask | fill[labels]


def _pad_to(arr: np.ndarray, h: int, w: int, value) -> np.ndarray:
    pad = [(0, h - arr.shape[0]), (0, w - arr.shape[1])] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, pad, constant_values=value)


def extract_regions(
    slide: SlideRaster,
    mask: TissueMask,
    geometry: Geometry,
    min_tissue: float = 0.10,
    workers: int = 1,
) -> RegionSet:
    """Non-overlapping grid of ``region_size`` squares anchored at the origin.

    Edge regions are padded with white (and no tissue) to full size. Regions
    whose tissue fraction is below ``min_tissue`` are dropped.
    """
    if not 0.0 <= min_tissue <= 1.0:
        raise ValueError("min_tissue must lie in [0, 1]")
    if mask.shape != slide.pixels.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match slide {slide.pixels.shape[:2]}")
    s = geometry.region_size
    rows, cols = math.ceil(slide.height / s), math.ceil(slide.width / s)
    pixels = _pad_to(slide.pixels, rows * s, cols * s, WHITE)
    tissue = _pad_to(mask.mask.astype(bool), rows * s, cols * s, False)

    def cell(idx):
        r, c = divmod(idx, cols)
        frac = float(np.count_nonzero(tissue[r * s : (r + 1) * s, c * s : (c + 1) * s])) / (s * s)
        return r, c, frac

    cells = range(rows * cols)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(cell, cells))
    else:
        results = [cell(i) for i in cells]
    coords, regions, fractions = [], [], []
    for r, c, frac in results:
        if frac >= min_tissue:
            coords.append((c * s, r * s))
            regions.append(pixels[r * s : (r + 1) * s, c * s : (c + 1) * s].copy())
            fractions.append(frac)
    return RegionSet(s, coords, regions, fractions)


def region_fractions(mask: TissueMask, coords, region_size: int) -> list[float]:
    """Tissue fractions of the given region footprints, recomputed from the mask."""
    h, w = mask.shape
    out = []
    for x, y in coords:
        sub = mask.mask[y : min(y + region_size, h), x : min(x + region_size, w)]
        out.append(float(np.count_nonzero(sub)) / (region_size * region_size))
    return out


def preprocess(slide: SlideRaster, geometry: Geometry, params: SegmentParams = SegmentParams(), min_tissue: float = 0.10):
    slide = rescale_to_spacing(slide)
    mask = segment_tissue(slide, params)
    return mask, extract_regions(slide, mask, geometry, min_tissue)


# --------------------------------------------------------------------------
# manifests

MANIFEST_HEADER = "# hvit regions v1"


def write_manifest(path, regions: RegionSet, region_paths, geometry: Geometry, extra: dict | None = None) -> None:
    lines = [MANIFEST_HEADER, f"# geometry = {','.join(map(str, geometry.as_tuple()))}"]
    for k, v in (extra or {}).items():
        lines.append(f"# {k} = {v}")
    for (x, y), frac, p in zip(regions.coords, regions.fractions, region_paths):
        lines.append(f"{x} {y} {frac!r} {p}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path, load_pixels: bool = True) -> tuple[RegionSet, dict]:
    path = Path(path)
    header, coords, fracs, regions = {}, [], [], []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            if "=" in line:
                k, v = line[1:].split("=", 1)
                header[k.strip()] = v.strip()
            continue
        x, y, frac, rel = line.split(maxsplit=3)
        coords.append((int(x), int(y)))
        fracs.append(float(frac))
        if load_pixels:
            p = Path(rel)
            regions.append(read_ppm(p if p.is_absolute() else path.parent / p))
    if "geometry" not in header:
        raise ValueError(f"{path}: manifest header lacks geometry")
    geometry = Geometry.parse(header["geometry"])
    return RegionSet(geometry.region_size, coords, regions, fracs), header


# --------------------------------------------------------------------------
# synthetic slides

# rough ISUP grade-group proportions of a prostate biopsy development set
GRADE_WEIGHTS = np.array([0.27, 0.25, 0.13, 0.12, 0.12, 0.11])

_TISSUE_RGB = np.array([228, 156, 200])
_NUCLEUS_RGB = np.array([72, 36, 112])


def sample_grades(count: int, seed: int, balanced: bool = False) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if balanced:
        grades = np.arange(count) % 6
        rng.shuffle(grades)
        return grades
    return rng.choice(6, size=count, p=GRADE_WEIGHTS / GRADE_WEIGHTS.sum())


def nuclei_rate(grade: int) -> float:
    """Expected nuclei per 1000 tissue pixels at a grade (before per-slide jitter)."""
    return 4.0 * (1 + 1.2 * grade)


def synth_slide(seed: int, grade: int, geometry: Geometry, regions_per_side: int = 2) -> tuple[SlideRaster, int]:
    """White slide with elliptical tissue blobs dotted with dark nuclei.

    Nucleus density and size irregularity grow with ``grade``. The generator's
    counters are stored in ``raster.meta``: ``dots``, ``tissue_px`` and
    ``dot_density`` (nuclei per 1000 tissue pixels).
    """
    if grade not in range(6):
        raise ValueError(f"grade must be in 0..5, got {grade!r}")
    rng = np.random.default_rng([seed, grade])
    size = regions_per_side * geometry.region_size
    unit = max(1.0, geometry.minipatch_size / 4)

    yy, xx = np.ogrid[0:size, 0:size]
    tissue = np.zeros((size, size), bool)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.25, 0.75, 2) * size
        ay, ax = rng.uniform(0.22, 0.45, 2) * size
        th = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        tissue |= (u / ax) ** 2 + (v / ay) ** 2 <= 1.0

    img = np.full((size, size, 3), 250.0)
    img += rng.normal(0, 2.0, img.shape)
    tint = _TISSUE_RGB + rng.normal(0, 6.0, 3)
    img[tissue] = tint + rng.normal(0, 8.0, (int(tissue.sum()), 3))

    tissue_px = int(tissue.sum())
    irregularity = 0.1 + 0.15 * grade
    rate = nuclei_rate(grade) * math.exp(rng.normal(0, 0.15))
    n_dots = int(rng.poisson(rate * tissue_px / 1000.0)) if tissue_px else 0
    ys, xs = np.nonzero(tissue)
    picks = rng.integers(0, len(ys), n_dots) if n_dots else np.zeros(0, int)
    for k in picks:
        cy, cx = ys[k], xs[k]
        ry = unit * max(0.5, 1 + irregularity * rng.normal())
        rx = unit * max(0.5, 1 + irregularity * rng.normal())
        y0, y1 = max(0, int(cy - ry - 1)), min(size, int(cy + ry + 2))
        x0, x1 = max(0, int(cx - rx - 1)), min(size, int(cx + rx + 2))
        win = ((yy[y0:y1] - cy) / ry) ** 2 + ((xx[:, x0:x1] - cx) / rx) ** 2 <= 1.0
        img[y0:y1, x0:x1][win] = _NUCLEUS_RGB + rng.normal(0, 10.0, 3)

    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    meta = {
        "grade": grade,
        "dots": n_dots,
        "tissue_px": tissue_px,
        "dot_density": 1000.0 * n_dots / tissue_px if tissue_px else 0.0,
    }
    return SlideRaster(pixels, TARGET_SPACING, meta), grade

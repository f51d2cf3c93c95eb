"""Synthetic graded datasets run through the real preprocessing pipeline."""

from __future__ import annotations

from pathlib import Path

from .evaluation.training import Dataset, SlideEntry
from .hvit import Geometry
from .preprocessing import SegmentParams, preprocess, sample_grades, synth_slide


def synthetic_dataset(
    count: int,
    seed: int,
    geometry: Geometry,
    balanced: bool = False,
    regions_per_side: int = 2,
    params: SegmentParams = SegmentParams(),
    min_tissue: float = 0.10,
) -> Dataset:
    """``count`` synthetic slides, segmented and tiled; slides left without regions are skipped."""
    grades = sample_grades(count, seed, balanced)
    entries = []
    for i, grade in enumerate(grades):
        slide, label = synth_slide(seed * 100003 + i, int(grade), geometry, regions_per_side)
        _, regions = preprocess(slide, geometry, params, min_tissue)
        if len(regions):
            entries.append(SlideEntry(f"slide_{i:04d}", regions.pixels(), label))
    return Dataset(entries)


LABELS_HEADER = "# hvit labels v1"


def write_labels(path, rows) -> None:
    """Labels manifest: one ``slide_id isup path`` line per slide (path may be ``-``)."""
    lines = [LABELS_HEADER] + [f"{sid} {int(isup)} {p}" for sid, isup, p in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_labels(path) -> list[tuple[str, int, str]]:
    rows, seen = [], set()
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(maxsplit=2)
        if len(parts) < 2:
            raise ValueError(f"{path}:{n}: expected 'slide_id isup [path]'")
        sid, isup = parts[0], int(parts[1])
        if isup not in range(6):
            raise ValueError(f"{path}:{n}: ISUP grade {isup} outside 0..5")
        if sid in seen:
            raise ValueError(f"{path}:{n}: duplicate slide id {sid!r}")
        seen.add(sid)
        rows.append((sid, isup, parts[2] if len(parts) > 2 else "-"))
    return rows

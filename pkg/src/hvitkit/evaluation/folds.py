"""Label-stratified k-fold partitions."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class FoldSplit:
    folds: list[list[int]]

    @property
    def k(self) -> int:
        return len(self.folds)

    def held_out(self, fold_id: int) -> list[int]:
        self._check(fold_id)
        return list(self.folds[fold_id])

    def training(self, fold_id: int) -> list[int]:
        self._check(fold_id)
        return sorted(i for f, idx in enumerate(self.folds) if f != fold_id for i in idx)

    def fold_of(self) -> dict[int, int]:
        return {i: f for f, idx in enumerate(self.folds) for i in idx}

    def _check(self, fold_id: int) -> None:
        if not 0 <= fold_id < self.k:
            raise ValueError(f"fold id {fold_id} out of range for {self.k} folds")


def stratified_kfold(labels: Sequence[int], k: int = 5, seed: int = 0) -> FoldSplit:
    """Shuffle each class with a seeded generator and deal its members round-robin.

    Dealing continues from the fold where the previous class stopped, so fold
    sizes stay within one of each other as well.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    cursor = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        rng.shuffle(members)
        for i in members:
            folds[cursor % k].append(int(i))
            cursor += 1
    return FoldSplit([sorted(f) for f in folds])


def write_folds(path, slide_ids: Sequence[str], split: FoldSplit) -> None:
    owner = split.fold_of()
    lines = [f"{sid} {owner[i]}" for i, sid in enumerate(slide_ids)]
    Path(path).write_text(f"# k = {split.k}\n" + "\n".join(lines) + "\n")


def read_folds(path) -> dict[str, int]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            sid, fold = line.split()
            out[sid] = int(fold)
    return out


def split_from_assignment(slide_ids: Sequence[str], assignment: dict[str, int]) -> FoldSplit:
    missing = [s for s in slide_ids if s not in assignment]
    if missing:
        raise ValueError(f"slides without a fold: {', '.join(missing[:5])}")
    k = max(assignment[s] for s in slide_ids) + 1
    folds: list[list[int]] = [[] for _ in range(k)]
    for i, sid in enumerate(slide_ids):
        folds[assignment[sid]].append(i)
    return FoldSplit(folds)

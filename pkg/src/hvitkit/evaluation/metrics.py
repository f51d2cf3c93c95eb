"""Grade decoding, quadratic weighted kappa and a paired permutation test."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

NUM_CLASSES = 6  # ISUP grade groups 0..5


def predict_isup(score: float) -> int:
    """Round half away from zero, then clamp to 0..5."""
    r = math.copysign(math.floor(abs(score) + 0.5), score)
    return int(min(max(r, 0), NUM_CLASSES - 1))


def _as_labels(x, name: str) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if arr.size and (arr.min() < 0 or arr.max() >= NUM_CLASSES or not np.all(arr == np.round(arr))):
        raise ValueError(f"{name} must hold integers in 0..{NUM_CLASSES - 1}")
    return arr.astype(np.intp)


def _weights(c: int) -> np.ndarray:
    i = np.arange(c)
    return (i[:, None] - i[None, :]) ** 2 / (c - 1) ** 2


def _kappa_from_confusion(conf: np.ndarray) -> np.ndarray:
    """QWK for a stack of confusion matrices [..., C, C] (rows: labels, cols: predictions)."""
    w = _weights(conf.shape[-1])
    total = conf.sum(axis=(-2, -1))
    expected = conf.sum(axis=-1)[..., :, None] * conf.sum(axis=-2)[..., None, :] / total[..., None, None]
    num = (w * conf).sum(axis=(-2, -1))
    den = (w * expected).sum(axis=(-2, -1))
    with np.errstate(invalid="ignore", divide="ignore"):
        k = 1.0 - num / den
    # no expected disagreement: both vectors constant and equal
    return np.where(den == 0, 1.0, k)


def confusion(labels, preds, num_classes: int = NUM_CLASSES) -> np.ndarray:
    idx = np.asarray(labels) * num_classes + np.asarray(preds)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes).astype(np.float64)


def qwk(labels: Sequence[int], preds: Sequence[int]) -> float:
    """Quadratic weighted kappa over grades 0..5.

    Defined as 1.0 when the expected weighted disagreement is zero.
    """
    y = _as_labels(labels, "labels")
    p = _as_labels(preds, "preds")
    if len(y) != len(p):
        raise ValueError(f"labels and preds differ in length ({len(y)} vs {len(p)})")
    if len(y) == 0:
        raise ValueError("qwk needs at least one sample")
    return float(_kappa_from_confusion(confusion(y, p)))


def permutation_test(labels, preds_a, preds_b, iters: int = 9999, seed: int = 0, chunk: int = 2048) -> float:
    """Two-sided paired permutation test on the QWK difference of two prediction sets.

    Each null draw swaps ``preds_a[i]`` and ``preds_b[i]`` independently with
    probability 1/2. Returns ``(1 + #{|t*| >= |t|}) / (iters + 1)``.
    """
    y = _as_labels(labels, "labels")
    a = _as_labels(preds_a, "preds_a")
    b = _as_labels(preds_b, "preds_b")
    if not len(y) == len(a) == len(b):
        raise ValueError("labels and both prediction sets must have equal length")
    if iters < 1:
        raise ValueError("iters must be at least 1")
    c = NUM_CLASSES
    t = qwk(y, a) - qwk(y, b)
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < iters:
        m = min(chunk, iters - done)
        swap = rng.random((m, len(y))) < 0.5
        pa = np.where(swap, b, a)
        pb = np.where(swap, a, b)
        offs = (np.arange(m) * c * c)[:, None]
        base = y * c
        ca = np.bincount((offs + base + pa).ravel(), minlength=m * c * c).reshape(m, c, c)
        cb = np.bincount((offs + base + pb).ravel(), minlength=m * c * c).reshape(m, c, c)
        tstar = _kappa_from_confusion(ca.astype(np.float64)) - _kappa_from_confusion(cb.astype(np.float64))
        hits += int(np.count_nonzero(np.abs(tstar) >= abs(t) - 1e-12))
        done += m
    return (1 + hits) / (iters + 1)

"""Regression training under a freeze scheme, evaluation and fold ensembling."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import hvit
from ..hvit import FreezeScheme, HViTModel
from ..numerics import Graph, Tensor, backward, concat, mse_loss, reshape
from .folds import FoldSplit
from .metrics import predict_isup, qwk

log = logging.getLogger(__name__)


@dataclass
class SlideEntry:
    slide_id: str
    regions: np.ndarray  # uint8 [R, S, S, 3]
    isup: int
    site: str | None = None

    def __post_init__(self):
        if self.isup not in range(6):
            raise ValueError(f"{self.slide_id}: ISUP label must be in 0..5, got {self.isup}")
        self.regions = np.asarray(self.regions)
        if self.regions.ndim != 4 or len(self.regions) == 0:
            raise ValueError(f"{self.slide_id}: needs at least one region of shape [S, S, 3]")


@dataclass
class Dataset:
    entries: list[SlideEntry]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> list[int]:
        return [e.isup for e in self.entries]

    @property
    def slide_ids(self) -> list[str]:
        return [e.slide_id for e in self.entries]


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    optimizer: str = "sgd"  # sgd | momentum | adam
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    scheme: FreezeScheme | None = None
    init_head_bias: bool = True  # start the head bias at the mean training grade

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class Prediction:
    slide_id: str
    score: float
    grade: int
    label: int


class Optimizer:
    """SGD (optionally with momentum) or Adam over named arrays, updated in place."""

    def __init__(self, kind: str, lr: float, momentum: float = 0.9, betas=(0.9, 0.999), eps: float = 1e-8):
        self.kind, self.lr, self.momentum = kind, lr, momentum
        self.betas, self.eps = betas, eps
        self.state: dict[str, tuple] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, g in grads.items():
            p = params[name]
            if self.kind == "sgd":
                p -= self.lr * g
            elif self.kind == "momentum":
                (v,) = self.state.get(name, (np.zeros_like(p),))
                v = self.momentum * v + g
                self.state[name] = (v,)
                p -= self.lr * v
            else:
                b1, b2 = self.betas
                m, v = self.state.get(name, (np.zeros_like(p), np.zeros_like(p)))
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                self.state[name] = (m, v)
                mhat = m / (1 - b1**self.t)
                vhat = v / (1 - b2**self.t)
                p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _param_views(model: HViTModel) -> dict[str, np.ndarray]:
    """Trainable arrays of ``model`` keyed by their graph parameter names."""
    views = {}
    for stage in hvit.STAGES + ("head",):
        if stage != "head" and model.scheme.is_frozen(stage):
            continue
        prefix = "head.linear." if stage == "head" else f"{stage}."
        views.update({prefix + k: v for k, v in model.weights(stage).items()})
    return views


class _Scorer:
    """Scores slides, reusing frozen-stage outputs computed once per slide."""

    def __init__(self, model: HViTModel, dataset: Dataset):
        self.model = model
        self.dataset = dataset
        self.cache: dict[int, hvit.PrefixCache | None] = {}

    def prefix(self, i: int):
        if i not in self.cache:
            self.cache[i] = hvit.frozen_prefix(self.model, self.dataset.entries[i].regions)
        return self.cache[i]

    def score_tensor(self, i: int, bound) -> Tensor:
        cache = self.prefix(i)
        regions = None if cache is not None else self.dataset.entries[i].regions
        return hvit.run(self.model, regions, bound=bound, cache=cache)[0]

    def score(self, i: int) -> float:
        return self.score_tensor(i, None).item()


def train_step(model: HViTModel, scorer: _Scorer, batch: Sequence[int], opt: Optimizer) -> float:
    g = Graph()
    bound = hvit.bind_model(model, g)
    scores = [reshape(scorer.score_tensor(i, bound), (1,)) for i in batch]
    targets = np.array([scorer.dataset.entries[i].isup for i in batch], dtype=np.float64)
    loss = mse_loss(concat(scores, axis=0), Tensor(targets))
    opt.step(_param_views(model), backward(g, loss))
    return loss.item()


def train(
    model: HViTModel,
    dataset: Dataset,
    folds: FoldSplit,
    fold_id: int,
    cfg: TrainConfig = TrainConfig(),
) -> tuple[HViTModel, list[dict]]:
    """Fit ``model`` on every fold except ``fold_id`` and score that fold after each epoch.

    Only stages that the scheme leaves unfrozen (and the head) receive updates.
    Returns the trained copy and one log record per epoch with the mean
    training loss and the held-out QWK.
    """
    model = model.copy()
    if cfg.scheme is not None:
        model.scheme = cfg.scheme
    if model.scheme.slide:
        raise ValueError("the slide-level stage cannot be frozen during training")
    train_idx = folds.training(fold_id)
    tune_idx = folds.held_out(fold_id)
    if not train_idx:
        raise ValueError(f"fold {fold_id} leaves no training slides")
    if cfg.init_head_bias:
        model.head_w["b"][:] = np.mean([dataset.entries[i].isup for i in train_idx])
    scorer = _Scorer(model, dataset)
    opt = Optimizer(cfg.optimizer, cfg.lr, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        losses = [
            train_step(model, scorer, order[s : s + cfg.batch_size], opt)
            for s in range(0, len(order), cfg.batch_size)
        ]
        record = {"epoch": epoch + 1, "loss": float(np.mean(losses))}
        if tune_idx:
            preds = [predict_isup(scorer.score(i)) for i in tune_idx]
            record["qwk"] = qwk([dataset.entries[i].isup for i in tune_idx], preds)
        history.append(record)
        log.info("fold %d epoch %d loss %.4f qwk %s", fold_id, epoch + 1, record["loss"], record.get("qwk"))
    return model, history


def evaluate(model: HViTModel, dataset: Dataset, subset: Sequence[int] | None = None) -> tuple[float, list[Prediction]]:
    """QWK and per-slide predictions over ``subset`` (all slides by default)."""
    idx = list(range(len(dataset))) if subset is None else list(subset)
    if not idx:
        raise ValueError("empty evaluation subset")
    scorer = _Scorer(model, dataset)
    preds = []
    for i in idx:
        e = dataset.entries[i]
        s = scorer.score(i)
        preds.append(Prediction(e.slide_id, s, predict_isup(s), e.isup))
    return qwk([p.label for p in preds], [p.grade for p in preds]), preds


def ensemble_predict(models: Sequence[HViTModel], dataset: Dataset, subset: Sequence[int] | None = None) -> list[Prediction]:
    """Average continuous scores across models, then decode the grade."""
    if not models:
        raise ValueError("no models to ensemble")
    runs = [evaluate(m, dataset, subset)[1] for m in models]
    out = []
    for per_slide in zip(*runs):
        mean = float(np.mean([p.score for p in per_slide]))
        first = per_slide[0]
        out.append(Prediction(first.slide_id, mean, predict_isup(mean), first.label))
    return out


def write_predictions(path, preds: Sequence[Prediction]) -> None:
    lines = [f"{p.slide_id} {p.score!r} {p.grade} {p.label}" for p in preds]
    Path(path).write_text("\n".join(lines) + "\n")


def read_predictions(path) -> list[Prediction]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            sid, score, grade, label = line.split()
            out.append(Prediction(sid, float(score), int(grade), int(label)))
    return out

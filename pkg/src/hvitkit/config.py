"""Flat ``key = value`` run configuration.

Values come from built-in defaults, then an optional config file, then
command-line overrides. Unknown keys and unparsable values are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

from .evaluation.training import TrainConfig
from .hvit import FreezeScheme, Geometry, HViTModel, build_model
from .preprocessing import SegmentParams
from .vit import ViTConfig


class ConfigError(ValueError):
    pass


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise ValueError("must be a positive integer")
    return v


def _nonneg_int(s: str) -> int:
    v = int(s)
    if v < 0:
        raise ValueError("must be a non-negative integer")
    return v


def _positive_float(s: str) -> float:
    v = float(s)
    if not v > 0:
        raise ValueError("must be positive")
    return v


def _unit_float(s: str) -> float:
    v = float(s)
    if not 0.0 <= v <= 1.0:
        raise ValueError("must lie in [0, 1]")
    return v


def _scheme(s: str) -> str:
    FreezeScheme.parse(s)
    return s.strip().lower()


def _optimizer(s: str) -> str:
    if s not in ("sgd", "momentum", "adam"):
        raise ValueError("must be sgd, momentum or adam")
    return s


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], object], str]] = {
    "geometry.region_size": (_positive_int, "64"),
    "geometry.patch_size": (_positive_int, "16"),
    "geometry.minipatch_size": (_positive_int, "4"),
    "scheme": (_scheme, "local"),
    "model.seed": (int, "0"),
    "model.init_std": (_positive_float, "0.2"),
    "train.epochs": (_positive_int, "20"),
    "train.lr": (float, "0.001"),
    "train.optimizer": (_optimizer, "sgd"),
    "train.momentum": (float, "0.9"),
    "train.batch_size": (_positive_int, "8"),
    "train.seed": (int, "0"),
    "preprocess.sat_threshold": (_nonneg_int, "20"),
    "preprocess.median_kernel": (_positive_int, "7"),
    "preprocess.min_hole_area": (_nonneg_int, "64"),
    "preprocess.min_tissue": (_unit_float, "0.1"),
}
for _stage in ("patch_vit", "region_vit", "slide_vit"):
    SCHEMA[f"{_stage}.embed_dim"] = (_positive_int, "16")
    SCHEMA[f"{_stage}.depth"] = (_positive_int, "1")
    SCHEMA[f"{_stage}.num_heads"] = (_positive_int, "2")
    SCHEMA[f"{_stage}.mlp_ratio"] = (_positive_float, "2.0")

MODEL_KEYS = [k for k in SCHEMA if k.split(".")[0] in ("geometry", "patch_vit", "region_vit", "slide_vit", "model")] + [
    "scheme"
]


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        k, v = (p.strip() for p in line.split("=", 1))
        out[k] = v
    return out


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path=None, overrides: Mapping[str, object] | None = None) -> RunConfig:
        raw = {k: d for k, (_, d) in SCHEMA.items()}
        if path is not None:
            raw.update(parse_text(Path(path).read_text(), str(path)))
        raw.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
        unknown = sorted(set(raw) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        values = {}
        for k, s in raw.items():
            try:
                values[k] = SCHEMA[k][0](s)
            except ValueError as exc:
                raise ConfigError(f"bad value for {k}: {s!r} ({exc})") from None
        cfg = cls(values)
        cfg.geometry()  # divisibility check
        return cfg

    def __getitem__(self, key: str):
        return self.values[key]

    def geometry(self) -> Geometry:
        try:
            return Geometry(
                self["geometry.region_size"], self["geometry.patch_size"], self["geometry.minipatch_size"]
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def stage_configs(self) -> tuple[ViTConfig, ViTConfig, ViTConfig]:
        g = self.geometry()
        grids = {"patch_vit": (g.minipatches_per_side,) * 2, "region_vit": (g.patches_per_side,) * 2, "slide_vit": None}
        in_dims = {
            "patch_vit": g.minipatch_dim,
            "region_vit": self["patch_vit.embed_dim"],
            "slide_vit": self["region_vit.embed_dim"],
        }
        out = []
        for stage in ("patch_vit", "region_vit", "slide_vit"):
            try:
                out.append(
                    ViTConfig(
                        in_dims[stage],
                        self[f"{stage}.embed_dim"],
                        self[f"{stage}.depth"],
                        self[f"{stage}.num_heads"],
                        self[f"{stage}.mlp_ratio"],
                        grids[stage],
                    )
                )
            except ValueError as exc:
                raise ConfigError(f"{stage}: {exc}") from None
        return tuple(out)

    def scheme(self) -> FreezeScheme:
        return FreezeScheme.parse(self["scheme"])

    def build_model(self) -> HViTModel:
        return build_model(
            self.geometry(), self.stage_configs(), self.scheme(), self["model.seed"], self["model.init_std"]
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self["train.epochs"],
            lr=self["train.lr"],
            optimizer=self["train.optimizer"],
            momentum=self["train.momentum"],
            batch_size=self["train.batch_size"],
            seed=self["train.seed"],
            scheme=self.scheme(),
        )

    def segment_params(self) -> SegmentParams:
        try:
            return SegmentParams(
                self["preprocess.sat_threshold"], self["preprocess.median_kernel"], self["preprocess.min_hole_area"]
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def dump(self, keys=None) -> str:
        keys = list(self.values) if keys is None else keys
        return "".join(f"{k} = {self.values[k]}\n" for k in keys)


def model_config_text(model: HViTModel, init_std: float, seed: int) -> str:
    """Config lines that rebuild ``model``'s architecture and scheme."""
    g = model.geometry
    lines = {
        "geometry.region_size": g.region_size,
        "geometry.patch_size": g.patch_size,
        "geometry.minipatch_size": g.minipatch_size,
        "scheme": model.scheme.name,
        "model.seed": seed,
        "model.init_std": init_std,
    }
    for stage in ("patch", "region", "slide"):
        c = model.config(stage)
        lines.update(
            {
                f"{stage}_vit.embed_dim": c.embed_dim,
                f"{stage}_vit.depth": c.depth,
                f"{stage}_vit.num_heads": c.num_heads,
                f"{stage}_vit.mlp_ratio": c.mlp_ratio,
            }
        )
    return "".join(f"{k} = {v}\n" for k, v in lines.items())

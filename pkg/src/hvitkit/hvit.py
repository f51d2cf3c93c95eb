"""Three-stage hierarchical ViT: patch-, region- and slide-level stages plus a linear head.

Mini-patches of a patch are tokens of the patch-level stage; patch embeddings
of a region are tokens of the region-level stage; region embeddings of a slide
are tokens of the slide-level stage. The slide CLS embedding is mapped to a
single continuous grade.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import vit
from .numerics import Graph, Tensor, add_bias, checkpoint, matmul, reshape
from .vit import ViTConfig

STAGES = ("patch", "region", "slide")


@dataclass(frozen=True)
class Geometry:
    region_size: int
    patch_size: int
    minipatch_size: int

    def __post_init__(self):
        if min(self.region_size, self.patch_size, self.minipatch_size) < 1:
            raise ValueError("geometry sizes must be positive")
        if self.region_size % self.patch_size or self.patch_size % self.minipatch_size:
            raise ValueError(
                f"geometry {self.as_tuple()} must satisfy region % patch == 0 and patch % minipatch == 0"
            )

    @property
    def patches_per_side(self) -> int:
        return self.region_size // self.patch_size

    @property
    def minipatches_per_side(self) -> int:
        return self.patch_size // self.minipatch_size

    @property
    def minipatch_dim(self) -> int:
        return self.minipatch_size * self.minipatch_size * 3

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.region_size, self.patch_size, self.minipatch_size)

    @classmethod
    def parse(cls, text: str) -> Geometry:
        if text.lower() == "full":
            return FULL
        parts = [int(p) for p in text.replace("x", ",").split(",")]
        if len(parts) != 3:
            raise ValueError(f"geometry must be 'full' or 'region,patch,minipatch', got {text!r}")
        return cls(*parts)


FULL = Geometry(2048, 256, 16)
TEST = Geometry(64, 16, 4)


@dataclass(frozen=True)
class FreezeScheme:
    """Which stages keep their (pretrained) weights fixed during training."""

    patch: bool
    region: bool
    slide: bool = False

    @property
    def flags(self) -> tuple[bool, bool, bool]:
        return (self.patch, self.region, self.slide)

    @property
    def n_total(self) -> int:
        return 3

    @property
    def n_frozen(self) -> int:
        return sum(self.flags)

    def is_frozen(self, stage: str) -> bool:
        return self.flags[STAGES.index(stage)]

    @property
    def name(self) -> str:
        for key, scheme in SCHEMES.items():
            if scheme == self:
                return key
        return ",".join(s for s, f in zip(STAGES, self.flags) if f) or "none"

    @classmethod
    def parse(cls, text: str) -> FreezeScheme:
        """``local``, ``global``, or a comma list of frozen stage names (``none`` for no stage)."""
        key = text.strip().lower()
        if key in SCHEMES:
            return SCHEMES[key]
        names = set() if key == "none" else {s.strip() for s in key.split(",") if s.strip()}
        unknown = names - set(STAGES)
        if unknown:
            raise ValueError(f"unknown stage(s) in freeze scheme: {', '.join(sorted(unknown))}")
        return cls(*(s in names for s in STAGES))


GLOBAL = FreezeScheme(patch=True, region=True, slide=False)
LOCAL = FreezeScheme(patch=True, region=False, slide=False)
SCHEMES = {"global": GLOBAL, "local": LOCAL}


@dataclass
class HViTModel:
    geometry: Geometry
    patch_cfg: ViTConfig
    region_cfg: ViTConfig
    slide_cfg: ViTConfig
    patch_w: dict
    region_w: dict
    slide_w: dict
    head_w: dict
    scheme: FreezeScheme = LOCAL

    def __post_init__(self):
        g = self.geometry
        if self.patch_cfg.input_token_dim != g.minipatch_dim:
            raise ValueError(f"patch stage expects tokens of dim {g.minipatch_dim}")
        if self.patch_cfg.grid not in (None, (g.minipatches_per_side,) * 2):
            raise ValueError("patch stage grid does not match the mini-patch grid")
        if self.region_cfg.input_token_dim != self.patch_cfg.embed_dim:
            raise ValueError("region stage input dim must equal patch stage embed dim")
        if self.region_cfg.grid not in (None, (g.patches_per_side,) * 2):
            raise ValueError("region stage grid does not match the patch grid")
        if self.slide_cfg.input_token_dim != self.region_cfg.embed_dim:
            raise ValueError("slide stage input dim must equal region stage embed dim")
        if self.slide_cfg.grid is not None:
            raise ValueError("slide stage takes a variable number of regions and cannot have a grid")

    def config(self, stage: str) -> ViTConfig:
        return getattr(self, f"{stage}_cfg")

    def weights(self, stage: str) -> dict:
        return self.head_w if stage == "head" else getattr(self, f"{stage}_w")

    def state(self) -> dict[str, np.ndarray]:
        """All tensors keyed ``<stage>.<block>.<tensor>``."""
        out = {}
        for stage in STAGES:
            out.update({f"{stage}.{k}": v for k, v in self.weights(stage).items()})
        out.update({f"head.linear.{k}": v for k, v in self.head_w.items()})
        return out

    def stage_state(self, stage: str) -> dict[str, np.ndarray]:
        prefix = "head.linear." if stage == "head" else f"{stage}."
        return {prefix + k: v for k, v in self.weights(stage).items()}

    def copy(self) -> HViTModel:
        dup = {s: {k: np.array(v) for k, v in self.weights(s).items()} for s in STAGES + ("head",)}
        return dataclasses.replace(
            self, patch_w=dup["patch"], region_w=dup["region"], slide_w=dup["slide"], head_w=dup["head"]
        )


def default_stage_configs(
    geometry: Geometry,
    embed_dim: int = 16,
    depth: int = 1,
    num_heads: int = 2,
    mlp_ratio: float = 2.0,
) -> tuple[ViTConfig, ViTConfig, ViTConfig]:
    """Patch/region stages get positional tables for their fixed grids; the slide stage does not."""
    m, p = geometry.minipatches_per_side, geometry.patches_per_side
    patch = ViTConfig(geometry.minipatch_dim, embed_dim, depth, num_heads, mlp_ratio, (m, m))
    region = ViTConfig(embed_dim, embed_dim, depth, num_heads, mlp_ratio, (p, p))
    slide = ViTConfig(embed_dim, embed_dim, depth, num_heads, mlp_ratio, None)
    return patch, region, slide


def init_head(embed_dim: int, seed: int, std: float = vit.INIT_STD) -> dict:
    rng = np.random.default_rng(seed)
    return {"w": rng.normal(0.0, std, size=(embed_dim, 1)), "b": np.zeros(1)}


def build_model(
    geometry: Geometry,
    configs: Sequence[ViTConfig] | None = None,
    scheme: FreezeScheme = LOCAL,
    seed: int = 0,
    init_std: float = vit.INIT_STD,
) -> HViTModel:
    pc, rc, sc = configs if configs is not None else default_stage_configs(geometry)
    return HViTModel(
        geometry,
        pc,
        rc,
        sc,
        vit.init_weights(pc, seed, init_std),
        vit.init_weights(rc, seed + 1, init_std),
        vit.init_weights(sc, seed + 2, init_std),
        init_head(sc.embed_dim, seed + 3, init_std),
        scheme,
    )


# --------------------------------------------------------------------------
# pixel -> token layout


def normalize_pixels(pixels) -> np.ndarray:
    """Map 8-bit intensities to [-1, 1]."""
    return (np.asarray(pixels, dtype=np.float64) / 255.0 - 0.5) / 0.5


def split_grid(img: np.ndarray, cell: int) -> np.ndarray:
    """[..., S, S, C] -> [..., (S/cell)^2, cell, cell, C], cells in row-major order."""
    *lead, s, s2, c = img.shape
    k = s // cell
    x = img.reshape(*lead, k, cell, k, cell, c)
    x = np.moveaxis(x, -4, -3)  # [..., k, k, cell, cell, C]
    return x.reshape(*lead, k * k, cell, cell, c)


def minipatch_tokens(patches: np.ndarray, geometry: Geometry) -> np.ndarray:
    """[..., P, P, 3] pixels -> [..., m*m, mini*mini*3] normalized tokens."""
    cells = split_grid(normalize_pixels(patches), geometry.minipatch_size)
    return cells.reshape(*cells.shape[:-3], geometry.minipatch_dim)


def _check_pixels(arr: np.ndarray, size: int, what: str) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.shape[-3:] != (size, size, 3):
        raise ValueError(f"{what} must have shape ({size}, {size}, 3), got {arr.shape}")
    return arr


# --------------------------------------------------------------------------
# stage evaluation


@dataclass
class PrefixCache:
    """Outputs of the leading frozen stages for a fixed set of regions.

    ``level`` is how many stages are already applied: 1 means ``tokens`` are
    patch embeddings [R, G, Dp]; 2 means region embeddings [R, Dr].
    """

    level: int
    tokens: np.ndarray
    patch_attn: np.ndarray
    region_attn: np.ndarray | None = None


@dataclass
class AttentionBundle:
    """Per-level CLS attention at token granularity.

    ``patch_attn`` [R, g, g, m, m]: attention over each patch's mini-patches.
    ``region_attn`` [R, g, g]: attention over each region's patches.
    ``slide_attn`` [R]: attention over the slide's regions.
    """

    patch_attn: np.ndarray
    region_attn: np.ndarray
    slide_attn: np.ndarray
    frozen_flags: tuple[bool, bool, bool]

    def levels(self):
        return list(zip(STAGES, (self.patch_attn, self.region_attn, self.slide_attn), self.frozen_flags))


def _patch_stage(model: HViTModel, params, regions: np.ndarray, chunk: int | None = None):
    g = model.geometry
    R = regions.shape[0]
    G = g.patches_per_side**2
    patches = split_grid(np.asarray(regions), g.patch_size)  # [R, G, P, P, 3]
    toks = minipatch_tokens(patches, g).reshape(R * G, g.minipatches_per_side**2, g.minipatch_dim)
    cfg = model.patch_cfg
    if chunk is None or chunk >= R * G:
        cls, attn = vit.forward(cfg, params, toks)
        return reshape(cls, (R, G, cfg.embed_dim)), attn.data.reshape(R, G, -1)
    out, att = [], []
    for i in range(0, R * G, chunk):
        c, a = vit.forward(cfg, params, toks[i : i + chunk])
        out.append(c.data)
        att.append(a.data)
    return Tensor(np.concatenate(out).reshape(R, G, cfg.embed_dim)), np.concatenate(att).reshape(R, G, -1)


def _region_stage(model: HViTModel, params, patch_tokens):
    cls, attn = vit.forward(model.region_cfg, params, patch_tokens)
    return cls, attn.data


def _slide_stage(model: HViTModel, params, region_tokens):
    cls, attn = vit.forward(model.slide_cfg, params, region_tokens)
    return cls, attn.data


def _head(params, slide_cls) -> Tensor:
    d = slide_cls.shape[-1]
    out = add_bias(matmul(reshape(slide_cls, (1, d)), params["w"]), params["b"])
    return reshape(out, ())


def _chunk_size(cfg: ViTConfig) -> int:
    seq = (cfg.seq_len or 1) + 1
    return max(1, int(4e6 // (cfg.num_heads * seq * seq + seq * cfg.embed_dim * 8)))


def frozen_prefix(model: HViTModel, regions: np.ndarray) -> PrefixCache | None:
    """Precompute the leading frozen stages (none if the patch stage is trainable)."""
    if not model.scheme.patch:
        return None
    regions = _check_pixels(regions, model.geometry.region_size, "region")
    tokens, patch_attn = _patch_stage(model, model.patch_w, regions, _chunk_size(model.patch_cfg))
    if not model.scheme.region:
        return PrefixCache(1, tokens.data, patch_attn)
    cls, region_attn = _region_stage(model, model.region_w, tokens)
    return PrefixCache(2, cls.data, patch_attn, region_attn)


def bind_model(model: HViTModel, graph: Graph | None) -> dict[str, dict]:
    """Bind every stage's weights; non-frozen stages become trainable parameters on ``graph``."""
    bound = {}
    for stage in STAGES + ("head",):
        frozen = stage != "head" and model.scheme.is_frozen(stage)
        prefix = "head.linear." if stage == "head" else f"{stage}."
        bound[stage] = vit.bind(model.weights(stage), graph, trainable=not frozen, prefix=prefix)
    return bound


def run(model: HViTModel, regions=None, bound=None, cache: PrefixCache | None = None):
    """Score one slide given its region pixels [R, S, S, 3] or a :class:`PrefixCache`.

    Returns (score tensor of shape (), patch_attn [R, G, M], region_attn [R, G], slide_attn [R]).
    """
    bound = bound if bound is not None else bind_model(model, None)
    if cache is None:
        regions = _check_pixels(regions, model.geometry.region_size, "region")
        if regions.ndim != 4 or regions.shape[0] < 1:
            raise ValueError("a slide needs at least one region")
        tokens, patch_attn = _patch_stage(model, bound["patch"], regions)
        level = 1
    else:
        tokens, patch_attn, level = Tensor(cache.tokens), cache.patch_attn, cache.level
    if level == 1:
        tokens, region_attn = _region_stage(model, bound["region"], tokens)
    else:
        region_attn = cache.region_attn
    slide_cls, slide_attn = _slide_stage(model, bound["slide"], tokens)
    return _head(bound["head"], slide_cls), patch_attn, region_attn, slide_attn


def embed_patch(model: HViTModel, patch_pixels) -> tuple[Tensor, np.ndarray]:
    """Patch embedding and its mini-patch attention grid [m, m]."""
    g = model.geometry
    px = _check_pixels(patch_pixels, g.patch_size, "patch")
    if px.ndim != 3:
        raise ValueError("embed_patch takes a single patch")
    toks = minipatch_tokens(px, g)
    cls, attn = vit.forward(model.patch_cfg, model.patch_w, toks)
    m = g.minipatches_per_side
    return cls, attn.data.reshape(m, m)


def embed_region(model: HViTModel, region_pixels) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Region embedding, its patch attention grid [g, g] and per-patch mini-patch attention [g, g, m, m]."""
    geo = model.geometry
    px = _check_pixels(region_pixels, geo.region_size, "region")
    if px.ndim != 3:
        raise ValueError("embed_region takes a single region")
    tokens, patch_attn = _patch_stage(model, model.patch_w, px[None])
    cls, region_attn = _region_stage(model, model.region_w, reshape(tokens, tokens.shape[1:]))
    g, m = geo.patches_per_side, geo.minipatches_per_side
    return cls, region_attn.reshape(g, g), patch_attn.reshape(g, g, m, m)


def forward_slide(model: HViTModel, regions) -> tuple[float, AttentionBundle]:
    """Continuous grade and attention bundle for a slide given as a list of region pixel arrays."""
    if len(regions) == 0:
        raise ValueError("forward_slide needs at least one region")
    stack = np.stack([np.asarray(r) for r in regions])
    cache = frozen_prefix(model, stack)
    score, patch_attn, region_attn, slide_attn = run(model, stack, cache=cache)
    return score.item(), make_bundle(model, patch_attn, region_attn, slide_attn)


def make_bundle(model: HViTModel, patch_attn, region_attn, slide_attn) -> AttentionBundle:
    geo = model.geometry
    g, m = geo.patches_per_side, geo.minipatches_per_side
    R = len(slide_attn)
    return AttentionBundle(
        np.asarray(patch_attn).reshape(R, g, g, m, m),
        np.asarray(region_attn).reshape(R, g, g),
        np.asarray(slide_attn).reshape(R),
        model.scheme.flags,
    )


def head_param_count(model: HViTModel) -> int:
    return sum(int(np.size(v)) for v in model.head_w.values())


def trainable_param_count(model: HViTModel) -> int:
    stages = sum(vit.param_count(model.config(s)) for s in STAGES if not model.scheme.is_frozen(s))
    return stages + head_param_count(model)


def total_param_count(model: HViTModel) -> int:
    return sum(vit.param_count(model.config(s)) for s in STAGES) + head_param_count(model)


def load_state(model: HViTModel, state: Mapping[str, np.ndarray], stages: Sequence[str]) -> HViTModel:
    """Copy of ``model`` with the given stages replaced from a flat ``<stage>.*`` state dict."""
    new = model.copy()
    problems = []
    for stage in stages:
        expected = model.stage_state(stage)
        for name, ref in expected.items():
            if name not in state:
                problems.append(f"{name} (missing)")
            elif np.shape(state[name]) != np.shape(ref):
                problems.append(f"{name} (shape {np.shape(state[name])}, expected {np.shape(ref)})")
    if problems:
        raise ValueError("checkpoint does not match model: " + "; ".join(problems))
    for stage in stages:
        target = new.weights(stage)
        prefix = "head.linear." if stage == "head" else f"{stage}."
        for k in list(target):
            target[k] = np.array(state[prefix + k], dtype=np.float64)
    return new


def load_frozen(model: HViTModel, checkpoint_path) -> HViTModel:
    """Replace the weights of frozen stages from a checkpoint; trainable stages are untouched."""
    state = checkpoint.load(checkpoint_path)
    return load_state(model, state, [s for s in STAGES if model.scheme.is_frozen(s)])


def save_weights(model: HViTModel, path) -> None:
    checkpoint.save(path, model.state())


def load_weights(model: HViTModel, path) -> HViTModel:
    return load_state(model, checkpoint.load(path), STAGES + ("head",))

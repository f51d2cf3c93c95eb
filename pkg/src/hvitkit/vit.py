"""A single Vision Transformer stage.

Tokens are linearly projected, optionally offset by a learned positional table,
prefixed with a CLS token and passed through pre-norm transformer blocks. The
stage output is the CLS embedding of the final block plus the CLS-to-token
attention of that block, averaged over heads, with the CLS self-weight removed
and the remainder renormalized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .numerics import (
    Graph,
    Tensor,
    add,
    add_bias,
    concat,
    expand,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scale,
    softmax_rows,
    take,
    transpose,
)

ViTWeights = dict  # tensor name -> np.ndarray, names like "stem.proj_w", "0.qkv_w", "final.norm_g"

LN_EPS = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class ViTConfig:
    input_token_dim: int
    embed_dim: int
    depth: int
    num_heads: int
    mlp_ratio: float = 2.0
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        for name in ("input_token_dim", "embed_dim", "depth", "num_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"ViTConfig.{name} must be positive")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")
        if self.grid is not None:
            object.__setattr__(self, "grid", (int(self.grid[0]), int(self.grid[1])))

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return max(1, int(round(self.embed_dim * self.mlp_ratio)))

    @property
    def seq_len(self) -> int | None:
        return None if self.grid is None else self.grid[0] * self.grid[1]


def weight_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    """Declared tensors of a stage, in canonical order."""
    d, hid = cfg.embed_dim, cfg.hidden_dim
    shapes = {
        "stem.proj_w": (cfg.input_token_dim, d),
        "stem.proj_b": (d,),
        "stem.cls": (d,),
    }
    if cfg.grid is not None:
        shapes["stem.pos"] = (cfg.seq_len, d)
    for b in range(cfg.depth):
        shapes.update(
            {
                f"{b}.norm1_g": (d,),
                f"{b}.norm1_b": (d,),
                f"{b}.qkv_w": (d, 3 * d),
                f"{b}.qkv_b": (3 * d,),
                f"{b}.proj_w": (d, d),
                f"{b}.proj_b": (d,),
                f"{b}.norm2_g": (d,),
                f"{b}.norm2_b": (d,),
                f"{b}.mlp1_w": (d, hid),
                f"{b}.mlp1_b": (hid,),
                f"{b}.mlp2_w": (hid, d),
                f"{b}.mlp2_b": (d,),
            }
        )
    shapes["final.norm_g"] = (d,)
    shapes["final.norm_b"] = (d,)
    return shapes


def param_count(cfg: ViTConfig) -> int:
    d, hid = cfg.embed_dim, cfg.hidden_dim
    stem = cfg.input_token_dim * d + 2 * d + (cfg.seq_len * d if cfg.grid is not None else 0)
    block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * hid + hid) + (hid * d + d)
    return stem + cfg.depth * block + 2 * d


def init_weights(cfg: ViTConfig, seed: int, std: float = INIT_STD) -> ViTWeights:
    """Seeded initialization: normal(0, std) for projections, positions and CLS; zero biases; unit gains.

    A zero CLS token would make every stage's CLS attention exactly uniform at
    initialization, leaving frozen (untrained) stages with flat heatmaps.
    """
    rng = np.random.default_rng(seed)
    w = {}
    for name, shape in weight_shapes(cfg).items():
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            w[name] = np.ones(shape)
        elif leaf.endswith("_b"):
            w[name] = np.zeros(shape)
        else:
            w[name] = rng.normal(0.0, std, size=shape)
    return w


def check_weights(cfg: ViTConfig, w: Mapping[str, np.ndarray]) -> None:
    shapes = weight_shapes(cfg)
    missing = sorted(set(shapes) - set(w))
    if missing:
        raise ValueError(f"missing weight tensors: {', '.join(missing)}")
    for name, shape in shapes.items():
        if tuple(np.shape(w[name])) != shape:
            raise ValueError(f"weight {name!r} has shape {np.shape(w[name])}, expected {shape}")


def bind(w: Mapping[str, np.ndarray], graph: Graph | None = None, trainable: bool = False, prefix: str = "") -> dict[str, Tensor]:
    """Wrap weights as tensors, registering them on ``graph`` as parameters or constants."""
    if graph is None:
        return {k: Tensor(v) for k, v in w.items()}
    if trainable:
        return {k: graph.param(v, prefix + k) for k, v in w.items()}
    return {k: graph.const(v) for k, v in w.items()}


def _as_batch(cfg: ViTConfig, tokens) -> tuple[Tensor, bool]:
    t = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    if t.data.ndim == 2:
        t, batched = reshape(t, (1,) + t.shape), False
    elif t.data.ndim == 3:
        batched = True
    else:
        raise ValueError(f"tokens must be [L, dim] or [B, L, dim], got shape {t.shape}")
    _, seq, dim = t.shape
    if seq < 1:
        raise ValueError("token sequence is empty")
    if dim != cfg.input_token_dim:
        raise ValueError(f"token dim {dim} does not match input_token_dim {cfg.input_token_dim}")
    if cfg.grid is not None and seq != cfg.seq_len:
        raise ValueError(f"sequence length {seq} does not match grid {cfg.grid[0]}x{cfg.grid[1]}")
    return t, batched


def _encode(cfg: ViTConfig, p: Mapping[str, Tensor], tokens: Tensor) -> tuple[Tensor, list[Tensor]]:
    bsz, seq, _ = tokens.shape
    d, heads, hd = cfg.embed_dim, cfg.num_heads, cfg.head_dim
    x = add_bias(matmul(tokens, p["stem.proj_w"]), p["stem.proj_b"])
    if cfg.grid is not None:
        x = add(x, expand(p["stem.pos"], (bsz,)))
    cls = expand(reshape(p["stem.cls"], (1, d)), (bsz,))
    x = concat([cls, x], axis=1)
    n = seq + 1
    probs_per_block = []
    for b in range(cfg.depth):
        h = layer_norm(x, p[f"{b}.norm1_g"], p[f"{b}.norm1_b"], LN_EPS)
        qkv = add_bias(matmul(h, p[f"{b}.qkv_w"]), p[f"{b}.qkv_b"])
        qkv = transpose(reshape(qkv, (bsz, n, 3, heads, hd)), (2, 0, 3, 1, 4))
        q, k, v = (take(qkv, i, axis=0) for i in range(3))
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        probs = softmax_rows(scores)
        probs_per_block.append(probs)
        ctx = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (bsz, n, d))
        x = add(x, add_bias(matmul(ctx, p[f"{b}.proj_w"]), p[f"{b}.proj_b"]))
        h = layer_norm(x, p[f"{b}.norm2_g"], p[f"{b}.norm2_b"], LN_EPS)
        h = gelu(add_bias(matmul(h, p[f"{b}.mlp1_w"]), p[f"{b}.mlp1_b"]))
        x = add(x, add_bias(matmul(h, p[f"{b}.mlp2_w"]), p[f"{b}.mlp2_b"]))
    x = layer_norm(x, p["final.norm_g"], p["final.norm_b"], LN_EPS)
    return take(x, 0, axis=1), probs_per_block


def cls_attention(probs: np.ndarray) -> np.ndarray:
    """CLS-row attention averaged over heads, CLS self-weight dropped, renormalized.

    ``probs`` has shape [..., heads, L+1, L+1]; the result has shape [..., L].
    """
    row = probs[..., 0, 1:].mean(axis=-2)
    return row / row.sum(axis=-1, keepdims=True)


def forward(cfg: ViTConfig, w: Mapping, tokens) -> tuple[Tensor, Tensor]:
    """Run the stage on ``tokens`` of shape [L, dim] (or a batch [B, L, dim]).

    ``w`` may hold raw arrays or tensors returned by :func:`bind`; in the latter
    case the computation is recorded on their graph and the CLS embedding is
    differentiable. The attention output is a plain tensor.
    """
    p = w if all(isinstance(v, Tensor) for v in w.values()) else bind(w)
    t, batched = _as_batch(cfg, tokens)
    cls, probs = _encode(cfg, p, t)
    attn = cls_attention(probs[-1].data)
    if not batched:
        return reshape(cls, (cfg.embed_dim,)), Tensor(attn[0])
    return cls, Tensor(attn)


def attention_raw(cfg: ViTConfig, w: Mapping, tokens) -> Tensor:
    """Full attention maps with shape [depth, heads, L+1, L+1] (batched: [depth, B, heads, L+1, L+1])."""
    p = w if all(isinstance(v, Tensor) for v in w.values()) else bind(w)
    t, batched = _as_batch(cfg, tokens)
    _, probs = _encode(cfg, p, t)
    stack = np.stack([pr.data for pr in probs])
    return Tensor(stack if batched else stack[:, 0])

"""Vision-Transformer encoder blocks and the classification head.

A block is the post-norm pair

    X <- LN(proj(MSA(X)) + X)
    Y <- LN(FFN(X) + X)

with Q, K, V computed from the (already position-augmented) tokens by
bias-free projections and the heads formed by slicing the feature axis.

Parameters live in flat ``dict[str, Tensor]`` trees with dotted names, e.g.
``encoder.blocks.0.wq``; :func:`subtree` strips a prefix to get a block view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .patcher import patchify_batch, sincos_pos_encoding
from .tensor import Tensor

__all__ = [
    "EncoderConfig",
    "ForwardTrace",
    "DESK_ENCODER",
    "FULL_ENCODER",
    "subtree",
    "init_block",
    "init_encoder",
    "init_head",
    "attention_block",
    "ffn_block",
    "encode",
    "classify",
    "classifier_forward",
]

Params = dict[str, Tensor]


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 4
    width: int = 64
    heads: int = 4
    ffn_mult: int = 4
    norm_style: str = "post"  # "post" | "pre"
    pool: str = "cls"  # "cls" | "mean"
    pos_embed: str = "sincos"  # "sincos" | "learned"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("encoder depth must be >= 1")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.width % 4:
            raise ValueError(f"width {self.width} must be a multiple of 4")
        if self.norm_style not in ("post", "pre"):
            raise ValueError(f"unknown norm_style {self.norm_style!r}")
        if self.pool not in ("cls", "mean"):
            raise ValueError(f"unknown pool {self.pool!r}")
        if self.pos_embed not in ("sincos", "learned"):
            raise ValueError(f"unknown pos_embed {self.pos_embed!r}")


DESK_ENCODER = EncoderConfig(depth=4, width=64, heads=4)
FULL_ENCODER = EncoderConfig(depth=12, width=768, heads=12)


@dataclass
class ForwardTrace:
    """Instrumentation filled in during a forward pass when one is passed in."""

    encoder_tokens: list[int] = field(default_factory=list)
    decoder_tokens: list[int] = field(default_factory=list)
    attention: list[np.ndarray] = field(default_factory=list)
    keep_attention: bool = False


def subtree(params: Mapping[str, Tensor], prefix: str) -> Params:
    if not prefix.endswith("."):
        prefix += "."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype), requires_grad=True)


def _const(shape, value: float, dtype) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


def init_block(rng: np.random.Generator, d: int, ffn_mult: int = 4, dtype=np.float64) -> Params:
    hidden = ffn_mult * d
    return {
        "wq": _xavier(rng, d, d, dtype),
        "wk": _xavier(rng, d, d, dtype),
        "wv": _xavier(rng, d, d, dtype),
        "wo": _xavier(rng, d, d, dtype),
        "attn_ln.gamma": _const(d, 1.0, dtype),
        "attn_ln.beta": _const(d, 0.0, dtype),
        "ffn.w1": _xavier(rng, d, hidden, dtype),
        "ffn.b1": _const(hidden, 0.0, dtype),
        "ffn.w2": _xavier(rng, hidden, d, dtype),
        "ffn.b2": _const(d, 0.0, dtype),
        "ffn_ln.gamma": _const(d, 1.0, dtype),
        "ffn_ln.beta": _const(d, 0.0, dtype),
    }


def init_encoder(
    rng: np.random.Generator, cfg: EncoderConfig, patch_dim: int, n_patches: int, dtype=np.float64, grid=None
) -> Params:
    """Patch embedding plus ``cfg.depth`` blocks under ``patch_embed.*`` / ``encoder.*``."""
    d = cfg.width
    params: Params = {
        "patch_embed.w": _xavier(rng, patch_dim, d, dtype),
        "patch_embed.b": _const(d, 0.0, dtype),
    }
    for i in range(cfg.depth):
        for k, v in init_block(rng, d, cfg.ffn_mult, dtype).items():
            params[f"encoder.blocks.{i}.{k}"] = v
    if cfg.pos_embed == "learned":
        side = int(round(math.sqrt(n_patches)))
        table = sincos_pos_encoding(grid or (side, side), d)
        params["encoder.pos_embed"] = Tensor(table.astype(dtype), requires_grad=True)
    return params


def init_head(rng: np.random.Generator, d: int, n_classes: int = 2, dtype=np.float64) -> Params:
    if n_classes < 2:
        raise ValueError("a classifier needs at least two classes")
    return {
        "head.cls_token": Tensor((0.02 * rng.standard_normal(d)).astype(dtype), requires_grad=True),
        "head.w": _xavier(rng, d, n_classes, dtype),
        "head.b": _const(n_classes, 0.0, dtype),
    }


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def _ln(x: Tensor, p: Mapping[str, Tensor], name: str, eps: float) -> Tensor:
    return T.layer_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"], eps)


def _self_attention(x: Tensor, p: Mapping[str, Tensor], heads: int, trace: ForwardTrace | None) -> Tensor:
    b, t, d = x.shape
    dk = d // heads

    def split(z: Tensor) -> Tensor:
        return T.transpose(T.reshape(z, (b, t, heads, dk)), (0, 2, 1, 3))

    q, k, v = split(x @ p["wq"]), split(x @ p["wk"]), split(x @ p["wv"])
    weights = T.softmax((q @ k.T) * (1.0 / math.sqrt(dk)))
    if trace is not None and trace.keep_attention:
        trace.attention.append(weights.data.copy())
    ctx = T.reshape(T.transpose(weights @ v, (0, 2, 1, 3)), (b, t, d))
    return ctx @ p["wo"]


def attention_block(
    x: Tensor,
    p: Mapping[str, Tensor],
    heads: int = 1,
    norm_style: str = "post",
    eps: float = 1e-5,
    trace: ForwardTrace | None = None,
) -> Tensor:
    x, squeeze = _batched(x)
    if norm_style == "post":
        out = _ln(_self_attention(x, p, heads, trace) + x, p, "attn_ln", eps)
    else:
        out = x + _self_attention(_ln(x, p, "attn_ln", eps), p, heads, trace)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def _ffn(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    return T.gelu(x @ p["ffn.w1"] + p["ffn.b1"]) @ p["ffn.w2"] + p["ffn.b2"]


def ffn_block(x: Tensor, p: Mapping[str, Tensor], norm_style: str = "post", eps: float = 1e-5) -> Tensor:
    if norm_style == "post":
        return _ln(_ffn(x, p) + x, p, "ffn_ln", eps)
    return x + _ffn(_ln(x, p, "ffn_ln", eps), p)


def encode(
    tokens: Tensor,
    blocks: list[Mapping[str, Tensor]],
    cfg: EncoderConfig,
    trace: ForwardTrace | None = None,
) -> Tensor:
    if len(blocks) != cfg.depth:
        raise ValueError(f"got {len(blocks)} blocks for depth {cfg.depth}")
    x = tokens
    for p in blocks:
        x = attention_block(x, p, cfg.heads, cfg.norm_style, cfg.ln_eps, trace)
        x = ffn_block(x, p, cfg.norm_style, cfg.ln_eps)
    return x


def encoder_blocks(params: Mapping[str, Tensor], depth: int, prefix: str = "encoder") -> list[Params]:
    return [subtree(params, f"{prefix}.blocks.{i}") for i in range(depth)]


def classify(tokens: Tensor, head: Mapping[str, Tensor], cfg: EncoderConfig, cls_prepended: bool = True) -> Tensor:
    """Logits ``(B, n_classes)`` from encoded ``(B, T, d)`` tokens (no softmax)."""
    tokens, squeeze = _batched(tokens)
    if cfg.pool == "cls":
        if not cls_prepended:
            raise ValueError("pool='cls' requires a class token prepended before encoding")
        pooled = T.reshape(T.take(tokens, np.zeros((tokens.shape[0], 1), dtype=np.intp)), (tokens.shape[0], -1))
    else:
        pooled = T.mean(tokens, axis=1)
    logits = pooled @ head["w"] + head["b"]
    return T.reshape(logits, logits.shape[1:]) if squeeze else logits


def embed(
    images: np.ndarray, params: Mapping[str, Tensor], cfg: EncoderConfig, patch_size: int
) -> tuple[Tensor, tuple[int, int]]:
    """Patchify ``(B, h, w, c)`` images, project and add the position table."""
    b, h, w, _ = images.shape
    patches = patchify_batch(images, patch_size).astype(params["patch_embed.w"].dtype, copy=False)
    grid = (h // patch_size, w // patch_size)
    x = Tensor(patches) @ params["patch_embed.w"] + params["patch_embed.b"]
    if cfg.pos_embed == "learned":
        x = x + params["encoder.pos_embed"]
    else:
        x = x + sincos_pos_encoding(grid, cfg.width).astype(x.dtype)
    return x, grid


def classifier_forward(
    images: np.ndarray,
    params: Mapping[str, Tensor],
    cfg: EncoderConfig,
    patch_size: int,
    trace: ForwardTrace | None = None,
) -> Tensor:
    x, _ = embed(images, params, cfg, patch_size)
    b, _, d = x.shape
    if cfg.pool == "cls":
        cls = T.add(Tensor(np.zeros((b, 1, d), dtype=x.dtype)), params["head.cls_token"])
        x = T.concat([cls, x], axis=1)
    if trace is not None:
        trace.encoder_tokens.append(x.shape[1])
    x = encode(x, encoder_blocks(params, cfg.depth), cfg, trace)
    return classify(x, subtree(params, "head"), cfg, cls_prepended=cfg.pool == "cls")

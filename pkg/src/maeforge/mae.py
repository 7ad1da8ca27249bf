"""Asymmetric masked autoencoder built on the ViT blocks.

The encoder sees only the visible patch tokens. Its outputs are widened to
the decoder width, one shared learned mask token is placed at every masked
position, the decoder position table is added over the full set, and a
linear head maps each decoder token back to ``p*p*c`` pixel values.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import tensor as T
from .patcher import MaskPlan, PatchSet, patchify_batch, random_mask, sincos_pos_encoding, unpatchify
from .tensor import Tensor
from .vit import (
    DESK_ENCODER,
    FULL_ENCODER,
    EncoderConfig,
    ForwardTrace,
    _xavier,
    embed,
    encode,
    encoder_blocks,
    init_block,
    init_encoder,
)

__all__ = [
    "MaeConfig",
    "DESK_MAE",
    "FULL_MAE",
    "init_mae",
    "mae_forward",
    "reconstruction_loss",
    "reconstruct_image",
    "patch_targets",
    "masked_image",
]


@dataclass(frozen=True)
class MaeConfig:
    encoder: EncoderConfig = field(default_factory=lambda: DESK_ENCODER)
    decoder_depth: int = 2
    decoder_width: int = 32
    decoder_heads: int = 4
    mask_ratio: float = 0.75
    patch: int = 8
    image_side: int = 32
    channels: int = 1
    loss_scope: str = "masked"  # "masked" | "all"
    target_norm: str = "none"  # "none" | "per-patch"

    def __post_init__(self):
        if self.image_side % self.patch:
            raise ValueError(f"image side {self.image_side} not divisible by patch {self.patch}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.decoder_depth < 1 or self.decoder_width % self.decoder_heads or self.decoder_width % 4:
            raise ValueError("decoder depth/width/heads inconsistent")
        if self.loss_scope not in ("masked", "all"):
            raise ValueError(f"unknown loss_scope {self.loss_scope!r}")
        if self.target_norm not in ("none", "per-patch"):
            raise ValueError(f"unknown target_norm {self.target_norm!r}")

    @property
    def grid(self) -> tuple[int, int]:
        side = self.image_side // self.patch
        return side, side

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def decoder(self) -> EncoderConfig:
        return replace(
            self.encoder, depth=self.decoder_depth, width=self.decoder_width, heads=self.decoder_heads, pool="mean"
        )


DESK_MAE = MaeConfig()
FULL_MAE = MaeConfig(
    encoder=FULL_ENCODER, decoder_depth=8, decoder_width=512, decoder_heads=16, patch=16, image_side=224
)


def init_mae(rng: np.random.Generator, cfg: MaeConfig, dtype=np.float64) -> dict[str, Tensor]:
    params = init_encoder(rng, cfg.encoder, cfg.patch_dim, cfg.n_patches, dtype, grid=cfg.grid)
    de, dd = cfg.encoder.width, cfg.decoder_width
    if de != dd:
        params["decoder.adapter.w"] = _xavier(rng, de, dd, dtype)
        params["decoder.adapter.b"] = Tensor(np.zeros(dd, dtype=dtype), requires_grad=True)
    params["decoder.mask_token"] = Tensor((0.02 * rng.standard_normal(dd)).astype(dtype), requires_grad=True)
    for i in range(cfg.decoder_depth):
        for k, v in init_block(rng, dd, cfg.encoder.ffn_mult, dtype).items():
            params[f"decoder.blocks.{i}.{k}"] = v
    if cfg.encoder.pos_embed == "learned":
        table = sincos_pos_encoding(cfg.grid, dd).astype(dtype)
        params["decoder.pos_embed"] = Tensor(table, requires_grad=True)
    params["decoder.pred.w"] = _xavier(rng, dd, cfg.patch_dim, dtype)
    params["decoder.pred.b"] = Tensor(np.zeros(cfg.patch_dim, dtype=dtype), requires_grad=True)
    return params


def _check_images(images: np.ndarray, cfg: MaeConfig) -> np.ndarray:
    if images.ndim == 3:
        images = images[None]
    expected = (cfg.image_side, cfg.image_side, cfg.channels)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ValueError(f"images of shape {images.shape} do not match configured {expected}")
    return images


def mae_forward(
    images: np.ndarray,
    params: Mapping[str, Tensor],
    cfg: MaeConfig,
    rng: np.random.Generator | None = None,
    plans: list[MaskPlan] | None = None,
    trace: ForwardTrace | None = None,
) -> tuple[Tensor, list[MaskPlan]]:
    """Predict all ``N`` patches of each image from its visible subset.

    Returns ``(pred, plans)`` with ``pred`` of shape ``(B, N, p*p*c)`` in
    original patch order. Pass ``plans`` to replay a fixed masking; otherwise
    one plan per image is drawn from ``rng``.
    """
    images = _check_images(np.asarray(images), cfg)
    b, n = images.shape[0], cfg.n_patches
    if plans is None:
        if rng is None:
            raise ValueError("either rng or plans is required")
        plans = [random_mask(n, cfg.mask_ratio, rng) for _ in range(b)]
    if len(plans) != b or any(p.n != n for p in plans):
        raise ValueError("mask plans do not match the batch")

    x, _ = embed(images, params, cfg.encoder, cfg.patch)
    visible = np.stack([p.visible_idx for p in plans])
    restore = np.stack([p.restore_perm for p in plans])
    x = T.take(x, visible)
    if trace is not None:
        trace.encoder_tokens.append(x.shape[1])
    z = encode(x, encoder_blocks(params, cfg.encoder.depth), cfg.encoder, trace)

    if "decoder.adapter.w" in params:
        z = z @ params["decoder.adapter.w"] + params["decoder.adapter.b"]
    dd = cfg.decoder_width
    n_masked = n - visible.shape[1]
    fill = T.add(Tensor(np.zeros((b, n_masked, dd), dtype=z.dtype)), params["decoder.mask_token"])
    full = T.take(T.concat([z, fill], axis=1), restore)
    if "decoder.pos_embed" in params:
        full = full + params["decoder.pos_embed"]
    else:
        full = full + sincos_pos_encoding(cfg.grid, dd).astype(full.dtype)
    if trace is not None:
        trace.decoder_tokens.append(full.shape[1])
    y = encode(full, encoder_blocks(params, cfg.decoder_depth, "decoder"), cfg.decoder, trace)
    return y @ params["decoder.pred.w"] + params["decoder.pred.b"], plans


def patch_targets(images: np.ndarray, cfg: MaeConfig) -> np.ndarray:
    """Reconstruction targets ``(B, N, p*p*c)``; raw pixels unless per-patch normalisation is on."""
    target = patchify_batch(_check_images(np.asarray(images), cfg), cfg.patch)
    if cfg.target_norm == "per-patch":
        mu = target.mean(axis=-1, keepdims=True)
        var = target.var(axis=-1, keepdims=True)
        target = (target - mu) / np.sqrt(var + 1e-6)
    return target


def reconstruction_loss(pred: Tensor, target: np.ndarray, plans: list[MaskPlan], cfg: MaeConfig) -> Tensor:
    """Mean squared error over masked patches (``loss_scope='masked'``) or all patches."""
    if pred.ndim == 2:
        pred = T.reshape(pred, (1,) + pred.shape)
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    sq = T.square(pred - target)
    if cfg.loss_scope == "all":
        return T.mean(sq)
    weights = np.stack([p.mask_vector() for p in plans]).astype(pred.dtype)
    count = weights.sum()
    if count == 0:
        raise ValueError("masked-only loss is undefined when no patch is masked")
    weights = weights[:, :, None] / (count * pred.shape[-1])
    return T.sum(sq * weights)


def reconstruct_image(
    pred_patches: np.ndarray, plan: MaskPlan, original: PatchSet, mode: str = "pred-everywhere"
) -> np.ndarray:
    pred = np.asarray(pred_patches).reshape(original.patches.shape).copy()
    if mode == "paste-visible":
        pred[plan.visible_idx] = original.patches[plan.visible_idx]
    elif mode != "pred-everywhere":
        raise ValueError(f"unknown reconstruction mode {mode!r}")
    return unpatchify(replace(original, patches=pred))


def masked_image(plan: MaskPlan, original: PatchSet, fill: float = 0.0) -> np.ndarray:
    """The encoder's view: visible patches kept, masked ones set to ``fill``."""
    patches = original.patches.copy()
    patches[plan.masked_idx] = fill
    return unpatchify(replace(original, patches=patches))


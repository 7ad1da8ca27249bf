"""Image tiling, 2-D sine-cosine position tables and uniform random masking."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PatchSet",
    "MaskPlan",
    "patchify",
    "unpatchify",
    "patchify_batch",
    "sincos_pos_encoding",
    "mask_count",
    "random_mask",
    "plan_from_masked",
]


@dataclass(frozen=True)
class PatchSet:
    """Flattened non-overlapping ``p x p`` tiles of one ``h x w x c`` image.

    ``patches[i]`` is tile ``i`` in row-major grid order, flattened
    pixel-major / channel-minor.
    """

    patches: np.ndarray  # (N, p*p*c)
    grid: tuple[int, int]
    patch_size: int
    channels: int

    @property
    def n(self) -> int:
        return self.grid[0] * self.grid[1]


def _check_tiling(h: int, w: int, p: int) -> None:
    if p <= 0 or h % p or w % p:
        raise ValueError(f"image {h}x{w} cannot be tiled by patch size {p}")


def patchify_batch(images: np.ndarray, p: int) -> np.ndarray:
    """``(B, h, w, c)`` -> ``(B, N, p*p*c)``."""
    b, h, w, c = images.shape
    _check_tiling(h, w, p)
    rows, cols = h // p, w // p
    x = images.reshape(b, rows, p, cols, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, rows * cols, p * p * c)


def unpatchify_batch(patches: np.ndarray, grid: tuple[int, int], p: int, c: int) -> np.ndarray:
    rows, cols = grid
    b = patches.shape[0]
    x = patches.reshape(b, rows, cols, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, rows * p, cols * p, c)


def patchify(image: np.ndarray, p: int) -> PatchSet:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    patches = patchify_batch(image[None], p)[0]
    return PatchSet(patches=patches, grid=(h // p, w // p), patch_size=p, channels=c)


def unpatchify(ps: PatchSet) -> np.ndarray:
    return unpatchify_batch(ps.patches[None], ps.grid, ps.patch_size, ps.channels)[0]


def sincos_pos_encoding(grid: tuple[int, int], d: int) -> np.ndarray:
    """Fixed ``(rows*cols, d)`` table.

    The first ``d/2`` features encode the row index and the last ``d/2`` the
    column index; each half is ``[sin(pos*w_k) ..., cos(pos*w_k) ...]`` with
    ``w_k = 10000 ** (-k / (d/4))``.
    """
    if d <= 0 or d % 4:
        raise ValueError(f"position encoding width must be a positive multiple of 4, got {d}")
    rows, cols = grid
    quarter = d // 4
    omega = 1.0 / 10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter)

    def encode(pos: np.ndarray) -> np.ndarray:
        angles = pos[:, None] * omega[None, :]
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    r, c = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64), indexing="ij")
    return np.concatenate([encode(r.reshape(-1)), encode(c.reshape(-1))], axis=1)


@dataclass(frozen=True)
class MaskPlan:
    """Which patches the encoder sees.

    ``restore_perm[j]`` is the position of original patch ``j`` inside the
    sequence ``visible_idx ++ masked_idx``, so
    ``concat(visible, masked)[restore_perm]`` is back in patch order.
    """

    visible_idx: np.ndarray
    masked_idx: np.ndarray
    restore_perm: np.ndarray
    ratio: float

    @property
    def n(self) -> int:
        return len(self.visible_idx) + len(self.masked_idx)

    def mask_vector(self) -> np.ndarray:
        """1.0 at masked patches, 0.0 at visible ones."""
        m = np.zeros(self.n)
        m[self.masked_idx] = 1.0
        return m


def mask_count(n: int, r: float) -> int:
    """``round(r * n)`` with halves rounded up."""
    return int(math.floor(r * n + 0.5))


def plan_from_masked(n: int, masked, ratio: float | None = None) -> MaskPlan:
    masked = np.sort(np.asarray(masked, dtype=np.intp))
    keep = np.ones(n, dtype=bool)
    keep[masked] = False
    visible = np.flatnonzero(keep)
    order = np.concatenate([visible, masked])
    restore = np.empty(n, dtype=np.intp)
    restore[order] = np.arange(n)
    return MaskPlan(visible, masked, restore, len(masked) / n if ratio is None else ratio)


def random_mask(n: int, r: float, rng: np.random.Generator) -> MaskPlan:
    if n < 1:
        raise ValueError("need at least one patch")
    if not 0.0 <= r < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {r}")
    k = mask_count(n, r)
    masked = rng.permutation(n)[:k]
    return plan_from_masked(n, masked, r)

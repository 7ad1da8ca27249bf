"""Adam, the periodic cosine schedule, crop-and-resize augmentation and epoch loops."""

from __future__ import annotations

import csv
import io
import math
import types
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .mae import MaeConfig, mae_forward, patch_targets, reconstruction_loss
from .metrics import EvalBatch, accuracy, auc, f1
from .patcher import MaskPlan, random_mask
from .tensor import Tensor
from .vit import classifier_forward

__all__ = [
    "AdamState",
    "ScheduleConfig",
    "AugmentConfig",
    "TrainConfig",
    "RunReport",
    "adam_step",
    "cosine_lr",
    "resize_bilinear",
    "augment",
    "prepare_images",
    "train_epoch",
    "evaluate_classifier",
    "fit",
]

MODES = ("pretrain", "finetune", "linear-probe")
REPORT_FIELDS = ("epoch", "stage", "lr", "loss", "acc", "f1", "auc", "eval_loss")


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: float | None = None, names=None) -> AdamState:
    """One bias-corrected Adam update of every parameter that holds a gradient.

    Updates ``param.data`` in place, then clears ``param.grad``. ``names``
    restricts the update to a subset; gradients of the others are cleared
    too so nothing leaks into the next step.
    """
    lr = state.lr if lr is None else lr
    selected = set(params) if names is None else set(names)
    for name, p in params.items():
        if p.grad is not None and p.grad.shape != p.shape:
            raise ValueError(f"gradient of {name} has shape {p.grad.shape}, parameter {p.shape}")
        if p.grad is not None and name in selected and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad
        p.grad = None
        if g is None or name not in selected:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype, copy=False)
    return state


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 1e-4
    eta_min: float = 0.0
    half_period: int = 10

    def __post_init__(self):
        if not self.base_lr > self.eta_min >= 0:
            raise ValueError("need base_lr > eta_min >= 0")
        if self.half_period < 1:
            raise ValueError("half_period must be >= 1")


def cosine_lr(epoch: int, cfg: ScheduleConfig) -> float:
    """Periodic cosine annealing: ``base_lr`` at epoch 0, ``eta_min`` at ``half_period``, back at ``2*half_period``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch % (2 * cfg.half_period) == 0:
        return cfg.base_lr
    phase = (epoch % (2 * cfg.half_period)) / cfg.half_period
    return cfg.eta_min + (cfg.base_lr - cfg.eta_min) * (1.0 + math.cos(math.pi * phase)) / 2.0


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    scale: tuple[float, float] = (0.5, 1.0)
    output_side: int = 32

    def __post_init__(self):
        lo, hi = self.scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop scale range must satisfy 0 < lo <= hi <= 1, got {self.scale}")


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping; a no-op when sizes match."""
    out_w = out_h if out_w is None else out_w
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = axis(h, out_h)
    x0, x1, wx = axis(w, out_w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    img = image if image.ndim == 3 else image[:, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    out = top * (1 - wy) + bottom * wy
    return out if image.ndim == 3 else out[:, :, 0]


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random square crop covering a uniform fraction of the area, resized to the output side."""
    if not cfg.enabled:
        return resize_bilinear(image, cfg.output_side)
    h, w = image.shape[:2]
    short = min(h, w)
    area = rng.uniform(*cfg.scale)
    side = int(np.clip(round(math.sqrt(area * h * w)), 1, short))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    return resize_bilinear(image[top : top + side, left : left + side], cfg.output_side)


def prepare_images(images: np.ndarray, side: int) -> np.ndarray:
    """Deterministic full-frame resize used when augmentation is off and for evaluation."""
    if images.shape[1:3] == (side, side):
        return images
    return np.stack([resize_bilinear(im, side) for im in images])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    schedule: ScheduleConfig = ScheduleConfig()
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: AugmentConfig = AugmentConfig(enabled=False)
    mask_mode: str = "resample"  # "resample" | "fixed"
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.mask_mode not in ("resample", "fixed"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def adam(self) -> AdamState:
        return AdamState(self.schedule.base_lr, self.beta1, self.beta2, self.eps)


class RunReport:
    """Per-epoch records for one stage plus an immutable configuration snapshot."""

    def __init__(self, stage: str, seed: int, config: Mapping | None = None):
        self.stage = stage
        self.seed = seed
        self.config = types.MappingProxyType(dict(config or {}))
        self.rows: list[dict] = []

    def add(self, epoch: int, lr: float, loss: float, acc=None, f1=None, auc=None, eval_loss=None) -> dict:
        if self.rows and epoch <= self.rows[-1]["epoch"]:
            raise ValueError(f"epoch {epoch} does not follow {self.rows[-1]['epoch']}")
        row = {"epoch": epoch, "stage": self.stage, "lr": lr, "loss": loss, "acc": acc, "f1": f1, "auc": auc,
               "eval_loss": eval_loss}
        self.rows.append(row)
        return row

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        for row in self.rows:
            writer.writerow(["" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k]
                             for k in REPORT_FIELDS])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "RunReport":
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        report = cls(rows[0]["stage"] if rows else "", seed=-1)
        for r in rows:
            opt = {k: float(r[k]) if r.get(k) else None for k in ("acc", "f1", "auc", "eval_loss")}
            report.add(int(r["epoch"]), float(r["lr"]), float(r["loss"]), **opt)
        return report

    def best(self, key: str = "acc") -> dict | None:
        scored = [r for r in self.rows if r[key] is not None]
        return max(scored, key=lambda r: r[key]) if scored else None

    def __eq__(self, other) -> bool:
        return isinstance(other, RunReport) and self.rows == other.rows and dict(self.config) == dict(other.config)


def _frozen_view(params: Mapping[str, Tensor], trainable: set[str]) -> dict[str, Tensor]:
    return {k: (v if k in trainable else v.detach()) for k, v in params.items()}


def fixed_plan(index: int, n: int, ratio: float, seed: int) -> MaskPlan:
    return random_mask(n, ratio, np.random.default_rng([seed, index]))


def train_epoch(
    params: dict[str, Tensor],
    images: np.ndarray,
    labels: np.ndarray | None,
    mode: str,
    opt: AdamState,
    lr: float,
    rng: np.random.Generator,
    cfg: MaeConfig,
    train_cfg: TrainConfig = TrainConfig(),
    mask_seed: int = 0,
) -> dict:
    """One shuffled pass over ``images``; returns ``{"loss", "lr", "steps"}``.

    ``pretrain`` never touches ``labels``. ``linear-probe`` updates only the
    ``head.*`` parameters.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    n = len(images)
    if n == 0:
        raise ValueError("empty dataset")
    if mode == "pretrain":
        if "decoder.pred.w" not in params:
            raise ValueError("pretraining needs MAE parameters (decoder missing)")
    else:
        if "head.w" not in params:
            raise ValueError(f"{mode} needs a classification head")
        if labels is None:
            raise ValueError(f"{mode} needs labels")
    trainable = {k for k in params if k.startswith("head.")} if mode == "linear-probe" else set(params)
    view = _frozen_view(params, trainable) if mode == "linear-probe" else params
    aug = train_cfg.augment

    order = rng.permutation(n)
    losses, sizes = [], []
    for start in range(0, n, train_cfg.batch_size):
        idx = order[start : start + train_cfg.batch_size]
        batch = np.stack([augment(images[i], aug, rng) if aug.enabled else images[i] for i in idx])
        batch = prepare_images(batch, cfg.image_side).astype(params["patch_embed.w"].dtype, copy=False)
        if mode == "pretrain":
            plans = None
            if train_cfg.mask_mode == "fixed":
                plans = [fixed_plan(int(i), cfg.n_patches, cfg.mask_ratio, mask_seed) for i in idx]
            pred, plans = mae_forward(batch, view, cfg, rng=rng, plans=plans)
            loss = reconstruction_loss(pred, patch_targets(batch, cfg), plans, cfg)
        else:
            logits = classifier_forward(batch, view, cfg.encoder, cfg.patch)
            loss = T.cross_entropy(logits, labels[idx])
        T.backward(loss)
        adam_step(params, opt, lr, names=trainable)
        losses.append(loss.item())
        sizes.append(len(idx))
    return {"loss": float(np.average(losses, weights=sizes)), "lr": lr, "steps": len(losses)}


def evaluate_classifier(
    params: Mapping[str, Tensor], images: np.ndarray, labels: np.ndarray, cfg: MaeConfig, batch_size: int = 64
) -> dict:
    """Cross-entropy, Acc, F1 and AUC with class 1 as the positive class."""
    frozen = {k: v.detach() for k, v in params.items()}
    dtype = params["patch_embed.w"].dtype
    scores, loss_sum = [], 0.0
    for start in range(0, len(images), batch_size):
        batch = prepare_images(images[start : start + batch_size], cfg.image_side).astype(dtype, copy=False)
        logits = classifier_forward(batch, frozen, cfg.encoder, cfg.patch)
        y = labels[start : start + batch_size]
        loss_sum += T.cross_entropy(logits, y).item() * len(y)
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        scores.append(p[:, 1])
    batch = EvalBatch(np.concatenate(scores).astype(np.float64), np.asarray(labels))
    try:
        roc = auc(batch)
    except ValueError:
        roc = None
    return {
        "loss": loss_sum / len(images),
        "acc": accuracy(batch),
        "f1": f1(batch),
        "auc": roc,
        "scores": batch.scores,
    }


def fit(
    params: dict[str, Tensor],
    mode: str,
    cfg: MaeConfig,
    train_cfg: TrainConfig,
    images: np.ndarray,
    labels: np.ndarray | None = None,
    eval_images: np.ndarray | None = None,
    eval_labels: np.ndarray | None = None,
    seed: int = 0,
    stage: str = "stage",
    config_snapshot: Mapping | None = None,
) -> RunReport:
    """Run ``train_cfg.epochs`` epochs; classification stages evaluate after each epoch.

    Epoch ``e`` draws all of its randomness from ``default_rng([seed, e])``.
    """
    snapshot = dict(config_snapshot or {})
    snapshot.setdefault("mode", mode)
    snapshot.setdefault("mask_mode", train_cfg.mask_mode)
    snapshot.setdefault("loss_scope", cfg.loss_scope)
    snapshot.setdefault("adam", {"beta1": train_cfg.beta1, "beta2": train_cfg.beta2, "eps": train_cfg.eps})
    snapshot.setdefault("schedule", asdict(train_cfg.schedule))
    report = RunReport(stage, seed, snapshot)
    opt = train_cfg.adam()
    for epoch in range(train_cfg.epochs):
        lr = cosine_lr(epoch, train_cfg.schedule)
        rng = np.random.default_rng([seed, epoch])
        out = train_epoch(params, images, labels, mode, opt, lr, rng, cfg, train_cfg, mask_seed=seed)
        if mode != "pretrain" and eval_images is not None and len(eval_images):
            ev = evaluate_classifier(params, eval_images, eval_labels, cfg, train_cfg.eval_batch_size)
            report.add(epoch, lr, out["loss"], ev["acc"], ev["f1"], ev["auc"], ev["loss"])
        else:
            report.add(epoch, lr, out["loss"])
    return report

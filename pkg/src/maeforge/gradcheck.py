"""Finite-difference verification of every differentiable operation and of the full models.

Each check builds a scalar loss, runs :func:`maeforge.tensor.backward`, and
compares every input gradient against central differences in float64.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .mae import MaeConfig, init_mae, mae_forward, patch_targets, reconstruction_loss
from .patcher import random_mask
from .tensor import Tensor
from .vit import EncoderConfig, attention_block, classify, encode, ffn_block, init_block, init_head

__all__ = ["check", "run_suite", "TOLERANCE"]

TOLERANCE = 1e-4


def check(loss_fn: Callable[[], Tensor], inputs: dict[str, Tensor], h: float = 1e-5) -> dict[str, float]:
    """Max relative error per named input between autodiff and central differences."""
    for t in inputs.values():
        t.grad = None
    T.backward(loss_fn())
    errors = {}
    for name, t in inputs.items():
        fd = T.finite_diff_grad(loss_fn, t, h)
        ad = t.grad if t.grad is not None else np.zeros_like(t.data)
        errors[name] = T.relative_error(ad, fd)
    return errors


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _weighted(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    w = rng.standard_normal(out.shape)
    return lambda y: T.sum(y * w)


def _op_check(rng, fn, *inputs: Tensor) -> float:
    project = _weighted(fn(*inputs), rng)
    errs = check(lambda: project(fn(*inputs)), {str(i): x for i, x in enumerate(inputs)})
    return max(errs.values())


def _op_checks(rng) -> dict[str, float]:
    idx = np.array([[2, 0, 3], [1, 1, 4]])
    labels = np.array([0, 2, 1, 2])
    logits = _leaf(rng, 4, 3)
    return {
        "add": _op_check(rng, T.add, _leaf(rng, 2, 3, 4), _leaf(rng, 4)),
        "sub": _op_check(rng, T.sub, _leaf(rng, 3, 4), _leaf(rng, 1, 4)),
        "mul": _op_check(rng, T.mul, _leaf(rng, 2, 3, 4), _leaf(rng, 3, 1)),
        "neg": _op_check(rng, T.neg, _leaf(rng, 5)),
        "square": _op_check(rng, T.square, _leaf(rng, 2, 5)),
        "gelu": _op_check(rng, T.gelu, _leaf(rng, 3, 7, scale=2.0)),
        "matmul": _op_check(rng, T.matmul, _leaf(rng, 3, 4), _leaf(rng, 4, 2)),
        "matmul_batched": _op_check(rng, T.matmul, _leaf(rng, 2, 3, 3, 4), _leaf(rng, 2, 3, 4, 5)),
        "matmul_linear": _op_check(rng, T.matmul, _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)),
        "transpose": _op_check(rng, lambda x: T.transpose(x, (2, 0, 1)), _leaf(rng, 2, 3, 4)),
        "reshape": _op_check(rng, lambda x: T.reshape(x, (4, 6)), _leaf(rng, 2, 3, 4)),
        "concat": _op_check(rng, lambda a, b: T.concat([a, b], axis=1), _leaf(rng, 2, 3, 4), _leaf(rng, 2, 1, 4)),
        "take": _op_check(rng, lambda x: T.take(x, idx), _leaf(rng, 2, 5, 3)),
        "sum": _op_check(rng, lambda x: T.sum(x, axis=1), _leaf(rng, 3, 4, 2)),
        "mean": _op_check(rng, lambda x: T.mean(x, axis=(0, 2)), _leaf(rng, 3, 4, 2)),
        "softmax": _op_check(rng, T.softmax, _leaf(rng, 2, 3, 5)),
        "layer_norm": _op_check(rng, T.layer_norm, _leaf(rng, 2, 3, 6), _leaf(rng, 6), _leaf(rng, 6)),
        "cross_entropy": check(lambda: T.cross_entropy(logits, labels), {"logits": logits})["logits"],
    }


def _block_checks(rng) -> dict[str, float]:
    out = {}
    for style in ("post", "pre"):
        p = init_block(rng, 8)
        for v in p.values():
            v.data += 0.1 * rng.standard_normal(v.shape)
        x = _leaf(rng, 2, 5, 8)
        inputs = {"x": x, **p}

        def loss(p=p, x=x, style=style, w=rng.standard_normal((2, 5, 8))):
            y = attention_block(x, p, heads=2, norm_style=style)
            return T.sum(ffn_block(y, p, norm_style=style) * w)

        out[f"vit_block_{style}"] = max(check(loss, inputs).values())
    return out


def _classifier_check(rng) -> dict[str, float]:
    cfg = EncoderConfig(depth=2, width=8, heads=2)
    blocks = [init_block(rng, 8) for _ in range(cfg.depth)]
    head = {k.split(".", 1)[1]: v for k, v in init_head(rng, 8, 2).items()}
    tokens = _leaf(rng, 3, 5, 8)
    labels = np.array([0, 1, 1])
    inputs = {"tokens": tokens, **{f"head.{k}": v for k, v in head.items()}}
    for i, b in enumerate(blocks):
        inputs.update({f"blocks.{i}.{k}": v for k, v in b.items()})
    loss = lambda: T.cross_entropy(classify(encode(tokens, blocks, cfg), head, cfg), labels)  # noqa: E731
    return {"encode_classify_ce": max(check(loss, inputs).values())}


def gradcheck_mae_config() -> MaeConfig:
    return MaeConfig(
        encoder=EncoderConfig(depth=1, width=8, heads=2),
        decoder_depth=1,
        decoder_width=8,
        decoder_heads=2,
        patch=4,
        image_side=16,
    )


def _mae_check(rng) -> dict[str, float]:
    cfg = gradcheck_mae_config()
    params = init_mae(rng, cfg)
    images = rng.random((2, 16, 16, 1))
    plans = [random_mask(cfg.n_patches, cfg.mask_ratio, rng) for _ in range(2)]
    target = patch_targets(images, cfg)

    def loss():
        pred, _ = mae_forward(images, params, cfg, plans=plans)
        return reconstruction_loss(pred, target, plans, cfg)

    errs = check(loss, params)
    return {"mae_loss": max(errs.values())}


def run_suite(seed: int = 0) -> dict[str, float]:
    """Every check's max relative error, in a fixed order."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}
    results.update(_op_checks(rng))
    results.update(_block_checks(rng))
    results.update(_classifier_check(rng))
    results.update(_mae_check(rng))
    return results

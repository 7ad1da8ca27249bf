"""``maeforge`` command line: pretrain, finetune, ablate, evaluate, inspect, gradcheck.

Settings merge as built-in preset < ``MAEFORGE_SEED`` < ``--config`` file < flags.
A config file holds ``key = value`` lines (``#`` starts a comment) whose keys
are the long flag names without the leading dashes.

Exit codes: 0 success, 1 runtime failure, 2 bad flags, 3 invalid input.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .data import ManifestError, SyntheticSpec, load_dataset, load_manifest, synth_dataset, write_image
from .mae import MaeConfig, mae_forward, masked_image, reconstruct_image
from .patcher import patchify
from .pipelines import (
    CheckpointError,
    PlanEnv,
    PlanError,
    Stage,
    StagePlan,
    build_ablation_plan,
    load_checkpoint,
    mae_config_from_dict,
    run_plan,
)
from .training import AugmentConfig, ScheduleConfig, TrainConfig, evaluate_classifier, prepare_images
from .vit import EncoderConfig

FULL = {
    "image_side": 224,
    "patch_size": 16,
    "mask_ratio": 0.75,
    "encoder_depth": 12,
    "encoder_width": 768,
    "encoder_heads": 12,
    "decoder_depth": 8,
    "decoder_width": 512,
    "decoder_heads": 16,
    "norm_style": "post",
    "pool": "cls",
    "pos_embed": "sincos",
    "loss_scope": "masked",
    "target_norm": "none",
    "epochs": 1000,
    "ssl_epochs": 1000,
    "batch_size": 32,
    "lr": 1e-4,
    "ssl_lr": 1e-4,
    "eta_min": 0.0,
    "half_period": 10,
    "augment": True,
    "crop_scale_lo": 0.5,
    "crop_scale_hi": 1.0,
    "mask_mode": "resample",
    "dtype": "float32",
    "synthetic_train": 200,
    "synthetic_test": 100,
    "linear_probe": False,
    "workdir": "runs",
    "count": 4,
}

DESK = {
    **FULL,
    "image_side": 32,
    "patch_size": 8,
    "encoder_depth": 4,
    "encoder_width": 64,
    "encoder_heads": 4,
    "decoder_depth": 2,
    "decoder_width": 32,
    "decoder_heads": 4,
    "epochs": 30,
    "ssl_epochs": 60,
    "batch_size": 8,
    "ssl_lr": 1e-3,
    "augment": False,
    "dtype": "float64",
}


class ValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"maeforge: error: usage: {message}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("general")
    g.add_argument("--config", help="key = value settings file (flags override it)")
    g.add_argument("--seed", type=int, help="random seed (default: $MAEFORGE_SEED or 0)")
    g.add_argument("--desk-scale", action=argparse.BooleanOptionalAction, default=None,
                   help="small model and budgets instead of the full-size defaults")
    g.add_argument("--workdir", help="output root (default: runs)")
    g.add_argument("--dtype", choices=("float64", "float32"), help="compute precision")


def _add_model(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--image-side", type=int, help="model input side in pixels")
    g.add_argument("--patch-size", type=int, help="patch side in pixels")
    g.add_argument("--mask-ratio", type=float, help="fraction of patches hidden from the encoder")
    g.add_argument("--encoder-depth", type=int)
    g.add_argument("--encoder-width", type=int)
    g.add_argument("--encoder-heads", type=int)
    g.add_argument("--decoder-depth", type=int)
    g.add_argument("--decoder-width", type=int)
    g.add_argument("--decoder-heads", type=int)
    g.add_argument("--norm-style", choices=("post", "pre"))
    g.add_argument("--pool", choices=("cls", "mean"))
    g.add_argument("--pos-embed", choices=("sincos", "learned"))
    g.add_argument("--loss-scope", choices=("masked", "all"))
    g.add_argument("--target-norm", choices=("none", "per-patch"))


def _add_training(p: argparse.ArgumentParser, ssl: bool, finetune: bool) -> None:
    g = p.add_argument_group("training")
    if finetune:
        g.add_argument("--epochs", type=int, help="fine-tuning epochs")
        g.add_argument("--lr", type=float, help="fine-tuning base learning rate")
    if ssl:
        g.add_argument("--ssl-epochs", type=int, help="self-supervised epochs")
        g.add_argument("--ssl-lr", type=float, help="self-supervised base learning rate")
        g.add_argument("--mask-mode", choices=("resample", "fixed"), help="redraw masks every step or fix per image")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--eta-min", type=float, help="cosine schedule floor")
    g.add_argument("--half-period", type=int, help="epochs from peak to trough of the cosine schedule")
    g.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None, help="random crop + resize")
    g.add_argument("--crop-scale-lo", type=float)
    g.add_argument("--crop-scale-hi", type=float)


def _add_data(p: argparse.ArgumentParser, eval_manifest: bool = False) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--manifest", help="training manifest (CSV path,label)")
    if eval_manifest:
        g.add_argument("--eval-manifest", help="evaluation manifest")
    g.add_argument("--synthetic", action=argparse.BooleanOptionalAction, default=None,
                   help="use the generated desk-scale corpus (implies --desk-scale)")
    g.add_argument("--synthetic-train", type=int)
    g.add_argument("--synthetic-test", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maeforge", description="Masked-autoencoder pretraining and transfer learning.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="self-supervised MAE stage")
    _add_common(p), _add_model(p), _add_training(p, ssl=True, finetune=False), _add_data(p)
    p.add_argument("--init-checkpoint", help="continue from this checkpoint")

    p = sub.add_parser("finetune", help="supervised stage from random init or a checkpoint")
    _add_common(p), _add_model(p), _add_training(p, ssl=False, finetune=True), _add_data(p, eval_manifest=True)
    p.add_argument("--init-checkpoint", help="take the encoder from this checkpoint")
    p.add_argument("--linear-probe", action=argparse.BooleanOptionalAction, default=None,
                   help="train only the classification head")

    p = sub.add_parser("ablate", help="run ablation Test N")
    p.add_argument("--test", type=int, choices=range(1, 6), help="ablation test number 1-5 (required)")
    _add_common(p), _add_model(p), _add_training(p, ssl=True, finetune=True)
    g = p.add_argument_group("datasets")
    g.add_argument("--synthetic", action=argparse.BooleanOptionalAction, default=None,
                   help="generate all datasets (implies --desk-scale)")
    g.add_argument("--synthetic-train", type=int)
    g.add_argument("--synthetic-test", type=int)
    for role in ("generic", "target-adjacent", "downstream", "downstream-alt"):
        g.add_argument(f"--{role}-manifest", help=f"{role} training manifest")
    for role in ("downstream", "downstream-alt"):
        g.add_argument(f"--{role}-eval-manifest", help=f"{role} evaluation manifest")

    p = sub.add_parser("evaluate", help="Acc / F1 / AUC of a fine-tuned checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", help="fine-tuned checkpoint (required)")
    p.add_argument("--manifest", help="labeled evaluation manifest (required)")

    p = sub.add_parser("inspect", help="write original / masked / reconstructed PGM triplets")
    _add_common(p)
    p.add_argument("--checkpoint", help="pretraining checkpoint (required)")
    p.add_argument("--manifest", help="images to reconstruct (required)")
    p.add_argument("--count", type=int, help="number of images")
    p.add_argument("--out", help="output directory (default: <workdir>/inspect)")

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    _add_common(p)
    return parser


# configuration --------------------------------------------------------------

_NON_CONFIG = {"command", "config"}


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    return next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]


def _actions(parser: argparse.ArgumentParser, command: str) -> dict[str, argparse.Action]:
    sub = _subparser(parser, command)
    return {a.dest: a for a in sub._actions if a.dest not in ("help",) and a.option_strings}


def _parse_bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"not a boolean: {raw!r}")


def read_config(path, actions: dict[str, argparse.Action]) -> dict:
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        dest = key.replace("-", "_")
        if dest not in actions or dest in _NON_CONFIG:
            raise ValidationError(f"{path}:{n}: unknown key {key!r}")
        act = actions[dest]
        try:
            if isinstance(act, argparse.BooleanOptionalAction):
                val = _parse_bool(raw)
            else:
                val = act.type(raw) if act.type else raw
        except ValueError as exc:
            raise ValidationError(f"{path}:{n}: bad value for {key}: {exc}") from None
        if act.choices is not None and val not in act.choices:
            raise ValidationError(f"{path}:{n}: {key} must be one of {list(act.choices)}")
        values[dest] = val
    return values


def resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Effective settings for the chosen subcommand."""
    actions = _actions(parser, args.command)
    from_file = read_config(args.config, actions) if args.config else {}
    explicit = {k: v for k, v in vars(args).items() if v is not None and k in actions}
    merged = {**from_file, **explicit}
    if merged.get("desk_scale") is None and merged.get("synthetic"):
        merged["desk_scale"] = True
    preset = DESK if merged.get("desk_scale") else FULL
    env_seed = os.environ.get("MAEFORGE_SEED")
    try:
        default_seed = int(env_seed) if env_seed else 0
    except ValueError:
        raise ValidationError(f"MAEFORGE_SEED is not an integer: {env_seed!r}") from None
    out = {}
    for dest in actions:
        if dest in _NON_CONFIG:
            continue
        if dest in merged:
            out[dest] = merged[dest]
        elif dest == "seed":
            out[dest] = default_seed
        elif dest == "desk_scale":
            out[dest] = False
        elif dest == "synthetic":
            out[dest] = False
        else:
            out[dest] = preset.get(dest)
    return out


def format_config(settings: dict) -> str:
    lines = ["# effective maeforge configuration"]
    for k in sorted(settings):
        v = settings[k]
        if v is None:
            continue
        lines.append(f"{k.replace('_', '-')} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def model_config(s: dict) -> MaeConfig:
    enc = EncoderConfig(
        depth=s["encoder_depth"], width=s["encoder_width"], heads=s["encoder_heads"],
        norm_style=s["norm_style"], pool=s["pool"], pos_embed=s["pos_embed"],
    )
    return MaeConfig(
        encoder=enc, decoder_depth=s["decoder_depth"], decoder_width=s["decoder_width"],
        decoder_heads=s["decoder_heads"], mask_ratio=s["mask_ratio"], patch=s["patch_size"],
        image_side=s["image_side"], loss_scope=s["loss_scope"], target_norm=s["target_norm"],
    )


def train_configs(s: dict) -> tuple[TrainConfig, TrainConfig]:
    aug = AugmentConfig(s["augment"], (s["crop_scale_lo"], s["crop_scale_hi"]), s["image_side"])

    def one(lr, epochs):
        return TrainConfig(
            epochs=epochs or 0, batch_size=s["batch_size"], augment=aug, mask_mode=s.get("mask_mode") or "resample",
            schedule=ScheduleConfig(lr, s["eta_min"], s["half_period"]),
        )

    ssl = one(s.get("ssl_lr") or s.get("lr"), s.get("ssl_epochs"))
    ft = one(s.get("lr") or s.get("ssl_lr"), s.get("epochs"))
    return ssl, ft


def _synthetic(s: dict, seed: int, offset: int, motif: str = "ct", noise: float = 0.05, dest=None):
    spec = SyntheticSpec(side=s["image_side"], n_train=s["synthetic_train"], n_test=s["synthetic_test"],
                         noise=noise, seed=seed * 7919 + offset, motif=motif)
    return synth_dataset(spec, dest)


# role -> (seed offset, motif, noise); the generic corpus shares no structure with the target
SYNTHETIC_ROLES = {
    "generic": (1, "generic", 0.05),
    "target_adjacent": (2, "ct", 0.05),
    "downstream": (3, "ct", 0.05),
    "downstream_alt": (4, "ct", 0.1),
}


def _manifest_pair(train_path, eval_path, use_labels=True):
    train = load_dataset(load_manifest(train_path), use_labels)
    ev = load_dataset(load_manifest(eval_path)) if eval_path else None
    return train, ev


def _env(s: dict, datasets) -> PlanEnv:
    ssl, ft = train_configs(s)
    return PlanEnv(
        datasets=datasets, model=model_config(s), ssl_train=ssl, finetune_train=ft,
        workdir=Path(s["workdir"]), dtype=np.dtype(s["dtype"]).type,
        # where outputs go does not affect them; keeping it out makes replays byte-identical
        config_snapshot={k: v for k, v in s.items() if k != "workdir"},
    )


def _write_effective(s: dict, plan_dir: Path) -> None:
    plan_dir.mkdir(parents=True, exist_ok=True)
    (plan_dir / "effective.conf").write_text(format_config(s), encoding="utf-8")


def _print_reports(reports) -> None:
    for rep in reports:
        last = rep.rows[-1] if rep.rows else None
        if last is None:
            print(f"{rep.stage}: no epochs run")
            continue
        line = f"{rep.stage}: epochs={len(rep.rows)} final_loss={last['loss']:.6g}"
        if last["acc"] is not None:
            best = rep.best("acc")
            line += f" final_acc={last['acc']:.4f} best_acc={best['acc']:.4f} (epoch {best['epoch']})"
            line += f" final_f1={last['f1']:.4f}"
            if last["auc"] is not None:
                line += f" final_auc={last['auc']:.4f}"
        print(line)


# commands -------------------------------------------------------------------


def _data_source(s: dict, seed: int, plan_dir: Path, eval_key: str | None):
    if s["synthetic"]:
        return _synthetic(s, seed, 3, dest=plan_dir / "data")
    if not s.get("manifest"):
        raise ValidationError("either --manifest or --synthetic is required")
    return _manifest_pair(s["manifest"], s.get(eval_key) if eval_key else None)


def cmd_pretrain(s: dict) -> int:
    seed = s["seed"]
    plan_id = f"pretrain-seed{seed}"
    plan_dir = Path(s["workdir"]) / plan_id
    train, _ = _data_source(s, seed, plan_dir, None)
    init = s.get("init_checkpoint") or "random"
    plan = StagePlan(plan_id, (Stage("1-ssl-data", "ssl-pretrain", "data", s["ssl_epochs"], init, False),))
    _write_effective(s, plan_dir)
    reports, ckpt = run_plan(plan, _env(s, {"data": (train.without_labels(), None)}), seed)
    _print_reports(reports)
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_finetune(s: dict) -> int:
    seed = s["seed"]
    plan_id = f"finetune-seed{seed}"
    plan_dir = Path(s["workdir"]) / plan_id
    train, ev = _data_source(s, seed, plan_dir, "eval_manifest")
    if train.labels is None:
        raise ValidationError("fine-tuning manifest has unlabeled rows")
    init = s.get("init_checkpoint") or "random"
    plan = StagePlan(plan_id, (Stage("1-finetune-data", "finetune", "data", s["epochs"], init, True),))
    env = _env(s, {"data": (train, ev)})
    if s.get("linear_probe"):
        env.finetune_mode = "linear-probe"
    _write_effective(s, plan_dir)
    reports, ckpt = run_plan(plan, env, seed)
    _print_reports(reports)
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_ablate(s: dict) -> int:
    seed, test = s["seed"], s["test"]
    plan_id = f"test{test}-seed{seed}"
    plan_dir = Path(s["workdir"]) / plan_id
    datasets = {}
    if s["synthetic"]:
        roles = {st.dataset for st in build_ablation_plan(test, SYNTHETIC_ROLES).stages}
        for role in sorted(roles):
            offset, motif, noise = SYNTHETIC_ROLES[role]
            datasets[role] = _synthetic(s, seed, offset, motif, noise, dest=plan_dir / "data" / role)
    else:
        for role in ("generic", "target_adjacent", "downstream", "downstream_alt"):
            path = s.get(f"{role}_manifest")
            if path:
                ssl_only = role in ("generic", "target_adjacent")
                datasets[role] = _manifest_pair(path, None if ssl_only else s.get(f"{role}_eval_manifest"),
                                                use_labels=not ssl_only)
    plan = build_ablation_plan(test, datasets, s["ssl_epochs"], s["epochs"], plan_id)
    _write_effective(s, plan_dir)
    reports, ckpt = run_plan(plan, _env(s, datasets), seed)
    _print_reports(reports)
    print(f"checkpoint: {ckpt}")
    return 0


def _checkpoint_model(path) -> tuple[dict, MaeConfig, dict]:
    params, meta = load_checkpoint(path, requires_grad=False)
    try:
        cfg = mae_config_from_dict(meta["config"]["model"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: metadata lacks the model configuration ({exc})") from None
    return params, cfg, meta


def cmd_evaluate(s: dict) -> int:
    print(format_config(s), end="")
    params, cfg, _ = _checkpoint_model(s["checkpoint"])
    if "head.w" not in params:
        raise ValidationError(f"{s['checkpoint']} has no classification head")
    data = load_dataset(load_manifest(s["manifest"]))
    if data.labels is None:
        raise ValidationError("evaluation manifest needs labels")
    res = evaluate_classifier(params, data.images, data.labels, cfg)
    auc = "nan" if res["auc"] is None else f"{res['auc']:.6f}"
    print(f"acc={res['acc']:.6f} f1={res['f1']:.6f} auc={auc} loss={res['loss']:.6f} n={len(data)}")
    return 0


def cmd_inspect(s: dict) -> int:
    print(format_config(s), end="")
    params, cfg, _ = _checkpoint_model(s["checkpoint"])
    if "decoder.pred.w" not in params:
        raise ValidationError(f"{s['checkpoint']} has no decoder (not a pretraining checkpoint)")
    data = load_dataset(load_manifest(s["manifest"]), use_labels=False)
    images = prepare_images(data.images[: s["count"]], cfg.image_side)
    pred, plans = mae_forward(images, params, cfg, rng=np.random.default_rng(s["seed"]))
    out = Path(s.get("out") or Path(s["workdir"]) / "inspect")
    out.mkdir(parents=True, exist_ok=True)
    for i, (img, plan) in enumerate(zip(images, plans)):
        ps = patchify(img, cfg.patch)
        write_image(out / f"{i:03d}_original.pgm", img)
        write_image(out / f"{i:03d}_masked.pgm", masked_image(plan, ps))
        rec = reconstruct_image(pred.data[i], plan, ps, mode="paste-visible")
        write_image(out / f"{i:03d}_reconstructed.pgm", np.clip(rec, 0.0, 1.0))
    print(f"wrote {len(images)} triplets to {out}")
    return 0


def cmd_gradcheck(s: dict) -> int:
    from .gradcheck import TOLERANCE, run_suite

    print(format_config(s), end="")
    results = run_suite(s["seed"])
    for name, err in results.items():
        print(f"{name:22s} {err:.3e}")
    worst = max(results.values())
    print(f"max_rel_error={worst:.3e} tolerance={TOLERANCE:.0e} {'PASS' if worst <= TOLERANCE else 'FAIL'}")
    return 0 if worst <= TOLERANCE else 1


# may come from the config file instead of the command line
REQUIRED = {"ablate": ("test",), "evaluate": ("checkpoint", "manifest"), "inspect": ("checkpoint", "manifest")}

COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "ablate": cmd_ablate,
    "evaluate": cmd_evaluate,
    "inspect": cmd_inspect,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = resolve(args, parser)
        missing = [k for k in REQUIRED.get(args.command, ()) if settings.get(k) is None]
        if missing:
            sub = _subparser(parser, args.command)
            sub.error("the following arguments are required: " + ", ".join("--" + k for k in missing))
        return COMMANDS[args.command](settings)
    except (ValidationError, ManifestError, CheckpointError, FileNotFoundError) as exc:
        print(f"maeforge: error: validation: {exc}", file=sys.stderr)
        return 3
    except PlanError as exc:
        cause = exc.__cause__
        if isinstance(cause, (ManifestError, CheckpointError, FileNotFoundError)):
            print(f"maeforge: error: validation: {exc}", file=sys.stderr)
            return 3
        print(f"maeforge: error: runtime: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"maeforge: error: validation: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001
        print(f"maeforge: error: runtime: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

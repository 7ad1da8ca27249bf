"""Checkpoints and staged pretrain -> fine-tune plans, including ablation Tests 1-5.

Checkpoint layout (all integers little-endian)::

    b"MAEFCKPT"                  magic, 8 bytes
    u32 version                  currently 1
    u32 n, n bytes               metadata, UTF-8 JSON
    u32 count                    number of tensors
    per tensor:
        u16 n, n bytes           name, UTF-8
        u8 dtype                 1 = float32
        u8 ndim, ndim x u32      dimensions
        payload                  row-major little-endian values

Working directory layout: ``<workdir>/<plan-id>/<stage-id>/{checkpoint.bin, report.csv}``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .data import Dataset
from .mae import MaeConfig, init_mae
from .tensor import Tensor
from .training import RunReport, TrainConfig, fit
from .vit import EncoderConfig, init_encoder, init_head

__all__ = [
    "CheckpointError",
    "PlanError",
    "MAGIC",
    "VERSION",
    "ENCODER_PREFIXES",
    "save_checkpoint",
    "load_checkpoint",
    "mae_config_to_dict",
    "mae_config_from_dict",
    "Stage",
    "StagePlan",
    "DATASET_ROLES",
    "build_ablation_plan",
    "PlanEnv",
    "run_plan",
    "epochs_to_threshold",
]

MAGIC = b"MAEFCKPT"
VERSION = 1
ENCODER_PREFIXES = ("patch_embed.", "encoder.")
_DTYPES = {1: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


class PlanError(RuntimeError):
    pass


# checkpoints ----------------------------------------------------------------


def save_checkpoint(params: Mapping[str, Tensor | np.ndarray], meta: Mapping, path) -> None:
    """Write ``params`` as float32 plus a JSON metadata block."""
    meta_bytes = json.dumps(dict(meta), sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(params))]
    for name, value in params.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f4", order="C")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack(f"<BB{arr.ndim}I", 1, arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint (wanted {n} bytes at offset {self.pos})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(
    path,
    encoder_only: bool = False,
    strict_names: Iterable[str] | None = None,
    dtype=np.float64,
    requires_grad: bool = True,
) -> tuple[dict[str, Tensor], dict]:
    """Read a checkpoint back as ``(params, meta)``.

    ``encoder_only`` keeps just the patch embedding and encoder blocks.
    ``strict_names`` rejects any stored tensor whose name is not listed.
    With ``dtype=np.float32`` the tensors are bit-identical to what was saved.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a maeforge checkpoint (bad magic)")
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata: {exc}") from None
    (count,) = r.unpack("<I")
    allowed = None if strict_names is None else set(strict_names)
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        dims = r.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        arr = np.frombuffer(r.take(int(np.prod(dims, dtype=np.int64)) * dt.itemsize), dtype=dt).reshape(dims)
        if allowed is not None and name not in allowed:
            raise CheckpointError(f"{path}: unknown tensor name {name!r}")
        if encoder_only and not name.startswith(ENCODER_PREFIXES):
            continue
        params[name] = Tensor(arr.astype(dtype), requires_grad=requires_grad)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return params, meta


def mae_config_to_dict(cfg: MaeConfig) -> dict:
    return asdict(cfg)


def mae_config_from_dict(d: Mapping) -> MaeConfig:
    d = dict(d)
    d["encoder"] = EncoderConfig(**d["encoder"])
    return MaeConfig(**d)


# stage plans ----------------------------------------------------------------

STAGE_KINDS = ("ssl-pretrain", "finetune")
DATASET_ROLES = ("generic", "target_adjacent", "downstream", "downstream_alt")


@dataclass(frozen=True)
class Stage:
    stage_id: str
    kind: str
    dataset: str
    epochs: int
    init: str = "random"  # "random", an earlier stage_id, or a checkpoint path
    uses_labels: bool = False


@dataclass(frozen=True)
class StagePlan:
    plan_id: str
    stages: tuple[Stage, ...]

    def __post_init__(self):
        seen: set[str] = set()
        if not self.stages:
            raise ValueError("a plan needs at least one stage")
        for s in self.stages:
            if s.kind not in STAGE_KINDS:
                raise ValueError(f"stage {s.stage_id}: unknown kind {s.kind!r}")
            if s.kind == "ssl-pretrain" and s.uses_labels:
                raise ValueError(f"stage {s.stage_id}: self-supervised stages cannot use labels")
            if s.kind == "finetune" and not s.uses_labels:
                raise ValueError(f"stage {s.stage_id}: fine-tuning needs labels")
            if s.init != "random" and s.init not in seen and not s.init.endswith(".bin"):
                raise ValueError(f"stage {s.stage_id}: init {s.init!r} is neither an earlier stage nor a file")
            if s.stage_id in seen:
                raise ValueError(f"duplicate stage id {s.stage_id!r}")
            seen.add(s.stage_id)

    def describe(self) -> list[dict]:
        return [asdict(s) for s in self.stages]


# (kind, dataset role, init from previous stage?, uses labels) per test
_ABLATIONS: dict[int, list[tuple[str, str, bool, bool]]] = {
    1: [("ssl-pretrain", "target_adjacent", False, False), ("finetune", "downstream", True, True)],
    2: [("ssl-pretrain", "generic", False, False), ("finetune", "downstream", True, True)],
    3: [
        ("ssl-pretrain", "generic", False, False),
        ("ssl-pretrain", "target_adjacent", True, False),
        ("finetune", "downstream", True, True),
    ],
    4: [
        ("ssl-pretrain", "generic", False, False),
        ("ssl-pretrain", "downstream", True, False),
        ("finetune", "downstream", True, True),
    ],
    5: [
        ("ssl-pretrain", "generic", False, False),
        ("ssl-pretrain", "downstream_alt", True, False),
        ("finetune", "downstream_alt", True, True),
    ],
}


def build_ablation_plan(
    test_id: int, refs: Iterable[str], ssl_epochs: int = 1000, finetune_epochs: int = 1000, plan_id: str | None = None
) -> StagePlan:
    """The stage sequence of ablation Test ``test_id``; ``refs`` lists the dataset roles available."""
    if test_id not in _ABLATIONS:
        raise ValueError(f"unknown ablation test {test_id}; expected 1-5")
    refs = set(refs)
    stages: list[Stage] = []
    for i, (kind, role, chained, labels) in enumerate(_ABLATIONS[test_id], start=1):
        if role not in refs:
            raise ValueError(f"test {test_id} needs the {role!r} dataset")
        short = "ssl" if kind == "ssl-pretrain" else "finetune"
        epochs = ssl_epochs if kind == "ssl-pretrain" else finetune_epochs
        init = stages[-1].stage_id if chained else "random"
        stages.append(Stage(f"{i}-{short}-{role}", kind, role, epochs, init, labels))
    return StagePlan(plan_id or f"test{test_id}", tuple(stages))


@dataclass
class PlanEnv:
    """Everything a plan needs besides the plan itself."""

    datasets: Mapping[str, tuple[Dataset, Dataset | None]]
    model: MaeConfig
    ssl_train: TrainConfig
    finetune_train: TrainConfig
    workdir: Path = Path("runs")
    dtype: type = np.float64
    n_classes: int = 2
    config_snapshot: dict = field(default_factory=dict)
    finetune_mode: str = "finetune"


def _stage_seed(seed: int, index: int) -> tuple[int, int]:
    init_seed, fit_seed = np.random.SeedSequence([seed, index]).generate_state(2)
    return int(init_seed), int(fit_seed)


def _initial_params(stage: Stage, env: PlanEnv, checkpoints: dict[str, Path], rng) -> tuple[dict, list[str]]:
    cfg = env.model
    lineage: list[str] = []
    source = None
    if stage.init != "random":
        source = checkpoints.get(stage.init, Path(stage.init))
    if stage.kind == "ssl-pretrain":
        params = init_mae(rng, cfg, env.dtype)
        if source is not None:
            loaded, meta = load_checkpoint(source, dtype=env.dtype, strict_names=params)
            params.update(loaded)
            lineage = list(meta.get("lineage", []))
        return params, lineage
    params = init_encoder(rng, cfg.encoder, cfg.patch_dim, cfg.n_patches, env.dtype, grid=cfg.grid)
    params.update(init_head(rng, cfg.encoder.width, env.n_classes, env.dtype))
    if source is not None:
        loaded, meta = load_checkpoint(source, encoder_only=True, dtype=env.dtype)
        missing = set(k for k in params if k.startswith(ENCODER_PREFIXES)) - set(loaded)
        if missing:
            raise CheckpointError(f"{source}: missing encoder tensors {sorted(missing)[:3]}")
        params.update(loaded)
        lineage = list(meta.get("lineage", []))
    return params, lineage


def run_plan(plan: StagePlan, env: PlanEnv, seed: int = 0) -> tuple[list[RunReport], Path]:
    """Run every stage in order and return the reports plus the final checkpoint path.

    Self-supervised stages receive the training images only; labels are
    dropped before the stage starts. A failing stage raises :class:`PlanError`
    and leaves the artifacts of the stages before it on disk.
    """
    root = Path(env.workdir) / plan.plan_id
    checkpoints: dict[str, Path] = {}
    reports: list[RunReport] = []
    for index, stage in enumerate(plan.stages):
        try:
            if stage.dataset not in env.datasets:
                raise PlanError(f"dataset {stage.dataset!r} not provided")
            train, evaluation = env.datasets[stage.dataset]
            init_seed, fit_seed = _stage_seed(seed, index)
            params, lineage = _initial_params(stage, env, checkpoints, np.random.default_rng(init_seed))
            snapshot = {
                **env.config_snapshot,
                "plan": plan.plan_id,
                "stage": asdict(stage),
                "model": mae_config_to_dict(env.model),
                "seed": seed,
            }
            if stage.kind == "ssl-pretrain":
                train = train.without_labels()
                report = fit(
                    params, "pretrain", env.model, replace(env.ssl_train, epochs=stage.epochs),
                    train.images, seed=fit_seed, stage=stage.stage_id, config_snapshot=snapshot,
                )
            else:
                if train.labels is None:
                    raise PlanError(f"fine-tuning dataset {stage.dataset!r} has no labels")
                ev = evaluation if evaluation is not None and evaluation.labels is not None else None
                report = fit(
                    params, env.finetune_mode, env.model, replace(env.finetune_train, epochs=stage.epochs),
                    train.images, train.labels,
                    None if ev is None else ev.images, None if ev is None else ev.labels,
                    seed=fit_seed, stage=stage.stage_id, config_snapshot=snapshot,
                )
        except PlanError:
            raise
        except Exception as exc:
            raise PlanError(f"stage {stage.stage_id} failed: {exc}") from exc
        out = root / stage.stage_id
        out.mkdir(parents=True, exist_ok=True)
        meta = {
            "lineage": lineage + [stage.stage_id],
            "config": snapshot,
            "seed": seed,
            "loss_scope": env.model.loss_scope,
            "pos_embed": env.model.encoder.pos_embed,
            "activation": "gelu",
            "kind": stage.kind,
        }
        save_checkpoint(params, meta, out / "checkpoint.bin")
        report.write_csv(out / "report.csv")
        checkpoints[stage.stage_id] = out / "checkpoint.bin"
        reports.append(report)
    return reports, checkpoints[plan.stages[-1].stage_id]


def epochs_to_threshold(report: RunReport, threshold: float, key: str = "eval_loss") -> int:
    """1-based epoch at which ``key`` first drops to ``threshold``; ``len(rows) + 1`` if never."""
    for row in report.rows:
        value = row.get(key)
        if value is not None and value <= threshold:
            return row["epoch"] + 1
    return len(report.rows) + 1

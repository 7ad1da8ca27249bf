"""Shared builders for pipeline and acceptance tests."""

import json
from pathlib import Path

import numpy as np

from maeforge.data import Dataset, SyntheticSpec, synth_dataset
from maeforge.pipelines import DATASET_ROLES, PlanEnv
from maeforge.training import ScheduleConfig, TrainConfig

FIXTURES = Path(__file__).parent / "fixtures"


def protocol() -> dict:
    with open(FIXTURES / "ablation_protocol.json", encoding="utf-8") as fh:
        data = json.load(fh)
    return {int(k): v for k, v in data.items() if not k.startswith("_")}


def stage_tuples(plan) -> list[tuple]:
    out, prev = [], None
    for s in plan.stages:
        init = "random" if s.init == "random" else "previous" if s.init == prev else s.init
        out.append((s.kind, s.dataset, init, s.uses_labels))
        prev = s.stage_id
    return out


def fixture_tuples(test_id: int) -> list[tuple]:
    return [(s["kind"], s["dataset"], s["init"], s["uses_labels"]) for s in protocol()[test_id]]


def small_datasets(cfg, n_train=8, n_test=4, seed=0) -> dict[str, tuple[Dataset, Dataset]]:
    out = {}
    for i, role in enumerate(DATASET_ROLES):
        motif = "generic" if role == "generic" else "ct"
        spec = SyntheticSpec(side=cfg.image_side, n_train=n_train, n_test=n_test, seed=seed * 10 + i, motif=motif)
        out[role] = synth_dataset(spec)
    return out


def small_env(cfg, workdir, lr=1e-3, datasets=None, **kw) -> PlanEnv:
    train = TrainConfig(epochs=1, batch_size=4, schedule=ScheduleConfig(base_lr=lr))
    return PlanEnv(datasets=datasets or small_datasets(cfg), model=cfg, ssl_train=train,
                   finetune_train=train, workdir=Path(workdir), **kw)


def poisoned(ds: Dataset, value: int = -999) -> Dataset:
    return Dataset(ds.images, np.full(len(ds), value), ds.name)

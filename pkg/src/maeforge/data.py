"""Grayscale PGM images, CSV manifests, synthetic corpora and stratified splits.

Manifest format: UTF-8 CSV with header ``path,label``; ``path`` is relative
to the manifest's directory and ``label`` is ``0``, ``1`` or empty (unlabeled).
Images are binary PGM (``P5``, maxval 255), decoded to ``v / 255``.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

__all__ = [
    "ManifestError",
    "Record",
    "Manifest",
    "Dataset",
    "SyntheticSpec",
    "decode_image",
    "encode_image",
    "read_image",
    "write_image",
    "load_manifest",
    "write_manifest",
    "load_dataset",
    "synth_images",
    "synth_dataset",
    "split",
]


class ManifestError(ValueError):
    """Malformed manifest or image; the message names the offending row."""


# PGM ------------------------------------------------------------------------

_HEADER = re.compile(rb"P5(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def decode_image(data: bytes) -> np.ndarray:
    """Binary PGM bytes -> ``(h, w, 1)`` float64 array in ``[0, 1]``."""
    if not data.startswith(b"P5"):
        raise ValueError("not a binary PGM (bad magic)")
    m = _HEADER.match(data)
    if m is None:
        raise ValueError("malformed PGM header")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"unsupported PGM maxval {maxval} (need 255)")
    payload = data[m.end() : m.end() + w * h]
    if len(payload) != w * h:
        raise ValueError(f"truncated PGM payload: {len(payload)} of {w * h} bytes")
    return (np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 1) / 255.0).astype(np.float64)


def encode_image(image: np.ndarray) -> bytes:
    """``(h, w)`` or ``(h, w, 1)`` array in ``[0, 1]`` -> P5 bytes (rounded to 8 bits)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] != 1:
            raise ValueError("only single-channel images can be written as PGM")
        img = img[:, :, 0]
    h, w = img.shape
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def write_image(path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_image(image))


# manifests ------------------------------------------------------------------


@dataclass(frozen=True)
class Record:
    path: str
    label: int | None


@dataclass(frozen=True)
class Manifest:
    root: Path
    records: tuple[Record, ...]
    side: int
    channels: int = 1

    @property
    def labeled(self) -> bool:
        return all(r.label is not None for r in self.records)

    def labels(self) -> np.ndarray | None:
        return np.array([r.label for r in self.records], dtype=np.int64) if self.labeled else None

    def unlabeled(self) -> "Manifest":
        return replace(self, records=tuple(Record(r.path, None) for r in self.records))

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class Dataset:
    """Decoded images ``(n, side, side, 1)`` with optional labels."""

    images: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""

    def __len__(self) -> int:
        return len(self.images)

    def without_labels(self) -> "Dataset":
        return Dataset(self.images, None, self.name)


def _parse_label(raw: str, row: int) -> int | None:
    raw = raw.strip()
    if raw == "":
        return None
    if raw not in ("0", "1"):
        raise ManifestError(f"row {row}: label {raw!r} is not 0, 1 or empty")
    return int(raw)


def load_manifest(path, side: int | None = None, check_images: bool = True) -> Manifest:
    """Parse and validate a manifest; every image must decode to a ``side x side`` grayscale image.

    ``side`` defaults to the first image's size. Row numbers in errors count
    the header as row 1.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label"]:
            raise ManifestError(f"row 1: expected header 'path,label', got {header}")
        records, seen = [], set()
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise ManifestError(f"row {row_no}: expected 2 fields, got {len(row)}")
            rel = row[0].strip()
            if not rel:
                raise ManifestError(f"row {row_no}: empty path")
            if rel in seen:
                raise ManifestError(f"row {row_no}: duplicate path {rel!r}")
            seen.add(rel)
            records.append((row_no, Record(rel, _parse_label(row[1], row_no))))
    if not records:
        raise ManifestError(f"{path}: no records")
    root = path.parent
    declared = side
    if check_images:
        for row_no, rec in records:
            try:
                img = read_image(root / rec.path)
            except (OSError, ValueError) as exc:
                raise ManifestError(f"row {row_no}: cannot decode {rec.path}: {exc}") from None
            h, w, _ = img.shape
            if declared is None:
                declared = h
            if (h, w) != (declared, declared):
                raise ManifestError(f"row {row_no}: {rec.path} is {h}x{w}, expected {declared}x{declared}")
    return Manifest(root=root, records=tuple(r for _, r in records), side=declared or 0)


def write_manifest(path, manifest: Manifest) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"])
        for r in manifest.records:
            writer.writerow([r.path, "" if r.label is None else r.label])


def load_dataset(manifest: Manifest, use_labels: bool = True) -> Dataset:
    images = np.stack([read_image(manifest.root / r.path) for r in manifest.records])
    labels = manifest.labels() if use_labels else None
    return Dataset(images, labels, name=str(manifest.root))


# synthetic corpora ----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale stand-in corpus.

    ``motif="ct"``: class 0 is a left-to-right intensity ramp, class 1 a
    top-to-bottom ramp, each with one random bright ellipse. ``motif="generic"``
    draws unlabeled textures (gratings, checkerboards, blobs) instead.
    """

    side: int = 32
    n_train: int = 200
    n_test: int = 100
    noise: float = 0.05
    seed: int = 0
    motif: str = "ct"
    n_classes: int = 2

    def __post_init__(self):
        if self.n_classes != 2:
            raise ValueError("synthetic corpus is binary")
        if self.motif not in ("ct", "generic"):
            raise ValueError(f"unknown motif {self.motif!r}")


def _ellipse(rng: np.random.Generator, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] / side
    cy, cx = rng.uniform(0.25, 0.75, size=2)
    ry, rx = rng.uniform(0.1, 0.25, size=2)
    angle = rng.uniform(0, np.pi)
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return ((u / rx) ** 2 + (v / ry) ** 2 <= 1.0).astype(np.float64)


def _ct_image(rng: np.random.Generator, label: int, side: int, noise: float) -> np.ndarray:
    ramp = np.linspace(0.1, 0.7, side)
    base = np.tile(ramp, (side, 1)) if label == 0 else np.tile(ramp[:, None], (1, side))
    img = base + 0.3 * _ellipse(rng, side)
    if noise:
        img = img + noise * rng.standard_normal((side, side))
    return np.clip(img, 0.0, 1.0)


def _generic_image(rng: np.random.Generator, side: int, noise: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] / side
    kind = rng.integers(3)
    if kind == 0:
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(1.0, 6.0)
        phase = rng.uniform(0, 2 * np.pi)
        img = 0.5 + 0.4 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    elif kind == 1:
        cells = int(rng.integers(2, 9))
        img = 0.2 + 0.6 * (((xx * cells).astype(int) + (yy * cells).astype(int)) % 2)
    else:
        img = np.full((side, side), rng.uniform(0.1, 0.4))
        for _ in range(int(rng.integers(1, 5))):
            cy, cx = rng.uniform(0, 1, size=2)
            r = rng.uniform(0.05, 0.3)
            img = img + rng.uniform(0.2, 0.5) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    if noise:
        img = img + noise * rng.standard_normal((side, side))
    return np.clip(img, 0.0, 1.0)


def synth_images(spec: SyntheticSpec, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None]:
    """``count`` images (classes alternate 0, 1, 0, ... for the ``ct`` motif)."""
    if spec.motif == "generic":
        imgs = [_generic_image(rng, spec.side, spec.noise) for _ in range(count)]
        return np.stack(imgs)[..., None], None
    labels = np.arange(count) % 2
    imgs = [_ct_image(rng, int(y), spec.side, spec.noise) for y in labels]
    return np.stack(imgs)[..., None], labels


def _quantise(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(images * 255.0), 0, 255) / 255.0


def synth_dataset(spec: SyntheticSpec, dest=None) -> tuple[Dataset, Dataset]:
    """Generate train and test splits; with ``dest`` also write PGMs plus ``train.csv`` / ``test.csv``.

    In-memory images are quantised to 8 bits so they equal what a reload
    from disk would give.
    """
    rng = np.random.default_rng(spec.seed)
    out = []
    for split_name, count in (("train", spec.n_train), ("test", spec.n_test)):
        images, labels = synth_images(spec, count, rng)
        images = _quantise(images)
        out.append(Dataset(images, labels, name=f"synthetic-{spec.motif}-{split_name}"))
        if dest is not None:
            root = Path(dest)
            (root / split_name).mkdir(parents=True, exist_ok=True)
            records = []
            for i, img in enumerate(images):
                rel = f"{split_name}/{i:05d}.pgm"
                write_image(root / rel, img)
                records.append(Record(rel, None if labels is None else int(labels[i])))
            write_manifest(root / f"{split_name}.csv", Manifest(root, tuple(records), spec.side))
    return out[0], out[1]


# splitting ------------------------------------------------------------------


def _split_indices(labels: np.ndarray | None, n: int, fraction: float, rng: np.random.Generator):
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must lie in (0, 1), got {fraction}")
    groups = [np.arange(n)] if labels is None else [np.flatnonzero(labels == c) for c in np.unique(labels)]
    # per-class quotas by largest remainder so the total is round(fraction * n); ties broken at random
    want = np.array([fraction * len(g) for g in groups])
    quota = np.floor(want).astype(int)
    spare = int(math.floor(fraction * n + 0.5)) - int(quota.sum())
    tiebreak = rng.permutation(len(groups))
    for i in sorted(range(len(groups)), key=lambda i: (-(want[i] - quota[i]), tiebreak[i]))[:spare]:
        quota[i] += 1
    first, second = [], []
    for g, k in zip(groups, quota):
        g = rng.permutation(g)
        first.extend(g[:k].tolist())
        second.extend(g[k:].tolist())
    return sorted(first), sorted(second)


def split(data: Manifest | Dataset, fraction: float, rng: np.random.Generator):
    """Seeded split into ``(first, second)`` with ``fraction`` of each class in ``first``."""
    if isinstance(data, Manifest):
        labels = data.labels()
        a, b = _split_indices(labels, len(data), fraction, rng)
        return (
            replace(data, records=tuple(data.records[i] for i in a)),
            replace(data, records=tuple(data.records[i] for i in b)),
        )
    a, b = _split_indices(data.labels, len(data), fraction, rng)
    pick = lambda idx: Dataset(data.images[idx], None if data.labels is None else data.labels[idx], data.name)  # noqa: E731
    return pick(a), pick(b)


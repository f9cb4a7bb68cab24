"""Deterministic synthetic classification datasets with stratified splits."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import InvalidParameter, UnknownSplit
from .nncore import Batch

SPLITS = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    splits: dict[str, np.ndarray]
    generator_spec: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def indices(self, split: str) -> np.ndarray:
        try:
            return self.splits[split]
        except KeyError:
            raise UnknownSplit(f"unknown split {split!r}; have {list(self.splits)}") from None

    def split(self, split: str) -> Batch:
        idx = self.indices(split)
        return Batch(self.inputs[idx], self.labels[idx])

    def bit_equal(self, other: "Dataset") -> bool:
        return (
            self.inputs.tobytes() == other.inputs.tobytes()
            and self.labels.tobytes() == other.labels.tobytes()
            and list(self.splits) == list(other.splits)
            and all(self.splits[k].tobytes() == other.splits[k].tobytes() for k in self.splits)
            and self.generator_spec == other.generator_spec
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.inputs.astype("<f8").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        for k in self.splits:
            h.update(k.encode())
            h.update(self.splits[k].astype("<i8").tobytes())
        return h.hexdigest()[:16]


def _stratified_splits(labels: np.ndarray, rng: np.random.Generator) -> dict[str, np.ndarray]:
    parts: dict[str, list[np.ndarray]] = {s: [] for s in SPLITS}
    for k in range(int(labels.max()) + 1):
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(len(idx))]
        n_train = len(idx) // 2
        n_val = (len(idx) - n_train) // 2
        parts["train"].append(idx[:n_train])
        parts["val"].append(idx[n_train : n_train + n_val])
        parts["test"].append(idx[n_train + n_val :])
    return {s: np.sort(np.concatenate(parts[s])) for s in SPLITS}


def make_spirals(
    classes: int = 3,
    per_class: int = 300,
    noise_std: float = 0.15,
    lift_dim: int = 16,
    seed: int = 0,
    turns: float = 0.75,
) -> Dataset:
    """``classes`` interleaved 2-D spiral arms, randomly projected to ``lift_dim``.

    Each arm sweeps ``turns`` full revolutions while its radius grows from 0.2
    to 1.0, so no two noiseless points coincide.
    """
    if classes < 2:
        raise InvalidParameter("need at least 2 classes")
    if per_class < 3 * classes:
        raise InvalidParameter(f"per_class must be >= 3 * classes = {3 * classes}")
    if noise_std < 0 or not math.isfinite(noise_std):
        raise InvalidParameter("noise_std must be finite and >= 0")
    if lift_dim < 2:
        raise InvalidParameter("lift_dim must be >= 2")
    if not turns > 0:
        raise InvalidParameter("turns must be > 0")
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, per_class)
    radius = 0.2 + 0.8 * t
    pts, labels = [], []
    for k in range(classes):
        theta = turns * 2.0 * np.pi * t + 2.0 * np.pi * k / classes
        arm = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
        arm = arm + noise_std * rng.standard_normal(arm.shape)
        pts.append(arm)
        labels.append(np.full(per_class, k, dtype=np.int64))
    xy = np.concatenate(pts)
    projection = rng.standard_normal((2, lift_dim)) / math.sqrt(2.0)
    inputs = xy @ projection
    labels_arr = np.concatenate(labels)
    spec = {
        "name": "spirals",
        "seed": int(seed),
        "classes": int(classes),
        "per_class": int(per_class),
        "noise_std": float(noise_std),
        "lift_dim": int(lift_dim),
        "turns": float(turns),
    }
    return Dataset(inputs, labels_arr, _stratified_splits(labels_arr, rng), spec)


def make_blobs(
    classes: int = 3,
    per_class: int = 100,
    spread: float = 0.5,
    input_dim: int = 8,
    seed: int = 0,
) -> Dataset:
    """Isotropic Gaussian clusters around seeded random centres."""
    if classes < 2:
        raise InvalidParameter("need at least 2 classes")
    if per_class < 3 * classes:
        raise InvalidParameter(f"per_class must be >= 3 * classes = {3 * classes}")
    if not spread > 0 or not math.isfinite(spread):
        raise InvalidParameter("spread must be finite and > 0")
    if input_dim < 1:
        raise InvalidParameter("input_dim must be >= 1")
    rng = np.random.default_rng(seed)
    centers = 2.0 * rng.standard_normal((classes, input_dim))
    inputs = np.concatenate(
        [c + spread * rng.standard_normal((per_class, input_dim)) for c in centers]
    )
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    spec = {
        "name": "blobs",
        "seed": int(seed),
        "classes": int(classes),
        "per_class": int(per_class),
        "spread": float(spread),
        "input_dim": int(input_dim),
    }
    return Dataset(inputs, labels, _stratified_splits(labels, rng), spec)


GENERATORS = {"spirals": make_spirals, "blobs": make_blobs}


def from_spec(spec: dict) -> Dataset:
    params = dict(spec)
    name = params.pop("name", "spirals")
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise InvalidParameter(f"unknown dataset generator {name!r}") from None
    return gen(**params)


def batches(
    ds: Dataset, split: str, batch_size: int, shuffle_seed: int | None, epoch: int = 0
) -> Iterator[Batch]:
    """Mini-batches of one split; the order is a seeded function of (shuffle_seed, epoch).

    ``shuffle_seed=None`` keeps the stored order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = ds.indices(split)
    if shuffle_seed is not None:
        rng = np.random.default_rng([int(shuffle_seed), int(epoch)])
        idx = idx[rng.permutation(len(idx))]
    for start in range(0, len(idx), batch_size):
        part = idx[start : start + batch_size]
        yield Batch(ds.inputs[part], ds.labels[part])


# ---------------------------------------------------------------- CSV I/O


def to_csv(ds: Dataset) -> str:
    split_of = np.empty(len(ds.labels), dtype=object)
    for name, idx in ds.splits.items():
        split_of[idx] = name
    buf = io.StringIO()
    buf.write("# generator_spec: " + json.dumps(ds.generator_spec, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{i}" for i in range(ds.input_dim)] + ["label", "split"])
    for row, label, split in zip(ds.inputs, ds.labels, split_of):
        w.writerow([repr(float(v)) for v in row] + [int(label), split])
    return buf.getvalue()


def save_csv(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(to_csv(ds), encoding="utf-8")


def load_csv(path: str | Path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    spec: dict = {}
    if lines and lines[0].startswith("# generator_spec:"):
        spec = json.loads(lines[0].split(":", 1)[1])
        lines = lines[1:]
    reader = csv.reader(l for l in lines if not l.startswith("#"))
    header = next(reader)
    dim = len(header) - 2
    rows = list(reader)
    inputs = np.array([[float(v) for v in r[:dim]] for r in rows], dtype=np.float64).reshape(-1, dim)
    labels = np.array([int(r[dim]) for r in rows], dtype=np.int64)
    split_col = np.array([r[dim + 1] for r in rows])
    splits = {s: np.flatnonzero(split_col == s) for s in SPLITS}
    return Dataset(inputs, labels, splits, spec)

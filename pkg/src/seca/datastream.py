"""Task streams: synthetic clustered classes and binary feature banks.

A stream is an ordered sequence of tasks with pairwise disjoint label
sets. The synthetic generator plants superclass structure by drawing each
class mean as a mix of a shared superclass center and a private
perturbation; superclasses are assigned round-robin over the global class
index, so with enough superclasses the related classes land in different
tasks and cross-task transfer has something to find.

Feature banks are flat binary files with a JSON name manifest alongside,
the ingestion path for features extracted by external tools.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

BANK_MAGIC = b"SECAFB1\x00"
BANK_VERSION = 1
# magic, version, feature dim, class count, sample count
_HEADER = struct.Struct("<8sIIIQ")

_TAG_SYNTH = 6
_TAG_SPLIT = 7


def _rng(seed: int, tag: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag, *extra]))


def _lock(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TaskData:
    """One task: its sorted class ids and train/test labeled features."""

    class_ids: tuple[int, ...]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[TaskData, ...]
    names: dict[int, str]
    dim: int

    def __post_init__(self):
        seen: set[int] = set()
        for task in self.tasks:
            ids = set(task.class_ids)
            if ids & seen:
                raise ValueError("task label sets must be pairwise disjoint")
            seen |= ids
            for split_x, split_y in (
                (task.train_x, task.train_y),
                (task.test_x, task.test_y),
            ):
                if split_x.shape != (split_y.size, self.dim):
                    raise ValueError("feature block shape disagrees with labels")
                if ids != set(np.unique(split_y).tolist()):
                    raise ValueError(
                        "every task class needs at least one train and one "
                        "test sample"
                    )
        if seen != set(self.names):
            raise ValueError("name manifest must cover exactly the stream classes")

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def all_class_ids(self) -> tuple[int, ...]:
        out: list[int] = []
        for task in self.tasks:
            out.extend(task.class_ids)
        return tuple(out)


@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale stand-in for a split of an extracted-feature dataset."""

    num_tasks: int = 10
    classes_per_task: int = 5
    dim: int = 64
    superclasses: int = 10
    mean_correlation: float = 0.8
    noise: float = 0.6
    train_per_class: int = 50
    test_per_class: int = 20
    seed: int = 0

    def __post_init__(self):
        for field in ("num_tasks", "classes_per_task", "dim", "superclasses",
                      "train_per_class", "test_per_class"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be at least 1")
        if not 0.0 <= self.mean_correlation <= 1.0:
            raise ConfigError("mean_correlation must lie in [0, 1]")
        if self.noise < 0.0:
            raise ConfigError("noise must be non-negative")
        total = self.num_tasks * self.classes_per_task
        # sign patterns bound how many means stay pairwise separable
        if self.dim < 31 and total > 2 ** self.dim:
            raise ConfigError(
                f"{total} classes cannot get distinct means at dim {self.dim}"
            )


def gen_synthetic(spec: SyntheticSpec) -> TaskStream:
    """Seeded stream of Gaussian class clusters with superclass structure.

    Class k belongs to superclass k mod G; its mean mixes the superclass
    center and a private direction so that same-superclass means correlate
    at exactly spec.mean_correlation.
    """
    rng = _rng(spec.seed, _TAG_SYNTH)
    total = spec.num_tasks * spec.classes_per_task
    centers = rng.standard_normal((spec.superclasses, spec.dim))
    perts = rng.standard_normal((total, spec.dim))
    rho = spec.mean_correlation
    group = np.arange(total) % spec.superclasses
    means = np.sqrt(rho) * centers[group] + np.sqrt(1.0 - rho) * perts

    def draw_block(count: int) -> tuple[np.ndarray, np.ndarray]:
        x = np.repeat(means, count, axis=0)
        if spec.noise > 0.0:
            x = x + spec.noise * rng.standard_normal(x.shape)
        y = np.repeat(np.arange(total, dtype=np.int64), count)
        return x.astype(np.float32), y

    train_x, train_y = draw_block(spec.train_per_class)
    test_x, test_y = draw_block(spec.test_per_class)

    tasks = []
    for s in range(spec.num_tasks):
        ids = range(s * spec.classes_per_task, (s + 1) * spec.classes_per_task)
        ids = tuple(int(k) for k in ids)
        tr = np.isin(train_y, ids)
        te = np.isin(test_y, ids)
        tasks.append(TaskData(
            class_ids=ids,
            train_x=_lock(train_x[tr]),
            train_y=_lock(train_y[tr]),
            test_x=_lock(test_x[te]),
            test_y=_lock(test_y[te]),
        ))
    names = {k: f"sc{k % spec.superclasses}-class-{k}" for k in range(total)}
    return TaskStream(tasks=tuple(tasks), names=names, dim=spec.dim)


def write_feature_bank(path, features, labels, names: dict[int, str]) -> None:
    """Write a bank file plus its ``<path>.json`` name manifest."""
    path = Path(path)
    features = np.ascontiguousarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise ValueError("features must be (n, d) with one label per row")
    num_classes = len(names)
    if set(names) != set(range(num_classes)):
        raise ValueError("manifest keys must be exactly 0..num_classes-1")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("labels must fall inside the manifest range")
    n, d = features.shape
    rec = np.empty(n, dtype=np.dtype([("y", "<u4"), ("x", "<f4", (d,))]))
    rec["y"] = labels
    rec["x"] = features
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BANK_MAGIC, BANK_VERSION, d, num_classes, n))
        fh.write(rec.tobytes())
    manifest = {str(k): names[k] for k in sorted(names)}
    Path(f"{path}.json").write_text(json.dumps(manifest, indent=1))


def read_feature_bank(path) -> tuple[np.ndarray, np.ndarray, dict[int, str]]:
    """Parse a bank file into (features, labels, names), validating layout."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size or blob[:8] != BANK_MAGIC:
        raise DataFormatError("bad-magic", f"{path} is not a feature bank")
    magic, version, d, num_classes, n = _HEADER.unpack_from(blob)
    if version != BANK_VERSION:
        raise DataFormatError(
            "bad-version", f"bank version {version}, expected {BANK_VERSION}"
        )
    if d < 1 or num_classes < 1:
        raise DataFormatError("truncated", f"{path} header declares empty layout")
    expected = _HEADER.size + n * (4 + 4 * d)
    if len(blob) != expected:
        raise DataFormatError(
            "truncated",
            f"{path} holds {len(blob)} bytes, header arithmetic says {expected}",
        )
    rec = np.frombuffer(
        blob, dtype=np.dtype([("y", "<u4"), ("x", "<f4", (d,))]),
        count=n, offset=_HEADER.size,
    )
    labels = rec["y"].astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise DataFormatError(
            "id-range",
            f"class id {labels.max()} outside declared range {num_classes}",
        )
    features = rec["x"].astype(np.float32)

    manifest_path = Path(f"{path}.json")
    try:
        raw = json.loads(manifest_path.read_text())
        names = {int(k): str(v) for k, v in raw.items()}
    except (OSError, ValueError) as exc:
        raise DataFormatError(
            "bad-manifest", f"cannot parse {manifest_path}: {exc}"
        ) from exc
    if set(names) != set(range(num_classes)):
        raise DataFormatError(
            "bad-manifest",
            f"{manifest_path} must name exactly classes 0..{num_classes - 1}",
        )
    return _lock(features), _lock(labels), names


@dataclass(frozen=True)
class SplitRule:
    """How a flat bank becomes a stream: task count, split ratio, seed."""

    num_tasks: int
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.num_tasks < 1:
            raise ConfigError("num_tasks must be at least 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie strictly in (0, 1)")


def load_feature_bank(path, rule: SplitRule) -> TaskStream:
    """Bank file -> stream: equal class groups by sorted id, seeded split.

    Every class keeps at least one sample on each side of the split, which
    needs two samples per class in the bank.
    """
    features, labels, names = read_feature_bank(path)
    num_classes = len(names)
    if num_classes % rule.num_tasks != 0:
        raise ConfigError(
            f"{num_classes} classes do not divide into {rule.num_tasks} tasks"
        )
    per_task = num_classes // rule.num_tasks

    train_idx: list[np.ndarray] = []
    test_idx: list[np.ndarray] = []
    for k in range(num_classes):
        rows = np.flatnonzero(labels == k)
        if rows.size < 2:
            raise DataFormatError(
                "id-range", f"class {k} needs at least 2 samples to split"
            )
        order = _rng(rule.seed, _TAG_SPLIT, k).permutation(rows.size)
        cut = int(round(rule.train_fraction * rows.size))
        cut = min(max(cut, 1), rows.size - 1)
        train_idx.append(rows[order[:cut]])
        test_idx.append(rows[order[cut:]])

    tasks = []
    for s in range(rule.num_tasks):
        ids = tuple(range(s * per_task, (s + 1) * per_task))
        tr = np.concatenate([train_idx[k] for k in ids])
        te = np.concatenate([test_idx[k] for k in ids])
        tasks.append(TaskData(
            class_ids=ids,
            train_x=_lock(features[tr]),
            train_y=_lock(labels[tr]),
            test_x=_lock(features[te]),
            test_y=_lock(labels[te]),
        ))
    return TaskStream(tasks=tuple(tasks), names=names, dim=features.shape[1])


def flatten_stream(stream: TaskStream) -> tuple[np.ndarray, np.ndarray]:
    """All samples of a stream as one (features, labels) pair, train first."""
    xs = [t.train_x for t in stream.tasks] + [t.test_x for t in stream.tasks]
    ys = [t.train_y for t in stream.tasks] + [t.test_y for t in stream.tasks]
    return np.concatenate(xs), np.concatenate(ys)

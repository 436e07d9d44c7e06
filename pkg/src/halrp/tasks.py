"""Deterministic task sequences and the on-disk dataset format.

Binary format (all little-endian)::

    HDSET1\\n
    count=<N>\\n
    dims=<D>\\n
    classes=<C>\\n
    \\n
    N records of D float32 features followed by a uint32 label

Files that do not start with the magic line are read as CSV rows of
``label, x_1, ..., x_D``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .nn import Batch

MAGIC = b"HDSET1\n"


class DatasetFormatError(ValueError):
    pass


@dataclass
class TaskDataset:
    train: Batch
    test: Batch
    class_count: int
    task_id: int = 0
    provenance: str = ""

    @property
    def dims(self) -> int:
        return self.train.inputs.shape[1]


@dataclass(frozen=True)
class TaskOrder:
    perm: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.perm) != list(range(len(self.perm))):
            raise ValueError(f"{list(self.perm)} is not a permutation of 0..{len(self.perm) - 1}")

    @classmethod
    def from_seed(cls, T: int, seed: int) -> "TaskOrder":
        return cls(tuple(int(x) for x in np.random.default_rng(seed).permutation(T)))

    @classmethod
    def identity(cls, T: int) -> "TaskOrder":
        return cls(tuple(range(T)))

    def __len__(self) -> int:
        return len(self.perm)

    def __iter__(self):
        return iter(self.perm)


def gen_synthetic(
    classes: int,
    dims: int,
    samples_per_class: int,
    seed: int,
    noise: float = 0.1,
    test_per_class: Optional[int] = None,
) -> TaskDataset:
    """Gaussian clouds around uniform prototypes in ``[0, 1]^dims``.

    Features are clipped to the unit cube and rounded to float32 so the
    dataset survives a save/load round trip bit for bit.
    """
    if test_per_class is None:
        test_per_class = max(1, samples_per_class // 4)
    rng = np.random.default_rng(seed)
    protos = rng.uniform(0.0, 1.0, size=(classes, dims))

    def draw(per_class):
        labels = np.repeat(np.arange(classes), per_class)
        x = protos[labels] + noise * rng.standard_normal((labels.size, dims))
        return Batch(np.clip(x, 0.0, 1.0).astype(np.float32), labels.astype(np.int64))

    train = draw(samples_per_class)
    test = draw(test_per_class)
    prov = f"synthetic(classes={classes},dims={dims},n={samples_per_class},noise={noise},seed={seed})"
    return TaskDataset(train, test, classes, 0, prov)


def gen_permuted(base: TaskDataset, T: int, seed: int) -> list[TaskDataset]:
    """Task 0 is ``base``; task t >= 1 applies its own seeded feature shuffle."""
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng(seed)
    out = [replace(base, task_id=0)]
    for t in range(1, T):
        perm = rng.permutation(base.dims)
        out.append(TaskDataset(
            Batch(base.train.inputs[:, perm], base.train.labels.copy()),
            Batch(base.test.inputs[:, perm], base.test.labels.copy()),
            base.class_count,
            t,
            f"permuted(seed={seed},index={t}) of {base.provenance}",
        ))
    return out


def gen_split(pool: TaskDataset, classes_per_task: int, order: Optional[Sequence[int]] = None) -> list[TaskDataset]:
    """Partition classes into consecutive groups, one task per group.

    Labels are remapped to ``0..classes_per_task-1`` inside each task; the
    task id is the group index, so reordering only changes the sequence.
    """
    if classes_per_task < 1 or pool.class_count % classes_per_task:
        raise ValueError(f"{pool.class_count} classes not divisible into groups of {classes_per_task}")
    groups = pool.class_count // classes_per_task
    order = TaskOrder.identity(groups) if order is None else (
        order if isinstance(order, TaskOrder) else TaskOrder(tuple(order)))
    if len(order) != groups:
        raise ValueError(f"order has {len(order)} entries for {groups} groups")

    def take(b: Batch, g):
        lo = g * classes_per_task
        mask = (b.labels >= lo) & (b.labels < lo + classes_per_task)
        return Batch(b.inputs[mask], b.labels[mask] - lo)

    return [
        TaskDataset(take(pool.train, g), take(pool.test, g), classes_per_task, g,
                    f"split(group={g},size={classes_per_task}) of {pool.provenance}")
        for g in order
    ]


def save_dataset(path, b: Batch, classes: Optional[int] = None) -> None:
    x = np.ascontiguousarray(b.inputs, dtype="<f4")
    labels = np.asarray(b.labels)
    n, d = x.shape
    if classes is None:
        classes = int(labels.max()) + 1 if n else 0
    records = np.empty(n, dtype=np.dtype([("x", "<f4", (d,)), ("y", "<u4")]))
    records["x"] = x
    records["y"] = labels
    header = MAGIC + f"count={n}\ndims={d}\nclasses={classes}\n\n".encode("ascii")
    Path(path).write_bytes(header + records.tobytes())


def _parse_header(raw: bytes):
    end = raw.find(b"\n\n", len(MAGIC) - 1)
    if end < 0:
        raise DatasetFormatError("header is not terminated by a blank line")
    fields = {}
    for line in raw[len(MAGIC):end].decode("ascii", "replace").splitlines():
        key, sep, val = line.partition("=")
        if not sep:
            raise DatasetFormatError(f"malformed header line {line!r}")
        try:
            fields[key.strip()] = int(val)
        except ValueError:
            raise DatasetFormatError(f"non-integer header value in {line!r}") from None
    for key in ("count", "dims", "classes"):
        if key not in fields:
            raise DatasetFormatError(f"header is missing {key}=")
    return fields, end + 2


def load_dataset(path) -> tuple[Batch, int]:
    """Read a dataset file; returns the samples and the class count."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        return _load_csv(path)
    fields, offset = _parse_header(raw)
    n, d = fields["count"], fields["dims"]
    dtype = np.dtype([("x", "<f4", (d,)), ("y", "<u4")])
    need = n * dtype.itemsize
    if len(raw) - offset < need:
        raise DatasetFormatError(f"truncated payload: expected {need} bytes, found {len(raw) - offset}")
    rec = np.frombuffer(raw, dtype=dtype, count=n, offset=offset)
    return Batch(rec["x"].astype(np.float32), rec["y"].astype(np.int64)), fields["classes"]


def _load_csv(path) -> tuple[Batch, int]:
    xs, ys = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            try:
                ys.append(int(row[0]))
                xs.append([float(v) for v in row[1:]])
            except ValueError:
                raise DatasetFormatError(f"{path}:{lineno}: not a numeric CSV row") from None
            if len(xs[-1]) != len(xs[0]):
                raise DatasetFormatError(f"{path}:{lineno}: expected {len(xs[0])} features")
    if not xs:
        raise DatasetFormatError(f"{path}: no samples")
    labels = np.asarray(ys, dtype=np.int64)
    return Batch(np.asarray(xs, dtype=np.float32), labels), int(labels.max()) + 1

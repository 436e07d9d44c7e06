"""``key = value`` experiment files.

Blank lines and ``#`` comments are ignored. Unknown keys, duplicate keys and
unparsable values are errors that carry the offending line number. Example::

    generator = permuted
    tasks = 5
    classes = 10
    dims = 64
    samples_per_class = 1000
    epochs = 20
    warmup_epochs = 1
    alpha = 0.9
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from .engine import ExperimentConfig, mlp
from .nn import LayerSpec, conv2d, dense, flatten, maxpool, relu
from .reg_prune import PruneSpec
from .tasks import TaskDataset, TaskOrder, gen_permuted, gen_split, gen_synthetic, load_dataset


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        where = f"{path or '<config>'}:{line}: " if line is not None else ""
        super().__init__(where + message)


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.replace(" ", "").split(",") if x)


def _orders(v: str) -> tuple[tuple[int, ...], ...]:
    return tuple(_ints(chunk) for chunk in v.split(";") if chunk.strip())


def _paths(v: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in v.split(",") if x.strip())


def _choice(*options):
    def parse(v):
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v
    return parse


KEYS: dict[str, Callable[[str], Any]] = {
    # data
    "generator": _choice("permuted", "split", "files"),
    "tasks": int,
    "classes": int,
    "dims": int,
    "samples_per_class": int,
    "test_per_class": int,
    "noise": float,
    "data_seed": int,
    "perm_seed": int,
    "classes_per_task": int,
    "train_files": _paths,
    "test_files": _paths,
    # model
    "arch": _choice("mlp", "lenet"),
    "hidden": _ints,
    "image_shape": _ints,
    "conv_channels": _ints,
    "kernel": int,
    # training
    "mode": _choice("halrp", "stl", "seq_finetune"),
    "epochs": int,
    "warmup_epochs": int,
    "alpha": float,
    "lr": float,
    "lambda0": float,
    "lambda1": float,
    "batch_size": int,
    "momentum": float,
    "p": float,
    "prune": _choice("off", "absolute", "percentile", "mixed"),
    "prune_tau": float,
    "prune_gamma": float,
    "seed": int,
    # sequencing
    "order": _ints,
    "order_seeds": _ints,
    "orders": _orders,
}

REQUIRED = ("generator",)
REQUIRED_BY_GENERATOR = {
    "permuted": ("tasks",),
    "split": ("classes_per_task",),
    "files": ("train_files", "test_files"),
}


@dataclass
class RunSpec:
    values: dict[str, Any] = field(default_factory=dict)
    lines: dict[str, int] = field(default_factory=dict)
    path: Optional[str] = None

    def get(self, key, default=None):
        return self.values.get(key, default)

    def error(self, key: str, message: str) -> ConfigError:
        return ConfigError(message, self.lines.get(key), self.path)


def parse_config(text: str, path: Optional[str] = None) -> RunSpec:
    spec = RunSpec(path=path)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, path)
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno, path)
        if key in spec.values:
            raise ConfigError(f"duplicate key {key!r} (first set on line {spec.lines[key]})", lineno, path)
        try:
            spec.values[key] = KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})", lineno, path) from None
        spec.lines[key] = lineno
    return spec


def read_config(path) -> RunSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path=str(path)) from None
    return parse_config(text, str(path))


def override(spec: RunSpec, **values) -> RunSpec:
    """Command-line flags win over file keys; ``None`` means not given."""
    merged = dict(spec.values)
    for k, v in values.items():
        if v is not None:
            merged[k] = v
    return replace(spec, values=merged)


def validate(spec: RunSpec) -> None:
    for key in REQUIRED:
        if key not in spec.values:
            raise ConfigError(f"missing required key {key!r}", path=spec.path)
    for key in REQUIRED_BY_GENERATOR[spec.values["generator"]]:
        if key not in spec.values:
            raise ConfigError(f"missing required key {key!r} for generator "
                              f"{spec.values['generator']!r}", path=spec.path)


def experiment_config(spec: RunSpec) -> ExperimentConfig:
    v = spec.values
    defaults = ExperimentConfig()
    prune = PruneSpec(v.get("prune", "off"), v.get("prune_tau", defaults.prune.tau),
                      v.get("prune_gamma", v.get("p", defaults.p)))
    names = ("epochs", "warmup_epochs", "alpha", "lr", "lambda0", "lambda1", "batch_size",
             "momentum", "p", "seed", "mode", "hidden")
    kwargs = {k: v[k] for k in names if k in v}
    try:
        return ExperimentConfig(prune=prune, **kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc), path=spec.path) from None


def build_tasks(spec: RunSpec) -> list[TaskDataset]:
    """Tasks in canonical order (list index == canonical task id)."""
    validate(spec)
    v = spec.values
    gen = v["generator"]
    if gen == "files":
        train, test = v["train_files"], v["test_files"]
        if len(train) != len(test):
            raise spec.error("test_files", "train_files and test_files differ in length")
        out = []
        for t, (a, b) in enumerate(zip(train, test)):
            tr, ca = load_dataset(a)
            te, cb = load_dataset(b)
            out.append(TaskDataset(tr, te, max(ca, cb), t, f"files({a},{b})"))
        return out
    data_seed = v.get("data_seed", 0)
    pool = gen_synthetic(
        v.get("classes", 10), v.get("dims", 64), v.get("samples_per_class", 1000),
        seed=data_seed, noise=v.get("noise", 0.1), test_per_class=v.get("test_per_class"),
    )
    if gen == "permuted":
        return gen_permuted(pool, v["tasks"], seed=v.get("perm_seed", data_seed + 1))
    try:
        return gen_split(pool, v["classes_per_task"])
    except ValueError as exc:
        raise spec.error("classes_per_task", f"classes_per_task: {exc}") from None


def apply_order(tasks: list[TaskDataset], order) -> list[TaskDataset]:
    order = TaskOrder(tuple(order))
    if len(order) != len(tasks):
        raise ValueError(f"order has {len(order)} entries for {len(tasks)} tasks")
    return [tasks[i] for i in order]


def lenet(image_shape, channels=(6, 12), kernel=3, hidden=(100, 50)) -> list[LayerSpec]:
    c, h, w = image_shape
    pad = kernel // 2
    layers = [conv2d(c, channels[0], kernel, padding=pad), relu(), maxpool(2),
              conv2d(channels[0], channels[1], kernel, padding=pad), relu(), maxpool(2), flatten()]
    feat = channels[1] * (h // 4) * (w // 4)
    return layers + mlp(feat, hidden)


def architecture(spec: RunSpec, dims: int):
    """(layers, input_shape), or (None, None) for the default MLP body."""
    v = spec.values
    if v.get("arch", "mlp") == "mlp":
        return None, None
    shape = v.get("image_shape")
    if shape is None or len(shape) != 3:
        raise spec.error("image_shape", "arch = lenet needs image_shape = C,H,W")
    if int(np.prod(shape)) != dims:
        raise spec.error("image_shape", f"image_shape {shape} does not match {dims} features")
    return lenet(shape, v.get("conv_channels", (6, 12)), v.get("kernel", 3),
                 v.get("hidden", (100, 50))), tuple(shape)

"""Sequential task learning with low-rank perturbations of a frozen base.

Per new task: warm up a copy of the base network for ``warmup_epochs``,
decompose every body layer against the base, score singular values with the
layer gradient at the warm-up point, pick ranks globally, rebuild the task
network from the truncated factors, fine-tune the factors (plus biases and
head) with the sparsity regularizer, and prune if the stored parameters
exceed the budget ``p``.

Two reference modes share the same driver: ``stl`` trains an independent
network per task, ``seq_finetune`` keeps training one shared body.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from . import metrics, nn
from .nn import (Batch, Head, LayerSpec, LowRankWeight, Network, accuracy, add_head, dense,
                 init_network, mean_layer_gradients, relu, train)
from .perturb import TaskPrivateParams, decompose, init_layer_params
from .rank_select import fisher_norm, importance_scores, select_ranks
from .reg_prune import PruneSpec, RegCoefficients, prune_tasks, regularizer
from .tasks import TaskDataset

log = logging.getLogger(__name__)

MODES = ("halrp", "stl", "seq_finetune")


@dataclass
class ExperimentConfig:
    epochs: int = 20  # n: total epochs per task
    warmup_epochs: int = 1  # n_r
    alpha: float = 0.9
    lr: float = 1e-3
    lambda0: float = 1e-4
    lambda1: float = 1e-4
    batch_size: int = 128
    momentum: float = 0.0
    p: float = 0.3
    prune: PruneSpec = field(default_factory=PruneSpec)
    seed: int = 0
    mode: str = "halrp"
    hidden: tuple[int, ...] = (100, 50)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.mode == "halrp" and not 1 <= self.warmup_epochs <= self.epochs:
            raise ValueError(f"need 1 <= warmup_epochs <= epochs, got {self.warmup_epochs}, {self.epochs}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @property
    def reg(self) -> RegCoefficients:
        return RegCoefficients(self.lambda0, self.lambda1)

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, PruneSpec):
                out["prune"] = v.mode
                out["prune_tau"] = v.tau
                out["prune_gamma"] = v.gamma
            elif isinstance(v, tuple):
                out[f.name] = list(v)
            else:
                out[f.name] = v
        return out


def mlp(input_dim: int, hidden: Sequence[int]) -> list[LayerSpec]:
    layers, prev = [], input_dim
    for h in hidden:
        layers += [dense(prev, h), relu()]
        prev = h
    return layers


def _seed(cfg: ExperimentConfig, *parts: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, *parts]).generate_state(1)[0])


# seed-stream tags
_INIT, _HEAD, _SHUFFLE_BASE, _SHUFFLE_WARM, _SHUFFLE_TUNE = range(5)


@dataclass
class ContinualState:
    base: Network
    tasks: dict[int, TaskPrivateParams]
    history: np.ndarray
    config: ExperimentConfig
    task_names: list[int] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)

    def network_for(self, t: int) -> Network:
        """Materializable network for task ``t`` sharing the frozen base arrays."""
        if t not in self.tasks:
            raise KeyError(f"unknown task id {t}")
        params = self.tasks[t]
        weights = {}
        for i in self.base.parametric_layers():
            if i in params.layers:
                weights[i] = LowRankWeight(self.base.weights[i], params.layers[i])
            else:
                weights[i] = self.base.weights[i]
        return Network(self.base.layers, self.base.input_shape, weights, params.biases,
                       {t: Head(params.head_weight, params.head_bias)})


@dataclass
class ReferenceState:
    """State of the ``stl`` / ``seq_finetune`` reference runs."""

    networks: dict[int, Network]
    history: np.ndarray
    config: ExperimentConfig
    task_names: list[int] = field(default_factory=list)
    shared: Optional[Network] = None

    def network_for(self, t: int) -> Network:
        if self.shared is not None:
            if t not in self.shared.heads:
                raise KeyError(f"unknown task id {t}")
            return self.shared
        if t not in self.networks:
            raise KeyError(f"unknown task id {t}")
        return self.networks[t]


def _base_network(cfg: ExperimentConfig, data: TaskDataset, layers=None, input_shape=None) -> Network:
    if layers is None:
        layers = mlp(data.dims, cfg.hidden)
        input_shape = (data.dims,)
    return init_network(layers, input_shape, seed=_seed(cfg, _INIT))


def train_base(cfg: ExperimentConfig, d0: TaskDataset, layers=None, input_shape=None) -> ContinualState:
    """Train the base network on the first task; it is frozen afterwards."""
    if len(d0.train) == 0:
        raise ValueError("base task has no training samples")
    net = _base_network(cfg, d0, layers, input_shape)
    add_head(net, 0, d0.class_count, seed=_seed(cfg, _HEAD, 0))
    train(net, 0, d0.train, cfg.epochs, cfg.lr, cfg.batch_size,
          seed=_seed(cfg, _SHUFFLE_BASE, 0), momentum=cfg.momentum)
    head = net.heads.pop(0)
    biases = {i: b.copy() for i, b in net.biases.items()}
    params = TaskPrivateParams(0, {}, biases, head.weight, head.bias)
    state = ContinualState(net, {0: params}, np.full((1, 1), np.nan), cfg, [d0.task_id])
    state.history[0, 0] = accuracy(state.network_for(0), 0, d0.test)
    state.log.append({"task": 0, "ranks": {}, "pruned": None})
    return state


def _warm_up(state: ContinualState, t: int, data: TaskDataset) -> Network:
    cfg = state.config
    free = state.base.copy()
    free.biases = {i: b.copy() for i, b in state.tasks[0].biases.items()}
    add_head(free, t, data.class_count, seed=_seed(cfg, _HEAD, t))
    train(free, t, data.train, cfg.warmup_epochs, cfg.lr, cfg.batch_size,
          seed=_seed(cfg, _SHUFFLE_WARM, t), momentum=cfg.momentum)
    return free


def learn_task(state: ContinualState, t: int, data: TaskDataset) -> ContinualState:
    """Add task ``t`` (the next id) to ``state`` and append an accuracy row."""
    cfg = state.config
    if t != len(state.tasks):
        raise ValueError(f"expected task id {len(state.tasks)}, got {t}")
    base = state.base
    free = _warm_up(state, t, data)

    layer_ids = base.parametric_layers()
    decomp = {i: decompose(free.weights[i], base.weights[i]) for i in layer_ids}
    grads = mean_layer_gradients(free, t, data.train)
    grad_norms = [fisher_norm(grads[i]) for i in layer_ids]
    spectra = [decomp[i][2].sigma for i in layer_ids]
    if all(g == 0.0 for g in grad_norms):
        warnings.warn(f"task {t}: all layer gradients vanish at the warm-up point; using rank 0 everywhere")
    budget = select_ranks(importance_scores(grad_norms, spectra), cfg.alpha, [len(s) for s in spectra])

    layers = {}
    for i, k in zip(layer_ids, budget.k_per_layer):
        r, s, f = decomp[i]
        layers[i] = init_layer_params(r, s, f, k, i)
    head = free.heads[t]
    params = TaskPrivateParams(t, layers, free.biases, head.weight, head.bias)
    state.tasks[t] = params
    state.task_names.append(data.task_id)

    net = state.network_for(t)
    train(net, t, data.train, cfg.epochs - cfg.warmup_epochs, cfg.lr, cfg.batch_size,
          reg=regularizer(cfg.reg), seed=_seed(cfg, _SHUFFLE_TUNE, t), momentum=cfg.momentum)

    threshold = None
    report = metrics.increment_report(state)
    if cfg.prune.mode != "off" and report["cumulative_nonzero"][-1] > cfg.p:
        threshold = prune_tasks([state.tasks[j] for j in sorted(state.tasks)], cfg.prune)
        log.info("task %d: pruned low-rank factors below %.3g", t, threshold)
    state.log.append({
        "task": t,
        "ranks": {str(i): int(k) for i, k in zip(layer_ids, budget.k_per_layer)},
        "grad_norms": [float(g) for g in grad_norms],
        "pruned": threshold,
    })
    return state


def evaluate_row(state, tests: Sequence[Batch]) -> np.ndarray:
    return np.array([accuracy(state.network_for(j), j, b) for j, b in enumerate(tests)])


def predict(state, task_id: int, inputs) -> np.ndarray:
    """Argmax labels for ``task_id``; never mutates ``state``."""
    return nn.predict(state.network_for(task_id), task_id, inputs)


def _grow_history(H: np.ndarray, T: int) -> np.ndarray:
    out = metrics.empty_matrix(T)
    out[:H.shape[0], :H.shape[1]] = H
    return out


def _run_halrp(cfg, tasks, layers, input_shape):
    state = train_base(cfg, tasks[0], layers, input_shape)
    state.history = _grow_history(state.history, len(tasks))
    tests = [tasks[0].test]
    for t in range(1, len(tasks)):
        learn_task(state, t, tasks[t])
        tests.append(tasks[t].test)
        state.history[t, :t + 1] = evaluate_row(state, tests)
    return state


def _run_reference(cfg, tasks, layers, input_shape):
    T = len(tasks)
    state = ReferenceState({}, metrics.empty_matrix(T), cfg, [d.task_id for d in tasks])
    tests = []
    shared = None
    for t, data in enumerate(tasks):
        if cfg.mode == "stl":
            net = _base_network(replace_seed(cfg, t), data, layers, input_shape)
            state.networks[t] = net
        else:
            if shared is None:
                shared = _base_network(cfg, data, layers, input_shape)
                state.shared = shared
            net = shared
        add_head(net, t, data.class_count, seed=_seed(cfg, _HEAD, t))
        train(net, t, data.train, cfg.epochs, cfg.lr, cfg.batch_size,
              seed=_seed(cfg, _SHUFFLE_BASE, t), momentum=cfg.momentum)
        tests.append(data.test)
        state.history[t, :t + 1] = evaluate_row(state, tests)
    return state


def replace_seed(cfg: ExperimentConfig, t: int) -> ExperimentConfig:
    return replace(cfg, seed=_seed(cfg, _INIT, t))


def run_sequence(cfg: ExperimentConfig, task_list: Sequence[TaskDataset], layers=None, input_shape=None):
    """Learn ``task_list`` in order; returns ``(state, accuracy_matrix, report)``.

    ``layers``/``input_shape`` override the default MLP body (e.g. a conv net).
    """
    if not task_list:
        raise ValueError("need at least one task")
    start = time.perf_counter()
    if cfg.mode == "halrp":
        state = _run_halrp(cfg, task_list, layers, input_shape)
    else:
        state = _run_reference(cfg, task_list, layers, input_shape)
    A = state.history
    report = {
        "mode": cfg.mode,
        "tasks": [d.task_id for d in task_list],
        "final_avg_accuracy": metrics.final_avg_accuracy(A),
        "bwt": metrics.bwt(A),
        "wall_ms": (time.perf_counter() - start) * 1e3,
    }
    if isinstance(state, ContinualState):
        report["increment"] = metrics.increment_report(state)
        report["ranks"] = [entry["ranks"] for entry in state.log]
    else:
        report["increment"] = reference_increment(state, task_list)
    return state, A, report


def reference_increment(state: ReferenceState, task_list) -> dict:
    """STL stores a full body per task; sequential fine-tuning stores none."""
    T = len(task_list)
    if state.shared is not None:
        per = [0.0] * T
    else:
        per = [0.0] + [1.0] * (T - 1)
    return {"per_task": per, "cumulative": list(np.cumsum(per)), "total": float(sum(per))}

"""Accuracy-matrix summaries, task-order disparity and parameter growth.

``A[i][j]`` is the accuracy on task ``j`` measured right after training task
``i``; only ``j <= i`` is defined (the rest is NaN).

Backward transfer follows the usual gradient-projection convention::

    BWT = 1/(T-1) * sum_{j<T-1} (A[T-1][j] - A[j][j])
"""
from __future__ import annotations

import numpy as np

from .perturb import layer_dims, param_count


def empty_matrix(T: int) -> np.ndarray:
    return np.full((T, T), np.nan)


def final_avg_accuracy(A) -> float:
    A = np.asarray(A, dtype=np.float64)
    return float(np.mean(A[-1]))


def bwt(A) -> float:
    A = np.asarray(A, dtype=np.float64)
    T = A.shape[0]
    if T < 2:
        return 0.0
    return float(np.mean(A[T - 1, :T - 1] - np.diag(A)[:T - 1]))


def opd(runs) -> dict:
    """Per-task max-minus-min final accuracy across runs.

    ``runs`` is a sequence of mappings from canonical task id to final
    accuracy; every run must cover the same task ids.
    """
    runs = list(runs)
    if not runs:
        raise ValueError("need at least one run")
    keys = set(runs[0])
    for r in runs[1:]:
        if set(r) != keys:
            raise ValueError("runs cover different task sets")
    return {t: float(max(r[t] for r in runs) - min(r[t] for r in runs)) for t in sorted(keys)}


def mopd_aopd(opds) -> tuple[float, float]:
    vals = np.asarray(list(opds.values()) if isinstance(opds, dict) else list(opds), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("need at least one OPD value")
    return float(vals.max()), float(vals.mean())


def base_size(base) -> int:
    """Entries in the base parametric weights (heads and biases excluded)."""
    return sum(int(np.size(base.weights[i])) for i in base.parametric_layers())


def task_param_count(base, params) -> int:
    return sum(param_count(*layer_dims(base.weights[i]), p.k) for i, p in params.layers.items())


def task_nonzero_count(params) -> int:
    """Stored nonzero entries of r, s, U, sigma, V (what pruning shrinks)."""
    return sum(
        int(np.count_nonzero(a))
        for p in params.layers.values()
        for a in (p.r, p.s, p.low_rank.U, p.low_rank.sigma, p.low_rank.V)
    )


def increment_report(state) -> dict:
    """Per-task and cumulative increment ratios w.r.t. the base network."""
    size = base_size(state.base)
    per_task, cumulative, nonzero = [], [], []
    running = 0
    running_nz = 0
    for t in sorted(state.tasks):
        params = state.tasks[t]
        c = task_param_count(state.base, params)
        running += c
        running_nz += task_nonzero_count(params)
        per_task.append(c / size)
        cumulative.append(running / size)
        nonzero.append(running_nz / size)
    return {
        "base_size": size,
        "per_task": per_task,
        "cumulative": cumulative,
        "cumulative_nonzero": nonzero,
        "total": cumulative[-1] if cumulative else 0.0,
    }

"""Sparsity regularizer on task-private factors and magnitude pruning."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import LowRankWeight, Network
from .perturb import TaskLayerParams, TaskPrivateParams

DEFAULT_TAU = 1e-5
PRUNE_MODES = ("off", "absolute", "percentile", "mixed")


@dataclass(frozen=True)
class RegCoefficients:
    lambda0: float = 1e-4  # L1 on U, V
    lambda1: float = 1e-4  # squared L2 on r, s, U, V

    def __post_init__(self):
        for name in ("lambda0", "lambda1"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class PruneSpec:
    mode: str = "off"
    tau: float = DEFAULT_TAU
    gamma: float = 1.0

    def __post_init__(self):
        if self.mode not in PRUNE_MODES:
            raise ValueError(f"unknown prune mode {self.mode!r}")
        if self.mode in ("absolute", "mixed") and not self.tau > 0:
            raise ValueError("prune tau must be > 0")
        if self.mode in ("percentile", "mixed") and not 0 < self.gamma <= 1:
            raise ValueError("prune gamma must lie in (0, 1]")


def _layer_reg(p: TaskLayerParams, c: RegCoefficients) -> float:
    U, V = p.low_rank.U, p.low_rank.V
    l1 = np.abs(U).sum() + np.abs(V).sum()
    l2 = p.r @ p.r + p.s @ p.s + np.sum(U * U) + np.sum(V * V)
    return float(c.lambda0 * l1 + c.lambda1 * l2)


def reg_loss(params: TaskPrivateParams, c: RegCoefficients) -> float:
    """Regularizer value; sigma, biases and the head are not penalized."""
    return sum(_layer_reg(p, c) for p in params.layers.values())


def reg_grads(p: TaskLayerParams, c: RegCoefficients, i: int) -> dict[str, np.ndarray]:
    # sign(0) = 0 is the subgradient picked at the L1 kink
    U, V = p.low_rank.U, p.low_rank.V
    return {
        f"r{i}": 2 * c.lambda1 * p.r,
        f"s{i}": 2 * c.lambda1 * p.s,
        f"U{i}": c.lambda0 * np.sign(U) + 2 * c.lambda1 * U,
        f"V{i}": c.lambda0 * np.sign(V) + 2 * c.lambda1 * V,
    }


def regularizer(c: RegCoefficients):
    """Callable for :func:`halrp.nn.train` covering every low-rank layer."""

    def reg(net: Network):
        value, grads = 0.0, {}
        for i, w in net.weights.items():
            if isinstance(w, LowRankWeight):
                value += _layer_reg(w.params, c)
                grads.update(reg_grads(w.params, c, i))
        return value, grads

    return reg


def prune_absolute(values, tau: float) -> np.ndarray:
    """Zero the entries with ``|x| < tau``; returns a new array."""
    if not tau > 0:
        raise ValueError("tau must be > 0")
    values = np.asarray(values, dtype=np.float64)
    return np.where(np.abs(values) < tau, 0.0, values)


def prune_percentile(pool, gamma: float) -> float:
    """Nearest-rank ``(1 - gamma)`` percentile of ``|pool|``.

    Pruning strictly below it keeps at least a ``gamma`` fraction of entries.
    """
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    mags = np.sort(np.abs(np.asarray(pool, dtype=np.float64).ravel()))
    if mags.size == 0:
        raise ValueError("cannot take a percentile of an empty pool")
    # round before ceil so (1 - 0.7) * 10 lands on 3, not 4
    rank = max(1, math.ceil(round((1.0 - gamma) * mags.size, 9)))
    return float(mags[rank - 1])


def prune_mixed(values, tau: float, gamma: float, pool=None) -> np.ndarray:
    """Prune at ``max(tau, percentile threshold)``; the pool defaults to ``values``."""
    tau_p = prune_percentile(values if pool is None else pool, gamma)
    return prune_absolute(values, max(tau, tau_p))


def prune_threshold(spec: PruneSpec, pool) -> float | None:
    if spec.mode == "off":
        return None
    if spec.mode == "absolute":
        return spec.tau
    tau_p = prune_percentile(pool, spec.gamma)
    return tau_p if spec.mode == "percentile" else max(spec.tau, tau_p)


def prune_tasks(tasks, spec: PruneSpec) -> float | None:
    """Prune U and V of every stored task in place against one shared threshold.

    Returns the threshold used, or None when nothing was pruned.
    """
    layers = [p for t in tasks for p in t.layers.values()]
    chunks = [a.ravel() for p in layers for a in (p.low_rank.U, p.low_rank.V) if a.size]
    if not chunks:
        return None
    threshold = prune_threshold(spec, np.concatenate(chunks))
    if threshold is None:
        return None
    for p in layers:
        for a in (p.low_rank.U, p.low_rank.V):
            a[np.abs(a) < threshold] = 0.0
    return threshold

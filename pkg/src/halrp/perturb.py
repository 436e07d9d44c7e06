"""Low-rank weight perturbation of a frozen base layer.

A task-specific layer is written as ``diag(r) @ W_base @ diag(s) + U diag(sigma) V^T``.
For convolution kernels (stored ``d x d x J x I``) the row and column scales act
on the output and input channel axes and the low-rank term is a single
``J x I`` matrix broadcast over all spatial positions.

The warm start is one alternating least-squares pass: ``r`` with ``s = 1`` and
no residual, then ``s`` given ``r``, then the exact residual, then its SVD.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import LowRankFactors, SVDFactors, svd, truncate


@dataclass
class TaskLayerParams:
    r: np.ndarray
    s: np.ndarray
    low_rank: LowRankFactors
    layer_index: int = 0

    @property
    def k(self) -> int:
        return self.low_rank.k

    def copy(self) -> "TaskLayerParams":
        return TaskLayerParams(self.r.copy(), self.s.copy(), self.low_rank.copy(), self.layer_index)


@dataclass
class TaskPrivateParams:
    """Everything a task needs on top of the frozen base network.

    ``layers`` is empty for the base task, which runs on the base weights
    directly.
    """

    task_id: int
    layers: dict[int, TaskLayerParams]
    biases: dict[int, np.ndarray]
    head_weight: np.ndarray
    head_bias: np.ndarray

    @property
    def ranks(self) -> dict[int, int]:
        return {i: p.k for i, p in self.layers.items()}


def _check_same(W_free, W_base):
    if W_free.shape != W_base.shape:
        raise ValueError(f"shape mismatch: free {W_free.shape} vs base {W_base.shape}")


def _safe_ratio(num, den):
    out = np.ones_like(num)
    nz = den != 0
    out[nz] = num[nz] / den[nz]
    return out


def solve_r(W_free, W_base) -> np.ndarray:
    """Row scales minimizing ``||W_free - diag(r) W_base||_F``.

    Rows of ``W_base`` that are entirely zero get ``r = 1``.
    """
    W_free = np.asarray(W_free, dtype=np.float64)
    W_base = np.asarray(W_base, dtype=np.float64)
    _check_same(W_free, W_base)
    return _safe_ratio(np.sum(W_free * W_base, axis=1), np.sum(W_base * W_base, axis=1))


def solve_s(W_free, W_base, r) -> np.ndarray:
    W_free = np.asarray(W_free, dtype=np.float64)
    W_base = np.asarray(W_base, dtype=np.float64)
    _check_same(W_free, W_base)
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (W_base.shape[0],):
        raise ValueError(f"r has shape {r.shape}, expected ({W_base.shape[0]},)")
    scaled = r[:, None] * W_base
    return _safe_ratio(np.sum(W_free * scaled, axis=0), np.sum(scaled * scaled, axis=0))


def residual_b(W_free, W_base, r, s) -> np.ndarray:
    W_free = np.asarray(W_free, dtype=np.float64)
    return W_free - scale(W_base, r, s)


def scale(W_base, r, s) -> np.ndarray:
    """``diag(r) W diag(s)``; for kernels the scales hit the channel axes."""
    W_base = np.asarray(W_base, dtype=np.float64)
    if W_base.ndim == 2:
        return r[:, None] * W_base * s[None, :]
    return W_base * r[None, None, :, None] * s[None, None, None, :]


def decompose_fc(W_free, W_base) -> tuple[np.ndarray, np.ndarray, SVDFactors]:
    r = solve_r(W_free, W_base)
    s = solve_s(W_free, W_base, r)
    return r, s, svd(residual_b(W_free, W_base, r, s))


def decompose_conv(W_free, W_base) -> tuple[np.ndarray, np.ndarray, SVDFactors]:
    """Kernel variant: channel scales fitted over all spatial taps, residual
    averaged over the two spatial axes before the SVD."""
    W_free = np.asarray(W_free, dtype=np.float64)
    W_base = np.asarray(W_base, dtype=np.float64)
    _check_same(W_free, W_base)
    if W_base.ndim != 4 or W_base.shape[0] != W_base.shape[1]:
        raise ValueError(f"expected a d x d x J x I kernel, got {W_base.shape}")
    r = _safe_ratio(
        np.einsum("abji,abji->j", W_free, W_base),
        np.einsum("abji,abji->j", W_base, W_base),
    )
    scaled = W_base * r[None, None, :, None]
    s = _safe_ratio(
        np.einsum("abji,abji->i", W_free, scaled),
        np.einsum("abji,abji->i", scaled, scaled),
    )
    residual = (W_free - scale(W_base, r, s)).mean(axis=(0, 1))
    return r, s, svd(residual)


def decompose(W_free, W_base):
    if np.ndim(W_base) == 4:
        return decompose_conv(W_free, W_base)
    return decompose_fc(W_free, W_base)


def init_layer_params(r, s, factors: SVDFactors, k: int, layer_index: int = 0) -> TaskLayerParams:
    return TaskLayerParams(r.copy(), s.copy(), truncate(factors, k), layer_index)


def reconstruct_weights(W_base, p: TaskLayerParams) -> np.ndarray:
    W = scale(W_base, p.r, p.s)
    if p.k:
        B = p.low_rank.reconstruct()
        W = W + (B if W.ndim == 2 else B[None, None, :, :])
    return W


def param_count(J: int, I: int, k: int) -> int:
    """Stored entries of r, s, U, sigma and V for one layer of one task."""
    if k > min(J, I):
        raise ValueError(f"rank {k} exceeds min({J}, {I})")
    return (I + J) * (k + 1) + k


def increment_ratio(J: int, I: int, k: int) -> float:
    return param_count(J, I, k) / (J * I)


def layer_dims(W_base) -> tuple[int, int]:
    """(J, I) of a dense matrix or a d x d x J x I kernel."""
    shape = np.shape(W_base)
    return shape[-2], shape[-1]

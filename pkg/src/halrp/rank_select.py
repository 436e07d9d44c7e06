"""Gradient-weighted singular-value importance and global rank allocation.

Dropping singular triplet ``i`` of layer ``l`` perturbs the loss by at most
roughly ``0.5 * ||H_l||_F * sigma_{l,i}^2``; with the empirical Fisher in place
of the Hessian, ``||H_l||_F`` becomes ``||g_l||^2``. Ranks are then handed out
greedily across all layers, largest score first, until the kept mass reaches
``alpha`` of the total.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ImportanceItem:
    layer_index: int
    rank_index: int  # 1-based within the layer
    score: float


@dataclass
class RankBudget:
    alpha: float
    k_per_layer: list[int]
    total_score: float
    selected_score: float


def fisher_norm(g) -> float:
    """``||g||_2^2``, which equals the Frobenius norm of ``g g^T``."""
    g = np.asarray(g, dtype=np.float64).ravel()
    return float(g @ g)


def importance_scores(grad_norms, spectra) -> list[ImportanceItem]:
    """One item per (layer, singular value): ``||g_l||^2 * sigma_{l,i}^2``.

    ``grad_norms`` holds the already-squared gradient norms.
    """
    if len(grad_norms) != len(spectra):
        raise ValueError(f"{len(grad_norms)} gradient norms for {len(spectra)} spectra")
    items = []
    for l, (gn, sig) in enumerate(zip(grad_norms, spectra)):
        sig = np.asarray(sig, dtype=np.float64)
        for i, s in enumerate(sig):
            items.append(ImportanceItem(l, i + 1, float(gn) * float(s) ** 2))
    return items


def _order(items):
    return sorted(items, key=lambda it: (-it.score, it.layer_index, it.rank_index))


def select_ranks(items, alpha: float, r_per_layer) -> RankBudget:
    """Greedy allocation: fewest ranks whose scores cover ``alpha`` of the total.

    Ties go to the lower layer index, then the lower rank index. With
    ``alpha = 1`` every strictly positive item is kept, even ones too small
    to move the rounded total.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    k = [0] * len(r_per_layer)
    ordered = _order(items)
    scores = [it.score for it in ordered]
    # correctly rounded prefix sums, so the answer does not depend on summation order
    total = math.fsum(scores)
    if total <= 0.0 or alpha == 0.0:
        return RankBudget(alpha, k, total, 0.0)
    if alpha >= 1.0:
        count = sum(1 for x in scores if x > 0)
    else:
        target = alpha * total
        lo, hi = 0, len(scores)
        while lo < hi:
            mid = (lo + hi) // 2
            if math.fsum(scores[:mid]) >= target:
                hi = mid
            else:
                lo = mid + 1
        count = lo
    for it in ordered[:count]:
        k[it.layer_index] += 1
    for l, (kl, rl) in enumerate(zip(k, r_per_layer)):
        if kl > rl:
            raise ValueError(f"layer {l} selected {kl} ranks but has only {rl}")
    return RankBudget(alpha, k, total, math.fsum(scores[:count]))


def loss_perturbation_bound(h_norm: float, sigma_tail_sq: float) -> float:
    """Second-order bound on the loss change from dropping the spectral tail."""
    return 0.5 * h_norm * sigma_tail_sq


def verify_theorem1(H, w_star, delta) -> tuple[float, float]:
    """Exact loss change of a PSD quadratic under ``w* -> w* - delta`` and
    the Frobenius bound it must respect."""
    H = np.asarray(H, dtype=np.float64)
    w_star = np.asarray(w_star, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1] or not np.allclose(H, H.T):
        raise ValueError("H must be a symmetric square matrix")
    if np.linalg.eigvalsh(H).min() < -1e-10 * max(1.0, np.abs(H).max()):
        raise ValueError("H is not positive semi-definite")

    def quad(w):
        d = w - w_star
        return 0.5 * d @ H @ d

    actual = quad(w_star - delta) - quad(w_star)
    bound = 0.5 * np.linalg.norm(H, "fro") * float(delta @ delta)
    return float(actual), float(bound)

"""Randomized oracle suites shared by ``halrp verify`` and the test-suite.

Each suite checks an implementation path against an independent route
(explicit residual norms, a scalar minimizer, exhaustive enumeration,
Monte-Carlo sampling, finite differences) and reports trial count and the
worst error seen.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from . import linalg, nn, perturb, rank_select, reg_prune


@dataclass
class SuiteResult:
    name: str
    trials: int
    max_error: float
    tolerance: float
    passed: bool
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return (f"{status}  {self.name:<22} trials={self.trials:<6d} max_err={self.max_error:.3e} "
                f"tol={self.tolerance:.0e} time={self.seconds:.2f}s{extra}")


def _timed(fn):
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - start
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def eckart_young(trials: int = 100, seed: int = 0, svd: Callable = linalg.svd,
                 max_shape=(64, 48), competitors: int = 5, tol: float = 1e-6) -> SuiteResult:
    """Tail formula vs explicit residual norm for every k, monotonicity in k,
    and no rank-k competitor beating the truncated SVD."""
    rng = np.random.default_rng(seed)
    worst, problems = 0.0, []
    for trial in range(trials):
        J = int(rng.integers(1, max_shape[0] + 1))
        I = int(rng.integers(1, max_shape[1] + 1))
        M = rng.standard_normal((J, I))
        scale = np.sqrt(np.sum(M * M))
        f = svd(M)
        errs = []
        for k in range(len(f.sigma) + 1):
            direct = np.sqrt(np.sum((M - linalg.truncate(f, k).reconstruct()) ** 2))
            e = linalg.truncation_error(f, k)
            errs.append(e)
            worst = max(worst, abs(e - direct) / scale)
        if any(b > a * (1 + 1e-12) + 1e-15 for a, b in zip(errs, errs[1:])):
            problems.append(f"trial {trial}: error not monotone in k")
        for _ in range(competitors):
            k = int(rng.integers(1, len(f.sigma) + 1))
            X = rng.standard_normal((J, k))
            Y = np.linalg.lstsq(X, M, rcond=None)[0]
            rival = np.sqrt(np.sum((M - X @ Y) ** 2))
            best = np.sqrt(np.sum((M - linalg.truncate(f, k).reconstruct()) ** 2))
            if rival < best - 1e-9 * scale:
                problems.append(f"trial {trial}: random rank-{k} factor beats truncation")
                break
    passed = worst <= tol and not problems
    return SuiteResult("eckart_young", trials, worst, tol, passed, detail="; ".join(problems[:3]))


def _scalar_argmin(fun) -> float:
    return minimize_scalar(fun, method="brent", options={"xtol": 1e-12}).x


@_timed
def lse_optimality(trials: int = 100, seed: int = 0, tol: float = 1e-6,
                   identity_tol: float = 1e-12, scaling_trials: int = 20) -> SuiteResult:
    """Closed-form row/column scales vs a numeric scalar minimizer, the exact
    residual identity, and invariance under ``W_free = c * W_base``."""
    rng = np.random.default_rng(seed)
    worst, problems = 0.0, []
    for _ in range(trials):
        J, I = (int(x) for x in rng.integers(1, 9, size=2))
        Wb = rng.standard_normal((J, I))
        Wf = Wb * rng.uniform(0.5, 1.5, size=(J, 1)) + 0.3 * rng.standard_normal((J, I))
        r = perturb.solve_r(Wf, Wb)
        s = perturb.solve_s(Wf, Wb, r)
        for j in range(J):
            rj = _scalar_argmin(lambda x: np.sum((Wf[j] - x * Wb[j]) ** 2))
            worst = max(worst, abs(rj - r[j]) / max(1.0, abs(rj)))
        for i in range(I):
            si = _scalar_argmin(lambda x: np.sum((Wf[:, i] - r * Wb[:, i] * x) ** 2))
            worst = max(worst, abs(si - s[i]) / max(1.0, abs(si)))
        B = perturb.residual_b(Wf, Wb, r, s)
        gap = np.abs(perturb.scale(Wb, r, s) + B - Wf).max()
        if gap > identity_tol:
            problems.append(f"reconstruction identity off by {gap:.1e}")
    for _ in range(scaling_trials):
        c = 0.0
        while c == 0.0:
            c = float(rng.uniform(-3, 3))
        Wb = rng.standard_normal((int(rng.integers(1, 9)), int(rng.integers(1, 9))))
        r = perturb.solve_r(c * Wb, Wb)
        s = perturb.solve_s(c * Wb, Wb, r)
        B = perturb.residual_b(c * Wb, Wb, r, s)
        if (np.abs(r - c).max() > 1e-12 * max(1, abs(c)) or np.abs(s - 1).max() > 1e-12
                or linalg.frobenius_norm(B) >= 1e-10):
            problems.append(f"scaling invariance fails for c={c:.3f}")
    passed = worst <= tol and not problems
    return SuiteResult("lse_optimality", trials, worst, tol, passed, detail="; ".join(problems[:3]))


def brute_force_ranks(items, alpha: float, r_per_layer) -> list[int]:
    """Fewest-ranks prefix assignment covering ``alpha`` of the mass.

    Among assignments of that size the winner is the one whose items, listed
    in (score desc, layer, rank) order, compare lexicographically smallest.
    ``alpha = 1`` means the full mass: every strictly positive item.
    """
    by_layer = [[] for _ in r_per_layer]
    for it in items:
        by_layer[it.layer_index].append(it)
    for layer in by_layer:
        layer.sort(key=lambda it: it.rank_index)
    total = math.fsum(it.score for it in items)
    target = alpha * total
    best, best_key = None, None
    for ks in itertools.product(*(range(r + 1) for r in r_per_layer)):
        chosen = [it for layer, k in zip(by_layer, ks) for it in layer[:k]]
        if total > 0 and alpha >= 1:
            if any(it.score > 0 and it not in chosen for it in items):
                continue
        elif total > 0 and alpha > 0:
            if math.fsum(it.score for it in chosen) < target:
                continue
        elif sum(ks):
            continue
        key = (len(chosen), sorted((-it.score, it.layer_index, it.rank_index) for it in chosen))
        if best_key is None or key < best_key:
            best, best_key = list(ks), key
    return best


def _random_instance(rng):
    while True:
        L = int(rng.integers(1, 5))
        r = [int(x) for x in rng.integers(0, 6, size=L)]
        if 0 < sum(r) <= 12:
            break
    integer = rng.random() < 0.4
    spectra = []
    for rl in r:
        if integer:
            sig = np.sort(rng.integers(0, 4, size=rl))[::-1].astype(float)
        else:
            sig = np.sort(rng.exponential(1.0, size=rl))[::-1]
        spectra.append(sig)
    if integer:
        g = rng.integers(0, 3, size=L).astype(float)
    else:
        g = rng.exponential(1.0, size=L) * (rng.random(L) > 0.1)
    return g, spectra, r


@_timed
def greedy_vs_bruteforce(trials: int = 1000, seed: int = 0,
                         alphas=(0.0, 0.25, 0.5, 0.75, 0.9, 1.0)) -> SuiteResult:
    """Greedy allocation against exhaustive enumeration on small instances."""
    rng = np.random.default_rng(seed)
    problems, mismatches = [], 0
    for trial in range(trials):
        g, spectra, r = _random_instance(rng)
        items = rank_select.importance_scores(g, spectra)
        total = math.fsum(it.score for it in items)
        prev = None
        for alpha in list(alphas) + [float(rng.uniform())]:
            got = rank_select.select_ranks(items, alpha, r).k_per_layer
            want = brute_force_ranks(items, alpha, r)
            if got != want:
                mismatches += 1
                problems.append(f"trial {trial} alpha={alpha}: greedy {got} vs brute force {want}")
            mass = math.fsum(it.score for it in items if it.rank_index <= got[it.layer_index])
            if total > 0 and mass < alpha * total:
                problems.append(f"trial {trial} alpha={alpha}: coverage violated")
            if alpha in alphas:
                if prev is not None and any(a < b for a, b in zip(got, prev)):
                    problems.append(f"trial {trial}: not monotone in alpha at {alpha}")
                prev = got
    return SuiteResult("greedy_vs_bruteforce", trials, float(mismatches), 0.0, not problems,
                       detail="; ".join(problems[:3]))


@_timed
def loss_bound(trials: int = 1000, seed: int = 0, fisher_tol: float = 1e-10) -> SuiteResult:
    """PSD quadratics never exceed the Frobenius bound; ``||g||^2 == ||g g^T||_F``."""
    rng = np.random.default_rng(seed)
    violations, worst = 0, 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 9))
        A = rng.standard_normal((n, int(rng.integers(1, n + 1))))
        H = A @ A.T
        w = rng.standard_normal(n)
        delta = rng.standard_normal(n) * 10.0 ** rng.uniform(-3, 1)
        actual, bound = rank_select.verify_theorem1(H, w, delta)
        # n == 1 and aligned deltas hit the bound with equality
        if actual > bound * (1 + 1e-12) + 1e-300:
            violations += 1
        g = rng.standard_normal(int(rng.integers(1, 60)))
        outer = np.sqrt(np.sum(np.outer(g, g) ** 2))
        worst = max(worst, abs(rank_select.fisher_norm(g) - outer) / max(outer, 1e-300))
    passed = violations == 0 and worst <= fisher_tol
    return SuiteResult("loss_bound", trials, worst, fisher_tol, passed,
                       detail=f"{violations} bound violations")


def _fd_check(net: nn.Network, task: int, batch: nn.Batch, reg=None, eps: float = 1e-4):
    def objective():
        v = nn.loss(nn.forward(net, task, batch.inputs), batch.labels)
        return v + (reg(net)[0] if reg else 0.0)

    _, grads = nn.backward(net, task, batch)
    arrays = dict(grads.arrays)
    if reg:
        for k, g in reg(net)[1].items():
            arrays[k] = arrays[k] + g
    worst, count = 0.0, 0
    for name, p in net.parameters(task).items():
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = objective()
            p[idx] = old - eps
            down = objective()
            p[idx] = old
            fd = (up - down) / (2 * eps)
            a = arrays[name][idx]
            worst = max(worst, abs(fd - a) / max(abs(fd), abs(a), 1e-7))
            count += 1
    return worst, count


def _gradcheck_nets(rng):
    """(label, network, batch, regularizer) cases covering every layer kind."""
    cases = []
    mlp = nn.init_network([nn.dense(6, 5), nn.relu(), nn.dense(5, 4), nn.relu()], (6,), seed=1)
    nn.add_head(mlp, 0, 3, seed=2)
    cases.append(("dense", mlp, nn.Batch(rng.random((7, 6)), rng.integers(0, 3, 7)), None))

    conv_layers = [nn.conv2d(2, 3, 3, padding=1), nn.relu(), nn.maxpool(2),
                   nn.conv2d(3, 4, 2, stride=2), nn.relu(), nn.flatten(), nn.dense(16, 5), nn.relu()]
    conv = nn.init_network(conv_layers, (2, 8, 8), seed=3)
    nn.add_head(conv, 0, 3, seed=4)
    cases.append(("conv2d+maxpool", conv, nn.Batch(rng.random((4, 128)), rng.integers(0, 3, 4)), None))

    for label, base in (("low-rank dense", mlp), ("low-rank conv", conv)):
        lr_net = base.copy()
        for i in base.parametric_layers():
            W = base.weights[i]
            r, s, f = perturb.decompose(W + 0.2 * rng.standard_normal(W.shape), W)
            k = max(1, len(f.sigma) - 1)
            p = perturb.init_layer_params(r, s, f, k, i)
            # keep factor entries away from the L1 kink at zero
            for a in (p.low_rank.U, p.low_rank.V):
                a[np.abs(a) < 1e-3] = 1e-3
            lr_net.weights[i] = nn.LowRankWeight(W, p)
        for b in lr_net.biases.values():
            b += 0.1 * rng.standard_normal(b.shape)
        batch = cases[0][2] if label == "low-rank dense" else cases[1][2]
        reg = reg_prune.regularizer(reg_prune.RegCoefficients(1e-2, 1e-2))
        cases.append((label, lr_net, batch, None))
        cases.append((label + " + reg", lr_net, batch, reg))
    return cases


@_timed
def gradient_check(seed: int = 0, tol: float = 1e-4, eps: float = 1e-4) -> SuiteResult:
    """Central finite differences against backprop for every trainable array."""
    rng = np.random.default_rng(seed)
    worst, total, parts = 0.0, 0, []
    for label, net, batch, reg in _gradcheck_nets(rng):
        w, n = _fd_check(net, 0, batch, reg, eps)
        worst, total = max(worst, w), total + n
        parts.append(f"{label}: {w:.1e}")
    return SuiteResult("gradient_check", total, worst, tol, worst < tol, detail=", ".join(parts))


SUITES = {
    "eckart_young": eckart_young,
    "lse_optimality": lse_optimality,
    "greedy_vs_bruteforce": greedy_vs_bruteforce,
    "loss_bound": loss_bound,
    "gradient_check": gradient_check,
}


def run_all(seed: int = 0, only=None) -> list[SuiteResult]:
    return [fn(seed=seed) for name, fn in SUITES.items() if only is None or name in only]

"""``halrp`` command: ``run``, ``verify`` and ``orders`` subcommands."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics, verify
from .checkpoint import CheckpointError, save_checkpoint
from .configfile import (ConfigError, RunSpec, apply_order, architecture, build_tasks,
                         experiment_config, override, read_config)
from .engine import MODES, ExperimentConfig, run_sequence
from .reg_prune import PRUNE_MODES
from .tasks import DatasetFormatError, TaskOrder

CHECKPOINT_NAME = "checkpoint.halrp"
RESULTS_NAME = "results.csv"
SUMMARY_NAME = "summary.json"
TIMING_NAME = "timing.json"


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


def result_rows(A: np.ndarray, report: dict) -> list[dict]:
    """One row per step: accuracies on every task seen so far plus running metrics."""
    T = A.shape[0]
    cumulative = report["increment"]["cumulative"]
    rows = []
    for t in range(T):
        seen = A[:t + 1, :t + 1]
        row = {"task_index": t, "tasks_seen": t + 1}
        row.update({f"acc_{j}": (float(A[t, j]) if j <= t else None) for j in range(T)})
        row["avg_accuracy"] = metrics.final_avg_accuracy(seen)
        row["bwt"] = metrics.bwt(seen)
        row["increment_ratio"] = float(cumulative[t])
        rows.append(row)
    return rows


def write_results(out: Path, state, A, report, cfg: ExperimentConfig, order=None) -> None:
    """Checkpoint, CSV and JSON summary are deterministic; wall time goes to its own file."""
    out.mkdir(parents=True, exist_ok=True)
    rows = result_rows(A, report)
    with open(out / RESULTS_NAME, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for row in rows:
            w.writerow([v if isinstance(v, int) else _fmt(v) for v in row.values()])
    summary = {
        "config": cfg.as_dict(),
        "mode": report["mode"],
        "tasks": report["tasks"],
        "order": list(order) if order is not None else None,
        "final_avg_accuracy": report["final_avg_accuracy"],
        "bwt": report["bwt"],
        "increment": report["increment"],
        "ranks": report.get("ranks"),
        "rows": [{k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in r.items()}
                 for r in rows],
    }
    (out / SUMMARY_NAME).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / TIMING_NAME).write_text(json.dumps({"wall_ms": report["wall_ms"]}) + "\n")
    save_checkpoint(out / CHECKPOINT_NAME, state, extra={"order": summary["order"]})


def _spec_from_args(args) -> RunSpec:
    spec = read_config(args.config) if args.config else RunSpec()
    return override(
        spec, seed=args.seed, mode=args.mode, alpha=args.alpha, warmup_epochs=args.warmup_epochs,
        epochs=args.epochs, lr=args.lr, lambda0=args.lambda0, lambda1=args.lambda1,
        prune=args.prune, prune_gamma=args.prune_gamma, prune_tau=args.prune_tau,
    )


def _prepare(spec: RunSpec):
    tasks = build_tasks(spec)
    cfg = experiment_config(spec)
    layers, shape = architecture(spec, tasks[0].dims)
    return cfg, tasks, layers, shape


def cmd_run(args) -> int:
    spec = _spec_from_args(args)
    cfg, tasks, layers, shape = _prepare(spec)
    order = spec.get("order")
    if order is not None:
        tasks = apply_order(tasks, order)
    state, A, report = run_sequence(cfg, tasks, layers, shape)
    out = Path(args.out)
    write_results(out, state, A, report, cfg, order)
    print(f"mode={cfg.mode} tasks={len(tasks)} final_avg_accuracy={report['final_avg_accuracy']:.4f} "
          f"bwt={report['bwt']:.4f} increment={report['increment']['total']:.4f}")
    print(f"wrote {out / RESULTS_NAME}, {out / SUMMARY_NAME}, {out / CHECKPOINT_NAME}")
    return 0


def cmd_verify(args) -> int:
    results = verify.run_all(seed=args.seed, only=args.only)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return 1 if failed else 0


def resolve_orders(T: int, orders=None, seeds=None) -> list[tuple[int, ...]]:
    """Explicit orders are used verbatim; otherwise one seeded permutation per seed."""
    if orders:
        out = [TaskOrder(tuple(o)).perm for o in orders]
    elif seeds:
        out = [TaskOrder.from_seed(T, s).perm for s in seeds]
    else:
        raise ConfigError("orders needs 'orders' or 'order_seeds'")
    if len(out) < 2:
        raise ConfigError(f"need at least 2 orders, got {len(out)}")
    for o in out:
        if len(o) != T:
            raise ConfigError(f"order {list(o)} does not cover {T} tasks")
    return out


def _one_order(job):
    cfg, tasks, layers, shape, order, out = job
    ordered = apply_order(tasks, order)
    state, A, report = run_sequence(cfg, ordered, layers, shape)
    if out is not None:
        write_results(Path(out), state, A, report, cfg, order)
    final = {ordered[pos].task_id: float(A[-1, pos]) for pos in range(len(ordered))}
    return final, report


def sweep(cfg, tasks, orders, layers=None, shape=None, out: Optional[Path] = None, jobs: int = 1) -> dict:
    """Run every order and tabulate OPD per canonical task plus MOPD/AOPD."""
    jobs_list = [(cfg, tasks, layers, shape, o, None if out is None else out / f"order_{r}")
                 for r, o in enumerate(orders)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one_order, jobs_list))
    else:
        results = [_one_order(j) for j in jobs_list]
    finals = [f for f, _ in results]
    opds = metrics.opd(finals)
    mopd, aopd = metrics.mopd_aopd(list(opds.values()))
    return {
        "orders": [list(o) for o in orders],
        "final_accuracy": [{str(k): v for k, v in f.items()} for f in finals],
        "avg_accuracy": [r["final_avg_accuracy"] for _, r in results],
        "opd": {str(k): v for k, v in opds.items()},
        "mopd": mopd,
        "aopd": aopd,
    }


def format_table(table: dict) -> str:
    lines = [f"order {r}: {' '.join(map(str, o))}  avg_acc={a:.4f}"
             for r, (o, a) in enumerate(zip(table["orders"], table["avg_accuracy"]))]
    lines.append("task  OPD")
    lines += [f"{t:>4}  {v:.4f}" for t, v in table["opd"].items()]
    lines.append(f"MOPD={table['mopd']:.4f}  AOPD={table['aopd']:.4f}")
    return "\n".join(lines)


def cmd_orders(args) -> int:
    spec = _spec_from_args(args)
    spec = override(spec, orders=args.orders, order_seeds=args.order_seeds)
    cfg, tasks, layers, shape = _prepare(spec)
    orders = resolve_orders(len(tasks), spec.get("orders"), spec.get("order_seeds"))
    out = Path(args.out)
    table = sweep(cfg, tasks, orders, layers, shape, out, jobs=args.jobs)
    out.mkdir(parents=True, exist_ok=True)
    (out / "orders.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    with open(out / "opd.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "opd"])
        for t, v in table["opd"].items():
            w.writerow([t, repr(v)])
        w.writerow(["MOPD", repr(table["mopd"])])
        w.writerow(["AOPD", repr(table["aopd"])])
    print(format_table(table))
    return 0


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value experiment file")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--alpha", type=float)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda0", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--prune", choices=PRUNE_MODES)
    p.add_argument("--prune-gamma", type=float)
    p.add_argument("--prune-tau", type=float)


def _orders_arg(text: str):
    try:
        return tuple(tuple(int(x) for x in chunk.split(",") if x.strip())
                     for chunk in text.split(";") if chunk.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected orders like '2,0,1;0,1,2', got {text!r}") from None


def _ints_arg(text: str):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="halrp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="learn a task sequence and write results")
    _common(run)
    run.add_argument("--out", default="halrp_out")
    run.set_defaults(func=cmd_run)

    ver = sub.add_parser("verify", help="run the randomized oracle suites")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--only", nargs="+", choices=list(verify.SUITES))
    ver.set_defaults(func=cmd_verify)

    orders = sub.add_parser("orders", help="order-robustness sweep (OPD, MOPD, AOPD)")
    _common(orders)
    orders.add_argument("--orders", type=_orders_arg, help="explicit orders, e.g. '2,0,1;1,2,0'")
    orders.add_argument("--order-seeds", type=_ints_arg, help="seeds for random orders, e.g. '0,1,2'")
    orders.add_argument("--jobs", type=int, default=1)
    orders.add_argument("--out", default="halrp_orders")
    orders.set_defaults(func=cmd_orders)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, DatasetFormatError, ValueError, OSError) as exc:
        print(f"halrp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Subcommands: ``run`` (execute an experiment), ``cost`` (budget table for one
profile), ``partition`` (partition summary), ``report`` (pretty-print a run
directory). Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace

from .config import load_config
from .cost import benchmark_cost_table
from .errors import ConfigError, FedsimError
from .harness import emit_report, load_report, prepare_context, run_experiment


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=int(args.seed))
    if args.fold is not None:
        folds = dict(cfg.folds)
        folds["fold"] = int(args.fold)
        if not 0 <= folds["fold"] < int(folds["n_folds"]):
            raise ConfigError(f"--fold {args.fold} outside the fold plan")
        cfg = replace(cfg, folds=folds)
    out_dir = args.out or cfg.output_dir
    report = run_experiment(cfg, workers=args.workers)
    if out_dir:
        emit_report(report, out_dir)
        print(f"report written to {out_dir}")
    sel = report["selection"]
    print(f"algorithm        {report['algorithm']}")
    print(f"rounds           {report['rounds']}")
    print(f"best val loss    {sel['best_val_loss']:.6g} (round {sel['best_round']})")
    for name, stat in report["metrics"]["overall"].items():
        print(f"test {name:<12} {stat['mean']:.4f} +/- {stat['std']:.4f} "
              f"(n={stat['count']})")
    print(f"kernel backend   {report['kernel_backend']}")
    print(f"content hash     {report['content_hash']}")
    return 0


def _cmd_cost(args) -> int:
    cfg = load_config(args.config)
    if cfg.partition["mode"] != "profile":
        ctx_sizes = None
        if cfg.partition["mode"] == "iid":
            pool = int((cfg.task.get("pool") or {}).get(
                "size", 50 * int(cfg.partition["clients"])))
            m = int(cfg.partition["clients"])
            base, rem = divmod(pool, m)
            ctx_sizes = {i + 1: base + (1 if i < rem else 0) for i in range(m)}
        sizes = ctx_sizes
    else:
        sizes = {cid: count for cid, count, _ in cfg.profile_rows()}
    if not sizes:
        raise ConfigError("cost table needs a partition with known sizes")
    consts = cfg.cost_constants()
    rows = benchmark_cost_table(
        sizes, consts,
        rounds=int(args.rounds), iteration_rounds=int(args.iteration_rounds),
        iterations=int(args.iterations), finetune_epochs=int(args.finetune_epochs),
        batch_size=int(cfg.hyper["batch_size"]), fold=int(cfg.folds["fold"]),
        eval_fraction=float(args.eval_fraction))

    header = (f"{'algorithm':<28} {'total steps':>12} {'parallel':>10} "
              f"{'floats x1e9':>12} {'hours':>8}")
    print(header)
    print("-" * len(header))
    for row in rows:
        print(f"{row.algorithm:<28} {row.total_steps:>12} "
              f"{row.parallel_steps:>10} {row.comm_giga_floats:>12.1f} "
              f"{row.time_hours:>8.1f}")
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as f:
            wr = csv.writer(f)
            wr.writerow(["algorithm", "total_steps", "parallel_steps",
                         "comm_floats", "time_seconds", "time_hours"])
            for row in rows:
                wr.writerow([row.algorithm, row.total_steps, row.parallel_steps,
                             repr(row.comm_floats), repr(row.time_seconds),
                             repr(row.time_hours)])
        print(f"\ncsv written to {args.csv}")
    return 0


def _cmd_partition(args) -> int:
    cfg = load_config(args.config)
    ctx = prepare_context(cfg)
    fold = ctx.fold
    print(f"partition mode   {cfg.partition['mode']}")
    print(f"clients          {len(ctx.client_ids)}")
    print(f"total samples    {sum(ds.n_k for ds in ctx.partition)}")
    print(f"fold             {fold} of {cfg.folds['n_folds']}")
    header = (f"{'client':>6} {'samples':>8} {'train':>6} {'val':>5} "
              f"{'test':>5} {'steps/round':>12}  classes")
    print(header)
    print("-" * len(header))
    batch = int(cfg.hyper["batch_size"])
    for ds in sorted(ctx.partition, key=lambda d: d.client_id):
        cid = ds.client_id
        tr = ctx.train[cid].n_k
        va = ctx.val[cid].n_k
        te = ctx.test[cid].n_k if ctx.test[cid] else 0
        steps = -(-tr // batch)
        classes: dict[str, int] = {}
        for s in ds.samples:
            classes[str(s.class_label)] = classes.get(str(s.class_label), 0) + 1
        mix = ", ".join(f"{k}:{v}" for k, v in sorted(classes.items()))
        print(f"{cid:>6} {ds.n_k:>8} {tr:>6} {va:>5} {te:>5} {steps:>12}  {mix}")
    total_steps = sum(-(-ctx.train[c].n_k // batch) for c in ctx.client_ids)
    max_steps = max(-(-ctx.train[c].n_k // batch) for c in ctx.client_ids)
    print(f"\nper-round SGD steps: total {total_steps}, max {max_steps}")
    return 0


def _cmd_report(args) -> int:
    report = load_report(args.indir)
    sel = report["selection"]
    print(f"algorithm        {report['algorithm']}")
    print(f"seed             {report['seed']}")
    print(f"rounds           {report['rounds']}")
    print(f"best val loss    {sel['best_val_loss']:.6g} (round {sel['best_round']})")
    print(f"content hash     {report['content_hash']}")
    cost = report["cost"]
    print(f"cost             {cost['total_steps']} steps "
          f"({cost['parallel_steps']} parallel), "
          f"{cost['comm_floats'] / 1e9:.1f}e9 floats, "
          f"{cost['time_hours']:.1f} h simulated")
    overall = report["metrics"]["overall"]
    if overall:
        print("\noverall test metrics")
        for name, stat in sorted(overall.items()):
            print(f"  {name:<12} {stat['mean']:.4f} +/- {stat['std']:.4f} "
                  f"(n={stat['count']})")
    per_inst = report["metrics"]["per_institution"]
    if per_inst:
        names = sorted(overall)
        print("\nper-institution means")
        print(f"{'client':>6}  " + "  ".join(f"{n:>10}" for n in names))
        for cid in sorted(per_inst, key=int):
            cells = []
            for n in names:
                stat = per_inst[cid].get(n)
                cells.append(f"{stat['mean']:>10.4f}" if stat else f"{'-':>10}")
            print(f"{cid:>6}  " + "  ".join(cells))
    if report.get("cluster_history"):
        print("\ncluster history")
        for entry in report["cluster_history"]:
            clusters = ", ".join(f"{cid}:{members}" for cid, members
                                 in sorted(entry["clusters"].items()))
            print(f"  round {entry['round']:>4}: {clusters}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Deterministic desk-scale simulator for cross-silo "
                    "federated optimization.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute an experiment")
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--fold", type=int, default=None, help="fold override")
    p.add_argument("--seed", type=int, default=None, help="seed override")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--workers", type=int, default=1,
                   help="client worker threads (does not change results)")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("cost", help="print the budget table for a profile")
    p.add_argument("--config", required=True)
    p.add_argument("--rounds", type=int, default=300)
    p.add_argument("--iteration-rounds", type=int, default=720)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--finetune-epochs", type=int, default=30)
    p.add_argument("--eval-fraction", type=float, default=1.0,
                   help="fraction of the local validation split each round")
    p.add_argument("--csv", default=None, help="also write the table as CSV")
    p.set_defaults(fn=_cmd_cost)

    p = sub.add_parser("partition", help="summarize the configured partition")
    p.add_argument("--config", required=True)
    p.add_argument("--summary", action="store_true",
                   help="accepted for compatibility; summary is the default")
    p.set_defaults(fn=_cmd_partition)

    p = sub.add_parser("report", help="pretty-print a run directory")
    p.add_argument("--in", dest="indir", required=True,
                   help="run directory or report.json path")
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FedsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

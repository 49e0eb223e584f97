"""Command line entry point: ``cuber run | verify-theory | metrics | compare``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import theory
from .learner import MODES
from .experiment import ExperimentConfig, compare, recompute_metrics, run_experiment

PARTS = ("thm1", "thm2_1", "thm2_2")


def _cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    over = {}
    if args.seed is not None:
        over["seeds"] = [args.seed]
    if args.mode is not None:
        over["modes"] = [args.mode]
    if args.out is not None:
        over["out"] = args.out
    if over:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), **over})
    if cfg.out is None:
        print("error: no output directory (use --out or the 'out' config key)", file=sys.stderr)
        return 2
    results = run_experiment(cfg, threads=args.threads)
    for r in results:
        m = r["metrics"]
        bwt = "n/a" if m["bwt"] is None else f"{m['bwt']:+.4f}"
        print(f"{r['mode']:<16} seed {r['seed']:<4} ACC {m['acc']:.4f}  BWT {bwt}  ({r['wall_time']:.1f}s)")
    print(f"results in {cfg.out}")
    return 0


def _theory_job(args):
    which, kind, n, seed, dim, K, k = args
    res = theory.sweep(which, n, seed=seed, kind=kind, d=dim, K=K, k=k)
    res["reports"] = [r.to_dict() for r in res["reports"]]
    return res


def _cmd_verify(args) -> int:
    parts = PARTS if args.which == "all" else (args.which,)
    jobs = []
    for which in parts:
        kinds = ("quadratic_convex",) if which == "thm2_1" else ("quadratic_convex", "quartic_nonconvex")
        if args.kind != "all":
            kinds = tuple(k for k in kinds if k == args.kind)
        for kind in kinds:
            jobs.append((which, kind, args.instances, args.seed, args.dim, args.K, args.k))
    if args.threads > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(_theory_job, jobs))
    else:
        results = [_theory_job(j) for j in jobs]
    ok = True
    for r in results:
        holds = r["passed"] == r["accepted"]
        ok &= holds and r["accepted"] > 0
        line = (f"{r['which']:<7} {r['kind']:<18} accepted {r['accepted']:>4}/{r['attempts']:<5} "
                f"(rate {r['acceptance_rate']:.2f})  conclusion holds {r['passed']}/{r['accepted']}")
        if r["which"] == "thm1" and r["kind"] == "quadratic_convex":
            reached = sum(1 for x in r["reports"] if x["details"].get("reached_tol"))
            line += f"  within 1e-3 of joint optimum {reached}/{r['accepted']}"
        print(line)
    if args.out:
        Path(args.out).write_text(json.dumps({"format_version": 1, "results": results}, indent=2) + "\n")
        print(f"report written to {args.out}")
    return 0 if ok else 1


def _cmd_metrics(args) -> int:
    run_dir = Path(args.run_dir)
    fresh = recompute_metrics(run_dir)
    print(json.dumps(fresh, indent=2, sort_keys=True))
    if args.check:
        stored = json.loads((run_dir / "metrics.json").read_text())
        same = json.dumps(stored, sort_keys=True) == json.dumps(fresh, sort_keys=True)
        print("matches stored metrics" if same else "DIFFERS from stored metrics", file=sys.stderr)
        return 0 if same else 1
    return 0


def _fmt(stat):
    return "n/a" if stat is None else f"{stat['mean']:+.4f} ± {stat['std']:.4f}"


def _cmd_compare(args) -> int:
    table = compare(args.root, baseline=args.baseline)
    if args.json:
        print(json.dumps(table, indent=2, sort_keys=True))
        return 0
    print(f"{'mode':<16} {'seeds':<6} {'ACC':<20} {'BWT':<20} FWT vs {args.baseline}")
    for mode, row in table.items():
        fwt = "n/a" if row["fwt_vs_baseline"] is None else f"{row['fwt_vs_baseline']:+.4f}"
        print(f"{mode:<16} {len(row['seeds']):<6} {_fmt(row['acc']):<20} {_fmt(row['bwt']):<20} {fwt}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cuber", description="Continual learning with selective backward transfer.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment")
    r.add_argument("--config", help="JSON config file (defaults are used when omitted)")
    r.add_argument("--seed", type=int, help="run only this seed")
    r.add_argument("--mode", choices=MODES, help="run only this mode")
    r.add_argument("--out", help="output directory")
    r.add_argument("--threads", type=int, default=1, help="parallel (mode, seed) jobs")
    r.set_defaults(fn=_cmd_run)

    v = sub.add_parser("verify-theory", help="check the two-task theorems on random instances")
    v.add_argument("--which", choices=PARTS + ("all",), default="all")
    v.add_argument("--kind", choices=theory.KINDS + ("all",), default="all")
    v.add_argument("--instances", type=int, default=200, help="accepted instances per part and kind")
    v.add_argument("--dim", type=int, default=6)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--K", type=int, default=50, help="steps for the convergence check")
    v.add_argument("--k", type=int, default=10, help="steps for the transfer check")
    v.add_argument("--out", help="write the per-instance JSON report here")
    v.add_argument("--threads", type=int, default=1)
    v.set_defaults(fn=_cmd_verify)

    m = sub.add_parser("metrics", help="recompute metrics from a persisted run directory")
    m.add_argument("run_dir")
    m.add_argument("--check", action="store_true", help="exit nonzero unless they match metrics.json")
    m.set_defaults(fn=_cmd_metrics)

    c = sub.add_parser("compare", help="tabulate modes and seeds below a results directory")
    c.add_argument("root")
    c.add_argument("--baseline", default="orthogonal_only")
    c.add_argument("--json", action="store_true")
    c.set_defaults(fn=_cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

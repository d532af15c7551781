"""
Command-line entry point.

``fdhybf run`` executes a sweep and writes the CSV, ``fdhybf validate``
lints a configuration file and ``fdhybf oracle`` runs the oracle
comparisons, printing one JSON line per comparison.
"""
import argparse
import sys

from .errors import ConfigError
from .harness import SOLVERS, parse_sweep, run_experiment, summarize, write_csv
from .scenario import load_config, profile

__all__ = ["main", "build_parser"]


def _base_config(args):
    base = profile(args.profile)
    if args.config:
        return load_config(args.config, base)
    return base


def build_parser():
    p = argparse.ArgumentParser(prog="fdhybf", description=__doc__.strip().splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a parameter sweep and write CSV records")
    run.add_argument("--config", help="TOML configuration file")
    run.add_argument("--profile", choices=("desk", "paper"), default="desk")
    run.add_argument("--sweep", action="append", default=[], metavar="KEY=V1,V2,...",
                     help="sweep a key (repeatable): snr_db, ldr_db, rf_chains, phase_bits")
    run.add_argument("--solvers", default="c_hybf",
                     help=f"comma-separated subset of {','.join(SOLVERS)}")
    run.add_argument("--out", default="-", help="CSV path, '-' for standard output")
    run.add_argument("--workers", type=int, default=2, help="per-link pool of the distributed solver")
    run.add_argument("--jobs", type=int, default=1, help="processes running realizations")
    run.add_argument("--realizations", type=int, help="override the configured count")
    run.add_argument("--summary", action="store_true", help="print mean/s.e. per point to stderr")

    val = sub.add_parser("validate", help="check a configuration file")
    val.add_argument("--config", required=True)
    val.add_argument("--profile", choices=("desk", "paper"), default="desk")

    orc = sub.add_parser("oracle", help="run the oracle comparisons (JSON lines)")
    orc.add_argument("--quick", action="store_true", help="fewer instances and samples")
    orc.add_argument("--seed", type=int, default=0)
    orc.add_argument("--out", default="-", help="JSON-lines path, '-' for standard output")
    return p


def _cmd_run(args):
    cfg = _base_config(args)
    sweep = parse_sweep(args.sweep)
    solvers = [s.strip() for s in args.solvers.split(",") if s.strip()]
    if args.workers < 1 or args.jobs < 1:
        raise ConfigError("--workers and --jobs must be at least 1", "workers")
    records = list(run_experiment(cfg, sweep, solvers, realizations=args.realizations,
                                  jobs=args.jobs, pd_workers=args.workers))
    if args.out == "-":
        write_csv(records, sys.stdout)
    else:
        write_csv(records, args.out)
    if args.summary:
        for row in summarize(records):
            print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                           for k, v in row.items()), file=sys.stderr)
    return 0


def _cmd_validate(args):
    cfg = _base_config(args)
    print(f"ok {cfg.config_hash()}")
    return 0


def _cmd_oracle(args):
    from .verification import run_suite
    out = sys.stdout if args.out == "-" else open(args.out, "w", encoding="utf-8")
    failed = 0
    try:
        for rep in run_suite(quick=args.quick, seed=args.seed):
            out.write(rep.to_json() + "\n")
            failed += not rep.passed
    finally:
        if out is not sys.stdout:
            out.close()
    if failed:
        print(f"{failed} oracle comparison(s) failed", file=sys.stderr)
    return 1 if failed else 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler = {"run": _cmd_run, "validate": _cmd_validate, "oracle": _cmd_oracle}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        key = f" [{exc.key}]" if getattr(exc, "key", None) else ""
        print(f"configuration error{key}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

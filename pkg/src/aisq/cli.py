"""Command-line entry point ``aisq``."""

from __future__ import annotations

import argparse
import os
import sys

from .bench import ConfigError, make_config, parse_loss_grid, read_config, run_compare, run_ecdf, run_trace, fmt
from .selftest import selftest


def _grid(text):
    try:
        return parse_loss_grid(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat key = value file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--problem", choices=("gauss1d", "credit"))
    p.add_argument("--portfolio", metavar="PATH", help="CSV with header exposure,pd,sector")
    p.add_argument("--sectors", metavar="PATH", help="sector model file")
    p.add_argument("--n", type=int, help="samples per run")
    p.add_argument("--reps", type=int, help="replications")
    p.add_argument("--alpha", type=float, action="append", help="quantile level (repeatable)")
    p.add_argument("--loss-grid", type=_grid, metavar="LO:HI:STEP")
    p.add_argument("--q1", type=float)
    p.add_argument("--q2", type=float)
    p.add_argument("--norm", choices=("identity", "lil", "ft"))
    p.add_argument("--eta", type=float)
    p.add_argument("--schedule", choices=("classic", "polyak"))
    p.add_argument("--a", type=float, help="step scale")
    p.add_argument("--reduce", type=int, metavar="L", help="principal components kept (0: all)")
    p.add_argument("--freeze", action="store_true", default=None, help="tune once, then sample at the frozen mean")
    p.add_argument("--no-tune", dest="tune", action="store_false", default=None,
                   help="keep the sampling mean at zero (AIS reduces to crude MC)")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--threads", type=int)


def _config(args):
    values = read_config(args.config) if args.config else {}
    threads = args.threads
    if threads is None and "threads" not in values and os.environ.get("AISQ_THREADS"):
        try:
            threads = int(os.environ["AISQ_THREADS"])
        except ValueError:
            raise ConfigError(f"AISQ_THREADS must be an integer, got {os.environ['AISQ_THREADS']!r}") from None
    return make_config(
        values, seed=args.seed, problem=args.problem, portfolio=args.portfolio, sectors=args.sectors,
        n=args.n, reps=args.reps, alpha=tuple(args.alpha) if args.alpha else None, loss_grid=args.loss_grid,
        q1=args.q1, q2=args.q2, norm=args.norm, eta=args.eta, schedule=args.schedule, a=args.a,
        reduce=args.reduce, freeze=args.freeze, tune=args.tune, out=args.out, threads=threads,
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="aisq", description="Adaptive importance sampling for tail quantiles.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("compare", "crude MC vs AIS variance-ratio table"),
                        ("trace", "parameter trajectory of one tuning chain"),
                        ("ecdf", "tail ECDFs of crude MC and AIS")):
        _add_experiment_args(sub.add_parser(name, help=help_))
    sub.add_parser("selftest", help="fast built-in checks")
    args = parser.parse_args(argv)

    if args.command == "selftest":
        checks = selftest()
        for c in checks:
            print(f"{'PASS' if c.passed else 'FAIL'} {c.name}" + (f"  ({c.detail})" if c.detail else ""))
        return 0 if all(c.passed for c in checks) else 1

    try:
        config = _config(args)
        if args.command == "compare":
            table = run_compare(config)
            print(f"replications: {table.reported} reported, {table.diverged} diverged")
            for lam, v in zip(table.loss_grid, table.var_ratio):
                print(f"loss {fmt(lam)}: variance ratio {fmt(v)}")
        elif args.command == "trace":
            res, _ = run_trace(config)
            print(f"status {res.status}, truncations {res.truncations}, theta_bar "
                  + " ".join(fmt(t) for t in res.theta_bar))
        else:
            rep = run_ecdf(config)
            print(f"crude q(0.999) {fmt(rep.q_mc)}: exceedances AIS {rep.exceed_ais}, crude {rep.exceed_mc}")
    except (ConfigError, ValueError, OSError, RuntimeError) as exc:
        print(f"aisq: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``ehdetect {optimize,sweep,simulate,validate}``."""

from __future__ import annotations

import argparse
import sys

from .errors import ChainError, ConfigError, InfeasibleError, NumericalError
from .harness import SWEEP_VARIABLES, SweepSpec, cmd_optimize, cmd_simulate, cmd_sweep, \
    cmd_validate
from .optimize import METHODS, default_workers

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERICAL = 4
EXIT_VALIDATION = 5


def _values(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML network description")
    common.add_argument("--method", default="hybrid-moe", choices=METHODS)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--slots", type=int, default=100_000,
                        help="Monte-Carlo slots (0 skips simulation where optional)")
    common.add_argument("--out", help="output file (stdout if omitted)")
    common.add_argument("--workers", type=int, default=None,
                        help="process pool size (default: $EHDETECT_WORKERS or 1)")

    p = argparse.ArgumentParser(prog="ehdetect",
                                description="Transmit-power policy design for energy-harvesting "
                                            "sensor networks doing distributed detection.")
    sub = p.add_subparsers(dest="command", required=True)

    o = sub.add_parser("optimize", parents=[common], help="solve for per-sensor policies")
    o.add_argument("--dump-chain", metavar="DIR", help="write Psi/Phi CSVs per sensor")
    o.add_argument("--timing", action="store_true", help="include wall-clock times")

    s = sub.add_parser("sweep", parents=[common], help="sweep one parameter, emit CSV")
    s.add_argument("--variable", choices=SWEEP_VARIABLES)
    s.add_argument("--values", type=_values, help="comma-separated, strictly monotone")
    s.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))
    s.add_argument("--replications", type=int, default=1)
    s.add_argument("--timing", action="store_true", help="fill the wall_time column")

    m = sub.add_parser("simulate", parents=[common], help="Monte-Carlo run of the network")
    m.add_argument("--trace", metavar="CSV", help="per-slot trace of the first 1000 slots")
    m.add_argument("--fusion", choices=("exact", "clt-approx"), default="exact")
    m.add_argument("--cold-start", action="store_true")
    m.add_argument("--dump-chain", metavar="DIR")

    v = sub.add_parser("validate", parents=[common], help="run the oracle checks")
    v.add_argument("--inject-fault", action="store_true",
                   help="scale one transition row by 0.9 to exercise the failure path")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        workers = args.workers if args.workers is not None else default_workers()
        common = dict(seed=args.seed, out=args.out, n_slots=args.slots, workers=workers)
        code = EXIT_OK
        if args.command == "optimize":
            _, text = cmd_optimize(args.config, args.method, dump_chain=args.dump_chain,
                                   timing=args.timing, **common)
        elif args.command == "sweep":
            spec = None
            if args.variable or args.values:
                if not (args.variable and args.values):
                    parser.error("--variable and --values go together")
                methods = tuple(args.methods.split(",")) if args.methods else (args.method,)
                spec = SweepSpec(args.variable, args.values, methods, args.replications)
            _, text = cmd_sweep(args.config, spec, timing=args.timing, **common)
        elif args.command == "simulate":
            _, text = cmd_simulate(args.config, args.method, trace=args.trace,
                                   fusion=args.fusion, cold_start=args.cold_start,
                                   dump_chain=args.dump_chain, **common)
        else:
            _, text, ok = cmd_validate(args.config, args.method, inject_fault=args.inject_fault,
                                       **common)
            code = EXIT_OK if ok else EXIT_VALIDATION
        if not args.out:
            sys.stdout.write(text)
        return code
    except (FileNotFoundError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (NumericalError, ChainError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``fedsr run | compare | audit``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

import argparse
import json
import sys

from . import __version__
from .errors import ConfigError, FedSRError
from .harness import (OUTPUT_ENV, audit_config, compare_runs, format_table, parse_config,
                      resolve_out_dir, run_experiment, write_table_csv)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def build_parser():
    p = argparse.ArgumentParser(prog="fedsr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fedsr {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a JSON config")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--out", help=f"output directory (default: config, ${OUTPUT_ENV}, ./runs)")
    run.add_argument("--workers", type=int, help="threads for ring clusters")

    cmp_ = sub.add_parser("compare", help="tabulate metrics CSVs from several runs")
    cmp_.add_argument("files", nargs="+")
    cmp_.add_argument("--target", type=float, action="append", default=[],
                      help="target accuracy for cost-to-target (repeatable)")
    cmp_.add_argument("--csv", help="also write the table as CSV")

    aud = sub.add_parser("audit", help="partition and edge-weight audit only")
    aud.add_argument("--config", required=True)
    aud.add_argument("--seed", type=int)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            rows = compare_runs(args.files, args.target)
            print(format_table(rows))
            if args.csv:
                write_table_csv(rows, args.csv)
            return EXIT_OK

        config = parse_config(args.config)
        if args.seed is not None:
            config.seed = args.seed
        if args.command == "audit":
            print(json.dumps(audit_config(config), indent=2))
            return EXIT_OK

        if args.workers is not None:
            config.workers = args.workers
        out = resolve_out_dir(config, args.out)
        result = run_experiment(config, out)
        last = result.records[-1]
        print(f"wrote {out}/metrics.csv: final accuracy {last.accuracy:.4f}, "
              f"{last.cum_transfers} model transfers")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedSRError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

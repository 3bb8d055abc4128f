"""Command-line entry point ``msinvert``.

Exit status: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .config import load_config
from .exceptions import ConfigError, MsInvertError
from .experiment import aggregate_error, run_case, sweep, validate

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _parser():
    p = argparse.ArgumentParser(prog="msinvert", description="Multiscale inversion of coarse mass/stiffness blocks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("config")
    val = sub.add_parser("validate", help="check a config and print problem sizes")
    val.add_argument("config")
    sw = sub.add_parser("sweep", help="run one experiment per value of a config key")
    sw.add_argument("config")
    sw.add_argument("--vary", required=True, metavar="KEY=V1,V2,...")
    return p


def _parse_vary(text):
    if "=" not in text:
        raise ConfigError("--vary expects KEY=V1,V2,...")
    key, vals = text.split("=", 1)
    values = [v.strip() for v in vals.split(",") if v.strip()]
    if not key.strip() or not values:
        raise ConfigError("--vary expects KEY=V1,V2,...")
    return key.strip(), values


def _summary(res):
    last = res.history[-1]
    return (
        f"J {res.history[0]['J']:.6e} -> {last['J']:.6e} in {res.state.iteration} iterations; "
        f"error {aggregate_error(res.errors_initial):.4e} -> {aggregate_error(res.errors_final):.4e}; "
        f"outputs in {res.output}"
    )


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "validate":
            print(validate(load_config(args.config)))
        elif args.command == "run":
            print(_summary(run_case(load_config(args.config))))
        else:
            key, values = _parse_vary(args.vary)
            for value, res in sweep(args.config, key, values):
                print(f"{key}={value}: {_summary(res)}")
    except ConfigError as exc:
        print(f"msinvert: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MsInvertError, np.linalg.LinAlgError, ValueError, OSError) as exc:
        where = getattr(exc, "stage", None)
        prefix = f"stage '{where}' failed: " if where else ""
        print(f"msinvert: runtime error: {prefix}{exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

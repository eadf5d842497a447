"""Command-line entry point: ``deltann <command> [options]``."""

import argparse
import json
import sys

import numpy as np

from . import __version__
from .config import ConfigError, describe_keys, read_file, resolve
from .dmft_engine import DmftError
from .experiments import COMMANDS, TaskError
from .hessian_lab import EigenSolveError
from .model_core import DomainError, ModelConfigError
from .rmt_predict import NonMonotoneError, SpectralError
from .trainer import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

NUMERIC_ERRORS = (DmftError, SpectralError, EigenSolveError, DivergenceError, DomainError,
                  NonMonotoneError, TaskError, np.linalg.LinAlgError, FloatingPointError)

DESCRIPTIONS = {
    "predict-threshold": "DMFT + RMT threshold curve delta*(t) and its t -> inf extrapolation",
    "sweep": "empirical GD success probability over a (d, delta) grid",
    "grokking": "train/test risk and overlap trace of a single long GD run",
    "hessian-spectrum": "finite-d Hessian ESD, smallest eigenpairs and the predicted overlay",
    "dmft-run": "DMFT kernels and per-step moments up to T_dmft",
    "validate": "derivative, Jacobian, Stieltjes and DMFT-vs-simulation self checks",
}


def build_parser():
    epilog = "config keys (YAML/JSON file, or --set key=value):\n" + describe_keys()
    parser = argparse.ArgumentParser(prog="deltann", description=__doc__, epilog=epilog,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in DESCRIPTIONS.items():
        p = sub.add_parser(name, help=desc, description=desc, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", metavar="PATH", help="YAML or JSON config, or a run manifest")
        p.add_argument("--seed", type=int, help="base seed (also sets seeds=[seed] if unset)")
        p.add_argument("--workers", type=int, help="worker processes")
        p.add_argument("--paper-scale", action="store_true", help="use the full-size grids")
        p.add_argument("--out", metavar="DIR", default=f"runs/{name}", help="output directory")
        p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                       help="override one config key; VALUE is parsed as JSON when possible")
        if name == "validate":
            p.add_argument("--inject-fault", choices=["weight_sign"],
                           help="flip the Hessian weight sign to confirm the suite catches it")
    return parser


def _parse_set(items):
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        user = read_file(args.config) if args.config else {}
        overrides = _parse_set(args.set)
        if args.seed is not None:
            overrides["seed"] = args.seed
            if "seeds" not in user and "seeds" not in overrides:
                overrides["seeds"] = [args.seed]
        if args.workers is not None:
            overrides["workers"] = args.workers
        cfg = resolve(user, args.paper_scale, overrides, grokking=args.command == "grokking")
        if cfg["activation"] == "relu" and args.command in ("predict-threshold", "dmft-run"):
            raise ConfigError("relu is not smooth enough for prediction commands")
    except (ConfigError, ModelConfigError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "validate":
            report = COMMANDS["validate"](cfg, args.out, fault=args.inject_fault)
            for row in report["checks"]:
                print(f"{'PASS' if row['passed'] else 'FAIL'}  {row['name']}  "
                      f"measured={row['measured']:.3g} tol={row['tolerance']:.3g}")
            print("validate:", "all checks passed" if report["passed"] else "FAILED")
            return EXIT_OK if report["passed"] else EXIT_NUMERIC
        COMMANDS[args.command](cfg, args.out)
    except (ConfigError, ModelConfigError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as err:
        print(f"numerical failure: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"wrote {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Subcommands: gen-data, train, eval, sweep-fn, sweep-users, sweep-aps.
Exit codes: 0 success, 2 configuration error, 3 numerical/divergence
error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .config import ExperimentConfig, parse_config
from .errors import ConfigError, FormatError, NumericalError
from .experiments import cmd_eval, cmd_gen_data, cmd_sweep, cmd_train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfcep",
        description="Cell-free massive-MIMO channel estimation/prediction simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", type=str, default=None, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        if needs_out:
            p.add_argument("--out", type=str, required=True, help="output file path")
        p.add_argument("--models", type=str, default=None, help="model bank directory")
        p.add_argument("--threads", type=int, default=None, help="worker process count")

    p = sub.add_parser("gen-data", help="generate a training dataset file")
    common(p)
    p.add_argument("--band", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--e2p-n", type=int, required=True, help="PT CIs per window (N)")

    p = sub.add_parser("train", help="train one band model into the bank directory")
    common(p, needs_out=False)
    p.add_argument("--band", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--e2p-n", type=int, required=True)
    p.add_argument("--data", type=str, default=None, help="pre-generated dataset file")

    p = sub.add_parser("eval", help="single-point evaluation with per-user breakdown")
    common(p)

    for axis, label in (("fn", "normalized Doppler"), ("users", "user count"), ("aps", "AP count")):
        p = sub.add_parser(f"sweep-{axis}", help=f"net-throughput sweep over {label}")
        common(p)
    return parser


def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, master_seed=int(args.seed))
        cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
        if args.command == "gen-data":
            samples = cmd_gen_data(cfg, args.band - 1, args.e2p_n, args.out)
            print(f"wrote {samples.n} samples -> {args.out}")
        elif args.command == "train":
            cmd_train(cfg, args.band - 1, args.e2p_n, model_dir=args.models, dataset_path=args.data)
        elif args.command == "eval":
            cmd_eval(cfg, args.out, model_dir=args.models, threads=threads)
            print(f"wrote {args.out}")
        elif args.command.startswith("sweep-"):
            cmd_sweep(cfg, args.command.removeprefix("sweep-"), args.out,
                      model_dir=args.models, threads=threads)
            print(f"wrote {args.out}")
        else:
            raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

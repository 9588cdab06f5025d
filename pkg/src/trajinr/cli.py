"""Command-line entry point: ``trajinr simulate|fit|classify|evaluate``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, load_config
from .inr import InrFormatError
from .phantom import VolumeFormatError

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NO_COHORT = 4
EXIT_NO_INRS = 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajinr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [("simulate", "render a phantom cohort and write its manifest"),
                       ("fit", "pretrain the shared INR initialization and finetune every record"),
                       ("classify", "train weight-space classifiers per stream selection"),
                       ("evaluate", "score yearly reconstructions of the test records")]:
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", metavar="PATH", help="TOML file overriding the preset")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--preset", choices=["paper", "desk"], default=None)
        p.add_argument("--scheme", choices=["regular", "irregular"], default=None)
        p.add_argument("--seed", type=int, default=None, help="master seed")
        if name == "fit":
            p.add_argument("--workers", type=int, default=None, metavar="N",
                           help="finetuning processes (default: logical cores)")
        else:
            p.add_argument("--workers", type=int, default=None, metavar="N", help=argparse.SUPPRESS)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.preset, scheme=args.scheme, out=args.out, seed=args.seed)
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be at least 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "simulate":
            pipeline.cmd_simulate(cfg)
        elif args.command == "fit":
            pipeline.cmd_fit(cfg, args.workers)
        elif args.command == "classify":
            pipeline.cmd_classify(cfg)
        else:
            pipeline.cmd_evaluate(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.MissingCohortError as exc:
        print(f"missing cohort: {exc}", file=sys.stderr)
        return EXIT_NO_COHORT
    except pipeline.MissingInrError as exc:
        print(f"missing INRs: {exc}", file=sys.stderr)
        return EXIT_NO_INRS
    except (OSError, VolumeFormatError, InrFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        logging.getLogger(__name__).exception("unexpected failure")
        print(f"unexpected error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

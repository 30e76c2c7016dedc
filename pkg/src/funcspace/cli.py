"""Command line entry point: ``funcspace <kind> --config PATH [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError
from .harness import KINDS, ExperimentConfig, run

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="funcspace", description="Run a function-space experiment.")
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="override the output directory")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        cfg = ExperimentConfig.load(args.config, seed=args.seed, output_dir=args.out)
        if cfg.kind != args.kind:
            raise ConfigError(f"config is for {cfg.kind!r}, command line asked for {args.kind!r}")
    except ConfigError as e:
        print(f"funcspace: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        log = run(cfg)
    except ConfigError as e:
        print(f"funcspace: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        print(f"funcspace: experiment failed: {e}", file=sys.stderr)
        return EXIT_FAILED
    print(f"{cfg.kind}: {log.status}, outputs in {cfg.output_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

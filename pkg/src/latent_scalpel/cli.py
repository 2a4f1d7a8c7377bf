"""``latent-scalpel <command> [--config PATH] [--out DIR] [--seed N]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .io import ArtifactError
from .model import NumericalError
from .pipeline import STAGES, ConfigError, RunConfig, run_all, run_stage

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERICAL = 0, 1, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latent-scalpel", description="SAE feature discovery and steering pipeline")
    p.add_argument("command", choices=list(STAGES) + ["run-all", "show-config"])
    p.add_argument("--config", help="JSON run config; defaults are used for missing keys")
    p.add_argument("--out", help="artifact directory (overrides config out_dir)")
    p.add_argument("--seed", type=int, help="root seed (overrides config seed)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "show-config":
            print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
            return EXIT_OK
        if args.command == "run-all":
            run_all(cfg, args.out)
        else:
            run_stage(args.command, cfg, args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ArtifactError) as e:
        print(f"artifact error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        print(f"stage failed: {e}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

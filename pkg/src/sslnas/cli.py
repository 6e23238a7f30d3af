"""Command line entry point: ``engine <command> --manifest path``."""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError, DomainError, EngineError, ParseError, StructureError
from .harness import COMMANDS, ExperimentManifest, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="engine",
        description="Search, pretrain, evaluate, and analyze architectures under a contrastive objective.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--manifest", required=True, help="path to the experiment manifest JSON")
    parser.add_argument("--seed", type=int, default=None, help="override the manifest seed")
    parser.add_argument("--out", default=None, help="override the manifest output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = ExperimentManifest.from_file(
            args.manifest, command=args.command, seed=args.seed, out_dir=args.out
        )
        record = run_experiment(manifest)
    except (ConfigError, ParseError, DomainError, StructureError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except EngineError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - surface anything unexpected as exit 3
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"run_dir": record.run_dir, "summary": record.summary}, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``damp --stage <name>`` or ``damp`` for every stage."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from damp.errors import DampError
from damp.pipeline import BACKENDS, STAGES, PipelineConfig, full_pipeline, run_stage, with_overrides


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="damp", description="Debias occupation embeddings of a causal LM.")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--stage", choices=STAGES, help="run one stage (default: all, in order)")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="single-threaded, bit-stable execution")
    p.add_argument("--out", help="output directory")
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--jobs", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = PipelineConfig.load(args.config) if args.config else PipelineConfig()
        config = with_overrides(config, seed=args.seed, deterministic=args.deterministic,
                                out=args.out, backend=args.backend, jobs=args.jobs)
        if args.stage:
            result = run_stage(args.stage, config)
        else:
            result = full_pipeline(config)["headline"]
    except DampError as exc:
        print(f"damp: error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(result, sort_keys=True, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())

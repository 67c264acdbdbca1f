"""``splitrag partition|allocate|route|answer|eval --config FILE --in DIR --out DIR``."""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Sequence

from .config import STAGES, load_config
from .datasets import DatasetError
from .gateway import ConfigError, Gateway
from .kg import GraphError
from .pipeline import EXIT_MISSING, Pipeline, StageError
from .questions import QuestionError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitrag", description="Partitioned multi-agent KGQA pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES + ("all",):
        p = sub.add_parser(stage, help="run every stage in order" if stage == "all" else f"run the {stage} stage")
        p.add_argument("--config", help="TOML key = value file (defaults apply when omitted)")
        p.add_argument("--in", dest="data_dir", required=True,
                       help="dataset directory with kb.tsv, schema.json, train.jsonl, test.jsonl")
        p.add_argument("--out", dest="out_dir", required=True, help="artifact directory")
        p.add_argument("--compact", action="store_true", help="write gzip-compressed artifacts")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        gateway = Gateway(cfg.gateway)
        pipe = Pipeline(args.data_dir, args.out_dir, cfg, args.compact)
        stages = STAGES if args.stage == "all" else (args.stage,)
        for stage in stages:
            path = pipe.run(stage, gateway)
            print(f"{stage}: wrote {path} (config {cfg.stage_hash(stage)[:12]})")
        gateway.close()
    except StageError as exc:
        print(f"error [{args.stage}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except (DatasetError, FileNotFoundError) as exc:
        print(f"error [{args.stage}]: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, GraphError, QuestionError) as exc:
        print(f"error [{args.stage}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

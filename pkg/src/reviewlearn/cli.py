"""Command line entry point: ``reviewlearn prepare|train|evaluate|report --config FILE``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from .errors import ConfigError, ReviewLearnError
from .pipeline import ExperimentConfig, cmd_evaluate, cmd_prepare, cmd_report, cmd_train

log = logging.getLogger("reviewlearn")


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reviewlearn", description=__doc__)
    p.add_argument("command", choices=["prepare", "train", "evaluate", "report", "all"])
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int, action="append", help="run only this seed (repeatable)")
    p.add_argument("--algo", type=_csv_list, help="comma list from rl,tl,ll,cds")
    p.add_argument("--order", type=_csv_list, help="comma list from asc,desc")
    p.add_argument("--data-root", help="base directory for relative CSV paths")
    p.add_argument("--output", help="output directory (overrides output_dir)")
    p.add_argument("--jobs", type=int, default=1, help="parallel training runs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    overrides = {}
    if args.seed:
        overrides["seeds"] = args.seed
    if args.algo:
        overrides["algorithms"] = args.algo
    if args.order:
        overrides["orders"] = args.order
    if args.data_root:
        overrides["data_root"] = args.data_root
    if args.output:
        overrides["output_dir"] = args.output
    # replace() re-runs validation on the merged config
    return replace(cfg, **overrides) if overrides else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        steps = ["prepare", "train", "evaluate", "report"] if args.command == "all" else [args.command]
        for step in steps:
            if step == "prepare":
                cmd_prepare(cfg)
            elif step == "train":
                cmd_train(cfg, jobs=args.jobs)
            elif step == "evaluate":
                cmd_evaluate(cfg)
            else:
                cmd_report(cfg)
            log.info("%s done: %s", step, cfg.root)
    except ReviewLearnError as exc:
        err = {"error": type(exc).__name__, "field": getattr(exc, "field", None), "message": str(exc)}
        print("ERROR " + json.dumps(err), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    print(cfg.root)
    return 0


if __name__ == "__main__":
    sys.exit(main())

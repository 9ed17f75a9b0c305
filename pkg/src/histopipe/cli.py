"""Command-line entry point exposing each pipeline stage.

Exit codes: 0 success, 1 validation error (bad flags, config, dataset
references, missing artifacts), 2 runtime failure. Diagnostics on stderr
name the failing stage and item.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .errors import ConfigError, HistopipeError
from .patches import DatasetError
from .evalkit import TooFewImagesPerClass

log = logging.getLogger("histopipe")

_VALIDATION_ERRORS = (ConfigError, DatasetError, pipeline.MissingArtifacts, TooFewImagesPerClass)

SUBCOMMANDS = ("ingest", "extract", "train", "predict", "evaluate", "report", "run-all")


class _Parser(argparse.ArgumentParser):
    # The spec for this tool wants invalid flags to exit 1, not argparse's 2.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="histopipe", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="|".join(SUBCOMMANDS))
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", required=True, help="TOML pipeline configuration")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config value (dotted keys, repeatable)",
        )
        p.add_argument("--jobs", type=int, default=1, help="worker cap for parallel stages")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("-v", "--verbose", action="count", default=0)
        p.add_argument("-q", "--quiet", action="count", default=0)
        if name == "predict":
            p.add_argument(
                "--test-dir",
                default=None,
                help="predict these images with the whole bank instead of CV",
            )
    return parser


def _configure_logging(verbose: int, quiet: int) -> None:
    level = logging.WARNING + 10 * quiet - 10 * verbose
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(max(logging.DEBUG, min(logging.CRITICAL, level)))


def _load_config(args) -> pipeline.PipelineConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"master_seed = {args.seed}".replace(" ", ""))
    return pipeline.load_config(args.config, overrides=overrides)


def _run_stage(args) -> int:
    config = _load_config(args)
    jobs = max(1, args.jobs)
    command = args.command
    if command == "ingest":
        pipeline.run_ingest(config)
    elif command == "extract":
        manifest, _ = pipeline.run_ingest(config)
        pipeline.run_extraction(config, manifest, jobs=jobs)
    elif command == "train":
        manifest, folds = pipeline.run_ingest(config)
        pipeline.run_training(config, manifest, folds, jobs=jobs)
    elif command == "predict":
        if args.test_dir:
            images = sorted(
                p for p in Path(args.test_dir).iterdir()
                if p.suffix.lower() in (".png", ".tif", ".tiff", ".bmp", ".jpg", ".jpeg")
            )
            if not images:
                raise DatasetError(f"no image files under {args.test_dir}")
            records = pipeline.predict_test(config, images, jobs=jobs)
            out = pipeline.ArtifactPaths(config.output_dir).root / "test_predictions.json"
            payload = [
                {
                    "image_id": r.image_id,
                    "proba": [float(v) for v in r.proba],
                    "predicted_label": r.predicted_label,
                }
                for r in records
            ]
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
            log.info("wrote %s", out)
        else:
            manifest, folds = pipeline.run_ingest(config)
            pipeline.run_predict(config, manifest, folds)
    elif command == "evaluate":
        folds = pipeline.load_folds(config)
        pipeline.run_evaluate(config, folds)
    elif command == "report":
        pipeline.run_report(config)
    elif command == "run-all":
        pipeline.run_all(config, jobs=jobs)
    else:  # pragma: no cover - argparse enforces the choices
        raise ConfigError(f"unknown command {command!r}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    _configure_logging(args.verbose, args.quiet)
    try:
        return _run_stage(args)
    except _VALIDATION_ERRORS as exc:
        print(f"histopipe: {args.command}: {exc}", file=sys.stderr)
        return 1
    except HistopipeError as exc:
        print(f"histopipe: {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line entry point: ``spqi <command> [flags]``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or
checkpoint error, 4 numeric failure (calibration, synthesis or training
divergence).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .catalog import CatalogError, DatasetError
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .embeddings import EmbeddingError
from .synth import CalibrationError, SynthesisError
from .training import TrainingError, parse_features

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

EPILOG = """\
Flags override the matching keys of --config (a JSON run configuration).
SPQI_THREADS is reserved for data-parallel generation; only 1 is supported.
"""


class UsageError(Exception):
    pass


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")


def _log(args):
    if getattr(args, "quiet", False):
        return None
    return lambda msg: print(msg, file=sys.stderr, flush=True)


def _train_overrides(cfg: RunConfig, args) -> RunConfig:
    kw = {}
    if getattr(args, "variant", None):
        kw["variant"] = args.variant
    if getattr(args, "features", None):
        try:
            kw["features"] = parse_features(args.features)
        except ValueError as exc:
            raise UsageError(f"--features: {exc}") from None
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "max_epochs", None) is not None:
        kw["max_stage2_epochs"] = args.max_epochs
    try:
        return replace(cfg, train=replace(cfg.train, **kw)) if kw else cfg
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    synth_kw = {}
    if args.seed is not None:
        synth_kw["seed"] = args.seed
    if args.n_questions is not None:
        synth_kw["n_questions"] = args.n_questions
    if args.text_weight is not None or args.prior_weight is not None:
        w = {}
        if args.text_weight is not None:
            w["text_weight"] = args.text_weight
        if args.prior_weight is not None:
            w["prior_purchase_weight"] = args.prior_weight
        cfg = replace(cfg, synth=cfg.synth.with_weights(**w))
    try:
        if synth_kw:
            cfg = replace(cfg, synth=replace(cfg.synth, **synth_kw))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.target_r is not None:
        cfg = replace(cfg, target_r=args.target_r)
    if args.no_calibrate:
        cfg = replace(cfg, target_r=None)
    manifest = pipeline.gen_data(cfg, args.out)
    if not args.quiet:
        print(json.dumps({"out": args.out, "spq_rate": manifest["spq_rate"], **manifest["correlations"]}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_overrides(load_config(args.config), args)
    model = pipeline.train(args.data, cfg, args.out, args.embeddings, _log(args))
    if not args.quiet:
        best = model.history.epochs[model.history.best_epoch - 1]
        print(json.dumps({"out": args.out, "best_epoch": best.epoch, "val_loss": best.val_loss, "val_f1": best.val_metrics["f1"]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    _emit(pipeline.evaluate_checkpoint(args.checkpoint, args.data, args.split), args.out)
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = load_config(args.config)
    if args.seeds:
        cfg = replace(cfg, grid_seeds=tuple(args.seeds))
    cfg = _train_overrides(cfg, args)
    pipeline.grid(args.data, cfg, args.out, _log(args))
    return EXIT_OK


def cmd_analyze(args) -> int:
    _emit(pipeline.analyze(args.data), args.out)
    return EXIT_OK


def cmd_score(args) -> int:
    records = pipeline.score(args.checkpoint, args.data, args.question_file)
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="spqi",
        description="Shopping-need detection for product questions: data, training, evaluation.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset", epilog=EPILOG)
    g.add_argument("--out", required=True, help="output directory for dataset files and manifest.json")
    g.add_argument("--config", help="JSON run configuration")
    g.add_argument("--seed", type=int, help="synthesis seed (overrides synth.seed)")
    g.add_argument("--n-questions", type=int, help="number of questions (overrides synth.n_questions)")
    g.add_argument("--target-r", type=float, help="calibrate r(prior purchase, SPQ) to this value")
    g.add_argument("--no-calibrate", action="store_true", help="ignore target_r and use the configured weight")
    g.add_argument("--prior-weight", type=float, help="prior-purchase signal weight (before calibration)")
    g.add_argument("--text-weight", type=float, help="question-phrasing signal weight")
    g.add_argument("--quiet", action="store_true", help="no summary on stdout")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="pretrain skip-gram vectors, then train a model", epilog=EPILOG)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="output directory for model.spq, history.json, config.json")
    t.add_argument("--config", help="JSON run configuration")
    t.add_argument("--variant", choices=["spqi-moe", "spqi-concat", "mlp-moe", "mlp-concat", "text-only"])
    t.add_argument("--features", help="'full', a subset name, or comma list of text,product,behavior or single types")
    t.add_argument("--seed", type=int, help="training seed")
    t.add_argument("--max-epochs", type=int, help="cap on second-stage epochs")
    t.add_argument("--embeddings", help="skip-gram cache file: loaded if present, written otherwise")
    t.add_argument("--quiet", action="store_true", help="no progress on stderr")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True, help="model.spq written by train")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--split", default="test", choices=["train", "validation", "test"])
    e.add_argument("--out", help="write the metrics record here instead of stdout")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("grid", help="train and test every ablation cell", epilog=EPILOG)
    r.add_argument("--data", required=True, help="dataset directory")
    r.add_argument("--out", required=True, help="results file (one JSON record per line)")
    r.add_argument("--config", help="JSON run configuration")
    r.add_argument("--seeds", type=int, nargs="+", help="seeds (overrides grid_seeds)")
    r.add_argument("--max-epochs", type=int, help="cap on second-stage epochs")
    r.add_argument("--quiet", action="store_true", help="no progress on stderr")
    r.set_defaults(func=cmd_grid)

    a = sub.add_parser("analyze", help="purchase-window correlation report")
    a.add_argument("--data", required=True, help="dataset directory")
    a.add_argument("--out", help="write the report here instead of stdout")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("score", help="score new questions with a checkpoint")
    s.add_argument("--checkpoint", required=True, help="model.spq written by train")
    s.add_argument("--data", required=True, help="dataset directory supplying catalog and purchase history")
    s.add_argument("--question-file", required=True, help="questions in the questions.jsonl format")
    s.add_argument("--out", help="write JSON lines here instead of stdout")
    s.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    threads = os.environ.get("SPQI_THREADS", "1")
    if threads != "1":
        print(f"spqi: SPQI_THREADS={threads!r} is not supported; only 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"spqi {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CatalogError, CheckpointError, EmbeddingError, FileNotFoundError) as exc:
        print(f"spqi {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"spqi {args.command}: training diverged at epoch {exc.epoch}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CalibrationError, SynthesisError, FloatingPointError) as exc:
        print(f"spqi {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

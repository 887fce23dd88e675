"""
stadb command line.

  train      train on a dataset directory, write log.jsonl + checkpoints
  eval       evaluate a checkpoint on query/gallery directories
  visualize  export attention / drop-mask / spatial heatmaps for images
  gradcheck  run the finite-difference gradient suite
  synth      write a synthetic dataset
  ablate     component ablation or one-parameter sweep
  serve      start the HTTP inference service

Exit codes: 0 ok, 1 usage, 2 config, 3 ingestion/persistence, 4 gradcheck.
Errors are reported as one JSON line on stderr.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .config import Config, load_config, settings
from .errors import PersistenceError, StadbError

logger = logging.getLogger(__name__)


class UsageError(StadbError):
    kind = "usage"
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _config(path: Optional[str]) -> Config:
    return load_config(path) if path else Config()


def _emit(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=False))


# ==========================================
# Subcommands
# ==========================================

def cmd_train(args) -> int:
    from .dataset import load_dataset
    from .trainer import train

    config = _config(args.config)
    data = Path(args.data)
    split_dirs = {name: data / name for name in ("train", "query", "gallery")}
    if split_dirs["train"].is_dir():
        train_index = load_dataset(split_dirs["train"], config.image_height, config.image_width, "train")
        eval_sets = None
        if split_dirs["query"].is_dir() and split_dirs["gallery"].is_dir():
            eval_sets = (
                load_dataset(split_dirs["query"], config.image_height, config.image_width, "query"),
                load_dataset(split_dirs["gallery"], config.image_height, config.image_width, "gallery"),
            )
    else:
        train_index = load_dataset(data, config.image_height, config.image_width, "train")
        eval_sets = None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.dump(), encoding="utf-8")
    result = train(config, train_index, out_dir=out, eval_sets=eval_sets)
    _emit({"epochs": len(result.records), "final_loss": result.records[-1]["loss"],
           "checkpoints": [str(p) for p in result.checkpoints]})
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .dataset import load_dataset
    from .trainer import evaluate_model

    params, config = load_checkpoint(args.checkpoint)
    query = load_dataset(args.query, config.image_height, config.image_width, "query")
    gallery = load_dataset(args.gallery, config.image_height, config.image_width, "gallery")
    report = evaluate_model(params, config, query, gallery, k_max=args.k_max)
    _emit(report.summary())
    return 0


def cmd_visualize(args) -> int:
    from .checkpoint import load_checkpoint
    from .dataset import image_from_file
    from .heatmap import export_explanation

    params, config = load_checkpoint(args.checkpoint)
    if args.alpha is not None:
        config = config.model_copy(update={"alpha": args.alpha})
    written = {}
    for path in args.images:
        image = image_from_file(path, config.image_height, config.image_width)
        files = export_explanation(image, params, config, args.out, Path(path).stem)
        written[str(path)] = {kind: str(p) for kind, p in files.items()}
    _emit(written)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    report = run_suite(instances=args.instances, seed=args.seed)
    _emit({"max_error": report.max_error, "passed": report.passed, **report.model_dump()})
    report.require_pass()
    return 0


def cmd_synth(args) -> int:
    from .dataset import generate_synthetic_dataset, write_dataset

    index = generate_synthetic_dataset(args.n_ids, args.per_id, args.n_cams, args.seed,
                                       args.height, args.width, split=args.split)
    counts = write_dataset(index, args.out)
    _emit({"out": args.out, "images": len(index), "splits": counts})
    return 0


def cmd_ablate(args) -> int:
    from .ablation import parse_sweep, run_ablation, run_sweep, synthetic_splits, with_overrides

    config = _config(args.config)
    if args.epochs is not None:
        config = with_overrides(config, {"epochs": args.epochs})
    seeds = list(range(args.seeds))
    splits = synthetic_splits(args.n_ids, args.per_id, args.n_cams, args.data_seed,
                              config.image_height, config.image_width)
    if args.sweep:
        key, values = parse_sweep(args.sweep)
        results = run_sweep(config, key, values, seeds, splits)
    else:
        variants = args.variants.split(",") if args.variants else None
        results = run_ablation(config, variants, seeds, splits)
    _emit({name: summary.model_dump() for name, summary in results.items()})
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    if args.checkpoint:
        settings.CHECKPOINT = args.checkpoint
    if args.gallery:
        settings.GALLERY_DIR = args.gallery
    if args.runs:
        settings.RUNS_DIR = args.runs
    from .main import app
    uvicorn.run(app, host=args.host or settings.HOST, port=args.port or settings.PORT)
    return 0


# ==========================================
# Entry point
# ==========================================

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stadb", description="Desk-scale person re-identification with attention-guided dropping")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="image directory, or one with train/ query/ gallery/")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--k-max", type=int, default=10)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="export heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-ids", type=int, default=20)
    p.add_argument("--per-id", type=int, default=8)
    p.add_argument("--n-cams", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--split", action="store_true", help="write train/ query/ gallery/")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", help="component ablation or parameter sweep")
    p.add_argument("--config")
    p.add_argument("--variants", help="comma separated, default all")
    p.add_argument("--sweep", help="alpha or rho, e.g. alpha=0.5,0.6,0.7; p or n_per take integers, e.g. p=4,8")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-ids", type=int, default=20)
    p.add_argument("--per-id", type=int, default=8)
    p.add_argument("--n-cams", type=int, default=2)
    p.add_argument("--data-seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("serve", help="HTTP inference service")
    p.add_argument("--checkpoint")
    p.add_argument("--gallery")
    p.add_argument("--runs")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)
    return parser


def _report(error: StadbError) -> int:
    payload = {"error": error.kind, "message": str(error)}
    for attr in ("line", "path"):
        value = getattr(error, attr, None)
        if value is not None:
            payload[attr] = value
    sys.stderr.write(json.dumps(payload) + "\n")
    return error.exit_code


def main(argv: Optional[Sequence[str]] = None) -> int:
    arguments: List[str] = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(arguments)
    except UsageError as e:
        return _report(e)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except StadbError as e:
        logger.error(f"{args.command} failed: {e}")
        return _report(e)
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        return _report(PersistenceError(str(e)))

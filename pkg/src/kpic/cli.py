"""``kpic sample|train|evaluate|sweep --config FILE [--out DIR] [--seed N]``.

Exit codes: 0 ok, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import ConfigError, ExperimentConfig, load_config
from .estimators import EstimationError, ValueModel
from .kernels import FactorizationError
from .sde import SimulationError, TransitionDataset

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("kpic")


def _int_list(text: str) -> list[int]:
    try:
        return [int(float(v)) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kpic", description="Kernel path-integral control experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment JSON file")
    common.add_argument("--out", default=None, help="output directory (default: output_dir from the config)")
    common.add_argument("--seed", type=int, default=None, help="override sampling.seed")
    common.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("sample", parents=[common], help="draw a transition dataset")
    p = sub.add_parser("train", parents=[common], help="fit a value model")
    p.add_argument("--dataset", default=None, help=f"dataset CSV (default: OUT/{pipeline.DATASET_NAME})")
    p = sub.add_parser("evaluate", parents=[common], help="write metric CSVs for a trained model")
    p.add_argument("--model", default=None, help=f"model directory (default: OUT/{pipeline.MODEL_DIR})")
    p.add_argument("--dataset", default=None, help="training dataset (needed for the arm reference)")
    p = sub.add_parser("sweep", parents=[common], help="L1 error over sample sizes and seeds")
    p.add_argument("--samples", type=_int_list, default=None)
    p.add_argument("--seeds", type=_int_list, default=None)
    return parser


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = cfg.model_copy(update={"sampling": cfg.sampling.model_copy(update={"seed": args.seed})})
    out = Path(args.out if args.out is not None else cfg.output_dir)
    cfg = cfg.model_copy(update={"output_dir": str(out)})
    return cfg, out


def _existing(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def cmd_sample(cfg: ExperimentConfig, out: Path, args) -> None:
    D = pipeline.sample_dataset(cfg)
    path = out / pipeline.DATASET_NAME
    D.save(path)
    print(f"wrote {len(D)} transitions to {path}")


def cmd_train(cfg: ExperimentConfig, out: Path, args) -> None:
    D = TransitionDataset.load(_existing(Path(args.dataset) if args.dataset else out / pipeline.DATASET_NAME, "dataset"))
    vm, train_log = pipeline.train(cfg, D)
    model_dir = out / pipeline.MODEL_DIR
    vm.save(model_dir)
    (out / "train_log.json").write_text(json.dumps(train_log, indent=2, sort_keys=True) + "\n")
    norms = train_log["alpha_norms"] or []
    print(f"trained {train_log['estimator']} on m={train_log['m']} in {train_log['wall_time_s']:.2f}s; "
          f"max |alpha| {max(norms) if norms else float('nan'):.3e}; model in {model_dir}")


def cmd_evaluate(cfg: ExperimentConfig, out: Path, args) -> None:
    vm = ValueModel.load(_existing(Path(args.model) if args.model else out / pipeline.MODEL_DIR, "model directory"))
    D = None
    ds = Path(args.dataset) if args.dataset else out / pipeline.DATASET_NAME
    if ds.exists():
        D = TransitionDataset.load(ds)
    tables = pipeline.evaluate(cfg, vm, D)
    for name, (cols, rows) in tables.items():
        pipeline.write_csv(out / name, cols, rows)
    l1 = tables["l1_curve.csv"][1][0][3]
    print(f"l1 = {l1:.6g}; wrote {', '.join(tables)} to {out}")


def cmd_sweep(cfg: ExperimentConfig, out: Path, args) -> None:
    out.mkdir(parents=True, exist_ok=True)
    path = pipeline.run_sweep(cfg, out, args.samples, args.seeds)
    rows = pipeline.read_csv_rows(path)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} rows in {path} ({failed} failed)")


COMMANDS = {"sample": cmd_sample, "train": cmd_train, "evaluate": cmd_evaluate, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, out = _resolve(args)
        pipeline.write_resolved(cfg, out)
        COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EstimationError, FactorizationError, SimulationError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

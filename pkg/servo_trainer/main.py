"""
Command-line entry point.

    python -m servo_trainer.main gen-data --seed 0 --primitives 6 --scenes 200 --out out/dataset.servo
    python -m servo_trainer.main train --seed 0 --data out/dataset.servo --out out/model.ckpt
    python -m servo_trainer.main bench --seed 0 --checkpoint out/model.ckpt --baseline ibvs --out out/bench
    python -m servo_trainer.main ablate fusion --seed 0 --checkpoint cluster=a.ckpt --checkpoint full=b.ckpt ...
    python -m servo_trainer.main report --from out/bench/report.json --out out/rerendered

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from analysis.benchmark import BenchmarkReport, ablation_depth, ablation_fusion, ablation_hpr, run_benchmark
from analysis.reporting import BenchmarkReporter, format_ablation, format_table, rows_from_dict
from components.database import Database
from servo_trainer.config import (RunConfig, benchmark_config, data_config, ibvs_config, model_config,
                                  train_config)
from servo_trainer.controllers import ControllerSpec, TEACHER_GAIN
from servo_trainer.dataset import read_dataset, summarize, write_dataset
from servo_trainer.errors import DatasetError, NumericalError
from servo_trainer.model import DepthPcModel, ModelConfig, load_checkpoint, save_checkpoint
from servo_trainer.scene import ObjectModel, load_models_dir, primitive_models
from servo_trainer.training import OPTIMIZERS, CurvePoint, generate_episodes, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

MODEL_STREAM = 2
DEFAULT_PRIMITIVES = 6
CURVE_COLUMNS = ("epoch", "loss", "magnitude", "direction")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with the usage exit code set to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="Global seed (mandatory here or in --config).")
    p.add_argument("--config", type=str, default=None, help="YAML run config; flags override its values.")
    p.add_argument("--out", type=str, default=None, help="Output file or directory.")
    p.add_argument("--workers", type=int, default=None, help="Parallel episode workers (default: all cores).")
    p.add_argument("--log-level", type=str, default="INFO", help="Logging level.")


def _model_source(p: argparse.ArgumentParser) -> None:
    p.add_argument("--models", type=str, default=None, help="Directory of .xyz/.txt/.bin object point clouds.")
    p.add_argument("--primitives", type=int, default=None,
                   help=f"Use N procedural primitives instead of model files (default {DEFAULT_PRIMITIVES}).")


def _episode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--levels", type=str, default=None, help="Comma-separated deviation levels, e.g. S,M,L.")
    p.add_argument("--runs", type=int, default=None, help="Episodes per level (default 50).")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--depth-mode", type=str, default=None,
                   choices=["true-depth", "affine-relative", "camera-noise"])
    p.add_argument("--noise-amplitude", type=float, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--mismatch", type=float, default=None)
    p.add_argument("--no-hpr", action="store_true", help="Frustum-only visibility.")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--db", type=str, default=None, help="SQLite episode store (default <out>/episodes.sqlite3).")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="servo_trainer", description="Depth-aware keypoint visual servoing workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Generate scenes and teacher episodes.")
    _common(p)
    _model_source(p)
    p.add_argument("--scenes", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="Recorded steps per episode.")
    p.add_argument("--levels", type=str, default=None)
    p.add_argument("--no-hpr", action="store_true", help="Frustum-only visibility (HPR ablation data).")

    p = sub.add_parser("train", help="Train a servo network on a dataset.")
    _common(p)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--optimizer", type=str, default=None, choices=list(OPTIMIZERS))
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--fusion", type=str, default=None, choices=["cluster", "full", "concat"])
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--resume", type=str, default=None, help="Checkpoint to continue from.")
    p.add_argument("--curve", type=str, default=None, help="Loss curve CSV (default <out>.curve.csv).")

    p = sub.add_parser("bench", help="Closed-loop benchmark of checkpoints and baselines.")
    _common(p)
    _model_source(p)
    _episode_flags(p)
    p.add_argument("--checkpoint", action="append", default=[], help="[NAME=]PATH of a trained model.")
    p.add_argument("--baseline", action="append", default=[], choices=["ibvs", "teacher", "zero"])

    p = sub.add_parser("ablate", help="Fusion, HPR or depth-source ablation.")
    _common(p)
    _model_source(p)
    _episode_flags(p)
    p.add_argument("kind", choices=["fusion", "hpr", "depth"])
    p.add_argument("--checkpoint", action="append", default=[],
                   help="NAME=PATH; fusion: cluster/full/concat, hpr: with/without, depth: one checkpoint.")

    p = sub.add_parser("report", help="Re-render a stored report.")
    _common(p)
    p.add_argument("--from", dest="source", type=str, default=None, help="report.json of an earlier run.")
    p.add_argument("--db", type=str, default=None, help="SQLite episode store.")
    p.add_argument("--run", type=str, default=None, help="Run label inside --db (default: latest).")
    p.add_argument("--no-plots", action="store_true")
    return parser


# --- helpers ---

def _resolve_models(section: Dict[str, Any], seed: int) -> List[ObjectModel]:
    if section.get("models"):
        return load_models_dir(section["models"])
    count = int(section.get("primitives") or DEFAULT_PRIMITIVES)
    return primitive_models(count, np.random.default_rng([seed, MODEL_STREAM]))


def _parse_named(values: Sequence[str]) -> List[Tuple[Optional[str], str]]:
    out = []
    for value in values:
        name, sep, path = value.partition("=")
        out.append((name, path) if sep else (None, value))
    return out


def _checkpoint_spec(name: Optional[str], path: str) -> ControllerSpec:
    if not os.path.isfile(path):
        raise DatasetError(f"Checkpoint not found: {path}")
    load_checkpoint(path)
    return ControllerSpec("depth_pc", name=name or os.path.splitext(os.path.basename(path))[0], checkpoint=path)


def _episode_overrides(args) -> Dict[str, Any]:
    return {
        "levels": args.levels,
        "runs_per_level": args.runs,
        "workers": args.workers,
        "episode": {
            "max_steps": args.max_steps,
            "use_hpr": False if args.no_hpr else None,
            "provider": {"mode": args.depth_mode},
            "noise": {"noise_amplitude": args.noise_amplitude, "dropout_ratio": args.dropout,
                      "mismatch_ratio": args.mismatch},
        },
        "models": args.models,
        "primitives": args.primitives,
    }


def _bench_setup(args, command: str):
    run = RunConfig.load(args.config)
    section = run.resolve(command, args.seed, _episode_overrides(args))
    section.setdefault("workers", os.cpu_count() or 1)
    bench = benchmark_config(section)
    models = _resolve_models(section, bench.seed)
    return section, bench, models


def _out_dir(args, default: str) -> str:
    out = args.out or default
    os.makedirs(out, exist_ok=True)
    return out


def _store_episodes(db_path: str, report: BenchmarkReport, run: str, dt: float) -> None:
    with Database(db_path) as db:
        db.delete_run(run)
        db.insert_results(report.episodes, run=run, dt=dt)


def write_curve(path: str, curve: Sequence[CurvePoint], seed: int, config: Dict[str, Any]) -> None:
    """Per-epoch loss CSV with the provenance header; rewritten after every epoch."""
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("# depth-pc training curve\n")
        f.write(f"# seed: {seed}\n")
        f.write("# config: " + json.dumps(config, sort_keys=True, separators=(",", ":"), default=str) + "\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for p in curve:
            writer.writerow([p.epoch, f"{p.loss:.8f}", f"{p.magnitude:.8f}", f"{p.direction:.8f}"])


# --- commands ---

def cmd_gen_data(args) -> int:
    run = RunConfig.load(args.config)
    section = run.resolve("gen-data", args.seed, {
        "scenes": args.scenes, "steps_per_episode": args.steps, "levels": args.levels,
        "use_hpr": False if args.no_hpr else None, "models": args.models, "primitives": args.primitives,
    })
    seed = section["seed"]
    config = data_config(section)
    models = _resolve_models(section, seed)
    scenes, episodes = generate_episodes(models, config, np.random.default_rng(seed))
    out = args.out or os.path.join("out", "dataset.servo")
    d = os.path.dirname(out)
    if d:
        os.makedirs(d, exist_ok=True)
    write_dataset(out, scenes, episodes, {"command": "gen-data", "seed": seed, "config": section,
                                          "models": [m.id for m in models]})
    summary = summarize(read_dataset(out))
    print(json.dumps(summary, sort_keys=True))
    if not summary["budget_ok"]:
        logger.warning("some scene uses at least its point budget N")
    return EXIT_OK


def _check_resume(args, section: Dict[str, Any], config: ModelConfig) -> None:
    """A resumed run keeps the checkpoint architecture: contradicting flags are rejected, config keys warned about."""
    stored = config.to_dict()
    for key in ("fusion", "width"):
        value = getattr(args, key)
        if value is not None and str(value) != str(stored[key]):
            raise UsageError(f"--{key} {value} conflicts with the resumed checkpoint ({key}={stored[key]})")
    for key, value in (section.get("model") or {}).items():
        if key in stored and key != "seed" and value != stored[key]:
            logger.warning("resume: model.%s=%r from the config is ignored, the checkpoint has %r",
                           key, value, stored[key])


def cmd_train(args) -> int:
    run = RunConfig.load(args.config)
    section = run.resolve("train", args.seed, {
        "epochs": args.epochs, "learning_rate": args.lr, "batch_size": args.batch_size, "optimizer": args.optimizer,
        "model": {"fusion": args.fusion, "width": args.width},
    })
    seed = section["seed"]
    cfg = train_config(section)
    dataset = read_dataset(args.data)
    if not dataset.episodes:
        raise DatasetError(f"{args.data} holds no training episodes")
    out = args.out or os.path.join("out", "model.ckpt")
    curve_path = args.curve or os.path.splitext(out)[0] + ".curve.csv"

    start_epoch = 0
    curve: List[CurvePoint] = []
    momentum = None
    if args.resume:
        checkpoint = load_checkpoint(args.resume)
        model = checkpoint.model
        _check_resume(args, section, model.config)
        start_epoch = int(checkpoint.meta.get("epochs_done", 0))
        curve = [CurvePoint(**p) for p in checkpoint.meta.get("curve", [])]
        momentum = checkpoint.momentum
        logger.info("resuming from %s at epoch %d", args.resume, start_epoch)
    else:
        model = DepthPcModel(model_config(section.get("model"), seed))

    provenance = {"seed": seed, "config": section, "dataset": os.path.basename(args.data)}
    try:
        result = train(model, dataset.episodes, cfg, start_epoch=start_epoch, momentum_state=momentum,
                       curve=curve, on_epoch=lambda _: write_curve(curve_path, curve, seed, section))
    except NumericalError:
        write_curve(curve_path, curve, seed, section)
        raise
    write_curve(curve_path, curve, seed, section)
    meta = dict(provenance, command="train", epochs_done=start_epoch + cfg.epochs,
                curve=[asdict(p) for p in result.curve])
    save_checkpoint(model, out, meta, result.momentum)
    return EXIT_OK


def cmd_bench(args) -> int:
    section, bench, models = _bench_setup(args, "bench")
    specs = [_checkpoint_spec(name, path) for name, path in _parse_named(args.checkpoint)]
    for kind in args.baseline:
        specs.append(ControllerSpec(kind, ibvs=ibvs_config(section.get("ibvs")),
                                    gain=float(section.get("gain", TEACHER_GAIN))))
    if not specs:
        raise UsageError("bench needs at least one --checkpoint or --baseline")
    report = run_benchmark(specs, models, bench)
    out = _out_dir(args, os.path.join("out", "bench"))
    BenchmarkReporter(out, plots=not args.no_plots).write_report(report, bench.seed)
    _store_episodes(args.db or os.path.join(out, "episodes.sqlite3"), report, f"bench-{bench.seed}",
                    bench.episode.dt)
    print(format_table(report.rows), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    section, bench, models = _bench_setup(args, "ablate")
    named = _parse_named(args.checkpoint)
    if args.kind == "fusion":
        if not named or any(name not in ("cluster", "full", "concat") for name, _ in named):
            raise UsageError("fusion ablation needs --checkpoint cluster=PATH, full=PATH and/or concat=PATH")
        specs = {name: _checkpoint_spec(name, path) for name, path in named}
        table = ablation_fusion(specs, models, bench)
    elif args.kind == "hpr":
        paths = dict(named)
        if set(paths) != {"with", "without"}:
            raise UsageError("hpr ablation needs --checkpoint with=PATH --checkpoint without=PATH")
        table = ablation_hpr(_checkpoint_spec("with", paths["with"]), _checkpoint_spec("without", paths["without"]),
                             models, bench)
    else:
        if len(named) != 1:
            raise UsageError("depth ablation needs exactly one --checkpoint")
        name, path = named[0]
        table = ablation_depth(_checkpoint_spec(name, path), models, bench)
    out = _out_dir(args, os.path.join("out", f"ablate-{args.kind}"))
    BenchmarkReporter(out, plots=not args.no_plots).write_ablation(table, bench.seed, f"ablation_{args.kind}")
    if table.report is not None:
        _store_episodes(args.db or os.path.join(out, "episodes.sqlite3"), table.report,
                        f"ablate-{args.kind}-{bench.seed}", bench.episode.dt)
    print(format_ablation(table))
    return EXIT_OK


def cmd_report(args) -> int:
    if bool(args.source) == bool(args.db):
        raise UsageError("report needs exactly one of --from or --db")
    if args.source:
        try:
            with open(args.source, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, ValueError) as e:
            raise DatasetError(f"Cannot read report {args.source}: {e}") from e
        rows = rows_from_dict(data)
        seed, config, controllers = data.get("seed"), data.get("config", {}), data.get("controllers", [])
    else:
        if not os.path.isfile(args.db):
            raise DatasetError(f"Episode store not found: {args.db}")
        with Database(args.db) as db:
            runs = db.runs()
            run = args.run or (runs[-1] if runs else None)
            if run is None or run not in runs:
                raise DatasetError(f"No run {run!r} in {args.db}")
            rows = rows_from_dict({"rows": db.aggregate(run)})
        seed, config, controllers = None, {"run": run}, []
    report = BenchmarkReport(rows, [], {}, {}, config, controllers)
    out = _out_dir(args, os.path.join("out", "report"))
    reporter = BenchmarkReporter(out, plots=not args.no_plots)
    reporter.write_report(report, seed if args.seed is None else args.seed)
    print(format_table(rows), end="")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericalError as e:
        logger.error("numerical failure: %s", e)
        return EXIT_NUMERICAL
    except (DatasetError, FileNotFoundError) as e:
        logger.error("%s", e)
        return EXIT_DATA
    except ValueError as e:
        logger.error("usage: %s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

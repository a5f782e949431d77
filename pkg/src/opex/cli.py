"""
cli.py – ``opex`` command line.

Subcommands
-----------
  gen-data        generate and export training and test datasets
  train           train (or load) the DeepONet of a config and export it
  sweep-heatmap   l_train × l_test error grid with W2 and power-law fit
  sweep-capacity  In./Ex.+ error along one capacity axis
  detect          mismatch errors and Ex.+ flag rate per l_test
  repair          detection plus every configured repair method
  import          validate a container and print what it holds
  report          merge result tables and print them

Experiment subcommands read an ExperimentConfig from ``--config`` (JSON)
and write under ``--out``.  ``OPEX_SEED`` replaces the seed list with a
single seed.

Exit status is 0 on success, 1 when a run fails and 2 for an invalid
command line or config.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch
from pydantic import ValidationError

from .container import export, export_dataset, export_deeponet, export_table, load, write_csv
from .dataset import OperatorDataset
from .deeponet import DeepONet
from .errors import OpexError
from .harness import (
    config_problem,
    generate_datasets,
    preset,
    pretrained_model,
    run_capacity_sweep,
    run_detection,
    run_heatmap_sweep,
    run_repair_comparison,
)
from .multifidelity import GprModel, MfgprModel, Mfnn
from .types import ExperimentConfig, ResultRow, ResultTable

logger = logging.getLogger("opex")

SEED_ENV = "OPEX_SEED"


# ---------------------------------------------------------------------------
# Config loading
# ---------------------------------------------------------------------------

def load_config(path: Path, scale: Optional[str] = None) -> ExperimentConfig:
    """Parse the config file, then apply ``--scale`` and ``OPEX_SEED``."""
    config = ExperimentConfig.model_validate_json(path.read_text(encoding="utf-8"))
    if scale is not None:
        config.scale = scale  # type: ignore[assignment]
    seed = os.environ.get(SEED_ENV)
    if seed:
        # validated on assignment: a non-integer seed is a config error
        config.seeds = [seed]  # type: ignore[list-item]
    return config


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_gen_data(args: argparse.Namespace, config: ExperimentConfig) -> None:
    for name, data in generate_datasets(config, config.seeds[0]).items():
        export_dataset(data, args.out / f"{name}.json")
        logger.info("Exported %s (%d functions)", name, len(data))


def _cmd_train(args: argparse.Namespace, config: ExperimentConfig) -> None:
    seed = config.seeds[0]
    model, data, history = pretrained_model(config, preset(config), config_problem(config), seed)
    iteration = history.iterations[-1] if history and history.iterations else None
    metrics   = {"train_loss": history.train_loss[-1]} if history and history.train_loss else {}
    export_deeponet(model, args.out / "deeponet.json", iteration=iteration, metrics=metrics)
    if data is not None and not config.dataset:
        export_dataset(data, args.out / "train.json")
    if history is not None:
        (args.out / "history.json").write_text(history.model_dump_json(indent=2),
                                               encoding="utf-8")


def _cmd_sweep_heatmap(args: argparse.Namespace, config: ExperimentConfig) -> None:
    result = run_heatmap_sweep(config)
    export_table(result.table, args.out / "heatmap")
    if result.fit is not None:
        summary = {"fit": result.fit.model_dump(mode="json"), "spearman": result.spearman,
                   "pairs": result.pairs}
        (args.out / "heatmap_fit.json").write_text(json.dumps(summary, indent=2),
                                                   encoding="utf-8")
    _print_rows(result.table.sorted_rows())


def _cmd_sweep_capacity(args: argparse.Namespace, config: ExperimentConfig) -> None:
    if args.axis is not None:
        config.capacity_axis = args.axis
    if args.values:
        config.capacity_values = args.values
    table = run_capacity_sweep(config)
    export_table(table, args.out / f"capacity_{config.capacity_axis.label}")
    _print_rows(table.sorted_rows())


def _cmd_detect(args: argparse.Namespace, config: ExperimentConfig) -> None:
    table = run_detection(config)
    export_table(table, args.out / "detection")
    _print_rows(table.sorted_rows())


def _cmd_repair(args: argparse.Namespace, config: ExperimentConfig) -> None:
    table = run_repair_comparison(config)
    export_table(table, args.out / "repair")
    _print_rows(table.sorted_rows())


def _cmd_import(args: argparse.Namespace) -> None:
    obj = load(args.path)
    print(describe(obj))
    if args.out is not None:
        target = export(obj, args.out / Path(args.path).name)
        logger.info("Re-exported to %s", target)


def _cmd_report(args: argparse.Namespace) -> None:
    rows: list[ResultRow] = []
    for path in args.tables:
        table = load(path)
        if not isinstance(table, ResultTable):
            raise OpexError(f"{path} is a {type(table).__name__}, not a result table")
        rows.extend(table.rows)
    rows.sort(key=lambda r: (r.method, r.setting))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        write_csv(rows, args.out / "report.csv")
    _print_rows(rows)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def describe(obj: object) -> str:
    """One-line summary of a loaded container or table."""
    if isinstance(obj, OperatorDataset):
        return (f"dataset: {obj.problem.label}, {len(obj)} functions, {obj.sensor_count} sensors, "
                f"query dim {obj.query_dim}")
    if isinstance(obj, DeepONet):
        cfg = obj.config
        return (f"deeponet: {obj.problem_kind.label}, width {cfg.trunk_width}, "
                f"trunk {cfg.trunk_activation.label}")
    if isinstance(obj, MfgprModel):
        return f"mfgpr: {len(obj.low.x)} low / {len(obj.delta.x)} high points, rho {obj.rho:.4g}"
    if isinstance(obj, GprModel):
        return f"gpr: {obj.kernel.name}, {len(obj.x)} points, length {obj.length_scale:.4g}"
    if isinstance(obj, Mfnn):
        return f"mfnn: query dim {obj.query_dim}"
    if isinstance(obj, ResultTable):
        return f"result table: {len(obj.rows)} rows, config {obj.config_hash[:12]}"
    return type(obj).__name__


def _print_rows(rows: Sequence[ResultRow]) -> None:
    if not rows:
        print("(no rows)")
        return
    width = max(len(f"{r.method}  {r.setting}") for r in rows)
    print(f"{'method  setting':<{width}}  {'metric':<14} {'mean':>12} {'std':>12} {'time [s]':>10}")
    for r in rows:
        key = f"{r.method}  {r.setting}"
        print(f"{key:<{width}}  {r.metric:<14} {r.mean:>12.4e} {r.std:>12.4e} {r.runtime_s:>10.2f}")


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

_EXPERIMENTS: dict[str, Callable[[argparse.Namespace, ExperimentConfig], None]] = {
    "gen-data":       _cmd_gen_data,
    "train":          _cmd_train,
    "sweep-heatmap":  _cmd_sweep_heatmap,
    "sweep-capacity": _cmd_sweep_capacity,
    "detect":         _cmd_detect,
    "repair":         _cmd_repair,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opex",
                                     description="DeepONet extrapolation experiments.")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    for name in _EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=True, help="ExperimentConfig JSON file")
        p.add_argument("--out", type=Path, default=Path("results"), help="output directory")
        p.add_argument("--scale", choices=["desk", "full"], default=None,
                       help="override the config's preset scale")
        if name == "sweep-capacity":
            p.add_argument("--axis", default=None,
                           choices=["width", "iterations", "dataset-size", "activation",
                                    "laaf-scale"])
            p.add_argument("--values", type=float, nargs="+", default=None)

    p = sub.add_parser("import", help="validate a container and print its summary")
    p.add_argument("path", type=Path)
    p.add_argument("--out", type=Path, default=None, help="re-export into this directory")

    p = sub.add_parser("report", help="merge result tables")
    p.add_argument("tables", type=Path, nargs="+")
    p.add_argument("--out", type=Path, default=None, help="write the merged CSV here")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level,
                        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        if args.command == "import":
            _cmd_import(args)
        elif args.command == "report":
            _cmd_report(args)
        else:
            config = load_config(args.config, args.scale)
            args.out.mkdir(parents=True, exist_ok=True)
            _EXPERIMENTS[args.command](args, config)
    except (ValidationError, json.JSONDecodeError) as exc:
        logger.error("Invalid config: %s", exc)
        return 2
    except (OpexError, ValueError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

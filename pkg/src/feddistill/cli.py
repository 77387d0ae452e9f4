"""Command line entry points: ``run``, ``sweep`` and ``partition-report``.

Run directory layout::

    <output_dir>/
        resolved_config.json
        summary.json, summary.csv
        seed_<seed>/
            metrics.csv, metrics.json
            final.fdck
            checkpoints/round_<t>.fdck      (when federation.checkpoint_every > 0)

A sweep writes one such directory per grid point under
``<output_dir>/point_<k>/`` plus ``<output_dir>/ranking.csv``.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import ExperimentConfig, FedDistillConfig, load_config, parse_config, resolved_dict, write_resolved
from .distill import classify_groups
from .federation import load_datasets, run_experiment
from .metrics import emit, forgetting
from .nn.model import ConfigError

log = logging.getLogger("feddistill")

SWEEP_KEYS = ("alpha_t", "alpha_r", "alpha_f", "beta_L", "beta_E", "beta_FC", "gamma")
LOG_ENV = "FEDDISTILL_LOG_LEVEL"


class UsageError(ValueError):
    pass


def _override(cfg: ExperimentConfig, output_dir=None, seeds=None) -> ExperimentConfig:
    doc = resolved_dict(cfg)
    if output_dir is not None:
        doc["output_dir"] = str(output_dir)
    if seeds is not None:
        doc["seeds"] = list(seeds)
    return parse_config(doc)


def _std(values) -> float | None:
    return float(np.std(values)) if values else None


def run_config(cfg: ExperimentConfig, workers: int = 1) -> dict:
    """Run every seed of ``cfg`` and write the run directory; returns the summary."""
    out = Path(cfg.output_dir)
    write_resolved(cfg, out / "resolved_config.json")
    datasets = load_datasets(cfg)
    per_seed = []
    for seed in cfg.seeds:
        seed_dir = out / f"seed_{seed}"
        result = run_experiment(cfg, seed, seed_dir, workers=workers, data=datasets)
        emit(result.history, seed_dir / "metrics.csv", "csv")
        emit(result.history, seed_dir / "metrics.json", "json")
        h = result.history
        per_seed.append(
            {
                "seed": seed,
                "final_top1": float(h.top1[-1]) if len(h) else None,
                "F": forgetting(h) if len(h) >= 2 else None,
                "rounds": len(h),
            }
        )
    tops = [s["final_top1"] for s in per_seed if s["final_top1"] is not None]
    fs = [s["F"] for s in per_seed if s["F"] is not None]
    summary = {
        "strategy": cfg.strategy.name,
        "seeds": list(cfg.seeds),
        "per_seed": per_seed,
        "final_top1_mean": float(np.mean(tops)) if tops else None,
        "final_top1_std": _std(tops),
        "F_mean": float(np.mean(fs)) if fs else None,
        "F_std": _std(fs),
        "F_aggregation": "forgetting computed per seed, then averaged over seeds; std is population std",
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "final_top1", "F"])
        for s in per_seed:
            w.writerow([s["seed"], "" if s["final_top1"] is None else repr(s["final_top1"]), "" if s["F"] is None else repr(s["F"])])
        w.writerow(["mean", _cellv(summary["final_top1_mean"]), _cellv(summary["F_mean"])])
        w.writerow(["std", _cellv(summary["final_top1_std"]), _cellv(summary["F_std"])])
    return summary


def _cellv(v) -> str:
    return "" if v is None else repr(v)


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


# -- sweep -----------------------------------------------------------------------


def grid_points(grid: dict) -> list[dict]:
    if not grid:
        raise UsageError("sweep grid is empty")
    unknown = sorted(set(grid) - set(SWEEP_KEYS))
    if unknown:
        raise UsageError(f"unknown sweep keys: {', '.join(unknown)} (allowed: {', '.join(SWEEP_KEYS)})")
    keys = [k for k in SWEEP_KEYS if k in grid]
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise UsageError(f"sweep key {k!r} needs a non-empty list of values")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def point_config(cfg: ExperimentConfig, point: dict, output_dir) -> ExperimentConfig:
    if not isinstance(cfg.strategy, FedDistillConfig):
        raise UsageError("sweeps vary FedDistill hyperparameters; the base strategy must be feddistill")
    doc = resolved_dict(cfg)
    doc["strategy"].update(point)
    doc["output_dir"] = str(output_dir)
    return parse_config(doc)


def _run_point(args) -> dict:
    cfg_doc, workers = args
    return run_config(parse_config(cfg_doc), workers)


def sweep_config(cfg: ExperimentConfig, grid: dict, workers: int = 1) -> list[dict]:
    points = grid_points(grid)
    out = Path(cfg.output_dir)
    configs = [point_config(cfg, p, out / f"point_{k:03d}") for k, p in enumerate(points)]
    jobs = [(resolved_dict(c), 1) for c in configs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_run_point, jobs))
    else:
        summaries = [_run_point(j) for j in jobs]
    rows = []
    for k, (p, s) in enumerate(zip(points, summaries)):
        rows.append({"point": f"point_{k:03d}", **p, "final_top1_mean": s["final_top1_mean"], "F_mean": s["F_mean"]})
    rows.sort(key=lambda r: (-(r["final_top1_mean"] if r["final_top1_mean"] is not None else -np.inf), r["point"]))
    keys = list(points[0])
    with open(out / "ranking.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "point"] + keys + ["final_top1_mean", "F_mean"])
        for rank, r in enumerate(rows, 1):
            w.writerow([rank, r["point"]] + [r[k] for k in keys] + [_cellv(r["final_top1_mean"]), _cellv(r["F_mean"])])
    return rows


# -- partition report ------------------------------------------------------------


def partition_report(cfg: ExperimentConfig) -> dict:
    """Per-client histograms and rich/few groups for every seed, as CSV."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, _ = load_datasets(cfg)
    c = train.num_classes
    if isinstance(cfg.strategy, FedDistillConfig):
        gamma = cfg.strategy.resolve_gamma(c)
    else:
        gamma = 1.0 / c
    conc = {}
    path = out / "partition_report.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["seed", "client_id", "n_samples"] + [f"count_class_{k}" for k in range(c)] + [f"group_class_{k}" for k in range(c)]
        )
        for seed in cfg.seeds:
            parts = data_mod.dirichlet_partition(
                train,
                data_mod.PartitionConfig(
                    cfg.federation.n_clients,
                    cfg.partition.alpha,
                    seed,
                    cfg.partition.min_samples_per_client,
                    cfg.partition.max_retries,
                ),
            )
            hists = np.stack([p.class_histogram for p in parts])
            conc[str(seed)] = data_mod.concentration(hists)
            for p in parts:
                if len(p):
                    g = classify_groups(p.class_histogram, gamma)
                    labels = ["rich" if k in g.rich else "few" for k in range(c)]
                else:
                    labels = ["few"] * c
                w.writerow([seed, p.client_id, len(p)] + p.class_histogram.tolist() + labels)
    summary = {"gamma": gamma, "alpha": cfg.partition.alpha, "top2_concentration": conc}
    (out / "partition_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


# -- argument parsing ------------------------------------------------------------


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output-dir", help="override the config's output_dir")
    common.add_argument("--seeds", type=_seeds, help="comma-separated seeds, e.g. 2022,2023")
    common.add_argument("--workers", type=int, default=1, help="parallel workers (clients in run, points in sweep)")

    parser = argparse.ArgumentParser(prog="feddistill", description="Federated learning simulator with group distillation.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="run an experiment once per seed")
    p.add_argument("config")
    p = sub.add_parser("sweep", parents=[common], help="grid search over FedDistill hyperparameters")
    p.add_argument("config")
    p.add_argument("grid")
    p = sub.add_parser("partition-report", parents=[common], help="write per-client class histograms and groups")
    p.add_argument("config")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get(LOG_ENV, "WARNING").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        cfg = _override(load_config(args.config), args.output_dir, args.seeds)
        if args.command == "run":
            s = run_config(cfg, args.workers)
            print(
                f"final top-1 {_fmt(s['final_top1_mean'])} (std {_fmt(s['final_top1_std'])}), "
                f"F {_fmt(s['F_mean'])} -> {cfg.output_dir}"
            )
        elif args.command == "sweep":
            try:
                grid = json.loads(Path(args.grid).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read grid {args.grid}: {exc}") from None
            rows = sweep_config(cfg, grid, args.workers)
            print(f"{len(rows)} points; best {rows[0]['point']} top-1 {_fmt(rows[0]['final_top1_mean'])} -> {cfg.output_dir}")
        else:
            s = partition_report(cfg)
            print(json.dumps(s["top2_concentration"]))
    except (ConfigError, UsageError) as exc:
        print(f"feddistill: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"feddistill: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Experiment drivers: the five-way objective comparison on the synthetic
benchmark, and the latent-deviation correlation study."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .grids import AugmentationConfig, DissectionConfig, GridSpec
from .losses import LossConfig
from .metrics import MetricsReport, aggregate_reports, evaluate, write_metrics_csv
from .model import ModelConfig, save_checkpoint
from .synth import SynthRanges, generate_dataset
from .train import (
    OBJECTIVES,
    TrainConfig,
    build_eval_cases,
    infer_complete,
    latent_deviation_sweep,
    train,
    write_train_log,
)
from .grids import ProbGrid, VoxelGrid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkConfig:
    n_train: int = 64
    n_val: int = 16
    n_test: int = 16
    c: int = 32
    data_seed: int = 7
    test_dissect_seed: int = 10_000_000
    n_test_dissections: int = 100
    train_seeds: tuple = (0, 1, 2)
    arms: tuple = OBJECTIVES


def make_benchmark_data(cfg: BenchmarkConfig, ranges: SynthRanges | None = None):
    """Deterministic train/val/test shape splits."""
    spec = GridSpec(cfg.c)
    n = cfg.n_train + cfg.n_val + cfg.n_test
    shapes, _params = generate_dataset(n, spec, cfg.data_seed, ranges)
    train_shapes = shapes[: cfg.n_train]
    val_shapes = shapes[cfg.n_train : cfg.n_train + cfg.n_val]
    test_shapes = shapes[cfg.n_train + cfg.n_val :]
    return train_shapes, val_shapes, test_shapes


def evaluate_region(pred: ProbGrid, y: VoxelGrid, mask: VoxelGrid) -> MetricsReport:
    """Score the completion inside the dissection mask only: the prediction
    is restricted to the mask and compared against the removed segment."""
    restricted = ProbGrid(pred.spec, pred.data * mask.data)
    return evaluate(restricted, y)


def _evaluate_on_cases(net, cases):
    return [
        evaluate_region(infer_complete(net, case.x), case.y, case.mask)
        for case in cases
    ]


def run_benchmark(
    bench: BenchmarkConfig,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    dissect_cfg: DissectionConfig | None = None,
    aug_cfg: AugmentationConfig | None = None,
    out_dir=None,
    save_checkpoints: bool = False,
) -> dict:
    """Train every arm on every seed and score the frozen test dissections.

    Returns a report dict; when ``out_dir`` is given also writes
    ``results.json``, the summary ``table.csv`` (one row per arm, metric
    mean/std across seeds of per-seed case means), per-run training logs,
    and optionally checkpoints.
    """
    loss_cfg = loss_cfg or LossConfig()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    train_shapes, val_shapes, test_shapes = make_benchmark_data(bench)
    test_cases = build_eval_cases(
        test_shapes,
        bench.test_dissect_seed,
        dissect_cfg=dissect_cfg,
        total=bench.n_test_dissections,
    )

    report = {
        "benchmark": asdict(bench),
        "model": asdict(model_cfg),
        "train": asdict(train_cfg),
        "loss": asdict(loss_cfg),
        "arms": {},
    }
    for arm in bench.arms:
        mode = (
            "probabilistic" if arm in ("cvae_basic", "cvae_vwdice_tw") else "deterministic"
        )
        arm_model_cfg = replace(model_cfg, mode=mode)
        per_seed = []
        for seed in bench.train_seeds:
            cfg = replace(train_cfg, objective=arm, seed=seed)
            log.info("training arm=%s seed=%d", arm, seed)
            result = train(
                train_shapes,
                val_shapes,
                arm_model_cfg,
                cfg,
                loss_cfg,
                dissect_cfg,
                aug_cfg,
            )
            reports = _evaluate_on_cases(result.net, test_cases)
            agg = aggregate_reports(reports)
            per_seed.append(
                {
                    "seed": seed,
                    "aggregate": agg,
                    "best_epoch": result.best_epoch,
                    "best_val_dsc": result.best_val_dsc,
                }
            )
            if out is not None:
                write_train_log(result.rows, out / f"train_{arm}_s{seed}.csv")
                if save_checkpoints:
                    save_checkpoint(out / f"model_{arm}_s{seed}.ckpt", result.net)
        report["arms"][arm] = per_seed

    table_rows = []
    for arm in bench.arms:
        per_seed = report["arms"][arm]
        summary = {}
        for name in ("dsc", "comp_mm", "acc_mm", "hd95_mm"):
            means = np.array(
                [s["aggregate"][f"{name}_mean"] for s in per_seed], dtype=np.float64
            )
            valid = means[np.isfinite(means)]
            summary[f"{name}_mean"] = float(valid.mean()) if len(valid) else float("nan")
            summary[f"{name}_std"] = float(valid.std()) if len(valid) else float("nan")
        table_rows.append((arm, summary))
    report["table"] = {arm: dict(summary) for arm, summary in table_rows}

    if out is not None:
        with open(out / "results.json", "w") as fh:
            json.dump(_sanitize(report), fh, indent=2, sort_keys=True)
        write_metrics_csv(table_rows, out / "table.csv")
    return report


def _sanitize(obj):
    """Replace non-finite floats with None for strict JSON."""
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def run_latent_deviation(
    net,
    bench: BenchmarkConfig,
    dissect_cfg: DissectionConfig | None = None,
    n_cases: int = 16,
    k_per_case: int = 8,
    seed: int = 0,
    max_radius: float = 3.0,
    out_dir=None,
) -> dict:
    """Sweep latent codes away from the posterior mean on test dissections
    and report the deviation-vs-Dice table with its rank correlation."""
    _train, _val, test_shapes = make_benchmark_data(bench)
    cases = build_eval_cases(
        test_shapes, bench.test_dissect_seed, dissect_cfg=dissect_cfg, total=n_cases
    )
    rows, rho = latent_deviation_sweep(net, cases, k_per_case, seed, max_radius)
    result = {"spearman_rho": rho, "n_cases": n_cases, "k_per_case": k_per_case}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "latent_deviation.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["case", "deviation", "dsc"])
            for r in rows:
                writer.writerow([r["case"], f"{r['deviation']:.6f}", f"{r['dsc']:.6f}"])
        with open(out / "latent_deviation.json", "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
    result["rows"] = rows
    return result

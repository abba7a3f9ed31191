# train/ablate.py
"""
Hyperparameter and K-shot fusion sweeps. Every cell is one training run plus
its evaluations; with all_folds the cell is repeated on the four folds and the
metrics averaged. With several seeds the table holds the median over seeds.
Each run directory keeps its own metrics.csv, so `report` can merge them.
"""
import csv
import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterator, List, Tuple

import numpy as np

from scripts.config import RunConfig
from scripts.errors import ConfigError
from scripts.metrics import write_report_csv

from .evaluate import evaluate_model
from .train_episodic import cmd_train

logger = logging.getLogger("celp.ablate")

DELTAS = [0.40, 0.50, 0.65, 0.80]
CE_WEIGHTS = [0.00, 0.10, 0.25, 1.00]
KSHOT_FUSIONS = ["avg", "v1", "v2", "v3", "v4", "v5"]
FIVE_SHOT = 5
STUDIES = ("delta", "weight", "kshot")

SWEEP_COLUMNS = ["miou_1shot", "fbiou_1shot", "miou_5shot", "fbiou_5shot"]


def _folds(cfg: RunConfig, all_folds: bool) -> List[int]:
    return [0, 1, 2, 3] if all_folds else [cfg.fold]


def _runs(cfg: RunConfig, all_folds: bool, seeds: int) -> Iterator[Tuple[int, RunConfig]]:
    """(seed, config) for every training run of a cell, written under <out>/seed<s>/fold<f>."""
    for seed in range(cfg.seed, cfg.seed + seeds):
        for fold in _folds(cfg, all_folds):
            yield seed, cfg.model_copy(update={
                "seed": seed, "fold": fold, "out": str(Path(cfg.out) / f"seed{seed}" / f"fold{fold}"),
            })


def _median_over_seeds(per_seed: Dict[int, List[float]]) -> float:
    # fold average first, then the median across seeds
    return float(np.median([np.mean(v) for v in per_seed.values()]))


def _cell_metrics(cfg: RunConfig, all_folds: bool, seeds: int = 1) -> Dict[str, float]:
    """Train once per seed and fold, then evaluate 1-shot and 5-shot with averaged supports."""
    scores = {c: defaultdict(list) for c in SWEEP_COLUMNS}
    for seed, run_cfg in _runs(cfg, all_folds, seeds):
        model, out = cmd_train(run_cfg)
        one = evaluate_model(model, run_cfg, K=1, fusion="avg")
        five = evaluate_model(model, run_cfg, K=FIVE_SHOT, fusion="avg")
        write_report_csv(out / "metrics.csv", [one, five])
        scores["miou_1shot"][seed].append(one.miou)
        scores["fbiou_1shot"][seed].append(one.fb_iou)
        scores["miou_5shot"][seed].append(five.miou)
        scores["fbiou_5shot"][seed].append(five.fb_iou)
    return {c: _median_over_seeds(v) for c, v in scores.items()}


def _sweep(cfg: RunConfig, field: str, values: List[float], all_folds: bool, seeds: int) -> List[dict]:
    rows = []
    for value in values:
        cell = cfg.model_copy(update={field: value, "out": str(Path(cfg.out) / f"{field}_{value:.2f}")})
        metrics = _cell_metrics(cell, all_folds, seeds)
        rows.append({field: f"{value:.2f}", **{k: f"{v:.6f}" for k, v in metrics.items()}})
        logger.info("%s=%.2f: %s", field, value, metrics)
    return rows


def _kshot(cfg: RunConfig, all_folds: bool, seeds: int) -> List[dict]:
    scores = {f: {"miou": defaultdict(list), "fb_iou": defaultdict(list)} for f in KSHOT_FUSIONS}
    cell = cfg.model_copy(update={"out": str(Path(cfg.out) / "kshot")})
    for seed, run_cfg in _runs(cell, all_folds, seeds):
        model, out = cmd_train(run_cfg)
        reports = [evaluate_model(model, run_cfg, K=FIVE_SHOT, fusion=fusion) for fusion in KSHOT_FUSIONS]
        write_report_csv(out / "metrics.csv", reports)
        for fusion, report in zip(KSHOT_FUSIONS, reports):
            scores[fusion]["miou"][seed].append(report.miou)
            scores[fusion]["fb_iou"][seed].append(report.fb_iou)
    rows = []
    for metric in ("miou", "fb_iou"):
        row = {"metric": metric}
        for fusion in KSHOT_FUSIONS:
            column = fusion if fusion == "avg" else f"v-{fusion[1:]}"
            row[column] = f"{_median_over_seeds(scores[fusion][metric]):.6f}"
        rows.append(row)
    return rows


def cmd_ablate(cfg: RunConfig, study: str, all_folds: bool = False, seeds: int = 1) -> Path:
    if study not in STUDIES:
        raise ConfigError(f"unknown study {study!r}; expected one of {', '.join(STUDIES)}", fields=["study"])
    if seeds < 1:
        raise ConfigError(f"seeds must be >= 1, got {seeds}", fields=["seeds"])
    out = Path(cfg.out)
    cfg.write(out)
    if study == "delta":
        rows, columns = _sweep(cfg, "delta", DELTAS, all_folds, seeds), ["delta"] + SWEEP_COLUMNS
    elif study == "weight":
        rows, columns = _sweep(cfg, "w_ce", CE_WEIGHTS, all_folds, seeds), ["w_ce"] + SWEEP_COLUMNS
    else:
        rows, columns = _kshot(cfg, all_folds, seeds), ["metric", "avg"] + [f"v-{k}" for k in range(1, 6)]
    path = out / f"ablate_{study}.csv"
    with path.open("w", encoding="utf-8", newline="") as fo:
        writer = csv.DictWriter(fo, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    print(f"Wrote {len(rows)} rows to {path}")
    return path

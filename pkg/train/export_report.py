# train/export_report.py
"""Merge metrics.csv files from several run directories into one table."""
import csv
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from scripts.metrics import REPORT_COLUMNS

logger = logging.getLogger("celp.report")

KEY_COLUMNS = ["fold", "phase", "K", "fusion", "class_id"]
VALUE_COLUMNS = ["miou", "fb_iou", "iou"]
STATS = ("mean", "std", "median")
OUT_COLUMNS = KEY_COLUMNS + [f"{v}_{s}" for v in VALUE_COLUMNS for s in STATS] + ["runs", "missing"]


def read_metrics(run_dir: Path) -> List[dict]:
    path = Path(run_dir) / "metrics.csv"
    if not path.is_file():
        raise ValueError(f"{run_dir}: no metrics.csv")
    with path.open("r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not set(REPORT_COLUMNS) <= set(reader.fieldnames):
            raise ValueError(f"{path}: header does not match the metrics report columns")
        rows = list(reader)
    for row in rows:
        for col in VALUE_COLUMNS:
            float(row[col])
    return rows


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample (n-1) standard deviation; a single value has std 0."""
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def summarize(values: Sequence[float]) -> Dict[str, float]:
    mean, std = mean_std(values)
    return {"mean": mean, "std": std, "median": float(np.median(np.asarray(values, dtype=np.float64)))}


def merge_runs(run_dirs: Sequence[Path]) -> Tuple[List[dict], List[str]]:
    cells: Dict[tuple, Dict[str, List[float]]] = OrderedDict()
    bad, good = [], 0
    for run_dir in run_dirs:
        try:
            rows = read_metrics(run_dir)
        except (ValueError, KeyError, OSError) as e:
            logger.warning("skipping malformed run directory: %s", e)
            bad.append(str(run_dir))
            continue
        good += 1
        for row in rows:
            key = tuple(row[k] for k in KEY_COLUMNS)
            cell = cells.setdefault(key, {v: [] for v in VALUE_COLUMNS})
            for v in VALUE_COLUMNS:
                cell[v].append(float(row[v]))
    merged = []
    for key, cell in cells.items():
        out = dict(zip(KEY_COLUMNS, key))
        for v in VALUE_COLUMNS:
            for stat, value in summarize(cell[v]).items():
                out[f"{v}_{stat}"] = f"{value:.6f}"
        runs = len(cell["miou"])
        out["runs"] = runs
        out["missing"] = good - runs
        merged.append(out)
    return merged, bad


def cmd_report(run_dirs: Sequence[Path], out_dir: Path) -> Path:
    merged, bad = merge_runs(run_dirs)
    if not merged:
        raise ValueError("no readable run directories")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_csv = out_dir / "report.csv"
    with out_csv.open("w", encoding="utf-8", newline="") as fo:
        writer = csv.DictWriter(fo, fieldnames=OUT_COLUMNS)
        writer.writeheader()
        writer.writerows(merged)

    lines = [f"runs merged: {len(run_dirs) - len(bad)}"]
    for row in merged:
        if row["class_id"] == "all":
            lines.append(f"fold {row['fold']} {row['phase']} K={row['K']} {row['fusion']}: "
                         f"mIoU {row['miou_mean']} ± {row['miou_std']} (median {row['miou_median']}), "
                         f"FB-IoU {row['fb_iou_mean']} ± {row['fb_iou_std']}")
    incomplete = [row for row in merged if row["missing"]]
    if incomplete:
        lines.append(f"cells missing from some runs: {len(incomplete)}")
        lines.extend(f"  {' '.join(str(row[k]) for k in KEY_COLUMNS)} (missing in {row['missing']})"
                     for row in incomplete)
    if bad:
        lines.append("malformed run directories:")
        lines.extend(f"  {b}" for b in bad)
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"Merged {len(merged)} cells from {len(run_dirs) - len(bad)} runs to {out_csv}")
    return out_csv

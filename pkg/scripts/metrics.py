# scripts/metrics.py
"""
Segmentation metrics and the episodic evaluator.

mIoU pools intersections and unions per class over all episodes before
dividing; FB-IoU pools foreground and background over the binary task.
All tallies are Python ints, so accumulation order and shard merging do not
change the result.
"""
import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import torch

from .episodes import FoldSplit, sample_episode
from .errors import DimensionError, EmptyAccumulatorError, EmptyRegionError
from .lps import LpsConfig, sample_latent_prototype
from .utils import make_rng, split_seed

logger = logging.getLogger("celp.eval")

REPORT_COLUMNS = ["fold", "phase", "K", "fusion", "class_id", "iou", "miou", "fb_iou", "episodes", "ce_skipped"]


@dataclass
class ConfusionAccumulator:
    intersection: Dict[int, int] = field(default_factory=lambda: defaultdict(int))
    union: Dict[int, int] = field(default_factory=lambda: defaultdict(int))
    episodes: Dict[int, int] = field(default_factory=lambda: defaultdict(int))
    # per-episode IoUs, kept for the per-episode averaging mode
    episode_ious: Dict[int, List[float]] = field(default_factory=lambda: defaultdict(list))
    fg_inter: int = 0
    fg_union: int = 0
    bg_inter: int = 0
    bg_union: int = 0

    def accumulate(self, pred: torch.Tensor, gt: torch.Tensor, class_id: int) -> "ConfusionAccumulator":
        if tuple(pred.shape) != tuple(gt.shape):
            raise DimensionError(f"prediction grid {tuple(pred.shape)} != ground-truth grid {tuple(gt.shape)}")
        valid = gt != 255
        p = (pred == 1) & valid
        g = (gt == 1) & valid
        inter = int((p & g).sum())
        uni = int((p | g).sum())
        self.intersection[class_id] += inter
        self.union[class_id] += uni
        self.episodes[class_id] += 1
        if uni > 0:
            self.episode_ious[class_id].append(inter / uni)
        pb, gb = ~p & valid, ~g & valid
        self.fg_inter += inter
        self.fg_union += uni
        self.bg_inter += int((pb & gb).sum())
        self.bg_union += int((pb | gb).sum())
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        for cid in other.episodes:
            self.intersection[cid] += other.intersection[cid]
            self.union[cid] += other.union[cid]
            self.episodes[cid] += other.episodes[cid]
            self.episode_ious[cid].extend(other.episode_ious[cid])
        self.fg_inter += other.fg_inter
        self.fg_union += other.fg_union
        self.bg_inter += other.bg_inter
        self.bg_union += other.bg_union
        return self

    def class_iou(self, per_episode: bool = False) -> Dict[int, float]:
        out = {}
        for cid in sorted(self.episodes):
            if self.union[cid] == 0:
                logger.warning("class %d has zero union; excluded from mIoU", cid)
                continue
            if per_episode:
                out[cid] = float(np.mean(self.episode_ious[cid]))
            else:
                out[cid] = self.intersection[cid] / self.union[cid]
        return out


def accumulate(acc: ConfusionAccumulator, pred: torch.Tensor, gt: torch.Tensor, class_id: int) -> ConfusionAccumulator:
    return acc.accumulate(pred, gt, class_id)


def miou(acc: ConfusionAccumulator, per_episode: bool = False, ious: Optional[Dict[int, float]] = None) -> float:
    """Mean over classes with non-zero union; `ious` reuses an earlier class_iou result."""
    if not acc.episodes:
        raise EmptyAccumulatorError("no episodes accumulated")
    if ious is None:
        ious = acc.class_iou(per_episode)
    if not ious:
        raise EmptyAccumulatorError("every class has zero union")
    return float(sum(ious.values()) / len(ious))


def fb_iou(acc: ConfusionAccumulator) -> float:
    if not acc.episodes:
        raise EmptyAccumulatorError("no episodes accumulated")
    parts = [i / u for i, u in ((acc.fg_inter, acc.fg_union), (acc.bg_inter, acc.bg_union)) if u > 0]
    if not parts:
        raise EmptyAccumulatorError("foreground and background unions are both zero")
    return float(sum(parts) / len(parts))


@dataclass
class EvalReport:
    fold: int
    phase: str
    K: int
    fusion: str
    class_iou: Dict[int, float]
    miou: float
    fb_iou: float
    episodes: Dict[int, int]
    ce_skipped: int
    skipped: int = 0

    def rows(self) -> List[dict]:
        base = {"fold": self.fold, "phase": self.phase, "K": self.K, "fusion": self.fusion,
                "miou": f"{self.miou:.6f}", "fb_iou": f"{self.fb_iou:.6f}", "ce_skipped": self.ce_skipped}
        out = [dict(base, class_id=cid, iou=f"{iou:.6f}", episodes=self.episodes[cid])
               for cid, iou in sorted(self.class_iou.items())]
        out.append(dict(base, class_id="all", iou=f"{self.miou:.6f}", episodes=sum(self.episodes.values())))
        return out


def write_report_csv(path: Union[str, Path], reports: List[EvalReport]) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8", newline="") as fo:
        writer = csv.DictWriter(fo, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for report in reports:
            for row in report.rows():
                writer.writerow(row)
    return p


@torch.no_grad()
def evaluate(model, split: FoldSplit, K: int, fusion: str, episode_count: int, seed: int,
             lps: Optional[LpsConfig] = None, per_episode: bool = False, phase: str = "test",
             distractors: str = "phase") -> EvalReport:
    """
    Deterministic evaluation over `episode_count` episodes per class of `phase`.
    `model` is a SegmentationModel; its parameters are not touched.
    ce_skipped counts query images in which latent sampling finds no region.
    """
    streams = split_seed(seed)
    data_rng, lps_rng = make_rng(streams["data"]), make_rng(streams["lps"])
    lps = lps or LpsConfig(seed=seed)
    acc = ConfusionAccumulator()
    ce_skipped = skipped = 0
    for class_id in split.classes(phase):
        for _ in range(episode_count):
            episode = sample_episode(split, phase, K, data_rng, class_id=class_id, distractors=distractors)
            try:
                pred, gt = model.predict(episode, fusion)
            except EmptyRegionError:
                skipped += 1
                logger.warning("class %d episode skipped: empty support foreground at feature scale", class_id)
                continue
            acc.accumulate(pred, gt, class_id)
            query = model.backbone.extract_features(episode.query_image)
            if sample_latent_prototype(query.mid, query.high, gt, lps, lps_rng) is None:
                ce_skipped += 1
    ious = acc.class_iou(per_episode)
    report = EvalReport(
        fold=split.fold, phase=phase, K=K, fusion=fusion,
        class_iou=ious, miou=miou(acc, per_episode, ious), fb_iou=fb_iou(acc),
        episodes=dict(acc.episodes), ce_skipped=ce_skipped, skipped=skipped,
    )
    logger.info("fold %d %s K=%d %s: mIoU %.4f FB-IoU %.4f (%d episodes, %d skipped)",
                split.fold, phase, K, fusion, report.miou, report.fb_iou, sum(report.episodes.values()), skipped)
    return report

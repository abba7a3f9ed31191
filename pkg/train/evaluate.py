# train/evaluate.py
import logging
from pathlib import Path
from typing import Optional

from scripts.config import RunConfig
from scripts.episodes import FoldSplit
from scripts.errors import ConfigError
from scripts.metrics import EvalReport, evaluate, write_report_csv
from scripts.model import SegmentationModel, load_checkpoint

from .train_episodic import build_model, prepare_runtime

logger = logging.getLogger("celp.eval")


def evaluate_model(model: SegmentationModel, cfg: RunConfig, K: Optional[int] = None,
                   fusion: Optional[str] = None, fold: Optional[int] = None) -> EvalReport:
    K = cfg.k if K is None else K
    fusion = cfg.fusion if fusion is None else fusion
    if fusion != "avg" and int(fusion[1:]) > K:
        raise ConfigError(f"fusion {fusion} needs at least {fusion[1:]} shots, k={K}", fields=["fusion", "k"])
    split = FoldSplit.for_fold(cfg.fold if fold is None else fold)
    return evaluate(model, split, K, fusion, cfg.episode_count, cfg.seed,
                    lps=cfg.lps_config(), per_episode=cfg.per_episode_miou, distractors=cfg.distractors)


def cmd_eval(cfg: RunConfig, checkpoint: Path) -> Path:
    prepare_runtime(cfg)
    out = Path(cfg.out)
    cfg.write(out)
    model = build_model(cfg)
    step = load_checkpoint(checkpoint, model.decoder)
    logger.info("loaded %s (trained %d steps)", checkpoint, step)
    report = evaluate_model(model, cfg)
    path = write_report_csv(out / "metrics.csv", [report])
    print(f"mIoU {report.miou:.4f} FB-IoU {report.fb_iou:.4f} -> {path}")
    return path

# train/train_episodic.py
import csv
import logging
from pathlib import Path
from typing import List, Tuple

import torch

from scripts.config import RunConfig
from scripts.episodes import FoldSplit, sample_episode
from scripts.model import (
    C_HIGH,
    C_MID,
    DECODER_HIDDEN,
    Backbone,
    Decoder,
    LossReport,
    SegmentationModel,
    TrainState,
    save_checkpoint,
    train_episode,
)
from scripts.numeric import set_precision
from scripts.utils import make_rng, split_seed, torch_seed

logger = logging.getLogger("celp.train")

# The backbone stands in for fixed pretrained weights: same for every run seed.
BACKBONE_SEED = 0
LOSS_COLUMNS = ["step", "lr", "L_main", "L_ce", "L_aux", "total"]
# attempts per step before giving up on drawing usable episodes
MAX_SKIPS_PER_STEP = 10


def prepare_runtime(cfg: RunConfig) -> None:
    set_precision(cfg.precision)
    torch.set_num_threads(cfg.threads)


def build_model(cfg: RunConfig) -> SegmentationModel:
    init_seed = torch_seed(split_seed(cfg.seed)["init"])
    backbone = Backbone(C_MID, C_HIGH, seed=BACKBONE_SEED)
    decoder = Decoder(2 * C_MID + 1, DECODER_HIDDEN, seed=init_seed)
    return SegmentationModel(backbone, decoder, cfg.eps)


def train_model(cfg: RunConfig) -> Tuple[SegmentationModel, TrainState, List[LossReport]]:
    """One 1-shot training episode per step on the fold's training classes."""
    prepare_runtime(cfg)
    model = build_model(cfg)
    streams = split_seed(cfg.seed)
    data_rng = make_rng(streams["data"])
    state = TrainState(
        decoder=model.decoder,
        base_lr=cfg.base_lr,
        total_steps=cfg.total_steps,
        weights=cfg.weights,
        lps=cfg.lps_config(),
        seed=cfg.seed,
        eps=cfg.eps,
        lps_rng=make_rng(streams["lps"]),
    )
    split = FoldSplit.for_fold(cfg.fold)
    reports = []
    attempts = 0
    while state.step < state.total_steps:
        attempts += 1
        if attempts > MAX_SKIPS_PER_STEP * cfg.total_steps:
            raise RuntimeError(f"gave up after {attempts - 1} episodes: too many skipped ({state.skipped})")
        episode = sample_episode(split, "train", 1, data_rng, distractors=cfg.distractors)
        state, report = train_episode(state, episode, model.backbone)
        if report.skipped:
            continue
        reports.append(report)
        if state.step % cfg.log_every == 0 or state.step == state.total_steps:
            logger.info("step %d/%d lr %.3e main %.4f ce %.4f aux %.4f total %.4f",
                        state.step, state.total_steps, report.lr, report.main, report.ce, report.aux, report.total)
    return model, state, reports


def write_loss_csv(path: Path, reports: List[LossReport]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fo:
        writer = csv.writer(fo)
        writer.writerow(LOSS_COLUMNS)
        for r in reports:
            writer.writerow([r.step, repr(r.lr), repr(r.main), repr(r.ce), repr(r.aux), repr(r.total)])
    return path


def cmd_train(cfg: RunConfig) -> Tuple[SegmentationModel, Path]:
    out = Path(cfg.out)
    cfg.write(out)
    model, state, reports = train_model(cfg)
    write_loss_csv(out / "loss.csv", reports)
    save_checkpoint(out / "checkpoint.celp", model.decoder, state.step)
    fired = sum(r.ce_fired for r in reports)
    print(f"Trained {state.step} steps ({fired} with CE, {state.skipped} skipped) -> {out}")
    return model, out

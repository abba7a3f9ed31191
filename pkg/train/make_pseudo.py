# train/make_pseudo.py
import logging
from pathlib import Path
from typing import Dict

import torch

from scripts.config import RunConfig
from scripts.errors import DimensionError, EmptyCandidateError, TensorFormatError
from scripts.lps import sample_latent_prototype
from scripts.tensorfile import read_tensor_file, write_tensor_file
from scripts.utils import make_rng, split_seed, write_pgm

logger = logging.getLogger("celp.mine")

VALID_LABELS = {0, 1, 255}


def load_inputs(feature_m: Path, feature_h: Path, mask: Path):
    F_m = read_tensor_file(feature_m)
    F_h = read_tensor_file(feature_h)
    M = read_tensor_file(mask)
    if F_m.dim() != 3 or F_h.dim() != 3:
        raise DimensionError(f"features must be C x h x w, got {tuple(F_m.shape)} and {tuple(F_h.shape)}")
    if M.dtype != torch.uint8:
        raise TensorFormatError(f"{mask}: mask must be stored as u8, got {M.dtype}")
    if not set(torch.unique(M).tolist()) <= VALID_LABELS:
        raise TensorFormatError(f"{mask}: mask values outside {{0, 1, 255}}")
    return F_m.to(torch.float64), F_h.to(torch.float64), M


def cmd_mine(feature_m: Path, feature_h: Path, mask: Path, cfg: RunConfig) -> Dict[str, Path]:
    """Mine a pseudo-mask and latent prototype from stored feature and mask files."""
    F_m, F_h, M = load_inputs(feature_m, feature_h, mask)
    sample = sample_latent_prototype(F_m, F_h, M, cfg.lps_config(), make_rng(split_seed(cfg.seed)["lps"]))
    if sample is None:
        raise EmptyCandidateError("no latent region")
    out = Path(cfg.out)
    cfg.write(out)
    written = {
        "pseudo_mask": write_tensor_file(out / "pseudo_mask.celp", sample.pseudo_mask),
        "prototype": write_tensor_file(out / "prototype.celp", sample.prototype),
        "preview": write_pgm(out / "pseudo_mask.pgm", sample.pseudo_mask),
    }
    logger.info("center %d from %d candidates, %d positions labelled",
                sample.center_index, sample.candidate_count, int((sample.pseudo_mask == 1).sum()))
    print(f"Wrote pseudo-mask, prototype and preview to {out}")
    return written

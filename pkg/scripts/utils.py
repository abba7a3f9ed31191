# scripts/utils.py
import logging
import os
from pathlib import Path
from typing import Dict, Union

import numpy as np
import torch

# Named subsystems that receive an independent random stream from one seed.
# Order matters: SeedSequence.spawn hands out children positionally.
STREAMS = ("data", "lps", "init")

# PGM gray levels for pseudo-mask previews
PGM_LEVELS = {0: 0, 1: 255, 255: 128}


def setup_logging(level: str = None) -> None:
    """Configure root logging once for an entry point (CLI or service)."""
    level = level or os.environ.get("CELP_LOG_LEVEL", "INFO")
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def split_seed(seed: int) -> Dict[str, np.random.SeedSequence]:
    """
    Documented seed-splitting: SeedSequence(seed).spawn(len(STREAMS)), one child
    per subsystem in STREAMS order.
    """
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return dict(zip(STREAMS, children))


def make_rng(seed_seq: Union[int, np.random.SeedSequence]) -> np.random.Generator:
    """PCG64 generator; the only PRNG used for data and latent sampling."""
    return np.random.Generator(np.random.PCG64(seed_seq))


def torch_seed(seed_seq: np.random.SeedSequence) -> int:
    # torch generators take a single 64-bit integer
    return int(seed_seq.generate_state(1, dtype=np.uint64)[0])


def mask_to_pgm_bytes(mask: torch.Tensor) -> bytes:
    """Binary PGM (P5, maxval 255) rendering of a {0,1,255} label grid."""
    arr = mask.detach().cpu().numpy().astype(np.uint8)
    lut = np.zeros(256, dtype=np.uint8)
    for label, level in PGM_LEVELS.items():
        lut[label] = level
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    return header + lut[arr].tobytes()


def write_pgm(path: Union[str, Path], mask: torch.Tensor) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(mask_to_pgm_bytes(mask))
    return p

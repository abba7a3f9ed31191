# scripts/lps.py
"""
Latent prototype sampling: mine a pseudo-labelled region and its prototype
from the background of a query image.

  D  = pairwise cosine of the high-level query features
  N  = for each position, how many background positions are similar to it
  P  = background positions with at least sigma similar neighbours
  i* = uniform draw from P
  M' = 1 where similar to i* and background, 0 on annotated foreground,
       255 on remaining background (and on positions already ignored)
  v  = masked GAP of the mid-level features over M' == 1
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from pydantic import BaseModel, Field

from .errors import DimensionError, EmptyCandidateError, InvalidCenterError
from .numeric import masked_gap, pairwise_cosine
from .utils import make_rng

logger = logging.getLogger("celp.lps")

BACKGROUND, FOREGROUND, IGNORE = 0, 1, 255


class LpsConfig(BaseModel):
    delta: float = Field(0.65, gt=0.0, le=1.0)
    # None -> max(2, ceil(0.01 * hw))
    sigma: Optional[int] = Field(None, ge=1)
    seed: int = 0


@dataclass(frozen=True)
class LatentSample:
    pseudo_mask: torch.Tensor
    prototype: torch.Tensor
    center_index: int
    candidate_count: int


def resolve_sigma(cfg: LpsConfig, hw: int) -> int:
    if cfg.sigma is not None:
        return cfg.sigma
    return max(2, math.ceil(0.01 * hw))


def _flat_mask(M: torch.Tensor, n: int) -> torch.Tensor:
    flat = M.reshape(-1)
    if flat.numel() != n:
        raise DimensionError(f"mask has {flat.numel()} positions, similarity matrix has {n}")
    return flat


def count_similar(D: torch.Tensor, M: torch.Tensor, delta: float) -> torch.Tensor:
    """N(i) = #{j : D(i,j) >= delta and M(j) == 0}; i counts itself when it qualifies."""
    if D.dim() != 2 or D.shape[0] != D.shape[1]:
        raise DimensionError(f"similarity matrix must be square, got {tuple(D.shape)}")
    bg = _flat_mask(M, D.shape[0]) == BACKGROUND
    return ((D >= delta) & bg[None, :]).sum(dim=1)


def candidate_set(N: torch.Tensor, M: torch.Tensor, sigma: int) -> torch.Tensor:
    """Ascending indices i with N(i) >= sigma on background; possibly empty."""
    bg = _flat_mask(M, N.numel()) == BACKGROUND
    return torch.nonzero((N >= sigma) & bg).reshape(-1)


def sample_center(P: torch.Tensor, rng: np.random.Generator) -> int:
    if P.numel() == 0:
        raise EmptyCandidateError("candidate set is empty")
    return int(P[int(rng.integers(P.numel()))])


def build_pseudo_mask(D: torch.Tensor, i_star: int, M: torch.Tensor, delta: float) -> torch.Tensor:
    flat = _flat_mask(M, D.shape[0])
    if not 0 <= i_star < flat.numel():
        raise InvalidCenterError(f"center {i_star} outside 0..{flat.numel() - 1}")
    if int(flat[i_star]) != BACKGROUND:
        raise InvalidCenterError(f"center {i_star} is not a background position (label {int(flat[i_star])})")
    out = torch.full_like(flat, IGNORE, dtype=torch.uint8)
    out[flat == FOREGROUND] = BACKGROUND
    out[(D[i_star] >= delta) & (flat == BACKGROUND)] = FOREGROUND
    return out.reshape(M.shape)


def sample_latent_prototype(
    F_m: torch.Tensor,
    F_h: torch.Tensor,
    M: torch.Tensor,
    cfg: LpsConfig,
    rng: Optional[np.random.Generator] = None,
) -> Optional[LatentSample]:
    """Returns None when no candidate exists (the caller skips the CE term)."""
    if F_m.shape[1:] != F_h.shape[1:]:
        raise DimensionError(f"mid grid {tuple(F_m.shape[1:])} != high grid {tuple(F_h.shape[1:])}")
    if tuple(M.shape) != tuple(F_h.shape[1:]):
        raise DimensionError(f"mask grid {tuple(M.shape)} != feature grid {tuple(F_h.shape[1:])}")
    rng = rng if rng is not None else make_rng(cfg.seed)

    D = pairwise_cosine(F_h)
    N = count_similar(D, M, cfg.delta)
    P = candidate_set(N, M, resolve_sigma(cfg, D.shape[0]))
    if P.numel() == 0:
        logger.debug("no latent candidate (sigma=%s)", resolve_sigma(cfg, D.shape[0]))
        return None
    i_star = sample_center(P, rng)
    pseudo = build_pseudo_mask(D, i_star, M, cfg.delta)
    if not (pseudo == FOREGROUND).any():
        return None
    proto = masked_gap(F_m, pseudo, FOREGROUND)
    return LatentSample(pseudo_mask=pseudo, prototype=proto, center_index=i_star, candidate_count=int(P.numel()))

# scripts/losses.py
from typing import Sequence

import torch

from .errors import DimensionError

IGNORE_LABEL = 255
LOG_CLAMP = 1e-12


def cross_entropy_ignore(P: torch.Tensor, M: torch.Tensor) -> torch.Tensor:
    """
    Mean of -log P(class = M(i)) over positions with M(i) != 255.
    P is a 2 x h x w probability map. All-ignored masks give an exact 0 that
    stays attached to the graph, so gradients are zero rather than missing.
    """
    if P.dim() != 3 or tuple(P.shape[1:]) != tuple(M.shape):
        raise DimensionError(f"prediction grid {tuple(P.shape[1:])} != mask grid {tuple(M.shape)}")
    valid = M != IGNORE_LABEL
    count = int(valid.sum())
    if count == 0:
        return P.sum() * 0.0
    target = torch.where(valid, M, torch.zeros_like(M)).to(torch.long)
    logp = torch.log(torch.clamp(P, min=LOG_CLAMP))
    picked = torch.gather(logp, 0, target[None]).squeeze(0)
    return -(picked * valid).sum() / count


def multiscale_aux_loss(preds: Sequence[torch.Tensor], masks: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum of per-scale ignore-aware cross-entropies."""
    if len(preds) != len(masks) or not preds:
        raise DimensionError(f"{len(preds)} predictions but {len(masks)} masks")
    total = cross_entropy_ignore(preds[0], masks[0])
    for P, M in zip(preds[1:], masks[1:]):
        total = total + cross_entropy_ignore(P, M)
    return total

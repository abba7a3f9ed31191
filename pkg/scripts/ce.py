# scripts/ce.py
"""
Contrastive enhancement: prior masks, decoder-input assembly and the
three-term objective.

The auxiliary path feeds the same query features with the latent prototype
and its prior into the decoder used by the main path, supervised by the
pseudo-mask. It adds no parameters.
"""
from typing import Union

import torch
from pydantic import BaseModel, Field

from .errors import DimensionError
from .losses import multiscale_aux_loss  # noqa: F401  (re-exported)
from .numeric import DEFAULT_EPS, ZERO_NORM, check_feature_map, check_grid, minmax_normalize, positions, unit_rows

Number = Union[float, torch.Tensor]


class LossWeights(BaseModel):
    # weight on the contrastive-enhancement term (pseudo-mask supervision)
    w_ce: float = Field(0.1, ge=0.0, allow_inf_nan=False)
    # weight on the decoder-specific multi-scale term
    w_aux: float = Field(1.0, ge=0.0, allow_inf_nan=False)
    ce_enabled: bool = True

    @property
    def ce_active(self) -> bool:
        return self.ce_enabled and self.w_ce > 0.0


def latent_prior_mask(v_l: torch.Tensor, F_m: torch.Tensor, M_pseudo: torch.Tensor,
                      eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Cosine between v_l and F_m restricted to M_pseudo == 1, min-max normalized."""
    C, h, w = check_feature_map(F_m)
    if v_l.shape != (C,):
        raise DimensionError(f"prototype length {tuple(v_l.shape)} != feature channels {C}")
    check_grid(M_pseudo, h, w, "pseudo-mask")
    masked = F_m * (M_pseudo == 1).to(F_m.dtype)
    norm = torch.linalg.vector_norm(v_l)
    if norm < ZERO_NORM:
        sims = torch.zeros(h * w, dtype=F_m.dtype)
    else:
        sims = unit_rows(positions(masked)) @ (v_l / norm)
    return minmax_normalize(sims.reshape(h, w), eps)


def support_prior_mask(F_q_h: torch.Tensor, F_s_h: torch.Tensor, M_s: torch.Tensor,
                       eps: float = DEFAULT_EPS) -> torch.Tensor:
    """
    Y(i) = max over support foreground j of cos(F_q_h(i), F_s_h(j)), min-max
    normalized. An empty support foreground yields the all-zero prior.
    """
    Cq, h, w = check_feature_map(F_q_h, "query features")
    Cs, hs, ws = check_feature_map(F_s_h, "support features")
    if Cq != Cs:
        raise DimensionError(f"query channels {Cq} != support channels {Cs}")
    check_grid(M_s, hs, ws, "support mask")
    fg = M_s.reshape(-1) == 1
    if not fg.any():
        return torch.zeros(h, w, dtype=F_q_h.dtype)
    Q = unit_rows(positions(F_q_h))
    S = unit_rows(positions(F_s_h)[fg])
    Y = (Q @ S.T).max(dim=1).values
    return minmax_normalize(Y.reshape(h, w), eps)


def assemble_decoder_input(F_m: torch.Tensor, proto: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
    """[features (C), expanded prototype (C), prior (1)] stacked along channels."""
    C, h, w = check_feature_map(F_m)
    if proto.shape != (C,):
        raise DimensionError(f"prototype length {tuple(proto.shape)} != feature channels {C}")
    check_grid(prior, h, w, "prior")
    expanded = proto[:, None, None].expand(C, h, w)
    return torch.cat([F_m, expanded, prior[None].to(F_m.dtype)], dim=0)


def total_loss(L_main: Number, L_ce: Number, L_aux: Number, w: LossWeights) -> Number:
    return L_main + w.w_ce * L_ce + w.w_aux * L_aux

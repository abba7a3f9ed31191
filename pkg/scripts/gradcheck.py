# scripts/gradcheck.py
"""Central finite-difference check of decoder gradients (run in float64)."""
from dataclasses import dataclass
from typing import Callable, List

import torch

from .model import Decoder, backward


@dataclass
class GradCheckEntry:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float
    abs_error: float

    def passed(self, rtol: float = 1e-4, atol: float = 1e-9) -> bool:
        return self.rel_error < rtol or self.abs_error < atol


def finite_difference_check(decoder: Decoder, objective: Callable[[Decoder], torch.Tensor],
                            coords_per_param: int = 20, step: float = 1e-5, seed: int = 0) -> List[GradCheckEntry]:
    """
    Compare backward() against (f(x+h) - f(x-h)) / 2h on up to `coords_per_param`
    random coordinates of every parameter tensor.
    """
    grads = backward(objective(decoder), decoder)
    gen = torch.Generator().manual_seed(seed)
    entries = []
    for name, p in decoder.named_parameters():
        flat = p.data.view(-1)
        picks = torch.randperm(flat.numel(), generator=gen)[:coords_per_param]
        for idx in picks.tolist():
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + step
                f_plus = float(objective(decoder))
                flat[idx] = orig - step
                f_minus = float(objective(decoder))
                flat[idx] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            analytic = float(grads[name].reshape(-1)[idx])
            abs_err = abs(analytic - numeric)
            rel_err = abs_err / max(abs(analytic), abs(numeric), 1e-300)
            entries.append(GradCheckEntry(name, idx, analytic, numeric, rel_err, abs_err))
    return entries

# scripts/numeric.py
"""
Dense-tensor primitives shared by every other module.

Conventions:
  - a FeatureMap is a C x h x w tensor; a LabelMask is an h x w uint8 tensor
    over {0, 1, 255}; a Prototype is a length-C vector.
  - positions are indexed row-major: position i is (i // w, i % w).
  - a zero feature vector (norm below ZERO_NORM) has cosine 0 with anything.
"""
from typing import Sequence, Tuple

import torch
import torch.nn.functional as F

from .errors import DimensionError, EmptyRegionError

ZERO_NORM = 1e-12
DEFAULT_EPS = 1e-7

_PRECISIONS = {"f32": torch.float32, "f64": torch.float64}
_dtype = torch.float32


def set_precision(name: str) -> torch.dtype:
    """Select the global training dtype ("f32" or "f64")."""
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]
    return _dtype


def default_dtype() -> torch.dtype:
    return _dtype


def check_finite(t: torch.Tensor, name: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"{name} contains NaN or Inf")
    return t


def check_feature_map(F_: torch.Tensor, name: str = "feature map") -> Tuple[int, int, int]:
    if F_.dim() != 3 or min(F_.shape) < 1:
        raise DimensionError(f"{name} must be C x h x w with positive extents, got {tuple(F_.shape)}")
    return tuple(F_.shape)


def check_grid(M: torch.Tensor, h: int, w: int, name: str = "mask") -> None:
    if tuple(M.shape) != (h, w):
        raise DimensionError(f"{name} grid {tuple(M.shape)} does not match feature grid {(h, w)}")


def cosine(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    if u.dim() != 1 or u.shape != v.shape or u.numel() < 1:
        raise DimensionError(f"cosine needs equal-length vectors, got {tuple(u.shape)} and {tuple(v.shape)}")
    nu, nv = torch.linalg.vector_norm(u), torch.linalg.vector_norm(v)
    if nu < ZERO_NORM or nv < ZERO_NORM:
        return torch.zeros((), dtype=u.dtype)
    return check_finite(torch.dot(u, v) / (nu * nv), "cosine")


def unit_rows(X: torch.Tensor) -> torch.Tensor:
    """Row-normalize an n x C matrix; zero rows stay zero."""
    norms = torch.linalg.vector_norm(X, dim=1, keepdim=True)
    safe = torch.where(norms < ZERO_NORM, torch.ones_like(norms), norms)
    return torch.where(norms < ZERO_NORM, torch.zeros_like(X), X / safe)


def positions(F_: torch.Tensor) -> torch.Tensor:
    """hw x C view of a feature map in row-major position order."""
    C, h, w = check_feature_map(F_)
    return F_.reshape(C, h * w).T


def pairwise_cosine(F_: torch.Tensor) -> torch.Tensor:
    """
    hw x hw cosine table. Only the upper triangle is computed from the product;
    the lower triangle is its mirror, so the result is exactly symmetric.
    """
    X = positions(F_)
    U = unit_rows(X)
    D = torch.triu(U @ U.T)
    D = D + torch.triu(D, diagonal=1).T
    nonzero = torch.linalg.vector_norm(X, dim=1) >= ZERO_NORM
    diag = torch.where(nonzero, torch.ones_like(D.diagonal()), torch.zeros_like(D.diagonal()))
    D.diagonal().copy_(diag)
    return check_finite(D, "similarity matrix")


def masked_gap(F_: torch.Tensor, M: torch.Tensor, label: int = 1) -> torch.Tensor:
    """Channel-wise mean of F over the positions where M == label."""
    C, h, w = check_feature_map(F_)
    check_grid(M, h, w)
    sel = M == label
    count = int(sel.sum())
    if count == 0:
        raise EmptyRegionError(f"no position carries label {label}")
    return check_finite(F_[:, sel].sum(dim=1) / count, "prototype")


def minmax_normalize(H: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Min-max scaling into [0, 1); the quotient is formed in float64 and kept below 1 in H's dtype."""
    if H.numel() == 0:
        raise DimensionError("cannot normalize an empty tensor")
    H64 = H.double()
    lo, hi = H64.min(), H64.max()
    out = ((H64 - lo) / (hi - lo + eps)).to(H.dtype)
    # eps vanishes against a wide range, so the top value can round up to 1
    top = torch.nextafter(torch.ones((), dtype=H.dtype), torch.zeros((), dtype=H.dtype))
    return check_finite(torch.minimum(out, top), "normalized map")


def downsample_nearest(M: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    """Nearest-neighbour reduction of a label grid; label values are preserved."""
    if M.dim() != 2:
        raise DimensionError(f"label mask must be h x w, got {tuple(M.shape)}")
    if tuple(M.shape) == tuple(size):
        return M.clone()
    out = F.interpolate(M[None, None].to(torch.float32), size=tuple(size), mode="nearest")
    return out[0, 0].to(torch.uint8)

# scripts/model.py
"""
Frozen toy backbone, the shared two-scale decoder, and the episodic training step.

Both the main path (support prototype + support prior) and the auxiliary
contrastive-enhancement path (latent prototype + latent prior) run through the
same Decoder instance, so enabling the auxiliary path adds no parameters.
"""
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .ce import LossWeights, assemble_decoder_input, latent_prior_mask, support_prior_mask, total_loss
from .episodes import Episode, kshot_average, kshot_vote
from .errors import CheckpointError, DimensionError, StepOverflowError
from .losses import cross_entropy_ignore, multiscale_aux_loss
from .lps import LpsConfig, sample_latent_prototype
from .numeric import DEFAULT_EPS, default_dtype, downsample_nearest, masked_gap
from .utils import make_rng

logger = logging.getLogger("celp.model")

C_MID = 32
C_HIGH = 64
DECODER_HIDDEN = 32
POLY_POWER = 0.9

CKPT_MAGIC = b"CELPCKPT"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<8sIQ")
_CKPT_TAIL = struct.Struct("<QII")


class Features(NamedTuple):
    mid: torch.Tensor
    high: torch.Tensor


class DecoderOutput(NamedTuple):
    final: torch.Tensor
    scales: List[torch.Tensor]


class LossTerms(NamedTuple):
    total: torch.Tensor
    main: torch.Tensor
    ce: torch.Tensor
    aux: torch.Tensor


def _he_init(convs: Sequence[nn.Conv2d], generator: torch.Generator) -> None:
    with torch.no_grad():
        for conv in convs:
            fan_in = conv.weight[0].numel()
            std = math.sqrt(2.0 / fan_in)
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator, dtype=conv.weight.dtype) * std)
            if conv.bias is not None:
                conv.bias.zero_()


# -------- backbone --------
class Backbone(nn.Module):
    """
    Seeded random convolution stacks, never trained.
      3xHxW -> conv3x3/s2 (16) -> conv3x3/s2 (c_mid)  = F^m at H/4 x W/4
               F^m -> conv3x3/s1 (c_high)              = F^h at H/4 x W/4
    """

    def __init__(self, c_mid: int = C_MID, c_high: int = C_HIGH, seed: int = 0, dtype: torch.dtype = None):
        super().__init__()
        dtype = dtype or default_dtype()
        self.c_mid, self.c_high = c_mid, c_high
        self.stem = nn.Conv2d(3, 16, 3, stride=2, padding=1, dtype=dtype)
        self.mid = nn.Conv2d(16, c_mid, 3, stride=2, padding=1, dtype=dtype)
        self.high = nn.Conv2d(c_mid, c_high, 3, stride=1, padding=1, dtype=dtype)
        _he_init([self.stem, self.mid, self.high], torch.Generator().manual_seed(seed))
        self.requires_grad_(False)
        self.eval()

    @property
    def dtype(self) -> torch.dtype:
        return self.stem.weight.dtype

    def forward(self, img: torch.Tensor) -> Features:
        f_mid = F.relu(self.mid(F.relu(self.stem(img))))
        f_high = F.relu(self.high(f_mid))
        return Features(f_mid, f_high)

    @torch.no_grad()
    def extract_features(self, img: torch.Tensor) -> Features:
        if img.dim() != 3 or img.shape[0] != 3:
            raise DimensionError(f"image must be 3 x H x W, got {tuple(img.shape)}")
        feats = self(img[None].to(self.dtype))
        return Features(feats.mid[0], feats.high[0])


# -------- decoder --------
class Decoder(nn.Module):
    """
    Two-scale feature-enrichment decoder.
      x -> 1x1 reduce -> full branch (3x3) ----------------+-> 3x3 merge -> head  (final)
                      -> 2x avg-pool -> coarse branch (3x3) -^ (nearest upsample)
    Each branch also has its own 1x1 head giving the per-scale predictions.
    """

    def __init__(self, in_channels: int = 2 * C_MID + 1, hidden: int = DECODER_HIDDEN, seed: int = 0,
                 dtype: torch.dtype = None):
        super().__init__()
        dtype = dtype or default_dtype()
        self.in_channels, self.hidden = in_channels, hidden
        self.reduce = nn.Conv2d(in_channels, hidden, 1, dtype=dtype)
        self.full = nn.Conv2d(hidden, hidden, 3, padding=1, dtype=dtype)
        self.coarse = nn.Conv2d(hidden, hidden, 3, padding=1, dtype=dtype)
        self.head_full = nn.Conv2d(hidden, 2, 1, dtype=dtype)
        self.head_coarse = nn.Conv2d(hidden, 2, 1, dtype=dtype)
        self.merge = nn.Conv2d(hidden, hidden, 3, padding=1, dtype=dtype)
        self.head = nn.Conv2d(hidden, 2, 1, dtype=dtype)
        _he_init([m for m in self.modules() if isinstance(m, nn.Conv2d)], torch.Generator().manual_seed(seed))

    @property
    def dtype(self) -> torch.dtype:
        return self.reduce.weight.dtype

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def logits(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        h, w = x.shape[-2:]
        r = F.relu(self.reduce(x))
        full = F.relu(self.full(r))
        coarse = F.relu(self.coarse(F.adaptive_avg_pool2d(r, (math.ceil(h / 2), math.ceil(w / 2)))))
        merged = F.relu(self.merge(full + F.interpolate(coarse, size=(h, w), mode="nearest")))
        return self.head(merged), [self.head_full(full), self.head_coarse(coarse)]

    def forward(self, x: torch.Tensor) -> DecoderOutput:
        if x.dim() != 3 or x.shape[0] != self.in_channels:
            raise DimensionError(f"decoder expects {self.in_channels} x h x w input, got {tuple(x.shape)}")
        final, scales = self.logits(x[None].to(self.dtype))
        return DecoderOutput(torch.softmax(final[0], dim=0), [torch.softmax(s[0], dim=0) for s in scales])


def decoder_forward(decoder: Decoder, x: torch.Tensor) -> DecoderOutput:
    """Per-position class distributions, final and per scale, for one decoder input."""
    return decoder(x)


def scale_masks(M: torch.Tensor, preds: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    """Ground truth for each prediction grid (nearest reduction)."""
    return [downsample_nearest(M, P.shape[1:]) for P in preds]


def backward(loss: torch.Tensor, decoder: nn.Module) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of `loss` for every trainable decoder parameter."""
    named = [(n, p) for n, p in decoder.named_parameters() if p.requires_grad]
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in named}
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for (n, p), g in zip(named, grads)}


def episode_losses(decoder: Decoder, x_main: torch.Tensor, M_q: torch.Tensor,
                   aux: Optional[Tuple[torch.Tensor, torch.Tensor]], weights: LossWeights) -> LossTerms:
    """
    Full objective for one episode. `aux` is (auxiliary decoder input, pseudo-mask)
    or None when the contrastive path does not fire.
    """
    out = decoder_forward(decoder, x_main)
    L_main = cross_entropy_ignore(out.final, M_q)
    L_aux = multiscale_aux_loss(out.scales, scale_masks(M_q, out.scales))
    if aux is not None:
        x_aux, pseudo = aux
        L_ce = cross_entropy_ignore(decoder_forward(decoder, x_aux).final, pseudo)
    else:
        L_ce = torch.zeros((), dtype=L_main.dtype)
    return LossTerms(total_loss(L_main, L_ce, L_aux, weights), L_main, L_ce, L_aux)


# -------- inference bundle --------
def main_path_input(query: Features, supports: Sequence[Tuple[Features, torch.Tensor]],
                    eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Support prototype and prior (averaged over K supports) stacked with the query features."""
    protos = [masked_gap(f.mid, m, 1) for f, m in supports]
    priors = [support_prior_mask(query.high, f.high, m, eps) for f, m in supports]
    proto, prior = kshot_average(protos, priors)
    return assemble_decoder_input(query.mid, proto, prior)


def auxiliary_path_input(query: Features, M_q: torch.Tensor, cfg: LpsConfig, rng: np.random.Generator,
                         eps: float = DEFAULT_EPS):
    """(decoder input, latent sample) for the contrastive path, or None when nothing is mined."""
    sample = sample_latent_prototype(query.mid, query.high, M_q, cfg, rng)
    if sample is None:
        return None
    prior = latent_prior_mask(sample.prototype, query.mid, sample.pseudo_mask, eps)
    return assemble_decoder_input(query.mid, sample.prototype, prior), sample


@dataclass
class SegmentationModel:
    backbone: Backbone
    decoder: Decoder
    eps: float = DEFAULT_EPS

    def features(self, episode: Episode):
        query = self.backbone.extract_features(episode.query_image)
        grid = tuple(query.mid.shape[1:])
        supports = [(self.backbone.extract_features(img), downsample_nearest(m, grid))
                    for img, m in episode.supports]
        return query, downsample_nearest(episode.query_mask, grid), supports

    @torch.no_grad()
    def predict(self, episode: Episode, fusion: str = "avg") -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Binary prediction and ground truth, both at feature resolution.
        fusion is "avg" (one pass with averaged prototype/prior) or "v<k>"
        (one pass per support, foreground where at least k passes agree).
        """
        query, M_q, supports = self.features(episode)
        if fusion == "avg":
            probs = decoder_forward(self.decoder, main_path_input(query, supports, self.eps)).final
            return probs.argmax(dim=0).to(torch.uint8), M_q
        k = parse_vote(fusion)
        preds = [decoder_forward(self.decoder, main_path_input(query, [s], self.eps)).final.argmax(dim=0)
                 .to(torch.uint8) for s in supports]
        return kshot_vote(preds, k), M_q


def parse_vote(fusion: str) -> int:
    name = fusion.replace("-", "")
    if not (name.startswith("v") and name[1:].isdigit()):
        raise ValueError(f"unknown fusion mode {fusion!r}; expected 'avg' or 'v1'..'v5'")
    return int(name[1:])


# -------- training --------
def poly_lr(base_lr: float, step: int, total_steps: int, power: float = POLY_POWER) -> float:
    return base_lr * (1.0 - step / total_steps) ** power


@dataclass
class LossReport:
    step: int
    lr: float
    main: float
    ce: float
    aux: float
    total: float
    ce_fired: bool
    skipped: bool = False


@dataclass
class TrainState:
    decoder: Decoder
    base_lr: float
    total_steps: int
    weights: LossWeights = field(default_factory=LossWeights)
    lps: LpsConfig = field(default_factory=LpsConfig)
    seed: int = 0
    eps: float = DEFAULT_EPS
    step: int = 0
    skipped: int = 0
    lps_rng: np.random.Generator = None
    optimizer: torch.optim.Optimizer = None

    def __post_init__(self):
        if self.lps_rng is None:
            self.lps_rng = make_rng(self.lps.seed)
        if self.optimizer is None:
            # plain SGD; the poly schedule is applied by sgd_poly_step
            self.optimizer = torch.optim.SGD(self.decoder.parameters(), lr=self.base_lr, momentum=0.0)


def sgd_poly_step(state: TrainState, grads: Dict[str, torch.Tensor]) -> TrainState:
    if state.step >= state.total_steps:
        raise StepOverflowError(f"step {state.step} reached total_steps={state.total_steps}")
    lr = poly_lr(state.base_lr, state.step, state.total_steps)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    for name, p in state.decoder.named_parameters():
        p.grad = grads[name].detach().clone()
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step += 1
    return state


def train_episode(state: TrainState, episode: Episode, backbone: Backbone) -> Tuple[TrainState, LossReport]:
    model = SegmentationModel(backbone, state.decoder, state.eps)
    query, M_q, supports = model.features(episode)
    if any(not (m == 1).any() for _, m in supports):
        state.skipped += 1
        logger.warning("episode at step %d skipped: empty support foreground at feature scale (%d skipped so far)",
                       state.step, state.skipped)
        return state, LossReport(state.step, 0.0, 0.0, 0.0, 0.0, 0.0, ce_fired=False, skipped=True)

    x_main = main_path_input(query, supports, state.eps)
    aux = None
    if state.weights.ce_active:
        mined = auxiliary_path_input(query, M_q, state.lps, state.lps_rng, state.eps)
        if mined is not None:
            aux = (mined[0], mined[1].pseudo_mask)

    terms = episode_losses(state.decoder, x_main, M_q, aux, state.weights)
    grads = backward(terms.total, state.decoder)
    report = LossReport(
        step=state.step,
        lr=poly_lr(state.base_lr, state.step, state.total_steps),
        main=terms.main.detach().item(),
        ce=terms.ce.detach().item(),
        aux=terms.aux.detach().item(),
        total=terms.total.detach().item(),
        ce_fired=aux is not None,
    )
    sgd_poly_step(state, grads)
    return state, report


# -------- checkpoints --------
def save_checkpoint(path: Union[str, Path], decoder: Decoder, step: int) -> Path:
    """magic, u32 version, u64 count, count x f64 LE, u64 step, u32 in_channels, u32 hidden."""
    flat = torch.cat([p.detach().reshape(-1).to(torch.float64) for p in decoder.parameters()])
    payload = flat.numpy().astype("<f8").tobytes()
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("wb") as f:
        f.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, flat.numel()))
        f.write(payload)
        f.write(_CKPT_TAIL.pack(step, decoder.in_channels, decoder.hidden))
    return p


def load_checkpoint(path: Union[str, Path], decoder: Decoder) -> int:
    """Load parameters into `decoder` in place; returns the stored step counter."""
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEAD.size:
        raise CheckpointError(f"{path}: file too short for checkpoint header")
    magic, version, count = _CKPT_HEAD.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    expected = _CKPT_HEAD.size + 8 * count + _CKPT_TAIL.size
    if len(raw) != expected:
        raise CheckpointError(f"{path}: expected {expected} bytes, found {len(raw)}")
    step, in_channels, hidden = _CKPT_TAIL.unpack_from(raw, _CKPT_HEAD.size + 8 * count)
    if count != decoder.parameter_count() or (in_channels, hidden) != (decoder.in_channels, decoder.hidden):
        raise DimensionError(
            f"checkpoint decoder (in_channels={in_channels}, hidden={hidden}, {count} parameters) does not match "
            f"configured decoder (in_channels={decoder.in_channels}, hidden={decoder.hidden}, "
            f"{decoder.parameter_count()} parameters)"
        )
    flat = torch.from_numpy(np.frombuffer(raw, dtype="<f8", count=count, offset=_CKPT_HEAD.size).copy())
    with torch.no_grad():
        offset = 0
        for p in decoder.parameters():
            n = p.numel()
            p.copy_(flat[offset:offset + n].reshape(p.shape).to(p.dtype))
            offset += n
    return step

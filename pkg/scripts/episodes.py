# scripts/episodes.py
"""
Synthetic episodic benchmark.

Twelve classes, each a (shape, texture) pair rendered with hard edges on a
noisy background. Four folds hold out three classes each. An episode draws one
class from the phase's class set and renders K support scenes plus one query
scene containing it; other objects in a scene are distractors labelled 0.
Distractors come from the phase's other classes ("phase") or from every other
class ("any"), so held-out classes can sit unlabelled in training scenes.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import DimensionError

logger = logging.getLogger("celp.episodes")

IMAGE_SIZE = 64
SHAPES = ["disk", "rectangle", "triangle", "ring", "cross", "bar"]
PATTERNS = ["stripes", "checker"]
NUM_CLASSES = len(SHAPES) * len(PATTERNS)
NUM_FOLDS = 4
MAX_DISTRACTORS = 2
DISTRACTOR_MODES = ("phase", "any")
# object half-extent in pixels, as a fraction of the image size
SIZE_RANGE = (0.14, 0.24)
BACKGROUND_LEVEL = 0.5
BACKGROUND_NOISE = 0.08

# two-tone palettes, one per class (RGB in [0, 1])
PALETTES = [
    ((0.90, 0.20, 0.20), (0.55, 0.05, 0.05)),
    ((0.20, 0.75, 0.25), (0.05, 0.40, 0.10)),
    ((0.20, 0.35, 0.90), (0.05, 0.10, 0.50)),
    ((0.95, 0.85, 0.20), (0.60, 0.45, 0.05)),
    ((0.85, 0.30, 0.85), (0.45, 0.05, 0.45)),
    ((0.20, 0.85, 0.85), (0.05, 0.45, 0.45)),
    ((0.95, 0.55, 0.15), (0.20, 0.20, 0.70)),
    ((0.60, 0.95, 0.30), (0.70, 0.10, 0.40)),
    ((0.30, 0.60, 0.95), (0.85, 0.75, 0.10)),
    ((0.95, 0.95, 0.95), (0.15, 0.15, 0.15)),
    ((0.55, 0.30, 0.10), (0.95, 0.70, 0.55)),
    ((0.10, 0.50, 0.30), (0.90, 0.40, 0.60)),
]


@dataclass(frozen=True)
class SyntheticClass:
    class_id: int
    shape: str
    pattern: str
    period: int
    colors: Tuple[Tuple[float, float, float], Tuple[float, float, float]]


def make_classes() -> List[SyntheticClass]:
    out = []
    for idx in range(NUM_CLASSES):
        out.append(SyntheticClass(
            class_id=idx + 1,
            shape=SHAPES[idx % len(SHAPES)],
            pattern=PATTERNS[idx // len(SHAPES)],
            period=2 + idx // len(SHAPES),
            colors=PALETTES[idx],
        ))
    return out


CLASSES = {c.class_id: c for c in make_classes()}


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    train_classes: Tuple[int, ...]
    test_classes: Tuple[int, ...]

    @classmethod
    def for_fold(cls, fold: int) -> "FoldSplit":
        if not 0 <= fold < NUM_FOLDS:
            raise ValueError(f"fold must be in 0..{NUM_FOLDS - 1}, got {fold}")
        per_fold = NUM_CLASSES // NUM_FOLDS
        test = tuple(range(per_fold * fold + 1, per_fold * (fold + 1) + 1))
        train = tuple(c for c in sorted(CLASSES) if c not in test)
        return cls(fold, train, test)

    def classes(self, phase: str) -> Tuple[int, ...]:
        if phase == "train":
            return self.train_classes
        if phase == "test":
            return self.test_classes
        raise ValueError(f"phase must be 'train' or 'test', got {phase!r}")


@dataclass(frozen=True)
class PlacedObject:
    class_id: int
    cy: float
    cx: float
    radius: float


@dataclass
class Scene:
    image: torch.Tensor
    masks: Dict[int, torch.Tensor]


@dataclass
class Episode:
    supports: List[Tuple[torch.Tensor, torch.Tensor]]
    query_image: torch.Tensor
    query_mask: torch.Tensor
    class_id: int

    @property
    def shots(self) -> int:
        return len(self.supports)


# -------- rendering --------
def shape_mask(obj: PlacedObject, size: int = IMAGE_SIZE) -> np.ndarray:
    """Exact hard-edged footprint of a placed object (boolean size x size)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - obj.cy, xx - obj.cx
    r = obj.radius
    shape = CLASSES[obj.class_id].shape
    if shape == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if shape == "rectangle":
        return (np.abs(dy) <= 0.7 * r) & (np.abs(dx) <= r)
    if shape == "triangle":
        # apex up, base at cy + r
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2.0)
    if shape == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        arm = 0.35 * r
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if shape == "bar":
        return (np.abs(dy) <= 0.3 * r) & (np.abs(dx) <= 1.2 * r)
    raise ValueError(f"unknown shape {shape!r}")


def texture(cls: SyntheticClass, size: int = IMAGE_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if cls.pattern == "stripes":
        tone = (xx // cls.period) % 2 == 0
    else:
        tone = ((xx // cls.period) + (yy // cls.period)) % 2 == 0
    a, b = (np.asarray(c, dtype=np.float64)[:, None, None] for c in cls.colors)
    return np.where(tone[None], a, b)


def generate_scene(class_ids: Sequence[int], rng: np.random.Generator, size: int = IMAGE_SIZE) -> Scene:
    """
    Render objects in the given order (later objects occlude earlier ones) on
    a noisy gray background. Masks are the visible footprints, hence disjoint.
    """
    if not 1 <= len(class_ids) <= 1 + MAX_DISTRACTORS:
        raise ValueError(f"a scene holds 1..{1 + MAX_DISTRACTORS} objects, got {len(class_ids)}")
    image = np.clip(rng.normal(BACKGROUND_LEVEL, BACKGROUND_NOISE, size=(3, size, size)), 0.0, 1.0)
    owner = np.zeros((size, size), dtype=np.int64)
    for cid in class_ids:
        radius = rng.uniform(*SIZE_RANGE) * size
        margin = 1.2 * radius
        obj = PlacedObject(cid, float(rng.uniform(margin, size - margin)), float(rng.uniform(margin, size - margin)),
                           float(radius))
        footprint = shape_mask(obj, size)
        image = np.where(footprint[None], texture(CLASSES[cid], size), image)
        owner[footprint] = cid
    masks = {cid: torch.from_numpy((owner == cid).astype(np.uint8)) for cid in class_ids}
    return Scene(torch.from_numpy(image), masks)


# -------- episodes --------
def distractor_pool(split: FoldSplit, phase: str, class_id: int, mode: str = "phase") -> List[int]:
    if mode == "phase":
        return [c for c in split.classes(phase) if c != class_id]
    if mode == "any":
        return [c for c in CLASSES if c != class_id]
    raise ValueError(f"distractor mode must be one of {DISTRACTOR_MODES}, got {mode!r}")


def sample_episode(split: FoldSplit, phase: str, K: int, rng: np.random.Generator,
                   class_id: Optional[int] = None, size: int = IMAGE_SIZE, distractors: str = "phase") -> Episode:
    """
    One K-shot episode. The episode class is rendered last so its mask is never
    empty; distractors are drawn from `distractor_pool(..., distractors)`.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    pool = split.classes(phase)
    if not pool:
        raise ValueError(f"phase {phase!r} has no classes")
    if class_id is None:
        class_id = int(pool[int(rng.integers(len(pool)))])
    elif class_id not in pool:
        raise ValueError(f"class {class_id} is not in the {phase} classes of fold {split.fold}")
    others = distractor_pool(split, phase, class_id, distractors)

    pairs = []
    for _ in range(K + 1):
        n_distract = int(rng.integers(0, min(MAX_DISTRACTORS, len(others)) + 1))
        placed = [int(c) for c in rng.choice(others, size=n_distract, replace=False)] if n_distract else []
        scene = generate_scene(placed + [class_id], rng, size)
        pairs.append((scene.image, scene.masks[class_id]))
    query_image, query_mask = pairs[-1]
    logger.debug("%s episode: class %d, %d-shot", phase, class_id, K)
    return Episode(supports=pairs[:-1], query_image=query_image, query_mask=query_mask, class_id=class_id)


# -------- K-shot fusion --------
def kshot_average(protos: Sequence[torch.Tensor], priors: Sequence[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Element-wise means of K prototypes and K priors. Incremental mean, so K
    identical inputs give back exactly the 1-shot values.
    """
    if not protos or len(protos) != len(priors):
        raise DimensionError(f"need K >= 1 matching prototypes and priors, got {len(protos)} and {len(priors)}")
    proto, prior = protos[0].clone(), priors[0].clone()
    for k, (p, h) in enumerate(zip(protos[1:], priors[1:]), start=2):
        if p.shape != proto.shape or h.shape != prior.shape:
            raise DimensionError(f"shot {k} shapes {tuple(p.shape)}/{tuple(h.shape)} differ from "
                                 f"{tuple(proto.shape)}/{tuple(prior.shape)}")
        proto = proto + (p - proto) / k
        prior = prior + (h - prior) / k
    return proto, prior


def kshot_vote(pred_masks: Sequence[torch.Tensor], k: int) -> torch.Tensor:
    """Foreground where at least k of the K binary predictions say foreground."""
    K = len(pred_masks)
    if not 1 <= k <= K:
        raise ValueError(f"vote threshold k={k} outside 1..{K}")
    votes = torch.stack([(m == 1) for m in pred_masks]).sum(dim=0)
    return (votes >= k).to(torch.uint8)

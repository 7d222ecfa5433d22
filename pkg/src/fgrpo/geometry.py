"""Box overlap measures, optimal box assignment and the spatial grounding reward."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import BBox

_FOUR_OVER_PI_SQ = 4.0 / math.pi**2


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    total_score: float


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.width * a.height + b.width * b.height - inter
    return min(1.0, inter / union)


def ciou(a: BBox, b: BBox) -> float:
    """Complete IoU: IoU minus a center-distance term minus an aspect-ratio term.

    The value lies in (-1.5, 1] and equals 1 only for identical boxes. It is not
    clamped here; the grounding reward clamps per pair.
    """
    if a == b:
        return 1.0
    overlap = iou(a, b)
    # squared distance between centers (symmetric form keeps ciou(a,b) == ciou(b,a) bitwise)
    dx = (a.x1 + a.x2) - (b.x1 + b.x2)
    dy = (a.y1 + a.y2) - (b.y1 + b.y2)
    rho2 = (dx * dx + dy * dy) / 4.0
    cw = max(a.x2, b.x2) - min(a.x1, b.x1)
    ch = max(a.y2, b.y2) - min(a.y1, b.y1)
    c2 = cw * cw + ch * ch
    v = _FOUR_OVER_PI_SQ * (math.atan(a.width / a.height) - math.atan(b.width / b.height)) ** 2
    denom = (1.0 - overlap) + v
    alpha = 0.0 if denom == 0.0 else v / denom
    return overlap - rho2 / c2 - alpha * v


def _score_matrix(pred: Sequence[BBox], gt: Sequence[BBox], clamp: bool) -> np.ndarray:
    scores = np.empty((len(pred), len(gt)))
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            s = ciou(p, g)
            scores[i, j] = min(max(s, 0.0), 1.0) if clamp else s
    return scores


def hungarian_match(pred: Sequence[BBox], gt: Sequence[BBox], clamp: bool = True) -> Assignment:
    """Injective pred->gt assignment of size min(N, M) maximizing summed CIoU.

    With ``clamp`` (the default, used by the grounding reward) each pair scores
    max(CIoU, 0).
    """
    if not pred or not gt:
        return Assignment(pairs=(), total_score=0.0)
    scores = _score_matrix(pred, gt, clamp)
    rows, cols = linear_sum_assignment(scores, maximize=True)
    pairs = tuple(sorted((int(r), int(c)) for r, c in zip(rows, cols)))
    total = math.fsum(scores[r, c] for r, c in pairs)
    return Assignment(pairs=pairs, total_score=total)


def spatial_grounding_reward(pred: Sequence[BBox], gt: Sequence[BBox]) -> float:
    if not pred:
        return 0.0
    if not gt:
        raise ValueError("spatial grounding needs at least one ground-truth box")
    match = hungarian_match(pred, gt, clamp=True)
    return min(1.0, match.total_score / max(len(pred), len(gt)))

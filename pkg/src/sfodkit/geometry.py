"""Axis-aligned box arithmetic and IoU-threshold clustering.

Boxes use the corner convention ``(x1, y1, x2, y2)`` in absolute pixels with
``x2 > x1`` and ``y2 > y1``.  Clustering is the greedy single-pass grouping
used by every fusion strategy: a detection joins the first existing cluster
that contains a member overlapping it with IoU strictly above the threshold,
otherwise it opens a new cluster.  Class information is ignored here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError

__all__ = ["Box", "iou", "cluster", "cluster_indices"]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, corner form, strictly positive area."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidInputError(f"box coordinates must be finite, got {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InvalidInputError(f"degenerate box (needs x2 > x1 and y2 > y1): {coords}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=float)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when disjoint, 1 when equal."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def cluster_indices(boxes: Sequence[Box], beta: float) -> List[List[int]]:
    """Greedy single-pass clustering over box indices, input order preserved.

    Each box joins the first cluster containing a member with IoU > beta,
    else starts a new cluster.  Callers are responsible for pre-sorting the
    boxes into the canonical order when determinism across sources matters.
    """
    if not (0.0 < beta < 1.0):
        raise InvalidInputError(f"beta must lie in (0, 1), got {beta}")
    clusters: List[List[int]] = []
    for k, box in enumerate(boxes):
        placed = False
        for members in clusters:
            if any(iou(box, boxes[j]) > beta for j in members):
                members.append(k)
                placed = True
                break
        if not placed:
            clusters.append([k])
    return clusters


def cluster(
    detections: Sequence[Tuple[Box, np.ndarray]], beta: float
) -> List[List[Tuple[Box, np.ndarray]]]:
    """Partition (box, probs) pairs into IoU-linked clusters.

    Class probabilities are carried along but never influence the grouping.
    Empty input yields an empty partition.
    """
    boxes = [box for box, _ in detections]
    return [[detections[j] for j in members] for members in cluster_indices(boxes, beta)]

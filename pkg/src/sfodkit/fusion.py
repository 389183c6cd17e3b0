"""Entropy-weighted dual-source pseudo-label fusion and baseline strategies.

The core strategy clusters the union of two detection sources class-agnostically
by IoU, weights each cluster member by the inverse of its Shannon entropy, and
emits one fused (box, probability vector, label) triple per cluster.  The three
baselines it is compared against are classwise NMS, classwise weighted box
fusion (WBF), and remove-individual (RI), which keeps only clusters corroborated
by both sources.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError
from .geometry import Box, cluster_indices

__all__ = [
    "Detection",
    "FusedLabel",
    "FusionConfig",
    "shannon_entropy",
    "entropy_weights",
    "fuse_cluster",
    "depf",
    "nms",
    "wbf",
    "remove_individual",
]

DEFAULT_BETA = 0.7
DEFAULT_EPSILON = 1e-8


@dataclass(frozen=True)
class Detection:
    """A box plus a per-class probability vector."""

    box: Box
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=float))
        if self.probs.ndim != 1 or self.probs.size == 0:
            raise InvalidInputError("probs must be a non-empty 1-D vector")

    @property
    def label(self) -> int:
        return int(np.argmax(self.probs))

    @property
    def score(self) -> float:
        return float(np.max(self.probs))


@dataclass(frozen=True)
class FusedLabel:
    """Fused box, fused probability vector, and the argmax class index."""

    box: Box
    probs: np.ndarray
    label: int


@dataclass
class FusionConfig:
    beta: float = DEFAULT_BETA
    epsilon: float = DEFAULT_EPSILON
    method: str = "depf"
    _METHODS = ("depf", "nms", "wbf", "ri")

    def __post_init__(self):
        if not (0.0 < self.beta < 1.0):
            raise InvalidInputError(f"beta must lie in (0, 1), got {self.beta}")
        if self.epsilon <= 0.0:
            raise InvalidInputError(f"epsilon must be positive, got {self.epsilon}")
        if self.method not in self._METHODS:
            raise InvalidInputError(f"unknown fusion method {self.method!r}")


def shannon_entropy(probs: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> float:
    """Entropy -sum(p * log(p + epsilon)), natural log, clamped at zero.

    The epsilon inside the log makes one-hot vectors produce a tiny negative
    value; that is clamped to 0 so weights stay finite and non-negative.
    """
    p = np.asarray(probs, dtype=float)
    if np.any(p < 0.0):
        raise InvalidInputError("probabilities must be non-negative")
    h = float(-np.sum(p * np.log(p + epsilon)))
    return max(h, 0.0)


def entropy_weights(members: Sequence[Detection], epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Normalized inverse-entropy weights for one cluster; sums to 1."""
    if len(members) == 0:
        raise InvalidInputError("cluster must be non-empty")
    w = np.array([1.0 / (shannon_entropy(d.probs, epsilon) + epsilon) for d in members])
    return w / w.sum()


def fuse_cluster(members: Sequence[Detection], epsilon: float = DEFAULT_EPSILON) -> FusedLabel:
    """Entropy-weighted mean of boxes and probability vectors for one cluster."""
    w = entropy_weights(members, epsilon)
    boxes = np.stack([d.box.as_array() for d in members])
    probs = np.stack([d.probs for d in members])
    fused_box = w @ boxes
    fused_probs = w @ probs
    return FusedLabel(
        box=Box(*fused_box),
        probs=fused_probs,
        label=int(np.argmax(fused_probs)),
    )


def _canonical_order(tagged: List[Tuple[Detection, int]]) -> List[Tuple[Detection, int]]:
    """Deterministic ordering: descending max probability, then coordinates,
    then source index.  High-confidence boxes anchor clusters first."""

    def key(item: Tuple[Detection, int]):
        det, source = item
        b = det.box
        return (-det.score, b.x1, b.y1, b.x2, b.y2, source)

    return sorted(tagged, key=key)


def _check_class_counts(source_a: Sequence[Detection], source_b: Sequence[Detection]) -> None:
    counts = {d.probs.size for d in source_a} | {d.probs.size for d in source_b}
    if len(counts) > 1:
        raise InvalidInputError(f"class-count mismatch between sources: {sorted(counts)}")


def depf(
    source_a: Sequence[Detection],
    source_b: Sequence[Detection],
    cfg: FusionConfig | None = None,
) -> List[FusedLabel]:
    """Dual-source entropy-weighted fusion.

    Union of both sources, canonical sort, class-agnostic IoU clustering at
    cfg.beta, then one entropy-weighted fuse per cluster.  Output order follows
    cluster creation order.
    """
    cfg = cfg or FusionConfig()
    _check_class_counts(source_a, source_b)
    tagged = [(d, 0) for d in source_a] + [(d, 1) for d in source_b]
    ordered = [d for d, _ in _canonical_order(tagged)]
    clusters = cluster_indices([d.box for d in ordered], cfg.beta)
    return [fuse_cluster([ordered[j] for j in members], cfg.epsilon) for members in clusters]


def nms(detections: Sequence[Detection], iou_thresh: float = DEFAULT_BETA) -> List[Detection]:
    """Classwise greedy non-maximum suppression.

    Detections are grouped by argmax class; within a class, boxes are visited
    in descending own-class probability and any later box with IoU > thresh to
    a kept box is dropped.  Output keeps the per-class descending-score order,
    classes in ascending index order.
    """
    by_class: dict[int, List[Detection]] = {}
    for d in detections:
        by_class.setdefault(d.label, []).append(d)
    kept: List[Detection] = []
    for cls in sorted(by_class):
        group = sorted(
            by_class[cls],
            key=lambda d: (-d.probs[cls], d.box.x1, d.box.y1, d.box.x2, d.box.y2),
        )
        survivors: List[Detection] = []
        for d in group:
            if all(_iou_det(d, s) <= iou_thresh for s in survivors):
                survivors.append(d)
        kept.extend(survivors)
    return kept


def _iou_det(a: Detection, b: Detection) -> float:
    from .geometry import iou

    return iou(a.box, b.box)


def wbf(
    source_a: Sequence[Detection],
    source_b: Sequence[Detection],
    iou_thresh: float = DEFAULT_BETA,
) -> List[FusedLabel]:
    """Classwise weighted box fusion baseline.

    Unlike the entropy-weighted strategy, boxes merge only within the same
    argmax class.  The fused box is the confidence-weighted coordinate mean
    (weight = max-class probability); the fused probability vector is the
    arithmetic mean of member vectors, so the fused confidence is the mean of
    member confidences.
    """
    _check_class_counts(source_a, source_b)
    tagged = [(d, 0) for d in source_a] + [(d, 1) for d in source_b]
    ordered = [d for d, _ in _canonical_order(tagged)]
    by_class: dict[int, List[Detection]] = {}
    for d in ordered:
        by_class.setdefault(d.label, []).append(d)
    fused: List[FusedLabel] = []
    for cls in sorted(by_class):
        group = by_class[cls]
        for members_idx in cluster_indices([d.box for d in group], iou_thresh):
            members = [group[j] for j in members_idx]
            conf = np.array([d.score for d in members])
            w = conf / conf.sum()
            box = w @ np.stack([d.box.as_array() for d in members])
            probs = np.mean(np.stack([d.probs for d in members]), axis=0)
            fused.append(FusedLabel(box=Box(*box), probs=probs, label=cls))
    return fused


def remove_individual(
    source_a: Sequence[Detection],
    source_b: Sequence[Detection],
    iou_thresh: float = DEFAULT_BETA,
    epsilon: float = DEFAULT_EPSILON,
) -> List[FusedLabel]:
    """Keep only clusters corroborated by both sources, then fuse them."""
    _check_class_counts(source_a, source_b)
    tagged = _canonical_order([(d, 0) for d in source_a] + [(d, 1) for d in source_b])
    clusters = cluster_indices([d.box for d, _ in tagged], iou_thresh)
    fused: List[FusedLabel] = []
    for members_idx in clusters:
        sources = {tagged[j][1] for j in members_idx}
        if sources == {0, 1}:
            fused.append(fuse_cluster([tagged[j][0] for j in members_idx], epsilon))
    return fused

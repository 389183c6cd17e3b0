"""Prototype-based instance feature alignment.

Instance features are pooled from a feature map with bilinear RoIAlign
(2x2 samples per bin, averaged), spatially mean-pooled to a channel vector,
averaged per class, and folded into a momentum prototype bank.  The
contrastive loss is an InfoNCE over L2-normalized instance features and
prototypes, restricted to initialized prototypes, with an analytic gradient
w.r.t. the raw instance vectors (prototypes are constants).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError
from .geometry import Box

__all__ = [
    "FeatureMap",
    "PrototypeBank",
    "InstanceFeature",
    "roi_align",
    "pool_instance",
    "batch_class_means",
    "update_prototypes",
    "pifa_loss",
]

DEFAULT_MU = 0.9
DEFAULT_TAU = 0.07
ROI_OUTPUT = (7, 7)


@dataclass
class FeatureMap:
    """C x H x W feature tensor plus the pixel size of the source image."""

    data: np.ndarray
    image_width: float
    image_height: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3:
            raise InvalidInputError(f"feature map must be C x H x W, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidInputError("feature map entries must be finite")
        if self.image_width <= 0 or self.image_height <= 0:
            raise InvalidInputError("image size must be positive")


@dataclass
class PrototypeBank:
    """Momentum-averaged per-class anchor vectors.

    Uninitialized rows are all-zero; the first observed batch mean for a class
    sets its row directly instead of blending with zero.
    """

    num_classes: int
    channels: int
    mu: float = DEFAULT_MU
    prototypes: np.ndarray = field(default=None)  # type: ignore[assignment]
    initialized: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if not (0.0 <= self.mu <= 1.0):
            raise InvalidInputError(f"mu must lie in [0, 1], got {self.mu}")
        if self.prototypes is None:
            self.prototypes = np.zeros((self.num_classes, self.channels))
        else:
            self.prototypes = np.asarray(self.prototypes, dtype=float)
        if self.initialized is None:
            self.initialized = np.zeros(self.num_classes, dtype=bool)
        else:
            self.initialized = np.asarray(self.initialized, dtype=bool)
        if self.prototypes.shape != (self.num_classes, self.channels):
            raise InvalidInputError("prototype matrix must be K x C")
        if self.initialized.shape != (self.num_classes,):
            raise InvalidInputError("initialized mask must have length K")


@dataclass(frozen=True)
class InstanceFeature:
    vector: np.ndarray
    label: int

    def __post_init__(self):
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=float))
        if self.vector.ndim != 1:
            raise InvalidInputError("instance feature must be a 1-D vector")


def _bilinear_sample(data: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample a C x H x W map at continuous grid coordinates.

    The value at index (i, j) sits at continuous (x, y) = (j + 0.5, i + 0.5);
    samples outside the grid clamp to the border cells.
    """
    _, h, w = data.shape
    u = xs - 0.5
    v = ys - 0.5
    x0 = np.floor(u).astype(int)
    y0 = np.floor(v).astype(int)
    fx = u - x0
    fy = v - y0
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    top = data[:, y0c, x0c] * (1 - fx) + data[:, y0c, x1c] * fx
    bot = data[:, y1c, x0c] * (1 - fx) + data[:, y1c, x1c] * fx
    return top * (1 - fy) + bot * fy


def _clip_box_to_image(box: Box, fmap: FeatureMap) -> Box:
    x1 = min(max(box.x1, 0.0), fmap.image_width)
    x2 = min(max(box.x2, 0.0), fmap.image_width)
    y1 = min(max(box.y1, 0.0), fmap.image_height)
    y2 = min(max(box.y2, 0.0), fmap.image_height)
    if not (x2 > x1 and y2 > y1):
        raise InvalidInputError(f"box has zero area after clipping to image bounds: {box}")
    return Box(x1, y1, x2, y2)


def roi_align(
    fmap: FeatureMap,
    box: Box,
    output_size: Tuple[int, int] = ROI_OUTPUT,
    samples_per_dim: int = 2,
) -> np.ndarray:
    """Bilinear RoIAlign: C x R x R tensor of per-bin averaged samples.

    The box is clipped to the image, mapped to feature-grid coordinates by the
    grid/image size ratio, split into output bins, and each bin is averaged
    over a regular samples_per_dim x samples_per_dim grid of bilinear samples.
    """
    box = _clip_box_to_image(box, fmap)
    _, h, w = fmap.data.shape
    rows, cols = output_size
    gx1 = box.x1 * (w / fmap.image_width)
    gx2 = box.x2 * (w / fmap.image_width)
    gy1 = box.y1 * (h / fmap.image_height)
    gy2 = box.y2 * (h / fmap.image_height)
    bin_w = (gx2 - gx1) / cols
    bin_h = (gy2 - gy1) / rows
    s = samples_per_dim
    # Regularly spaced sample offsets inside one bin: (p + 0.5)/s for p < s.
    off = (np.arange(s) + 0.5) / s
    xs = gx1 + (np.arange(cols)[:, None] + off[None, :]) * bin_w  # cols x s
    ys = gy1 + (np.arange(rows)[:, None] + off[None, :]) * bin_h  # rows x s
    sample_x = np.broadcast_to(xs[None, :, None, :], (rows, cols, s, s)).reshape(-1)
    sample_y = np.broadcast_to(ys[:, None, :, None], (rows, cols, s, s)).reshape(-1)
    vals = _bilinear_sample(fmap.data, sample_x, sample_y)  # C x (rows*cols*s*s)
    vals = vals.reshape(fmap.data.shape[0], rows, cols, s * s)
    return vals.mean(axis=-1)


def pool_instance(fmap: FeatureMap, box: Box) -> np.ndarray:
    """RoIAlign to C x 7 x 7 then spatial mean, giving one C-vector per box."""
    return roi_align(fmap, box).mean(axis=(1, 2))


def batch_class_means(
    instances: Sequence[InstanceFeature],
) -> Dict[int, Tuple[np.ndarray, int]]:
    """Per-class arithmetic mean and count; absent classes are absent keys."""
    sums: Dict[int, np.ndarray] = {}
    counts: Dict[int, int] = {}
    for inst in instances:
        if inst.label in sums:
            sums[inst.label] = sums[inst.label] + inst.vector
            counts[inst.label] += 1
        else:
            sums[inst.label] = inst.vector.astype(float).copy()
            counts[inst.label] = 1
    return {c: (sums[c] / counts[c], counts[c]) for c in sums}


def update_prototypes(
    bank: PrototypeBank, class_means: Dict[int, Tuple[np.ndarray, int]]
) -> PrototypeBank:
    """Momentum update p <- mu*p + (1-mu)*f for classes present in the batch.

    A class seen for the first time takes the batch mean directly.  Classes
    absent from the batch keep their previous prototype.  Returns a new bank.
    """
    protos = bank.prototypes.copy()
    init = bank.initialized.copy()
    for cls, (mean, _count) in class_means.items():
        if not (0 <= cls < bank.num_classes):
            raise InvalidInputError(f"class index {cls} out of range for K={bank.num_classes}")
        mean = np.asarray(mean, dtype=float)
        if mean.shape != (bank.channels,):
            raise InvalidInputError("class mean has wrong channel count")
        if init[cls]:
            protos[cls] = bank.mu * protos[cls] + (1.0 - bank.mu) * mean
        else:
            protos[cls] = mean
            init[cls] = True
    return PrototypeBank(
        num_classes=bank.num_classes,
        channels=bank.channels,
        mu=bank.mu,
        prototypes=protos,
        initialized=init,
    )


def pifa_loss(
    instances: Sequence[InstanceFeature],
    bank: PrototypeBank,
    tau: float = DEFAULT_TAU,
) -> Tuple[float, List[np.ndarray]]:
    """Prototype-contrastive InfoNCE loss and per-instance gradients.

    Instance vectors and prototypes are L2-normalized before scoring; the
    softmax denominator ranges over initialized prototypes only; the loss is
    averaged over instances.  Gradients are w.r.t. the raw instance vectors.
    """
    if tau <= 0.0:
        raise InvalidInputError(f"tau must be positive, got {tau}")
    init_classes = np.flatnonzero(bank.initialized)
    if init_classes.size == 0:
        raise InvalidInputError("no initialized prototypes")
    if len(instances) == 0:
        raise InvalidInputError("instance list must be non-empty")
    col_of = {int(c): j for j, c in enumerate(init_classes)}
    for inst in instances:
        if inst.label not in col_of:
            raise InvalidInputError(f"instance labeled with uninitialized class {inst.label}")

    protos = bank.prototypes[init_classes]
    p_norm = np.maximum(np.linalg.norm(protos, axis=1, keepdims=True), 1e-12)
    p_hat = protos / p_norm

    m = len(instances)
    total = 0.0
    grads: List[np.ndarray] = []
    for inst in instances:
        f = inst.vector
        f_norm = max(float(np.linalg.norm(f)), 1e-12)
        f_hat = f / f_norm
        logits = (p_hat @ f_hat) / tau
        shifted = logits - logits.max()
        logsumexp = float(np.log(np.sum(np.exp(shifted))) + logits.max())
        j = col_of[inst.label]
        total += logsumexp - float(logits[j])
        softmax = np.exp(shifted) / np.sum(np.exp(shifted))
        onehot = np.zeros_like(softmax)
        onehot[j] = 1.0
        g_fhat = ((softmax - onehot) @ p_hat) / tau / m
        # Chain through normalization: df_hat/df = (I - f_hat f_hat^T) / ||f||
        grads.append((g_fhat - float(g_fhat @ f_hat) * f_hat) / f_norm)
    return total / m, grads

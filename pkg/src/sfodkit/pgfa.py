"""Patch-weighted global feature alignment.

Per-image patch weights come from the pairwise cosine-similarity matrix of the
foundation-model patch features: a temperature softmax per row, a top-k sum per
patch, and a final normalization across patches.  The alignment loss is the
weighted cosine distance between foundation-model and student patches, with an
analytic gradient taken with respect to the raw student features only (the
foundation-model side and the weights are constants).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "PatchWeightConfig",
    "l2_normalize_rows",
    "similarity_matrix",
    "patch_weights",
    "pgfa_loss",
]

DEFAULT_TAU = 0.07
DEFAULT_TOP_K = 50
DEFAULT_EPSILON = 1e-8


@dataclass
class PatchWeightConfig:
    tau: float = DEFAULT_TAU
    top_k: int = DEFAULT_TOP_K

    def __post_init__(self):
        if self.tau <= 0.0:
            raise InvalidInputError(f"tau must be positive, got {self.tau}")
        if self.top_k < 1:
            raise InvalidInputError(f"top_k must be >= 1, got {self.top_k}")


def l2_normalize_rows(feats: np.ndarray, epsilon: float = 1e-12) -> np.ndarray:
    """Divide each row by max(row norm, epsilon); zero rows stay zero."""
    feats = np.asarray(feats, dtype=float)
    norms = np.linalg.norm(feats, axis=-1, keepdims=True)
    return feats / np.maximum(norms, epsilon)


def similarity_matrix(feats_hat: np.ndarray) -> np.ndarray:
    """Pairwise dot products of (already normalized) rows: S = F F^T."""
    feats_hat = np.asarray(feats_hat, dtype=float)
    return feats_hat @ feats_hat.T


def patch_weights(
    feats: np.ndarray,
    cfg: PatchWeightConfig | None = None,
    epsilon: float = DEFAULT_EPSILON,
) -> np.ndarray:
    """Per-patch alignment weights for one image's N x C feature matrix.

    Steps: L2-normalize rows, cosine similarity matrix, row-wise temperature
    softmax, per-row sum of the top-k entries (the diagonal is eligible), and
    normalization of the resulting vector across all patches.
    """
    cfg = cfg or PatchWeightConfig()
    feats = np.asarray(feats, dtype=float)
    if feats.ndim != 2:
        raise InvalidInputError(f"expected an N x C matrix, got shape {feats.shape}")
    n = feats.shape[0]
    if cfg.top_k > n:
        raise InvalidInputError(f"top_k={cfg.top_k} exceeds patch count N={n}")
    s = similarity_matrix(l2_normalize_rows(feats))
    logits = s / cfg.tau
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    p = e / e.sum(axis=1, keepdims=True)
    topk = np.sort(p, axis=1)[:, n - cfg.top_k :]
    w = topk.sum(axis=1)
    return w / (w.sum() + epsilon)


def pgfa_loss(
    vfm: np.ndarray,
    student: np.ndarray,
    cfg: PatchWeightConfig | None = None,
    epsilon: float = DEFAULT_EPSILON,
) -> Tuple[float, np.ndarray]:
    """Weighted cosine alignment loss and its gradient w.r.t. raw student features.

    Both inputs are B x N x C tensors with identical shapes.  Weights are
    derived from the vfm features alone and treated as constants, so the
    gradient of each term w.r.t. the raw student row s is
    ``-w * (d_hat - cos * s_hat) / ||s||`` scaled by 1/B.
    """
    cfg = cfg or PatchWeightConfig()
    vfm = np.asarray(vfm, dtype=float)
    student = np.asarray(student, dtype=float)
    if vfm.ndim != 3 or student.ndim != 3:
        raise InvalidInputError("expected B x N x C tensors")
    if vfm.shape != student.shape:
        raise InvalidInputError(f"shape mismatch: vfm {vfm.shape} vs student {student.shape}")
    if not (np.all(np.isfinite(vfm)) and np.all(np.isfinite(student))):
        raise InvalidInputError("features must be finite")
    batch, _, _ = vfm.shape

    norm_guard = 1e-12
    d_norm = np.maximum(np.linalg.norm(vfm, axis=-1, keepdims=True), norm_guard)
    s_norm = np.maximum(np.linalg.norm(student, axis=-1, keepdims=True), norm_guard)
    d_hat = vfm / d_norm
    s_hat = student / s_norm
    cos = np.sum(d_hat * s_hat, axis=-1)  # B x N

    weights = np.stack([patch_weights(vfm[b], cfg, epsilon) for b in range(batch)])
    loss = float(np.sum(weights * (1.0 - cos)) / batch)

    # d(cos)/ds = (d_hat - cos * s_hat) / ||s||
    coeff = (weights / batch)[..., None]
    grad = -coeff * (d_hat - cos[..., None] * s_hat) / s_norm
    return loss, grad

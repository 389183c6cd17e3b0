"""Seeded synthetic scenes for desk-scale fusion and adaptation experiments.

A scene stands in for one unlabeled target image: hidden ground-truth boxes
with true classes, two noisy detection sources with independent error modes,
and feature tensors whose RoI statistics are class-dependent.

The teacher-like source misses detections, jitters boxes slightly, and its
raw-feature noise is concentrated along one confusable class pair, so a linear
scorer on pooled features confuses exactly that pair.  The VFM-like source has
looser boxes, broader probability vectors, and an independent confusion pair.
Because the two error modes are independent, fusing the sources has headroom
over either one alone; ground truth is kept only for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .fusion import Detection, FusedLabel, FusionConfig, depf, remove_individual
from .geometry import Box, iou
from .pifa import FeatureMap

__all__ = [
    "SceneParams",
    "SyntheticScene",
    "class_directions",
    "patch_transform",
    "make_scene",
    "make_scenes",
    "pseudo_label_metrics",
    "fusion_strategy_benchmark",
]

TEACHER_PAIR = (0, 1)
VFM_PAIR = (2, 3)


@dataclass
class SceneParams:
    num_classes: int = 6
    channels: int = 16
    image_size: float = 256.0
    map_size: int = 32
    num_patches: int = 36
    min_instances: int = 3
    max_instances: int = 6
    miss_rate: float = 0.10
    confusion_rate: float = 0.25
    teacher_jitter: float = 0.02
    vfm_jitter: float = 0.04
    pair_noise: float = 1.48  # scale of the confusable-pair feature noise
    background_noise: float = 0.05


@dataclass
class SyntheticScene:
    seed: int
    params: SceneParams
    ground_truth: List[Tuple[Box, int]]
    teacher_dets: List[Detection]
    vfm_dets: List[Detection]
    raw_map: FeatureMap
    vfm_map: FeatureMap
    raw_patches: np.ndarray  # N x C student-side input patches
    vfm_patches: np.ndarray  # N x C foundation-model patches


def class_directions(params: SceneParams, which: str) -> np.ndarray:
    """Deterministic orthonormal class direction vectors for a feature space."""
    offset = {"raw": 11, "vfm": 29}[which]
    rng = np.random.default_rng(9000 + offset + 100 * params.num_classes + params.channels)
    m = rng.normal(size=(params.channels, params.channels))
    q, _ = np.linalg.qr(m)
    return q[: params.num_classes]


def patch_transform(params: SceneParams) -> np.ndarray:
    """Fixed target transform relating student input patches to VFM patches."""
    rng = np.random.default_rng(7000 + params.channels)
    m = rng.normal(size=(params.channels, params.channels))
    q, _ = np.linalg.qr(m)
    return q


def _partner(cls: int, pair: Tuple[int, int]) -> int | None:
    if cls == pair[0]:
        return pair[1]
    if cls == pair[1]:
        return pair[0]
    return None


def _jitter_box(box: Box, sigma_frac: float, rng: np.random.Generator, limit: float) -> Box:
    w = box.x2 - box.x1
    h = box.y2 - box.y1
    d = rng.normal(scale=[sigma_frac * w, sigma_frac * h, sigma_frac * w, sigma_frac * h])
    x1 = float(np.clip(box.x1 + d[0], 0.0, limit - 2.0))
    y1 = float(np.clip(box.y1 + d[1], 0.0, limit - 2.0))
    x2 = float(np.clip(box.x2 + d[2], x1 + 1.0, limit))
    y2 = float(np.clip(box.y2 + d[3], y1 + 1.0, limit))
    return Box(x1, y1, x2, y2)


def _noisy_probs(
    true_cls: int,
    flipped_to: int | None,
    num_classes: int,
    true_conf: float,
    rng: np.random.Generator,
) -> np.ndarray:
    probs = np.full(num_classes, (1.0 - true_conf) / (num_classes - 1))
    probs[true_cls] = true_conf
    if flipped_to is not None:
        # High-entropy near-tie with the wrong class on top.
        probs = np.full(num_classes, 0.15 / (num_classes - 2))
        probs[flipped_to] = 0.50
        probs[true_cls] = 0.35
    jitter = 1.0 + 0.02 * rng.random(num_classes)
    probs = probs * jitter
    return probs / probs.sum()


def make_scene(seed: int, params: SceneParams | None = None) -> SyntheticScene:
    """Generate one scene; fully reproducible from the seed."""
    params = params or SceneParams()
    rng = np.random.default_rng(seed)
    k, c = params.num_classes, params.channels
    size = params.image_size
    u = class_directions(params, "raw")
    v = class_directions(params, "vfm")
    w_true = patch_transform(params)

    n_inst = int(rng.integers(params.min_instances, params.max_instances + 1))
    ground_truth: List[Tuple[Box, int]] = []
    for _ in range(n_inst):
        bw = float(rng.uniform(40.0, 90.0))
        bh = float(rng.uniform(40.0, 90.0))
        cx = float(rng.uniform(bw / 2, size - bw / 2))
        cy = float(rng.uniform(bh / 2, size - bh / 2))
        ground_truth.append(
            (Box(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2), int(rng.integers(k)))
        )

    m = params.map_size
    raw_data = params.background_noise * rng.normal(size=(c, m, m))
    vfm_data = params.background_noise * rng.normal(size=(c, m, m))
    scale = m / size
    for box, cls in ground_truth:
        gx1, gx2 = int(box.x1 * scale), max(int(box.x1 * scale) + 1, int(np.ceil(box.x2 * scale)))
        gy1, gy2 = int(box.y1 * scale), max(int(box.y1 * scale) + 1, int(np.ceil(box.y2 * scale)))
        partner_t = _partner(cls, TEACHER_PAIR)
        eta = float(rng.normal())
        raw_vec = u[cls] + 0.15 * rng.normal(size=c)
        if partner_t is not None:
            raw_vec = raw_vec + params.pair_noise * eta * u[partner_t]
        vfm_vec = v[cls] + 0.15 * rng.normal(size=c)
        raw_data[:, gy1:gy2, gx1:gx2] += raw_vec[:, None, None]
        vfm_data[:, gy1:gy2, gx1:gx2] += vfm_vec[:, None, None]

    teacher_dets: List[Detection] = []
    vfm_dets: List[Detection] = []
    for box, cls in ground_truth:
        if rng.random() >= params.miss_rate:
            partner = _partner(cls, TEACHER_PAIR)
            flipped = partner if (partner is not None and rng.random() < params.confusion_rate) else None
            teacher_dets.append(
                Detection(
                    box=_jitter_box(box, params.teacher_jitter, rng, size),
                    probs=_noisy_probs(cls, flipped, k, 0.85, rng),
                )
            )
        if rng.random() >= params.miss_rate:
            partner = _partner(cls, VFM_PAIR)
            flipped = partner if (partner is not None and rng.random() < params.confusion_rate) else None
            vfm_dets.append(
                Detection(
                    box=_jitter_box(box, params.vfm_jitter, rng, size),
                    probs=_noisy_probs(cls, flipped, k, 0.75, rng),
                )
            )

    raw_patches = rng.normal(size=(params.num_patches, c))
    vfm_patches = raw_patches @ w_true + 0.05 * rng.normal(size=(params.num_patches, c))

    return SyntheticScene(
        seed=seed,
        params=params,
        ground_truth=ground_truth,
        teacher_dets=teacher_dets,
        vfm_dets=vfm_dets,
        raw_map=FeatureMap(data=raw_data, image_width=size, image_height=size),
        vfm_map=FeatureMap(data=vfm_data, image_width=size, image_height=size),
        raw_patches=raw_patches,
        vfm_patches=vfm_patches,
    )


def make_scenes(base_seed: int, count: int, params: SceneParams | None = None) -> List[SyntheticScene]:
    params = params or SceneParams()
    return [make_scene(base_seed + i, params) for i in range(count)]


def pseudo_label_metrics(
    predictions: Sequence[Tuple[Box, int, float]],
    ground_truth: Sequence[Tuple[Box, int]],
    iou_thresh: float = 0.5,
) -> Tuple[float, float, float]:
    """Greedy-matched precision, recall, F1 of (box, label, score) predictions."""
    order = sorted(range(len(predictions)), key=lambda i: -predictions[i][2])
    matched = [False] * len(ground_truth)
    tp = 0
    for i in order:
        box, label, _score = predictions[i]
        best, best_iou = -1, iou_thresh
        for g, (gbox, gcls) in enumerate(ground_truth):
            if matched[g] or gcls != label:
                continue
            overlap = iou(box, gbox)
            if overlap >= best_iou:
                best, best_iou = g, overlap
        if best >= 0:
            matched[best] = True
            tp += 1
    precision = tp / len(predictions) if predictions else 0.0
    recall = tp / len(ground_truth) if ground_truth else 0.0
    if precision + recall == 0.0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def _det_triples(dets: Sequence[Detection]) -> List[Tuple[Box, int, float]]:
    return [(d.box, d.label, d.score) for d in dets]


def _fused_triples(fused: Sequence[FusedLabel]) -> List[Tuple[Box, int, float]]:
    return [(f.box, f.label, float(f.probs[f.label])) for f in fused]


def scene_set_f1(
    scenes: Sequence[SyntheticScene],
    strategy: str,
    cfg: FusionConfig | None = None,
) -> float:
    """Pooled F1 of one labeling strategy over a list of scenes."""
    cfg = cfg or FusionConfig()
    preds: List[Tuple[Box, int, float]] = []
    gts: List[Tuple[Box, int]] = []
    offset = 0.0
    for scene in scenes:
        # Shift each scene into its own coordinate band so boxes never
        # cross-match between scenes when pooled.
        def shift(box: Box) -> Box:
            return Box(box.x1 + offset, box.y1, box.x2 + offset, box.y2)

        if strategy == "depf":
            triples = _fused_triples(depf(scene.teacher_dets, scene.vfm_dets, cfg))
        elif strategy == "ri":
            triples = _fused_triples(
                remove_individual(scene.teacher_dets, scene.vfm_dets, cfg.beta, cfg.epsilon)
            )
        elif strategy == "teacher":
            triples = _det_triples(scene.teacher_dets)
        elif strategy == "vfm":
            triples = _det_triples(scene.vfm_dets)
        else:
            raise ValueError(f"unknown strategy {strategy!r}")
        preds.extend((shift(b), lbl, s) for b, lbl, s in triples)
        gts.extend((shift(b), cls) for b, cls in scene.ground_truth)
        offset += scene.params.image_size * 2.0
    _, _, f1 = pseudo_label_metrics(preds, gts)
    return f1


def fusion_strategy_benchmark(
    num_seeds: int = 100,
    base_seed: int = 0,
    params: SceneParams | None = None,
    cfg: FusionConfig | None = None,
) -> Dict[str, np.ndarray]:
    """Per-seed F1 of each strategy on one scene per seed."""
    params = params or SceneParams()
    results = {name: np.zeros(num_seeds) for name in ("depf", "teacher", "vfm", "ri")}
    for i in range(num_seeds):
        scene = make_scene(base_seed + i, params)
        for name in results:
            results[name][i] = scene_set_f1([scene], name, cfg)
    return results

"""Desk-scale mean-teacher adaptation loop on synthetic scenes.

The "detector" is a deliberately small student: a feature transform G (C x C,
initialized to identity) and a per-class linear scorer A (K x C).  Each epoch,
the current teacher scores the teacher-source boxes, those detections are
fused with the static VFM-source detections, pooled instance features of the
fused boxes supervise the student through a softmax cross-entropy detection
loss, the patch-alignment and prototype-contrastive losses regularize G, and
the teacher tracks the student through the interval-scheduled EMA.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .ema import DEFAULT_ALPHA, DEFAULT_INTERVAL, EmaState, ema_step
from .errors import InvalidInputError
from .fusion import Detection, FusionConfig, depf
from .geometry import Box
from .pgfa import PatchWeightConfig, pgfa_loss
from .pifa import InstanceFeature, PrototypeBank, batch_class_means, pifa_loss, pool_instance
from .synthetic import (
    SyntheticScene,
    class_directions,
    pseudo_label_metrics,
    scene_set_f1,
)

__all__ = [
    "TrainerConfig",
    "EpochRecord",
    "AdaptationReport",
    "total_loss",
    "run_adaptation",
    "load_trainer_config",
    "scorer_loss_and_grad",
]

SCORE_TEMP = 0.5


@dataclass
class TrainerConfig:
    loss_weight: float = 1.0  # lambda in the total objective
    learning_rate: float = 0.05
    epochs: int = 10
    batch_size: int = 8
    tau: float = 0.07
    top_k: int = 36  # capped at the synthetic patch count
    beta: float = 0.7
    epsilon: float = 1e-8
    mu: float = 0.9
    alpha: float = DEFAULT_ALPHA
    ema_interval: int = DEFAULT_INTERVAL
    seed: int = 0

    def validate(self) -> None:
        if self.loss_weight < 0.0:
            raise InvalidInputError("loss_weight (lambda) must be >= 0")
        if self.learning_rate <= 0.0:
            raise InvalidInputError("learning_rate must be positive")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be non-negative")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if not (0.0 < self.beta < 1.0):
            raise InvalidInputError("beta must lie in (0, 1)")
        if self.tau <= 0.0 or self.epsilon <= 0.0:
            raise InvalidInputError("tau and epsilon must be positive")
        if not (0.0 <= self.mu <= 1.0) or not (0.0 <= self.alpha <= 1.0):
            raise InvalidInputError("mu and alpha must lie in [0, 1]")
        if self.ema_interval < 1:
            raise InvalidInputError("ema_interval must be >= 1")
        if self.top_k < 1:
            raise InvalidInputError("top_k must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    fused_precision: float
    fused_recall: float
    fused_f1: float
    det_loss: Optional[float] = None
    pgfa_loss: Optional[float] = None
    pifa_loss: Optional[float] = None
    total_loss: Optional[float] = None


@dataclass
class AdaptationReport:
    config: TrainerConfig
    records: List[EpochRecord]
    teacher_source_f1: float  # teacher-only pseudo-labels, epoch 0
    vfm_source_f1: float  # VFM-only pseudo-labels
    final_fused_f1: float
    student_trajectory: List[np.ndarray] = field(default_factory=list)

    @property
    def better_single_source_f1(self) -> float:
        return max(self.teacher_source_f1, self.vfm_source_f1)


def total_loss(det_loss: float, pgfa: float, pifa: float, lam: float) -> float:
    """Weighted total objective: det + lambda * (pgfa + pifa)."""
    for v in (det_loss, pgfa, pifa, lam):
        if not np.isfinite(v):
            raise InvalidInputError("loss components must be finite")
    return det_loss + lam * (pgfa + pifa)


def load_trainer_config(path) -> TrainerConfig:
    """Read a key/value YAML config; unknown keys are rejected."""
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise InvalidInputError(f"{path}: config must be a key/value mapping")
    known = {f.name for f in TrainerConfig.__dataclass_fields__.values()}
    unknown = set(raw) - known
    if unknown:
        raise InvalidInputError(f"{path}: unknown config keys {sorted(unknown)}")
    cfg = TrainerConfig(**raw)
    cfg.validate()
    return cfg


def scorer_loss_and_grad(
    scorer: np.ndarray,
    feats: np.ndarray,
    labels: np.ndarray,
    temp: float = SCORE_TEMP,
) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy of a linear scorer and its gradient."""
    logits = feats @ scorer.T / temp
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)
    n = feats.shape[0]
    loss = float(-np.mean(np.log(probs[np.arange(n), labels] + 1e-300)))
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    grad = delta.T @ feats / (n * temp)
    return loss, grad


def _scorer_probs(g: np.ndarray, a: np.ndarray, feats: np.ndarray, temp: float = SCORE_TEMP):
    logits = feats @ g.T @ a.T / temp
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def _teacher_detections(
    scene: SyntheticScene, g_te: np.ndarray, a_te: np.ndarray
) -> List[Detection]:
    """Teacher-source boxes rescored by the current teacher scorer."""
    if not scene.teacher_dets:
        return []
    feats = np.stack([pool_instance(scene.raw_map, d.box) for d in scene.teacher_dets])
    probs = _scorer_probs(g_te, a_te, feats)
    return [Detection(box=d.box, probs=p) for d, p in zip(scene.teacher_dets, probs)]


def _fused_eval(
    scenes: Sequence[SyntheticScene],
    g_te: np.ndarray,
    a_te: np.ndarray,
    fcfg: FusionConfig,
) -> Tuple[float, float, float, List[List]]:
    """Pooled P/R/F1 of fused pseudo-labels over all scenes, plus the labels."""
    preds, gts, per_scene = [], [], []
    offset = 0.0
    for scene in scenes:
        teacher = _teacher_detections(scene, g_te, a_te)
        fused = depf(teacher, scene.vfm_dets, fcfg)
        per_scene.append(fused)
        for f in fused:
            preds.append(
                (Box(f.box.x1 + offset, f.box.y1, f.box.x2 + offset, f.box.y2),
                 f.label, float(f.probs[f.label]))
            )
        for b, cls in scene.ground_truth:
            gts.append((Box(b.x1 + offset, b.y1, b.x2 + offset, b.y2), cls))
        offset += scene.params.image_size * 2.0
    p, r, f1 = pseudo_label_metrics(preds, gts)
    return p, r, f1, per_scene


def _clipped(box: Box, size: float) -> Optional[Box]:
    x1 = min(max(box.x1, 0.0), size)
    x2 = min(max(box.x2, 0.0), size)
    y1 = min(max(box.y1, 0.0), size)
    y2 = min(max(box.y2, 0.0), size)
    if x2 - x1 < 1e-6 or y2 - y1 < 1e-6:
        return None
    return Box(x1, y1, x2, y2)


def run_adaptation(
    config: TrainerConfig, scenes: Sequence[SyntheticScene]
) -> AdaptationReport:
    """Run the full adaptation loop; deterministic given config and scenes."""
    config.validate()
    if not scenes:
        raise InvalidInputError("at least one scene is required")
    params = scenes[0].params
    k, c = params.num_classes, params.channels
    top_k = min(config.top_k, params.num_patches)
    pcfg = PatchWeightConfig(tau=config.tau, top_k=top_k)
    fcfg = FusionConfig(beta=config.beta, epsilon=config.epsilon)

    # Student: identity feature transform plus class-direction scorer rows.
    g_st = np.eye(c)
    a_st = class_directions(params, "raw").copy()
    g_te, a_te = g_st.copy(), a_st.copy()
    ema = EmaState(
        teacher_params=np.concatenate([g_te.ravel(), a_te.ravel()]),
        alpha=config.alpha,
        interval=config.ema_interval,
    )
    bank = PrototypeBank(num_classes=k, channels=c, mu=config.mu)

    records: List[EpochRecord] = []
    trajectory: List[np.ndarray] = []

    teacher_f1 = _teacher_source_f1(scenes, g_te, a_te)
    vfm_f1 = scene_set_f1(scenes, "vfm", fcfg)

    for epoch in range(config.epochs):
        p, r, f1, fused_per_scene = _fused_eval(scenes, g_te, a_te, fcfg)
        sums = {"det": 0.0, "pgfa": 0.0, "pifa": 0.0}
        steps = 0
        for start in range(0, len(scenes), config.batch_size):
            batch = scenes[start : start + config.batch_size]
            fused_batch = fused_per_scene[start : start + config.batch_size]
            grad_g = np.zeros_like(g_st)
            grad_a = np.zeros_like(a_st)
            batch_det = batch_pgfa = batch_pifa = 0.0
            for scene, fused in zip(batch, fused_batch):
                boxes, labels = [], []
                for f in fused:
                    clip = _clipped(f.box, params.image_size)
                    if clip is not None:
                        boxes.append(clip)
                        labels.append(f.label)
                if not boxes:
                    continue
                raw_feats = np.stack([pool_instance(scene.raw_map, b) for b in boxes])
                labels_arr = np.asarray(labels)
                student_feats = raw_feats @ g_st.T

                det_l, grad_scorer = scorer_loss_and_grad(a_st, student_feats, labels_arr)
                batch_det += det_l
                grad_a += grad_scorer
                # Chain the scorer loss into G: dL/dG = (A^T dL/dz)^T-sum form.
                logits = student_feats @ a_st.T / SCORE_TEMP
                logits -= logits.max(axis=1, keepdims=True)
                e = np.exp(logits)
                probs = e / e.sum(axis=1, keepdims=True)
                delta = probs.copy()
                delta[np.arange(len(labels_arr)), labels_arr] -= 1.0
                grad_g += (delta @ a_st).T @ raw_feats / (len(labels_arr) * SCORE_TEMP)

                if config.loss_weight > 0.0:
                    student_patches = scene.raw_patches @ g_st.T
                    pg_l, pg_grad = pgfa_loss(
                        scene.vfm_patches[None], student_patches[None], pcfg, config.epsilon
                    )
                    batch_pgfa += pg_l
                    grad_g += config.loss_weight * (pg_grad[0].T @ scene.raw_patches)

                    vfm_insts = [
                        InstanceFeature(pool_instance(scene.vfm_map, b), int(lbl))
                        for b, lbl in zip(boxes, labels)
                    ]
                    bank = update_prototypes_inplace(bank, vfm_insts)
                    student_insts = [
                        InstanceFeature(f, int(lbl))
                        for f, lbl in zip(student_feats, labels)
                    ]
                    pi_l, pi_grads = pifa_loss(student_insts, bank, config.tau)
                    batch_pifa += pi_l
                    for gi, r_i in zip(pi_grads, raw_feats):
                        grad_g += config.loss_weight * np.outer(gi, r_i)

            n = len(batch)
            g_st = g_st - config.learning_rate * grad_g / n
            a_st = a_st - config.learning_rate * grad_a / n
            ema = ema_step(ema, np.concatenate([g_st.ravel(), a_st.ravel()]))
            sums["det"] += batch_det / n
            sums["pgfa"] += batch_pgfa / n
            sums["pifa"] += batch_pifa / n
            steps += 1
            trajectory.append(np.concatenate([g_st.ravel(), a_st.ravel()]))

        g_te = ema.teacher_params[: c * c].reshape(c, c)
        a_te = ema.teacher_params[c * c :].reshape(k, c)
        det_m = sums["det"] / steps
        pgfa_m = sums["pgfa"] / steps
        pifa_m = sums["pifa"] / steps
        records.append(
            EpochRecord(
                epoch=epoch,
                fused_precision=p,
                fused_recall=r,
                fused_f1=f1,
                det_loss=det_m,
                pgfa_loss=pgfa_m,
                pifa_loss=pifa_m,
                total_loss=total_loss(det_m, pgfa_m, pifa_m, config.loss_weight),
            )
        )

    p, r, f1, _ = _fused_eval(scenes, g_te, a_te, fcfg)
    records.append(EpochRecord(epoch=config.epochs, fused_precision=p, fused_recall=r, fused_f1=f1))

    return AdaptationReport(
        config=config,
        records=records,
        teacher_source_f1=teacher_f1,
        vfm_source_f1=vfm_f1,
        final_fused_f1=f1,
        student_trajectory=trajectory,
    )


def update_prototypes_inplace(bank: PrototypeBank, insts: List[InstanceFeature]) -> PrototypeBank:
    from .pifa import update_prototypes

    return update_prototypes(bank, batch_class_means(insts))


def _teacher_source_f1(
    scenes: Sequence[SyntheticScene], g_te: np.ndarray, a_te: np.ndarray
) -> float:
    preds, gts = [], []
    offset = 0.0
    for scene in scenes:
        dets = _teacher_detections(scene, g_te, a_te)
        for d in dets:
            preds.append(
                (Box(d.box.x1 + offset, d.box.y1, d.box.x2 + offset, d.box.y2),
                 d.label, d.score)
            )
        for b, cls in scene.ground_truth:
            gts.append((Box(b.x1 + offset, b.y1, b.x2 + offset, b.y2), cls))
        offset += scene.params.image_size * 2.0
    _, _, f1 = pseudo_label_metrics(preds, gts)
    return f1

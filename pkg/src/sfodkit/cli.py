"""Command-line surface: fusion, patch weights, losses, gradient checks,
EMA simulation, synthetic data generation, and the toy adaptation loop.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import fileio
from .ema import EmaState, ema_step
from .errors import SfodkitError, InvalidInputError, ValidationError, FormatError
from .fusion import (
    Detection,
    FusedLabel,
    FusionConfig,
    depf,
    nms,
    remove_individual,
    wbf,
)
from .pgfa import PatchWeightConfig, patch_weights, pgfa_loss
from .pifa import InstanceFeature, PrototypeBank, pifa_loss
from .selftrain import load_trainer_config, run_adaptation, total_loss
from .synthetic import SceneParams, make_scenes

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def _thread_cap() -> int:
    raw = os.environ.get("SFODKIT_THREADS")
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise InvalidInputError(f"SFODKIT_THREADS must be a positive integer, got {raw!r}")
    if value < 1:
        raise InvalidInputError(f"SFODKIT_THREADS must be a positive integer, got {raw!r}")
    return value


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfodkit",
        description="Dual-source pseudo-label fusion and feature-alignment toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", help="fuse two detection sources into pseudo-labels")
    p.add_argument("--method", choices=["depf", "nms", "wbf", "ri"], default="depf")
    p.add_argument("--beta", type=float, default=0.7, help="IoU threshold (default: %(default)s)")
    p.add_argument("--epsilon", type=float, default=1e-8,
                   help="numerical-stability constant (default: %(default)s)")
    p.add_argument("--source-a", required=True, help="teacher-side detection file")
    p.add_argument("--source-b", required=True, help="VFM-side detection file")
    p.add_argument("--out", required=True, help="output detection file")
    p.add_argument("--renormalize", action="store_true",
                   help="rescale probability vectors that do not sum to 1")
    p.add_argument("--min-score", type=float, default=None,
                   help="drop fused outputs whose top probability is below this")

    p = sub.add_parser("pgfa-weights", help="compute per-patch alignment weights")
    p.add_argument("--features", required=True, help="B x N x C feature tensor (.ftns)")
    p.add_argument("--tau", type=float, default=0.07,
                   help="softmax temperature (default: %(default)s)")
    p.add_argument("--topk", type=int, default=50,
                   help="patches summed per row (default: %(default)s)")
    p.add_argument("--epsilon", type=float, default=1e-8,
                   help="normalization constant (default: %(default)s)")
    p.add_argument("--out", required=True, help="output B x N weight tensor")

    p = sub.add_parser("loss", help="evaluate an alignment loss or the total objective")
    p.add_argument("--kind", choices=["pgfa", "pifa", "total"], required=True)
    p.add_argument("--vfm", help="pgfa: B x N x C VFM feature tensor")
    p.add_argument("--student", help="pgfa: B x N x C student feature tensor")
    p.add_argument("--instances", help="pifa: M x C instance feature tensor")
    p.add_argument("--labels", help="pifa: length-M class index tensor")
    p.add_argument("--prototypes", help="pifa: K x C prototype tensor")
    p.add_argument("--mask", help="pifa: length-K initialized mask tensor (default: all)")
    p.add_argument("--tau", type=float, default=0.07,
                   help="temperature (default: %(default)s)")
    p.add_argument("--topk", type=int, default=50,
                   help="pgfa top-k (default: %(default)s)")
    p.add_argument("--epsilon", type=float, default=1e-8,
                   help="stability constant (default: %(default)s)")
    p.add_argument("--det", type=float, help="total: detection loss value")
    p.add_argument("--pgfa", type=float, help="total: patch-alignment loss value")
    p.add_argument("--pifa", type=float, help="total: prototype-contrast loss value")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0,
                   help="total: loss weight lambda (default: %(default)s)")
    p.add_argument("--grad-out", help="write the gradient tensor here")

    p = sub.add_parser("grad-check", help="compare analytic gradients to central differences")
    p.add_argument("--loss", choices=["pgfa", "pifa"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-4,
                   help="finite-difference step (default: %(default)s)")
    p.add_argument("--tol", type=float, default=1e-5,
                   help="max relative error allowed (default: %(default)s)")

    p = sub.add_parser("ema-sim", help="simulate the interval-scheduled EMA update")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--alpha", type=float, default=0.999,
                   help="EMA decay (default: %(default)s)")
    p.add_argument("--interval", type=int, default=5,
                   help="calls between applied updates (default: %(default)s)")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write a per-call CSV of the teacher-student gap")

    p = sub.add_parser("selftrain", help="run the toy mean-teacher adaptation loop")
    p.add_argument("--config", required=True, help="YAML key/value trainer config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scenes", type=int, default=30,
                   help="number of synthetic scenes (default: %(default)s)")

    p = sub.add_parser("gen-synthetic", help="write synthetic scenes as detection/tensor files")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--out-dir", required=True)

    return parser


def _load_sources(args) -> Tuple[fileio.DetectionSet, fileio.DetectionSet]:
    a = fileio.read_detections(args.source_a, renormalize=args.renormalize)
    b = fileio.read_detections(args.source_b, renormalize=args.renormalize)
    if a.num_classes != b.num_classes:
        raise ValidationError(
            f"class-count mismatch: {args.source_a} has {a.num_classes}, "
            f"{args.source_b} has {b.num_classes}"
        )
    return a, b


def _fuse_image(
    method: str,
    dets_a: List[Detection],
    dets_b: List[Detection],
    cfg: FusionConfig,
) -> List[FusedLabel]:
    if method == "depf":
        return depf(dets_a, dets_b, cfg)
    if method == "nms":
        kept = nms(list(dets_a) + list(dets_b), cfg.beta)
        return [FusedLabel(box=d.box, probs=d.probs, label=d.label) for d in kept]
    if method == "wbf":
        return wbf(dets_a, dets_b, cfg.beta)
    return remove_individual(dets_a, dets_b, cfg.beta, cfg.epsilon)


def _cmd_fuse(args) -> int:
    cfg = FusionConfig(beta=args.beta, epsilon=args.epsilon, method=args.method)
    set_a, set_b = _load_sources(args)
    by_id_a = dict(set_a.images)
    by_id_b = dict(set_b.images)
    image_ids = [i for i, _ in set_a.images]
    image_ids += [i for i, _ in set_b.images if i not in by_id_a]

    def fuse_one(image_id: str) -> List[FusedLabel]:
        fused = _fuse_image(
            args.method, by_id_a.get(image_id, []), by_id_b.get(image_id, []), cfg
        )
        if args.min_score is not None:
            fused = [f for f in fused if float(f.probs[f.label]) >= args.min_score]
        return fused

    threads = _thread_cap()
    if threads > 1 and len(image_ids) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fused_lists = list(pool.map(fuse_one, image_ids))
    else:
        fused_lists = [fuse_one(i) for i in image_ids]

    total = 0
    for image_id, fused in zip(image_ids, fused_lists):
        print(f"{image_id}: clusters={len(fused)} fused={len(fused)}")
        total += len(fused)
    print(f"total fused boxes: {total}")
    fileio.write_fused(
        args.out, list(zip(image_ids, fused_lists)), set_a.num_classes, set_a.class_names
    )
    return 0


def _cmd_pgfa_weights(args) -> int:
    feats = fileio.read_tensor(args.features).astype(float)
    if feats.ndim != 3:
        raise ValidationError(f"{args.features}: expected a B x N x C tensor, got {feats.shape}")
    cfg = PatchWeightConfig(tau=args.tau, top_k=args.topk)
    weights = np.stack([patch_weights(feats[b], cfg, args.epsilon) for b in range(feats.shape[0])])
    fileio.write_tensor(weights, args.out)
    print(f"wrote {weights.shape[0]} x {weights.shape[1]} weight tensor to {args.out}")
    return 0


def _require(args, names: Sequence[str], kind: str) -> None:
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise InvalidInputError(f"--kind {kind} requires --" + ", --".join(missing))


def _cmd_loss(args) -> int:
    if args.kind == "total":
        _require(args, ["det", "pgfa", "pifa"], "total")
        print(f"{total_loss(args.det, args.pgfa, args.pifa, args.lam):.12g}")
        return 0
    if args.kind == "pgfa":
        _require(args, ["vfm", "student"], "pgfa")
        vfm = fileio.read_tensor(args.vfm).astype(float)
        student = fileio.read_tensor(args.student).astype(float)
        cfg = PatchWeightConfig(tau=args.tau, top_k=min(args.topk, vfm.shape[1] if vfm.ndim == 3 else args.topk))
        loss, grad = pgfa_loss(vfm, student, cfg, args.epsilon)
        print(f"{loss:.12g}")
        if args.grad_out:
            fileio.write_tensor(grad, args.grad_out)
        return 0
    _require(args, ["instances", "labels", "prototypes"], "pifa")
    feats = fileio.read_tensor(args.instances).astype(float)
    labels = fileio.read_tensor(args.labels).astype(float)
    protos = fileio.read_tensor(args.prototypes).astype(float)
    if feats.ndim != 2 or protos.ndim != 2 or labels.ndim != 1:
        raise ValidationError("pifa expects M x C instances, K x C prototypes, length-M labels")
    if args.mask:
        mask = fileio.read_tensor(args.mask).astype(float) > 0.5
    else:
        mask = np.ones(protos.shape[0], dtype=bool)
    bank = PrototypeBank(
        num_classes=protos.shape[0],
        channels=protos.shape[1],
        prototypes=protos,
        initialized=mask,
    )
    insts = [InstanceFeature(f, int(round(l))) for f, l in zip(feats, labels)]
    loss, grads = pifa_loss(insts, bank, args.tau)
    print(f"{loss:.12g}")
    if args.grad_out:
        fileio.write_tensor(np.stack(grads), args.grad_out)
    return 0


def _central_difference(func, x: np.ndarray, h: float) -> np.ndarray:
    grad = np.zeros_like(x, dtype=float)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for j in range(xf.size):
        orig = xf[j]
        xf[j] = orig + h
        fp = func(x)
        xf[j] = orig - h
        fm = func(x)
        xf[j] = orig
        flat[j] = (fp - fm) / (2 * h)
    return grad


def _max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))


def _cmd_grad_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.loss == "pgfa":
        vfm = rng.normal(size=(2, 4, 8))
        student = rng.normal(size=(2, 4, 8))
        cfg = PatchWeightConfig(tau=0.07, top_k=2)
        _, analytic = pgfa_loss(vfm, student, cfg)
        numeric = _central_difference(lambda s: pgfa_loss(vfm, s, cfg)[0], student.copy(), args.h)
    else:
        k, c, m = 4, 8, 5
        protos = rng.normal(size=(k, c))
        bank = PrototypeBank(num_classes=k, channels=c, prototypes=protos,
                             initialized=np.ones(k, dtype=bool))
        feats = rng.normal(size=(m, c))
        labels = rng.integers(0, k, size=m)

        def loss_of(x: np.ndarray) -> float:
            insts = [InstanceFeature(f, int(l)) for f, l in zip(x, labels)]
            return pifa_loss(insts, bank)[0]

        insts = [InstanceFeature(f, int(l)) for f, l in zip(feats, labels)]
        analytic = np.stack(pifa_loss(insts, bank)[1])
        numeric = _central_difference(loss_of, feats.copy(), args.h)
    err = _max_rel_error(analytic, numeric)
    print(f"max relative error: {err:.3e} (tol {args.tol:.3e})")
    return 0 if err < args.tol else RUNTIME_ERROR


def _cmd_ema_sim(args) -> int:
    rng = np.random.default_rng(args.seed)
    teacher0 = rng.normal(size=args.dim)
    student = rng.normal(size=args.dim)
    state = EmaState(teacher_params=teacher0, alpha=args.alpha, interval=args.interval)
    gap0 = float(np.linalg.norm(teacher0 - student))
    rows = []
    for step in range(1, args.steps + 1):
        state = ema_step(state, student)
        gap = float(np.linalg.norm(state.teacher_params - student))
        rows.append((step, state.iteration_counter // state.interval, gap))
    applied = args.steps // args.interval
    expected = (args.alpha ** applied) * gap0
    final_gap = rows[-1][2] if rows else gap0
    print(f"calls: {args.steps}  applied updates: {applied}")
    print(f"initial gap: {gap0:.9g}  final gap: {final_gap:.9g}")
    print(f"closed-form alpha^n * gap0: {expected:.9g}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["call", "applied_updates", "gap"])
            writer.writerows(rows)
    return 0


def _cmd_selftrain(args) -> int:
    from .report import write_report

    config = load_trainer_config(args.config)
    scenes = make_scenes(config.seed, args.scenes)
    report = run_adaptation(config, scenes)
    written = write_report(report, args.out_dir)
    print(f"teacher-source F1: {report.teacher_source_f1:.4f}")
    print(f"VFM-source F1:     {report.vfm_source_f1:.4f}")
    print(f"final fused F1:    {report.final_fused_f1:.4f}")
    for path in written:
        print(f"wrote {path}")
    return 0


def _cmd_gen_synthetic(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = SceneParams()
    scenes = make_scenes(args.seed, args.scenes, params)
    manifest = {"seed": args.seed, "scenes": args.scenes,
                "num_classes": params.num_classes, "image_size": params.image_size}
    for i, scene in enumerate(scenes):
        tag = f"scene_{i:04d}"
        fileio.write_detections(
            out / f"{tag}.teacher.json",
            fileio.DetectionSet(params.num_classes, [(tag, scene.teacher_dets)]),
        )
        fileio.write_detections(
            out / f"{tag}.vfm.json",
            fileio.DetectionSet(params.num_classes, [(tag, scene.vfm_dets)]),
        )
        gt = {
            "image_id": tag,
            "instances": [
                {"box": [b.x1, b.y1, b.x2, b.y2], "label": cls}
                for b, cls in scene.ground_truth
            ],
        }
        (out / f"{tag}.gt.json").write_text(json.dumps(gt, indent=2, sort_keys=True) + "\n")
        fileio.write_tensor(scene.raw_map.data, out / f"{tag}.raw_map.ftns")
        fileio.write_tensor(scene.vfm_map.data, out / f"{tag}.vfm_map.ftns")
        fileio.write_tensor(scene.raw_patches, out / f"{tag}.raw_patches.ftns")
        fileio.write_tensor(scene.vfm_patches, out / f"{tag}.vfm_patches.ftns")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.scenes} scenes to {out}")
    return 0


_COMMANDS = {
    "fuse": _cmd_fuse,
    "pgfa-weights": _cmd_pgfa_weights,
    "loss": _cmd_loss,
    "grad-check": _cmd_grad_check,
    "ema-sim": _cmd_ema_sim,
    "selftrain": _cmd_selftrain,
    "gen-synthetic": _cmd_gen_synthetic,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (InvalidInputError, ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (OSError, SfodkitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())

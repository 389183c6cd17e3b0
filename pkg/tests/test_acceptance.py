"""Acceptance gate: twelve criteria, each printing one PASS line when it holds.

Run with ``pytest -v tests/test_acceptance.py`` (add ``-s`` to see the lines).
Every tolerance below is part of the contract; none may be loosened.
"""

import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from sfodkit.ema import EmaState, ema_step
from sfodkit.fileio import (
    DetectionSet,
    read_detections,
    read_tensor,
    write_detections,
    write_tensor,
)
from sfodkit.fusion import Detection, FusionConfig, depf, entropy_weights, fuse_cluster, shannon_entropy
from sfodkit.geometry import Box
from sfodkit.pgfa import PatchWeightConfig, patch_weights, pgfa_loss
from sfodkit.pifa import (
    FeatureMap,
    InstanceFeature,
    PrototypeBank,
    pifa_loss,
    pool_instance,
    update_prototypes,
)
from sfodkit.selftrain import TrainerConfig, load_trainer_config, run_adaptation
from sfodkit.synthetic import fusion_strategy_benchmark, make_scenes

from oracles import (
    central_difference,
    dense_roi_pool,
    max_rel_error,
    reference_lambda_zero_trajectory,
    stepwise_fusion,
)

ROOT = Path(__file__).resolve().parents[1]


def report(num, text):
    print(f"ACCEPTANCE {num:02d} PASS — {text}", flush=True)


def _random_source(rng, num_classes, max_boxes=10):
    out = []
    for _ in range(int(rng.integers(0, max_boxes + 1))):
        x1, y1 = rng.uniform(0, 80, size=2)
        w, h = rng.uniform(4, 40, size=2)
        out.append(
            Detection(
                box=Box(float(x1), float(y1), float(x1 + w), float(y1 + h)),
                probs=rng.dirichlet(np.ones(num_classes)),
            )
        )
    return out


def _pairs(source):
    return [
        ([d.box.x1, d.box.y1, d.box.x2, d.box.y2], [float(p) for p in d.probs])
        for d in source
    ]


def test_criterion_01_depf_oracle_equivalence():
    """1,000 random two-source instances match the stepwise oracle exactly in
    control flow and within 1e-12 relative on fused values, in under 10 s."""
    start = time.monotonic()
    rng = np.random.default_rng(20240)
    worst = 0.0
    for case in range(1000):
        k = int(rng.integers(2, 9))
        a = _random_source(rng, k)
        b = _random_source(rng, k)
        got = depf(a, b, FusionConfig(beta=0.7, epsilon=1e-8))
        _, expected = stepwise_fusion(_pairs(a), _pairs(b), 0.7, 1e-8)
        assert len(got) == len(expected), f"case {case}: cluster count differs"
        for f, (box, probs, label) in zip(got, expected):
            assert f.label == label, f"case {case}: label differs"
            vals = np.concatenate([f.box.as_array(), f.probs])
            ref = np.concatenate([box, probs])
            rel = np.max(np.abs(vals - ref) / np.maximum(np.abs(ref), 1e-300))
            worst = max(worst, rel)
            assert rel <= 1e-12, f"case {case}: fused values off by {rel:.2e}"
    elapsed = time.monotonic() - start
    assert elapsed < 10.0, f"took {elapsed:.1f}s"
    report(1, f"1000 fusion instances match the stepwise oracle "
              f"(worst rel {worst:.2e}, {elapsed:.1f}s)")


def test_criterion_02_entropy_weight_law():
    """w_i/w_j = (H_j+eps)/(H_i+eps) within 1e-9; weights sum to 1 within 1e-9."""
    rng = np.random.default_rng(7)
    eps = 1e-8
    checked = 0
    for _ in range(200):
        k = int(rng.integers(2, 9))
        members = [
            Detection(box=Box(0, 0, 10, 10), probs=rng.dirichlet(np.ones(k)))
            for _ in range(int(rng.integers(1, 7)))
        ]
        w = entropy_weights(members, eps)
        h = [shannon_entropy(m.probs, eps) for m in members]
        assert abs(w.sum() - 1.0) <= 1e-9
        for i in range(len(members)):
            for j in range(len(members)):
                expected = (h[j] + eps) / (h[i] + eps)
                assert abs(w[i] / w[j] - expected) <= 1e-9 * max(1.0, expected)
                checked += 1
    report(2, f"inverse-entropy weight law holds on {checked} member pairs")


def test_criterion_03_fused_distribution_closure():
    """Fused probs sum to 1 within 1e-9; fused boxes stay inside the member hull."""
    rng = np.random.default_rng(11)
    for _ in range(300):
        k = int(rng.integers(2, 9))
        members = [
            Detection(
                box=Box(*(lambda p: [p[0], p[1], p[0] + p[2], p[1] + p[3]])(
                    rng.uniform(1, 40, size=4))),
                probs=rng.dirichlet(np.ones(k)),
            )
            for _ in range(int(rng.integers(1, 7)))
        ]
        fused = fuse_cluster(members)
        assert abs(fused.probs.sum() - 1.0) <= 1e-9
        assert np.all(fused.probs >= 0.0)
        coords = np.stack([m.box.as_array() for m in members])
        assert np.all(fused.box.as_array() >= coords.min(axis=0) - 1e-12)
        assert np.all(fused.box.as_array() <= coords.max(axis=0) + 1e-12)
    report(3, "fused distributions are closed and fused boxes stay in the member hull")


def test_criterion_04_pgfa_weight_properties():
    """Weights sum to 1 within 1e-6; identical patches give uniform weights
    within 1e-9; per-row rescaling leaves weights unchanged within 1e-9."""
    rng = np.random.default_rng(13)
    for _ in range(50):
        n = int(rng.integers(2, 40))
        feats = rng.normal(size=(n, 8))
        cfg = PatchWeightConfig(tau=0.07, top_k=int(rng.integers(1, n + 1)))
        w = patch_weights(feats, cfg)
        assert abs(w.sum() - 1.0) <= 1e-6
        scales = rng.uniform(0.05, 100.0, size=(n, 1))
        assert np.max(np.abs(patch_weights(feats * scales, cfg) - w)) <= 1e-9
    uniform = patch_weights(np.tile(rng.normal(size=8), (12, 1)),
                            PatchWeightConfig(top_k=5))
    assert np.max(np.abs(uniform - 1.0 / 12.0)) <= 1e-9
    report(4, "patch weights are normalized, uniform on identical patches, scale-invariant")


def test_criterion_05_gradient_checks():
    """Analytic gradients match central differences (h=1e-4) with max relative
    error < 1e-5 across 20 seeds per loss, in under 30 s."""
    start = time.monotonic()
    worst_pgfa = worst_pifa = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        b, n, c = 2, 4, 8
        cfg = PatchWeightConfig(tau=0.07, top_k=2)
        vfm = rng.normal(size=(b, n, c))
        student = rng.normal(size=(b, n, c))
        _, grad = pgfa_loss(vfm, student, cfg)
        numeric = central_difference(
            lambda s: pgfa_loss(vfm, s.reshape(b, n, c), cfg)[0],
            student.reshape(-1).copy(),
        )
        worst_pgfa = max(worst_pgfa, max_rel_error(grad.reshape(-1), numeric))

        k, ch, m = 4, 8, 5
        bank = PrototypeBank(
            num_classes=k, channels=ch, mu=0.9,
            prototypes=rng.normal(size=(k, ch)),
            initialized=np.ones(k, dtype=bool),
        )
        feats = rng.normal(size=(m, ch))
        labels = rng.integers(0, k, size=m)

        def loss_of(flat):
            insts = [InstanceFeature(v, int(l))
                     for v, l in zip(flat.reshape(m, ch), labels)]
            return pifa_loss(insts, bank, 0.07)[0]

        insts = [InstanceFeature(v, int(l)) for v, l in zip(feats, labels)]
        _, grads = pifa_loss(insts, bank, 0.07)
        numeric = central_difference(loss_of, feats.reshape(-1).copy())
        worst_pifa = max(worst_pifa, max_rel_error(np.concatenate(grads), numeric))
    elapsed = time.monotonic() - start
    assert worst_pgfa < 1e-5, f"patch-alignment gradient error {worst_pgfa:.2e}"
    assert worst_pifa < 1e-5, f"prototype-contrast gradient error {worst_pifa:.2e}"
    assert elapsed < 30.0, f"took {elapsed:.1f}s"
    report(5, f"gradient checks pass over 20 seeds each "
              f"(pgfa {worst_pgfa:.2e}, pifa {worst_pifa:.2e}, {elapsed:.1f}s)")


def test_criterion_06_closed_form_losses():
    """Separated case log(1+(K-1)e^(-1/tau)) within 1e-9 for K in {2,4,8};
    orthogonal case ln K within 1e-6; single prototype exactly 0."""
    tau = 0.07
    for k in (2, 4, 8):
        bank = PrototypeBank(
            num_classes=k, channels=k, mu=0.9,
            prototypes=np.eye(k), initialized=np.ones(k, dtype=bool),
        )
        loss, _ = pifa_loss([InstanceFeature(np.eye(k)[0], 0)], bank, tau)
        expected = math.log(1.0 + (k - 1) * math.exp(-1.0 / tau))
        assert abs(loss - expected) <= 1e-9

        bank = PrototypeBank(
            num_classes=k, channels=k + 1, mu=0.9,
            prototypes=np.eye(k, k + 1), initialized=np.ones(k, dtype=bool),
        )
        vec = np.zeros(k + 1)
        vec[k] = 1.0
        loss, _ = pifa_loss([InstanceFeature(vec, 0)], bank, tau)
        assert abs(loss - math.log(k)) <= 1e-6

    single = PrototypeBank(
        num_classes=2, channels=3, mu=0.9,
        prototypes=np.vstack([np.ones(3), np.zeros(3)]),
        initialized=np.array([True, False]),
    )
    loss, _ = pifa_loss([InstanceFeature(np.array([2.0, 1.0, 0.5]), 0)], single, tau)
    assert loss == 0.0
    report(6, "contrastive loss matches its closed forms (separated, orthogonal, single)")


def test_criterion_07_ema_geometry():
    """alpha=0.999, constant student: gap after n applied updates is alpha^n
    times the initial gap within 1e-9 for n up to 1000; the interval=5 schedule
    applies exactly floor(n/5) updates in n calls."""
    alpha = 0.999
    rng = np.random.default_rng(0)
    student = rng.normal(size=6)
    state = EmaState(teacher_params=student + rng.normal(size=6), alpha=alpha, interval=1)
    gap0 = np.linalg.norm(state.teacher_params - student)
    for n in range(1, 1001):
        state = ema_step(state, student)
        gap = np.linalg.norm(state.teacher_params - student)
        assert abs(gap - alpha**n * gap0) <= 1e-9, f"n={n}"

    state = EmaState(teacher_params=np.array([1.0]), alpha=0.5, interval=5)
    applied = 0
    for n in range(1, 101):
        prev = state.teacher_params.copy()
        state = ema_step(state, np.array([0.0]))
        if not np.array_equal(prev, state.teacher_params):
            applied += 1
        assert applied == n // 5, f"call {n}: {applied} updates, expected {n // 5}"
    report(7, "EMA gap decays as alpha^n and the interval schedule applies floor(n/5) updates")


def test_criterion_08_prototype_convergence():
    """||p_t - f|| = mu^t ||p_0 - f|| within 1e-9 for mu in {0.9, 0.999}."""
    rng = np.random.default_rng(1)
    for mu in (0.9, 0.999):
        f = rng.normal(size=8)
        bank = PrototypeBank(
            num_classes=1, channels=8, mu=mu,
            prototypes=rng.normal(size=(1, 8)), initialized=np.array([True]),
        )
        gap0 = np.linalg.norm(bank.prototypes[0] - f)
        for t in range(1, 101):
            bank = update_prototypes(bank, {0: (f, 1)})
            gap = np.linalg.norm(bank.prototypes[0] - f)
            assert abs(gap - mu**t * gap0) <= 1e-9, f"mu={mu}, t={t}"
    report(8, "prototype gap contracts geometrically at rate mu for mu in {0.9, 0.999}")


def test_criterion_09_roi_align_oracle():
    """Pooled vectors within 5e-2 relative of a 1000-sample-per-bin dense
    oracle on 100 random (map, box) pairs; constant maps are exact."""
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        c, h, w = 4, 12, 12
        size = 96.0
        fmap = FeatureMap(data=rng.normal(size=(c, h, w)),
                          image_width=size, image_height=size)
        x1, y1 = rng.uniform(0, size - 30, size=2)
        bw, bh = rng.uniform(20, 30, size=2)
        box = Box(float(x1), float(y1), float(x1 + bw), float(y1 + bh))
        got = pool_instance(fmap, box)
        expected = dense_roi_pool(fmap.data, box.as_array(), size, size,
                                  samples_per_bin=1000, seed=seed)
        rel = np.linalg.norm(got - expected) / np.linalg.norm(expected)
        worst = max(worst, rel)
        assert rel < 5e-2, f"seed {seed}: relative error {rel:.3f}"
    const = FeatureMap(data=np.full((3, 8, 8), 1.75), image_width=64, image_height=64)
    pooled = pool_instance(const, Box(3.0, 7.0, 50.0, 44.0))
    assert np.all(pooled == 1.75)
    report(9, f"RoIAlign matches the dense-sampling oracle (worst rel {worst:.3f}) "
              f"and is exact on constant maps")


def test_criterion_10_fusion_strategy_ordering():
    """Over 100 seeded scenes, fused F1 >= each single source and >= the
    corroboration-only baseline on at least 95 seeds, in under 60 s."""
    start = time.monotonic()
    results = fusion_strategy_benchmark(num_seeds=100, base_seed=0)
    dominated = np.sum(
        (results["depf"] >= results["teacher"])
        & (results["depf"] >= results["vfm"])
        & (results["depf"] >= results["ri"])
    )
    elapsed = time.monotonic() - start
    assert dominated >= 95, f"fusion dominated on only {dominated}/100 seeds"
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    report(10, f"fusion dominates both sources and the corroboration baseline on "
               f"{dominated}/100 seeds (means: depf {results['depf'].mean():.3f}, "
               f"teacher {results['teacher'].mean():.3f}, "
               f"vfm {results['vfm'].mean():.3f}, ri {results['ri'].mean():.3f}; "
               f"{elapsed:.1f}s)")


def test_criterion_11_adaptation_improvement():
    """Default config: final fused F1 strictly above the epoch-0 better single
    source; the lambda=0 run reproduces the regularizer-free reference
    trajectory bit-for-bit."""
    config = load_trainer_config(ROOT / "configs" / "default.yaml")
    scenes = make_scenes(config.seed, 30)
    result = run_adaptation(config, scenes)
    assert result.final_fused_f1 > result.better_single_source_f1, (
        f"final {result.final_fused_f1:.4f} vs "
        f"single-source {result.better_single_source_f1:.4f}"
    )

    zero_cfg = TrainerConfig(**{**config.__dict__, "loss_weight": 0.0})
    zero_run = run_adaptation(zero_cfg, scenes)
    reference = reference_lambda_zero_trajectory(zero_cfg, scenes)
    assert len(zero_run.student_trajectory) == len(reference)
    for step, (got, exp) in enumerate(zip(zero_run.student_trajectory, reference)):
        assert np.array_equal(got, exp), f"trajectory diverges at step {step}"
    report(11, f"adaptation lifts fused F1 to {result.final_fused_f1:.4f} from a "
               f"{result.better_single_source_f1:.4f} single-source baseline; "
               f"lambda=0 trajectory is bit-identical to the reference "
               f"({len(reference)} steps)")


def test_criterion_12_io_round_trips(tmp_path):
    """Tensor files round-trip bit-exactly; detection files round-trip within
    1e-9; malformed inputs exit with the documented codes."""
    rng = np.random.default_rng(3)
    for shape in ((4,), (3, 5), (2, 3, 4)):
        arr = rng.normal(size=shape).astype("<f4")
        path = tmp_path / "t.ftns"
        write_tensor(arr, path)
        assert read_tensor(path).tobytes() == arr.tobytes()

    dset = DetectionSet(
        num_classes=2,
        images=[("img", [Detection(Box(1.0, 2.0, 9.0, 8.0), np.array([0.3, 0.7]))])],
    )
    det_path = tmp_path / "d.json"
    write_detections(det_path, dset)
    loaded = read_detections(det_path)
    got = loaded.images[0][1][0]
    assert np.max(np.abs(got.box.as_array() - [1.0, 2.0, 9.0, 8.0])) <= 1e-9
    assert np.max(np.abs(got.probs - [0.3, 0.7])) <= 1e-9

    bad_json = tmp_path / "bad.json"
    bad_json.write_text('{"num_classes": 2, "images": "nope"}')
    bad_tensor = tmp_path / "bad.ftns"
    bad_tensor.write_bytes(b"XXXX" + b"\x00" * 16)
    cli = [sys.executable, "-m", "sfodkit.cli"]
    res = subprocess.run(
        cli + ["fuse", "--source-a", str(bad_json), "--source-b", str(det_path),
               "--out", str(tmp_path / "o.json")],
        capture_output=True, text=True,
    )
    assert res.returncode == 2, res.stderr
    res = subprocess.run(
        cli + ["pgfa-weights", "--features", str(bad_tensor),
               "--out", str(tmp_path / "w.ftns")],
        capture_output=True, text=True,
    )
    assert res.returncode == 2, res.stderr
    res = subprocess.run(
        cli + ["fuse", "--source-a", str(tmp_path / "missing.json"),
               "--source-b", str(det_path), "--out", str(tmp_path / "o.json")],
        capture_output=True, text=True,
    )
    assert res.returncode == 1, res.stderr
    report(12, "tensor round-trip is bit-exact, detection round-trip within 1e-9, "
               "malformed inputs exit 2 and missing files exit 1")

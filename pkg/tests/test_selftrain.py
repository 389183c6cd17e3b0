import numpy as np
import pytest

from sfodkit.errors import InvalidInputError
from sfodkit.selftrain import (
    TrainerConfig,
    load_trainer_config,
    run_adaptation,
    scorer_loss_and_grad,
    total_loss,
)
from sfodkit.synthetic import make_scenes

from oracles import reference_lambda_zero_trajectory


def small_config(**overrides):
    base = dict(epochs=2, batch_size=4, top_k=36, seed=0)
    base.update(overrides)
    return TrainerConfig(**base)


def test_total_loss_weighting():
    assert total_loss(1.0, 0.5, 0.25, 2.0) == pytest.approx(2.5)
    assert total_loss(1.0, 0.5, 0.25, 0.0) == pytest.approx(1.0)


def test_total_loss_rejects_nonfinite():
    with pytest.raises(InvalidInputError):
        total_loss(float("nan"), 0.0, 0.0, 1.0)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(loss_weight=-1.0),
        dict(learning_rate=0.0),
        dict(batch_size=0),
        dict(beta=1.0),
        dict(tau=0.0),
        dict(mu=2.0),
        dict(ema_interval=0),
    ],
)
def test_config_validation(kwargs):
    cfg = TrainerConfig(**kwargs)
    with pytest.raises(InvalidInputError):
        cfg.validate()


def test_load_trainer_config(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("epochs: 3\nlearning_rate: 0.01\nseed: 5\n")
    cfg = load_trainer_config(path)
    assert (cfg.epochs, cfg.learning_rate, cfg.seed) == (3, 0.01, 5)


def test_load_trainer_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("epochs: 3\nturbo: true\n")
    with pytest.raises(InvalidInputError):
        load_trainer_config(path)


def test_packaged_default_config_loads():
    from pathlib import Path

    cfg = load_trainer_config(Path(__file__).resolve().parents[1] / "configs" / "default.yaml")
    assert cfg.epochs >= 1


def test_scorer_gradient_descends():
    """Plain gradient steps on the convex CE objective strictly decrease it."""
    rng = np.random.default_rng(0)
    k, c, n = 4, 6, 40
    feats = rng.normal(size=(n, c))
    labels = rng.integers(0, k, size=n)
    scorer = rng.normal(size=(k, c))
    prev, _ = scorer_loss_and_grad(scorer, feats, labels)
    for _ in range(30):
        loss, grad = scorer_loss_and_grad(scorer, feats, labels)
        scorer = scorer - 0.5 * grad
        nxt, _ = scorer_loss_and_grad(scorer, feats, labels)
        assert nxt < loss + 1e-12
    assert nxt < prev


def test_scorer_gradient_matches_finite_differences():
    from oracles import central_difference, max_rel_error

    rng = np.random.default_rng(1)
    k, c, n = 3, 4, 10
    feats = rng.normal(size=(n, c))
    labels = rng.integers(0, k, size=n)
    scorer = rng.normal(size=(k, c))
    _, grad = scorer_loss_and_grad(scorer, feats, labels)
    numeric = central_difference(
        lambda s: scorer_loss_and_grad(s.reshape(k, c), feats, labels)[0],
        scorer.reshape(-1).copy(),
    )
    assert max_rel_error(grad.reshape(-1), numeric) < 1e-6


def test_run_adaptation_shapes_and_records():
    scenes = make_scenes(0, 6)
    cfg = small_config()
    report = run_adaptation(cfg, scenes)
    # One record per training epoch plus the final evaluation record.
    assert [r.epoch for r in report.records] == list(range(cfg.epochs + 1))
    assert report.records[-1].det_loss is None
    for r in report.records[:-1]:
        assert r.total_loss is not None and np.isfinite(r.total_loss)
    assert 0.0 <= report.final_fused_f1 <= 1.0
    assert report.better_single_source_f1 == max(
        report.teacher_source_f1, report.vfm_source_f1
    )
    batches_per_epoch = -(-len(scenes) // cfg.batch_size)
    assert len(report.student_trajectory) == cfg.epochs * batches_per_epoch


def test_run_adaptation_deterministic():
    scenes = make_scenes(0, 6)
    r1 = run_adaptation(small_config(), scenes)
    r2 = run_adaptation(small_config(), scenes)
    assert len(r1.student_trajectory) == len(r2.student_trajectory)
    for a, b in zip(r1.student_trajectory, r2.student_trajectory):
        np.testing.assert_array_equal(a, b)
    assert r1.final_fused_f1 == r2.final_fused_f1


def test_lambda_zero_matches_reference_bitwise():
    scenes = make_scenes(0, 6)
    cfg = small_config(loss_weight=0.0)
    report = run_adaptation(cfg, scenes)
    reference = reference_lambda_zero_trajectory(cfg, scenes)
    assert len(report.student_trajectory) == len(reference)
    for got, exp in zip(report.student_trajectory, reference):
        np.testing.assert_array_equal(got, exp)


def test_run_adaptation_requires_scenes():
    with pytest.raises(InvalidInputError):
        run_adaptation(small_config(), [])


def test_report_writer_outputs(tmp_path):
    from sfodkit.report import write_report

    report = run_adaptation(small_config(), make_scenes(0, 4))
    written = write_report(report, tmp_path)
    names = {p.name for p in written}
    assert {"report.csv", "summary.json", "pseudo_label_f1.png", "losses.png"} <= names
    for p in written:
        assert p.exists() and p.stat().st_size > 0
    csv_lines = (tmp_path / "report.csv").read_text().strip().splitlines()
    assert len(csv_lines) == 1 + len(report.records)

import numpy as np
import pytest

from sfodkit.fusion import FusionConfig
from sfodkit.geometry import Box
from sfodkit.synthetic import (
    SceneParams,
    class_directions,
    fusion_strategy_benchmark,
    make_scene,
    make_scenes,
    patch_transform,
    pseudo_label_metrics,
    scene_set_f1,
)


def test_make_scene_reproducible():
    a = make_scene(7)
    b = make_scene(7)
    assert len(a.ground_truth) == len(b.ground_truth)
    for (ba, ca), (bb, cb) in zip(a.ground_truth, b.ground_truth):
        assert ca == cb
        np.testing.assert_array_equal(ba.as_array(), bb.as_array())
    np.testing.assert_array_equal(a.raw_map.data, b.raw_map.data)
    np.testing.assert_array_equal(a.raw_patches, b.raw_patches)
    for da, db in zip(a.teacher_dets, b.teacher_dets):
        np.testing.assert_array_equal(da.probs, db.probs)


def test_different_seeds_differ():
    a, b = make_scene(0), make_scene(1)
    assert not np.array_equal(a.raw_map.data, b.raw_map.data)


def test_scene_shapes_and_counts():
    p = SceneParams()
    scene = make_scene(3, p)
    assert scene.raw_map.data.shape == (p.channels, p.map_size, p.map_size)
    assert scene.vfm_map.data.shape == (p.channels, p.map_size, p.map_size)
    assert scene.raw_patches.shape == (p.num_patches, p.channels)
    assert p.min_instances <= len(scene.ground_truth) <= p.max_instances
    assert len(scene.teacher_dets) <= len(scene.ground_truth)
    for d in scene.teacher_dets + scene.vfm_dets:
        assert d.probs.shape == (p.num_classes,)
        assert d.probs.sum() == pytest.approx(1.0, abs=1e-9)


def test_class_directions_orthonormal():
    p = SceneParams()
    for which in ("raw", "vfm"):
        u = class_directions(p, which)
        np.testing.assert_allclose(u @ u.T, np.eye(p.num_classes), atol=1e-10)
    assert not np.allclose(class_directions(p, "raw"), class_directions(p, "vfm"))


def test_patch_transform_orthogonal():
    w = patch_transform(SceneParams())
    np.testing.assert_allclose(w @ w.T, np.eye(w.shape[0]), atol=1e-10)


def test_make_scenes_matches_make_scene():
    scenes = make_scenes(100, 3)
    single = make_scene(101)
    np.testing.assert_array_equal(scenes[1].raw_map.data, single.raw_map.data)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def test_metrics_perfect_predictions():
    gt = [(Box(0, 0, 10, 10), 1), (Box(50, 50, 70, 70), 2)]
    preds = [(b, c, 0.9) for b, c in gt]
    p, r, f1 = pseudo_label_metrics(preds, gt)
    assert (p, r, f1) == (1.0, 1.0, 1.0)


def test_metrics_wrong_class_is_false_positive():
    gt = [(Box(0, 0, 10, 10), 1)]
    p, r, f1 = pseudo_label_metrics([(Box(0, 0, 10, 10), 2, 0.9)], gt)
    assert (p, r, f1) == (0.0, 0.0, 0.0)


def test_metrics_greedy_matching_prefers_higher_score():
    gt = [(Box(0, 0, 10, 10), 0)]
    preds = [
        (Box(0, 0, 10, 10), 0, 0.5),
        (Box(0.1, 0.1, 10.1, 10.1), 0, 0.9),  # higher score grabs the match
    ]
    p, r, _ = pseudo_label_metrics(preds, gt)
    assert p == pytest.approx(0.5)
    assert r == pytest.approx(1.0)


def test_metrics_empty_inputs():
    assert pseudo_label_metrics([], [(Box(0, 0, 1, 1), 0)]) == (0.0, 0.0, 0.0)
    assert pseudo_label_metrics([(Box(0, 0, 1, 1), 0, 0.9)], []) == (0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# Strategy comparison (small smoke; full 100-seed run lives in acceptance)
# ---------------------------------------------------------------------------

def test_scene_set_f1_strategies_run():
    scenes = make_scenes(0, 4)
    for strategy in ("depf", "ri", "teacher", "vfm"):
        f1 = scene_set_f1(scenes, strategy, FusionConfig())
        assert 0.0 <= f1 <= 1.0


def test_scene_set_f1_unknown_strategy():
    with pytest.raises(ValueError):
        scene_set_f1(make_scenes(0, 1), "magic")


def test_benchmark_smoke():
    results = fusion_strategy_benchmark(num_seeds=5, base_seed=0)
    assert set(results) == {"depf", "teacher", "vfm", "ri"}
    assert all(v.shape == (5,) for v in results.values())
    # Fusion should not lose to the single sources on these seeds.
    assert results["depf"].mean() >= results["teacher"].mean()
    assert results["depf"].mean() >= results["vfm"].mean()

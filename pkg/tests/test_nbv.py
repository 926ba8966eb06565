import math

import numpy as np
import pytest

from stochpsr.core import BoundingBox
from stochpsr.nbv import (
    ScoreSettings,
    ViewSphere,
    baseline_furthest_point,
    baseline_random,
    camera_score,
    global_search,
    local_ascent,
    score_gradient,
    score_params,
    view_sphere_for,
)
from stochpsr.queries import GaussianFieldModel

BUMP = np.array([0.0, 0.5])
FAST = ScoreSettings(ray_samples=24, qmc_points=128, qmc_replicates=4, seed=0)


def bump_scene():
    """Circle of radius 0.5 whose uncertainty peaks at the top of the circle."""

    def std(x):
        return 0.05 * (1 + 3 * np.exp(-np.sum((x - BUMP) ** 2, axis=1) / 0.05))

    def cov(a, b):
        return std(a) * std(b) * np.exp(-np.sum((a - b) ** 2, axis=1) / 0.02)

    box = BoundingBox(np.full(2, -1.0), np.full(2, 1.0))
    return GaussianFieldModel(lambda x: np.linalg.norm(x, axis=1) - 0.5, cov, box)


class TestViewSphere:
    def test_aimed_2d(self):
        sp = ViewSphere(np.array([1.0, 2.0]), 3.0)
        pos, dirn = sp.pose([math.pi / 2])
        assert np.allclose(pos, [1.0, 5.0]) and np.allclose(dirn, [0.0, -1.0])
        assert sp.n_params == 1

    def test_aimed_3d(self):
        sp = ViewSphere(np.zeros(3), 2.0)
        pos, dirn = sp.pose([0.0, 0.0])
        assert np.allclose(pos, [0, 0, 2]) and np.allclose(dirn, [0, 0, -1])
        assert sp.n_params == 2

    @pytest.mark.parametrize("d", [2, 3])
    @pytest.mark.parametrize("mode", ["sphere", "free"])
    def test_modes_agree_when_aimed(self, d, mode):
        aimed = ViewSphere(np.full(d, 0.1), 1.5)
        other = ViewSphere(np.full(d, 0.1), 1.5, mode)
        angles = np.array([0.7]) if d == 2 else np.array([1.1, -0.4])
        p1, d1 = aimed.pose(aimed.aimed_params(angles))
        p2, d2 = other.pose(other.aimed_params(angles))
        assert np.allclose(p1, p2, atol=1e-12) and np.allclose(d1, d2, atol=1e-12)
        assert len(other.aimed_params(angles)) == other.n_params
        assert abs(np.linalg.norm(d2) - 1) < 1e-12

    def test_sphere_mode_deviation(self):
        sp = ViewSphere(np.zeros(2), 1.0, "sphere")
        _, dirn = sp.pose([0.0, math.pi / 2])
        assert np.allclose(dirn, [0.0, -1.0])

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            ViewSphere(np.zeros(2), 1.0, "orbit")

    def test_spread_and_random(self):
        sp = ViewSphere(np.zeros(3), 1.0)
        pts = np.array([sp.pose(sp.aimed_params(a))[0] for a in sp.spread_angles(50, 0)])
        assert abs(pts.mean(axis=0)).max() < 0.05
        assert np.array_equal(sp.random_angles(3), sp.random_angles(3))

    def test_view_sphere_for(self):
        pts = np.array([[0.0, 0.0], [2.0, 0.0]])
        sp = view_sphere_for(pts, 2.0)
        assert np.allclose(sp.center, [1.0, 0.0]) and sp.radius == 2.0


class TestScore:
    def test_equals_variance_at_collision(self):
        scene = bump_scene()
        score, point = camera_score(scene, np.array([0.0, 0.9]), np.array([0.0, -1.0]), FAST)
        assert score == scene.variance(point[None])[0]
        assert abs(point[1] - 0.5) < 0.1 and abs(point[0]) < 1e-12

    def test_miss_scores_zero(self):
        score, point = camera_score(bump_scene(), np.array([3.0, 3.0]), np.array([1.0, 0.0]), FAST)
        assert score == 0.0 and point is None

    def test_no_surface_scores_far_point(self):
        scene = bump_scene()
        empty = GaussianFieldModel(lambda x: np.full(len(x), 5.0), scene.cov_fn, scene.world_box)
        score, point = camera_score(empty, np.array([0.0, 0.9]), np.array([0.0, -1.0]), FAST)
        assert np.allclose(point, [0.0, -1.0]) and score == empty.variance(point[None])[0]

    def test_deterministic(self):
        sp = ViewSphere(np.zeros(2), 0.9)
        assert score_params(bump_scene(), sp, [1.0], FAST) == score_params(bump_scene(), sp, [1.0], FAST)

    def test_fd_gradient_consistent(self):
        scene, sp = bump_scene(), ViewSphere(np.zeros(2), 0.9)
        g = score_gradient(scene, sp, [1.0], 1e-3, FAST)[0]
        coarse = (score_params(scene, sp, [1.02], FAST) - score_params(scene, sp, [0.98], FAST)) / 0.04
        assert g > 0 and abs(g - coarse) < 0.05 * abs(coarse)


class TestSearch:
    def test_local_ascent_improves(self):
        scene, sp = bump_scene(), ViewSphere(np.zeros(2), 0.9)
        pose = local_ascent(scene, sp, [0.6], steps=30, step_size=0.1, settings=FAST)
        assert pose.score > score_params(scene, sp, [0.6], FAST)
        assert np.all(np.diff(pose.history) > 0)
        assert abs(pose.params[0] - math.pi / 2) < 0.1

    def test_global_search_finds_bump(self):
        scene, sp = bump_scene(), ViewSphere(np.zeros(2), 0.9)
        ranked = global_search(scene, sp, n_starts=6, steps=20, step_size=0.1, settings=FAST, seed=1)
        scores = [p.score for p in ranked]
        assert scores == sorted(scores, reverse=True)
        angle = math.atan2(ranked[0].position[1], ranked[0].position[0])
        assert abs(angle - math.pi / 2) < 0.1

    def test_free_mode_stays_outside(self):
        scene, sp = bump_scene(), ViewSphere(np.zeros(2), 0.9, "free")
        pose = local_ascent(scene, sp, sp.aimed_params([0.8]), steps=15, step_size=0.1, settings=FAST)
        assert scene.inside_probability(pose.position[None])[0] < 0.5


class TestBaselines:
    def test_furthest_point_opposite(self):
        sp = ViewSphere(np.zeros(2), 1.0)
        pose = baseline_furthest_point(sp, [[1.0, 0.0]])
        assert np.allclose(pose.position, [-1.0, 0.0], atol=1e-12)
        assert math.isnan(pose.score)

    def test_furthest_point_fills_gap(self):
        sp = ViewSphere(np.zeros(2), 1.0)
        pose = baseline_furthest_point(sp, [[1.0, 0.0], [-1.0, 0.0]])
        assert abs(abs(pose.position[1]) - 1) < 1e-9

    def test_random_baseline(self):
        sp = ViewSphere(np.zeros(3), 2.0)
        a = baseline_random(sp, np.random.default_rng(4))
        b = baseline_random(sp, np.random.default_rng(4))
        assert np.array_equal(a.position, b.position) and abs(np.linalg.norm(a.position) - 2) < 1e-12
        assert np.allclose(a.direction, -a.position / 2)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr
from scipy.stats import multivariate_normal

from oracles import correlated_wall_scene
from stochpsr.core import BoundingBox
from stochpsr.errors import NumericalError, ShapeError
from stochpsr.queries import GaussianFieldModel
from stochpsr.raycast import (
    Ray,
    box_interval,
    discretize,
    expected_collision,
    mvn_orthant_upper,
    naive_opacity,
    ray_in_box,
    transmittance,
)


def bivariate(rho):
    return np.array([[1.0, rho], [rho, 1.0]])


def random_spd(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    return A @ A.T / n + 0.1 * np.eye(n)


def independent_model(mean_fn, var=1.0, box=None):
    box = box or BoundingBox(np.array([0.0, -1.0]), np.array([4.0, 1.0]))
    diag = lambda a, b: np.where(np.all(a == b, axis=1), var, 0.0)
    return GaussianFieldModel(mean_fn, diag, box)


X_RAY = Ray(np.array([0.0, 0.0]), np.array([1.0, 0.0]), t_max=4.0)


class TestOrthant:
    def test_one_dimension(self):
        assert abs(mvn_orthant_upper([0.0], [[1.0]]).probability - 0.5) < 1e-12
        r = mvn_orthant_upper([0.7], [[2.0]])
        # the 1e-10 relative diagonal jitter shifts exact cases by ~1e-11
        assert abs(r.probability - ndtr(0.7 / math.sqrt(2))) < 1e-9

    def test_independence(self):
        m = np.array([0.3, -0.2, 1.0])
        r = mvn_orthant_upper(m, np.eye(3))
        exact = np.cumprod(ndtr(m))
        assert np.all(np.abs(r.prefix - exact) < 1e-9)

    @pytest.mark.parametrize("rho", np.round(np.arange(-0.9, 0.91, 0.1), 1))
    def test_bivariate_closed_form(self, rho):
        r = mvn_orthant_upper([0.0, 0.0], bivariate(rho))
        assert abs(r.probability - (0.25 + math.asin(rho) / (2 * math.pi))) < 1e-3

    def test_third(self):
        assert abs(mvn_orthant_upper([0.0, 0.0], bivariate(0.5)).probability - 1 / 3) < 1e-3

    def test_plain_monte_carlo(self):
        n = 6
        cov = random_spd(n, 3)
        mean = np.linspace(-0.3, 0.8, n)
        rng = np.random.default_rng(0)
        L = np.linalg.cholesky(cov)
        hits = 0
        draws = 10_000_000
        for _ in range(10):
            z = mean + rng.standard_normal((draws // 10, n)) @ L.T
            hits += int(np.all(z > 0, axis=1).sum())
        mc = hits / draws
        r = mvn_orthant_upper(mean, cov, n_points=4096, replicates=8)
        mc_se = math.sqrt(mc * (1 - mc) / draws)
        assert abs(r.probability - mc) < 3 * math.hypot(mc_se, r.stderr) + 2e-4

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_scipy_genz(self, seed):
        cov = random_spd(6, seed)
        mean = np.random.default_rng(seed).normal(scale=0.5, size=6)
        ref = multivariate_normal(mean=-mean, cov=cov).cdf(np.zeros(6))
        r = mvn_orthant_upper(mean, cov, n_points=8192)
        assert abs(r.probability - ref) < 1e-4

    @settings(max_examples=15, deadline=None)
    @given(st.integers(2, 7), st.integers(0, 10_000))
    def test_permutation_invariance(self, n, seed):
        cov = random_spd(n, seed)
        mean = np.random.default_rng(seed).normal(scale=0.5, size=n)
        perm = np.random.default_rng(seed + 1).permutation(n)
        a = mvn_orthant_upper(mean, cov, n_points=2048)
        b = mvn_orthant_upper(mean[perm], cov[np.ix_(perm, perm)], n_points=2048)
        assert abs(a.probability - b.probability) < 4 * math.hypot(a.stderr, b.stderr) + 1e-3

    def test_prefix_monotone_and_deterministic(self):
        cov = random_spd(20, 1)
        a = mvn_orthant_upper(np.zeros(20), cov, seed=5)
        b = mvn_orthant_upper(np.zeros(20), cov, seed=5)
        assert np.array_equal(a.prefix, b.prefix)
        assert np.all(np.diff(a.prefix) <= 0) and 0 <= a.prefix[-1] <= 1

    def test_indefinite_raises(self):
        bad = np.array([[1.0, 0.9, 0.9], [0.9, 1.0, -0.9], [0.9, -0.9, 1.0]])
        with pytest.raises(NumericalError):
            mvn_orthant_upper(np.zeros(3), bad)

    def test_repair_keeps_marginals(self):
        bad = 4.0 * np.array([[1.0, 0.9, 0.9], [0.9, 1.0, -0.9], [0.9, -0.9, 1.0]])
        r = mvn_orthant_upper([0.5, 0.0, 0.0], bad, repair=True)
        assert abs(r.prefix[0] - ndtr(0.25)) < 1e-9

    def test_rejects(self):
        with pytest.raises(NumericalError):
            mvn_orthant_upper([0.0, 0.0], [[1.0, 0.5], [0.4, 1.0]])
        with pytest.raises(NumericalError):
            mvn_orthant_upper([0.0], [[0.0]])
        with pytest.raises(ShapeError):
            mvn_orthant_upper(np.zeros(129), np.eye(129))
        with pytest.raises(ShapeError):
            mvn_orthant_upper(np.zeros(2), np.eye(3))


class TestRays:
    def test_ray_validation(self):
        with pytest.raises(ShapeError):
            Ray(np.zeros(2), np.array([1.0, 1.0]), 1.0)
        with pytest.raises(ShapeError):
            Ray(np.zeros(2), np.array([1.0, 0.0]), 0.0)

    def test_box_interval(self):
        box = BoundingBox(np.full(2, -1.0), np.full(2, 1.0))
        assert box_interval([-3.0, 0.0], [1.0, 0.0], box) == (2.0, 4.0)
        assert box_interval([0.0, 0.0], [0.0, 1.0], box) == (0.0, 1.0)
        assert box_interval([-3.0, 2.0], [1.0, 0.0], box) is None
        assert box_interval([3.0, 0.0], [1.0, 0.0], box) is None
        r = ray_in_box([-3.0, 0.0], [2.0, 0.0], box)
        assert r.t_min == 2.0 and r.t_max == 4.0 and np.array_equal(r.direction, [1.0, 0.0])

    def test_discretization(self):
        scene = correlated_wall_scene()
        disc = discretize(scene, X_RAY, 9)
        assert np.allclose(np.diff(disc.times), 0.5)
        assert np.array_equal(disc.cov, disc.cov.T)


class TestTransmittance:
    def test_independent_product(self):
        model = independent_model(lambda x: 1.5 - x[:, 0])
        tr = transmittance(model, X_RAY, n=16)
        exact = np.cumprod(ndtr(1.5 - tr.times))
        assert np.all(np.abs(tr.values - exact) <= np.maximum(3 * tr.stderr, 1e-9))

    def test_correlated_wall(self):
        scene = correlated_wall_scene()
        ray = Ray(np.array([0.0, 0.0]), np.array([1.0, 0.0]), t_max=4.0)
        tr = transmittance(scene, ray, n=41)
        inside = (tr.times >= 1.0) & (tr.times <= 4.0)
        assert np.allclose(tr.marginal_inside[inside], 0.5, atol=1e-12)
        assert np.all(np.abs(tr.values[inside] - 0.5) < 1e-3)
        _, naive = naive_opacity(scene, ray, n=41)
        assert np.max(np.abs((1 - tr.values) - naive)) > 0.2

    def test_monotone_on_random_model(self):
        box = BoundingBox(np.full(2, -1.0), np.full(2, 1.0))
        model = GaussianFieldModel(lambda x: np.sin(3 * x[:, 0]) + 0.2,
                                   lambda a, b: np.exp(-4 * np.sum((a - b) ** 2, axis=1)), box)
        ray = ray_in_box([-2.0, 0.1], [1.0, 0.2], box)
        tr = transmittance(model, ray, n=64)
        assert np.all(np.diff(tr.values) <= 0) and np.all((tr.values >= 0) & (tr.values <= 1))

    def test_strict_mode_propagates(self):
        scene = GaussianFieldModel(lambda x: np.zeros(len(x)),
                                   lambda a, b: np.where(np.all(a == b, axis=1), 1.0, -0.9),
                                   BoundingBox(np.zeros(2), np.ones(2)))
        ray = Ray(np.array([0.0, 0.5]), np.array([1.0, 0.0]), 1.0)
        with pytest.raises(NumericalError):
            transmittance(scene, ray, n=5, repair=False)
        assert np.all(np.isfinite(transmittance(scene, ray, n=5).values))


class TestNaiveOpacity:
    def test_zero_density(self):
        model = independent_model(lambda x: np.full(len(x), 40.0))
        _, o = naive_opacity(model, X_RAY, 9)
        assert np.all(o == 0)

    def test_half_probability(self):
        model = independent_model(lambda x: np.zeros(len(x)))
        t, o = naive_opacity(model, X_RAY, 17)
        assert np.allclose(o, 1 - np.exp(-t), rtol=0, atol=1e-14)


class TestExpectedCollision:
    def test_no_surface(self):
        model = independent_model(lambda x: np.full(len(x), 40.0))
        t, p, term = expected_collision(model, X_RAY, 16)
        assert t == 4.0 and np.array_equal(p, [4.0, 0.0]) and term < 1e-12

    def test_wall(self):
        model = independent_model(lambda x: 40.0 * (1.3 - x[:, 0]), var=1e-4)
        t, p, term = expected_collision(model, X_RAY, 33)
        assert abs(t - 1.3) <= 4.0 / 32 and abs(term - 1) < 1e-12
        assert np.allclose(p, [t, 0.0])

    def test_refinement_converges(self):
        # correlation length short enough that discretization error dominates QMC noise
        box = BoundingBox(np.array([0.0, -1.0]), np.array([4.0, 1.0]))
        model = GaussianFieldModel(lambda x: 1.0 - 0.5 * x[:, 0],
                                   lambda a, b: 0.25 * np.exp(-4 * np.sum((a - b) ** 2, axis=1)), box)
        ts = [expected_collision(model, X_RAY, n, n_points=4096)[0] for n in (16, 32, 64)]
        deltas = np.abs(np.diff(ts))
        assert deltas[1] < deltas[0]

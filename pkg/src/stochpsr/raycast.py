"""Correlation-aware ray statistics.

Along a ray the implicit values at ``N`` uniformly spaced points are jointly
Gaussian.  The probability that the ray is still unblocked after the ``k``-th
point (transmittance) is the probability that the first ``k`` values are all
positive, an orthant probability computed with a randomized quasi-Monte-Carlo
version of Genz's sequential conditioning.  Because the estimator conditions
the variables in ray order, one pass yields every prefix orthant from the same
QMC points, which makes the transmittance exactly nonincreasing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.special import ndtr, ndtri
from scipy.stats import qmc

from .core import BoundingBox
from .errors import NumericalError, ShapeError

log = logging.getLogger(__name__)

MAX_DIM = 128
JITTER = 1e-10
_U_LO = 1e-300
_U_HI = 1.0 - 2.0**-53


@dataclass(frozen=True)
class OrthantResult:
    probability: float
    stderr: float
    prefix: np.ndarray
    prefix_stderr: np.ndarray


def _cholesky(cov, repair=True):
    """Cholesky factor after a small diagonal jitter.

    A learned covariance is only approximately positive semidefinite; with
    ``repair`` an indefinite matrix is replaced by its eigenvalue-clipped
    projection instead of raising.
    """
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ShapeError(f"covariance must be square, got {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise NumericalError("covariance matrix is not symmetric")
    diag = np.diag(cov)
    if np.any(diag <= 0):
        raise NumericalError("covariance diagonal must be positive")
    sym = 0.5 * (cov + cov.T)
    floor = JITTER * diag.max()
    try:
        return np.linalg.cholesky(sym + floor * np.eye(len(cov)))
    except np.linalg.LinAlgError:
        if not repair:
            raise NumericalError("covariance is not positive semidefinite") from None
    # clip in correlation space, then restore the diagonal so marginals are kept
    scale = np.sqrt(diag)
    corr = sym / np.outer(scale, scale)
    w, V = np.linalg.eigh(corr)
    log.debug("clipping %d negative correlation eigenvalues (min %.3g)", int(np.sum(w < JITTER)), w.min())
    fixed = (V * np.maximum(w, JITTER)) @ V.T
    unit = np.sqrt(np.diag(fixed))
    fixed = fixed / np.outer(unit, unit)
    fixed = 0.5 * (fixed + fixed.T) * np.outer(scale, scale)
    return np.linalg.cholesky(fixed + floor * np.eye(len(cov)))


def mvn_orthant_upper(mean, cov, n_points=256, replicates=8, seed=0, repair=False) -> OrthantResult:
    """``P(Z_i > 0 for all i)`` for ``Z ~ N(mean, cov)`` with prefix probabilities.

    ``prefix[k]`` estimates the orthant probability of the first ``k + 1``
    components.  ``n_points`` is rounded up to a power of two; the standard
    error comes from ``replicates`` independently scrambled Sobol sets.
    An indefinite covariance raises :class:`NumericalError` unless ``repair``
    is set, in which case it is projected onto the nearest valid correlation
    structure with the original variances.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    n = mean.shape[0]
    if n < 1 or n > MAX_DIM:
        raise ShapeError(f"orthant dimension must lie in [1, {MAX_DIM}], got {n}")
    L = _cholesky(np.atleast_2d(cov), repair)
    if L.shape[0] != n:
        raise ShapeError("mean and covariance sizes differ")
    m = max(0, int(np.ceil(np.log2(max(1, n_points)))))
    rng = np.random.default_rng(seed)
    estimates = []
    for _ in range(replicates):
        u = qmc.Sobol(d=n, scramble=True, seed=rng).random_base2(m)
        estimates.append(_genz_prefix(mean, L, u).mean(axis=0))
    est = np.array(estimates)
    prefix = est.mean(axis=0)
    if replicates > 1:
        se = est.std(axis=0, ddof=1) / np.sqrt(replicates)
    else:
        se = np.full(n, np.nan)
    # guard against floating-point reordering; monotone per sample already
    prefix = np.minimum.accumulate(prefix)
    return OrthantResult(float(prefix[-1]), float(se[-1]), prefix, se)


def _genz_prefix(upper, L, u):
    """Per-sample running products ``prod_{i<=k} P(X_i <= upper_i | X_<i)``, ``X ~ N(0, L L^T)``."""
    M, n = u.shape
    y = np.zeros((M, n))
    prod = np.ones(M)
    out = np.empty((M, n))
    for i in range(n):
        shift = y[:, :i] @ L[i, :i] if i else 0.0
        e = ndtr((upper[i] - shift) / L[i, i])
        prod = prod * e
        out[:, i] = prod
        if i + 1 < n:
            y[:, i] = ndtri(np.clip(u[:, i] * e, _U_LO, _U_HI))
    return out


# ---------------------------------------------------------------------------
# rays


@dataclass(frozen=True)
class Ray:
    """Ray ``origin + t * direction`` restricted to ``t_min <= t <= t_max``."""

    origin: np.ndarray
    direction: np.ndarray
    t_max: float
    t_min: float = 0.0

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        dvec = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(dvec) - 1.0) > 1e-9:
            raise ShapeError("ray direction must be a unit vector")
        if not self.t_max > self.t_min >= 0:
            raise ShapeError("ray needs 0 <= t_min < t_max")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", dvec)

    def at(self, t):
        return self.origin + np.asarray(t, dtype=np.float64)[..., None] * self.direction

    def times(self, count):
        return np.linspace(self.t_min, self.t_max, int(count))


def box_interval(origin, direction, box: BoundingBox):
    """Entry and exit parameters of the ray in ``box`` (``None`` if it misses)."""
    o = np.asarray(origin, dtype=np.float64)
    dvec = np.asarray(direction, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (box.min_corner - o) / dvec
        t2 = (box.max_corner - o) / dvec
    lo = np.where(dvec == 0, np.where((o >= box.min_corner) & (o <= box.max_corner), -np.inf, np.inf),
                  np.minimum(t1, t2))
    hi = np.where(dvec == 0, np.where((o >= box.min_corner) & (o <= box.max_corner), np.inf, -np.inf),
                  np.maximum(t1, t2))
    t_in, t_out = max(0.0, float(lo.max())), float(hi.min())
    if t_out <= t_in:
        return None
    return t_in, t_out


def ray_in_box(origin, direction, box: BoundingBox) -> Ray | None:
    dvec = np.asarray(direction, dtype=np.float64)
    dvec = dvec / np.linalg.norm(dvec)
    span = box_interval(origin, dvec, box)
    if span is None:
        return None
    return Ray(origin, dvec, t_max=span[1], t_min=span[0])


@dataclass(frozen=True)
class RayDiscretization:
    times: np.ndarray
    points: np.ndarray
    mean: np.ndarray
    cov: np.ndarray

    @property
    def marginal_inside(self):
        return ndtr(-self.mean / np.sqrt(np.diag(self.cov)))


def discretize(implicit, ray: Ray, n=32) -> RayDiscretization:
    if n < 1:
        raise ShapeError("need at least one ray sample")
    t = ray.times(n)
    pts = ray.at(t)
    return RayDiscretization(t, pts, np.asarray(implicit.mean(pts)), implicit.cov_matrix(pts))


@dataclass(frozen=True)
class Transmittance:
    times: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    marginal_inside: np.ndarray


def transmittance(implicit, ray: Ray, n=32, n_points=256, replicates=8, seed=0, disc=None,
                  repair=True) -> Transmittance:
    """``T_k = P(f > 0 at the first k ray samples)``, nonincreasing in ``k``.

    A learned covariance is positive and symmetric but not guaranteed to be
    positive semidefinite, so by default indefinite ray covariances are
    repaired (see :func:`mvn_orthant_upper`).
    """
    disc = disc if disc is not None else discretize(implicit, ray, n)
    res = mvn_orthant_upper(disc.mean, disc.cov, n_points, replicates, seed, repair)
    return Transmittance(disc.times, res.prefix, res.prefix_stderr, disc.marginal_inside)


def naive_opacity(implicit, ray: Ray, n=32, disc=None):
    """Opacity from marginals treated as independent densities ``p / (1 - p)``.

    Returns ``(times, opacity)``; kept as the correlation-blind baseline.
    """
    disc = disc if disc is not None else discretize(implicit, ray, n)
    p = disc.marginal_inside
    outside = ndtr(disc.mean / np.sqrt(np.diag(disc.cov)))
    with np.errstate(divide="ignore"):
        rho = np.where(outside > 0, p / outside, np.inf)
    if len(disc.times) == 1:
        return disc.times, np.zeros(1)
    integral = cumulative_trapezoid(np.minimum(rho, 1e300), disc.times, initial=0.0)
    return disc.times, -np.expm1(-integral)


def expected_collision(implicit, ray: Ray, n=32, n_points=256, replicates=8, seed=0, trans=None):
    """Expected hit time ``t_min + int T``, the matching point, and ``P(terminated by t_max)``.

    Before ``t_min`` (outside the box) the ray is taken to be unblocked.
    """
    trans = trans if trans is not None else transmittance(implicit, ray, n, n_points, replicates, seed)
    if len(trans.times) == 1:
        t = ray.t_min + float(trans.values[0]) * (ray.t_max - ray.t_min)
    else:
        t = ray.t_min + float(trapezoid(trans.values, trans.times))
    t = min(max(t, ray.t_min), ray.t_max)
    return t, ray.at(t), float(1.0 - trans.values[-1])

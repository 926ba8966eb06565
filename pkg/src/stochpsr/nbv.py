"""Next-best-view scoring and search.

A camera's score is the posterior variance at the expected collision point of
its central ray.  Poses live on a view sphere and are optimized by projected
gradient ascent with finite-difference gradients evaluated under common
random numbers (a fixed QMC seed), then compared across several starts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .raycast import expected_collision, ray_in_box

MODES = ("aimed", "sphere", "free")


@dataclass(frozen=True, eq=False)
class CameraPose:
    position: np.ndarray
    direction: np.ndarray
    params: np.ndarray
    score: float = float("nan")
    gradient: np.ndarray | None = None
    history: list = field(default_factory=list)


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _tangent_basis(u):
    """Two unit vectors orthogonal to the 3D unit vector ``u`` and to each other."""
    helper = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = _unit(np.cross(u, helper))
    return e1, np.cross(u, e1)


@dataclass(frozen=True)
class ViewSphere:
    """Parameterization of candidate camera poses.

    ``aimed``: position angles on the sphere, looking at ``center``.
    ``sphere``: position angles plus a deviation of the view direction from
    the aimed direction (one angle in 2D, two tangent offsets in 3D).
    ``free``: unconstrained position plus direction angles.
    """

    center: np.ndarray
    radius: float
    mode: str = "aimed"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown pose mode {self.mode!r}")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))

    @property
    def d(self):
        return self.center.shape[0]

    @property
    def n_params(self):
        return {"aimed": self.d - 1, "sphere": 2 * (self.d - 1), "free": self.d + self.d - 1}[self.mode]

    def _sphere_point(self, angles):
        if self.d == 2:
            return np.array([math.cos(angles[0]), math.sin(angles[0])])
        theta, phi = angles
        return np.array([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)])

    def _direction_from_angles(self, angles):
        if self.d == 2:
            return np.array([math.cos(angles[0]), math.sin(angles[0])])
        theta, phi = angles
        return np.array([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)])

    def pose(self, params):
        """``(position, direction)`` for a parameter vector."""
        params = np.asarray(params, dtype=np.float64)
        k = self.d - 1
        if self.mode == "free":
            pos = params[: self.d].copy()
            return pos, self._direction_from_angles(params[self.d:])
        u = self._sphere_point(params[:k])
        pos = self.center + self.radius * u
        aim = -u
        if self.mode == "aimed":
            return pos, aim
        dev = params[k:]
        if self.d == 2:
            c, s = math.cos(dev[0]), math.sin(dev[0])
            return pos, np.array([c * aim[0] - s * aim[1], s * aim[0] + c * aim[1]])
        e1, e2 = _tangent_basis(aim)
        return pos, _unit(aim + dev[0] * e1 + dev[1] * e2)

    def aimed_params(self, angles):
        """Parameters of the pose at sphere angles ``angles`` looking at the center."""
        angles = np.atleast_1d(np.asarray(angles, dtype=np.float64))
        if self.mode == "aimed":
            return angles
        if self.mode == "sphere":
            return np.concatenate([angles, np.zeros(self.d - 1)])
        pos = self.center + self.radius * self._sphere_point(angles)
        aim = -self._sphere_point(angles)
        if self.d == 2:
            return np.concatenate([pos, [math.atan2(aim[1], aim[0])]])
        return np.concatenate([pos, [math.acos(np.clip(aim[2], -1, 1)), math.atan2(aim[1], aim[0])]])

    def random_angles(self, rng):
        rng = np.random.default_rng(rng)
        if self.d == 2:
            return np.array([rng.uniform(0, 2 * math.pi)])
        return np.array([math.acos(rng.uniform(-1, 1)), rng.uniform(0, 2 * math.pi)])

    def spread_angles(self, count, rng):
        """``count`` well-spread sphere positions with a random rotation."""
        rng = np.random.default_rng(rng)
        if self.d == 2:
            offset = rng.uniform(0, 2 * math.pi / count)
            return [np.array([offset + 2 * math.pi * k / count]) for k in range(count)]
        golden = math.pi * (3.0 - math.sqrt(5.0))
        spin = rng.uniform(0, 2 * math.pi)
        out = []
        for k in range(count):
            z = 1 - 2 * (k + 0.5) / count
            out.append(np.array([math.acos(z), (spin + golden * k) % (2 * math.pi)]))
        return out

    def candidate_angles(self, count=720):
        if self.d == 2:
            return [np.array([2 * math.pi * k / count]) for k in range(count)]
        return self.spread_angles(count, 0)


def view_sphere_for(points, factor=1.5, mode="aimed") -> ViewSphere:
    """Sphere around ``points``: centred at their centroid, ``factor`` times their bounding radius."""
    pts = np.asarray(points, dtype=np.float64)
    center = pts.mean(axis=0)
    return ViewSphere(center, factor * float(np.linalg.norm(pts - center, axis=1).max()), mode)


@dataclass
class ScoreSettings:
    ray_samples: int = 32
    qmc_points: int = 256
    qmc_replicates: int = 8
    seed: int = 0

    @classmethod
    def from_config(cls, config):
        return cls(config.ray_samples, config.qmc_points, config.qmc_replicates, config.seed)


def camera_score(implicit, position, direction, settings: ScoreSettings | None = None):
    """Variance at the expected collision point of the ray from ``position`` along ``direction``.

    Returns ``(score, collision_point)``; a ray that misses the box scores 0.
    """
    settings = settings or ScoreSettings()
    ray = ray_in_box(position, _unit(direction), implicit.world_box)
    if ray is None:
        return 0.0, None
    _, point, _ = expected_collision(implicit, ray, settings.ray_samples, settings.qmc_points,
                                     settings.qmc_replicates, settings.seed)
    return float(implicit.variance(point[None])[0]), point


def _valid(implicit, space, position, direction):
    if space.mode != "free":
        return True
    return float(implicit.inside_probability(position[None])[0]) < 0.5


def score_params(implicit, space: ViewSphere, params, settings=None):
    pos, dirn = space.pose(params)
    return camera_score(implicit, pos, dirn, settings)[0]


def score_gradient(implicit, space: ViewSphere, params, step=1e-3, settings=None):
    """Central finite differences of the score over the pose parameters."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.zeros_like(params)
    for k in range(len(params)):
        e = np.zeros_like(params)
        e[k] = step
        grad[k] = (score_params(implicit, space, params + e, settings)
                   - score_params(implicit, space, params - e, settings)) / (2 * step)
    return grad


def local_ascent(implicit, space: ViewSphere, params0, steps=50, step_size=0.05, fd_step=1e-3,
                 settings=None, max_halvings=5) -> CameraPose:
    """Normalized-gradient ascent with backtracking; returns the best pose seen."""
    p = np.asarray(params0, dtype=np.float64).copy()
    s = score_params(implicit, space, p, settings)
    history = [s]
    g = np.zeros_like(p)
    for _ in range(steps):
        g = score_gradient(implicit, space, p, fd_step, settings)
        norm = np.linalg.norm(g)
        if not norm > 0:
            break
        h = step_size
        for _ in range(max_halvings + 1):
            q = p + h * g / norm
            pos, dirn = space.pose(q)
            if _valid(implicit, space, pos, dirn):
                sq = score_params(implicit, space, q, settings)
                if sq > s:
                    p, s = q, sq
                    history.append(s)
                    break
            h *= 0.5
        else:
            break
    pos, dirn = space.pose(p)
    return CameraPose(pos, dirn, p, s, g, history)


def global_search(implicit, space: ViewSphere, n_starts=16, steps=50, step_size=0.05, fd_step=1e-3,
                  settings=None, seed=0) -> list:
    """Local ascent from ``n_starts`` spread sphere positions, ranked by final score."""
    starts = space.spread_angles(n_starts, seed)
    results = [local_ascent(implicit, space, space.aimed_params(a), steps, step_size, fd_step, settings)
               for a in starts]
    return sorted(results, key=lambda pose: -pose.score)


def _aimed_pose(implicit, space, angles, settings):
    params = space.aimed_params(angles)
    pos, dirn = space.pose(params)
    score = score_params(implicit, space, params, settings) if implicit is not None else float("nan")
    return CameraPose(pos, dirn, params, score)


def baseline_random(space: ViewSphere, rng, implicit=None, settings=None) -> CameraPose:
    """Uniformly random sphere position looking at the center."""
    return _aimed_pose(implicit, space, space.random_angles(rng), settings)


def baseline_furthest_point(space: ViewSphere, previous_positions, implicit=None, settings=None,
                            candidates=720) -> CameraPose:
    """Sphere position furthest from every previous view position, looking at the center."""
    prev = np.atleast_2d(np.asarray(previous_positions, dtype=np.float64))
    best, best_dist = None, -1.0
    for angles in space.candidate_angles(candidates):
        pos = space.pose(space.aimed_params(angles))[0]
        dist = np.min(np.linalg.norm(prev - pos, axis=1)) if len(prev) else 0.0
        if dist > best_dist + 1e-12:
            best, best_dist = angles, dist
    return _aimed_pose(implicit, space, best, settings)

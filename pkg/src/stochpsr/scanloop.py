"""Simulated depth scanning over ground-truth shapes and the closed scan loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .core import NormalizationTransform, OrientedPointCloud, RunConfig, save_cloud
from .errors import EmptyResult, EmptyScan, InvalidConfig
from .nbv import ScoreSettings, ViewSphere, baseline_furthest_point, baseline_random, global_search
from .queries import Polyline, TriangleMesh, grid_eval, integrated_uncertainty, levelset_from_grid, save_grid, save_implicit
from .training import fine_tune, train

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# ground-truth shapes


class Shape:
    d: int

    def sdf(self, x):
        raise NotImplementedError

    def intersect(self, origins, dirs):
        """First-hit distances (``inf`` on a miss) and outward normals for unit-direction rays."""
        raise NotImplementedError

    def sample_boundary(self, count, rng):
        raise NotImplementedError

    def boundary_measure(self):
        raise NotImplementedError

    def bounds(self):
        raise NotImplementedError

    def contains(self, x):
        return self.sdf(x) < 0


@dataclass(frozen=True)
class Ball(Shape):
    """Disk (2D) or solid sphere (3D)."""

    center: tuple
    radius: float

    @property
    def d(self):
        return len(self.center)

    def sdf(self, x):
        x = np.atleast_2d(x)
        return np.linalg.norm(x - np.asarray(self.center), axis=1) - self.radius

    def intersect(self, origins, dirs):
        o = np.atleast_2d(origins) - np.asarray(self.center)
        dv = np.atleast_2d(dirs)
        b = np.sum(o * dv, axis=1)
        c = np.sum(o * o, axis=1) - self.radius**2
        disc = b * b - c
        t = np.full(len(o), np.inf)
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        # origin outside: nearer root; origin inside: exit root
        t_hit = np.where(t0 > 0, t0, t1)
        ok = hit & (t_hit > 0)
        t[ok] = t_hit[ok]
        pts = o + np.where(np.isfinite(t), t, 0.0)[:, None] * dv
        normals = pts / self.radius
        return t, normals

    def sample_boundary(self, count, rng):
        rng = np.random.default_rng(rng)
        g = rng.standard_normal((count, self.d))
        return np.asarray(self.center) + self.radius * g / np.linalg.norm(g, axis=1, keepdims=True)

    def boundary_measure(self):
        return 2 * math.pi * self.radius if self.d == 2 else 4 * math.pi * self.radius**2

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Union(Shape):
    parts: tuple

    @property
    def d(self):
        return self.parts[0].d

    def sdf(self, x):
        return np.min([p.sdf(x) for p in self.parts], axis=0)

    def intersect(self, origins, dirs):
        best_t = np.full(len(np.atleast_2d(origins)), np.inf)
        best_n = np.zeros((len(best_t), self.d))
        for part in self.parts:
            t, n = part.intersect(origins, dirs)
            closer = t < best_t
            best_t[closer] = t[closer]
            best_n[closer] = n[closer]
        return best_t, best_n

    def sample_boundary(self, count, rng):
        rng = np.random.default_rng(rng)
        out = []
        total = sum(p.boundary_measure() for p in self.parts)
        while sum(len(o) for o in out) < count:
            for k, part in enumerate(self.parts):
                m = max(1, int(math.ceil(count * part.boundary_measure() / total)))
                pts = part.sample_boundary(m, rng)
                others = [q for j, q in enumerate(self.parts) if j != k]
                if others:
                    pts = pts[np.min([q.sdf(pts) for q in others], axis=0) >= 0]
                out.append(pts)
        pts = np.vstack(out)
        return pts[rng.permutation(len(pts))[:count]]

    def boundary_measure(self):
        return sum(p.boundary_measure() for p in self.parts)

    def bounds(self):
        los, his = zip(*(p.bounds() for p in self.parts))
        return np.min(los, axis=0), np.max(his, axis=0)


@dataclass(frozen=True)
class Polygon(Shape):
    """Closed 2D polygon; vertices counter-clockwise."""

    vertices: tuple

    @property
    def d(self):
        return 2

    def _edges(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        return v, np.roll(v, -1, axis=0)

    def sdf(self, x):
        x = np.atleast_2d(x)
        a, b = self._edges()
        ab = b - a
        t = np.clip(np.einsum("kij,ij->ki", x[:, None, :] - a[None], ab) / np.sum(ab * ab, axis=1), 0, 1)
        proj = a[None] + t[..., None] * ab[None]
        dist = np.linalg.norm(x[:, None, :] - proj, axis=2).min(axis=1)
        # even-odd crossing test
        inside = np.zeros(len(x), dtype=bool)
        for p, q in zip(a, b):
            cond = (p[1] > x[:, 1]) != (q[1] > x[:, 1])
            xcross = p[0] + (x[:, 1] - p[1]) * (q[0] - p[0]) / np.where(q[1] != p[1], q[1] - p[1], 1.0)
            inside ^= cond & (x[:, 0] < xcross)
        return np.where(inside, -dist, dist)

    def intersect(self, origins, dirs):
        o = np.atleast_2d(origins)
        dv = np.atleast_2d(dirs)
        a, b = self._edges()
        e = b - a
        cross = lambda u, v: u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]
        denom = cross(dv[:, None, :], e[None])
        w = a[None] - o[:, None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = cross(w, e[None]) / denom
            s = cross(w, dv[:, None, :]) / denom
        valid = (denom != 0) & (t > 1e-12) & (s >= 0) & (s <= 1)
        t = np.where(valid, t, np.inf)
        k = np.argmin(t, axis=1)
        best = t[np.arange(len(o)), k]
        en = e[k]
        normals = np.stack([en[:, 1], -en[:, 0]], axis=1)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        return best, normals

    def sample_boundary(self, count, rng):
        rng = np.random.default_rng(rng)
        a, b = self._edges()
        lengths = np.linalg.norm(b - a, axis=1)
        k = rng.choice(len(a), size=count, p=lengths / lengths.sum())
        t = rng.random(count)
        return a[k] + t[:, None] * (b[k] - a[k])

    def boundary_measure(self):
        a, b = self._edges()
        return float(np.linalg.norm(b - a, axis=1).sum())

    def bounds(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        return v.min(axis=0), v.max(axis=0)


def bumped_circle(radius=1.0, bump_angle=0.0, bump_radius=0.25, bump_offset=None):
    """Unit-ish circle with a small disk fused onto its boundary (a 'defect')."""
    bump_offset = radius if bump_offset is None else bump_offset
    c = (bump_offset * math.cos(bump_angle), bump_offset * math.sin(bump_angle))
    return Union((Ball((0.0, 0.0), radius), Ball(c, bump_radius)))


def parse_shape(spec: str) -> Shape:
    """``circle[:r]``, ``sphere[:r]``, ``bumped-circle[:angle]`` or ``polygon:x0,y0;x1,y1;...``."""
    name, _, arg = spec.partition(":")
    if name == "circle":
        return Ball((0.0, 0.0), float(arg or 1.0))
    if name == "sphere":
        return Ball((0.0, 0.0, 0.0), float(arg or 1.0))
    if name == "bumped-circle":
        return bumped_circle(bump_angle=float(arg or 0.0))
    if name == "polygon":
        verts = tuple(tuple(float(v) for v in pair.split(",")) for pair in arg.split(";"))
        return Polygon(verts)
    raise InvalidConfig(f"unknown shape spec {spec!r}")


# ---------------------------------------------------------------------------
# simulated sensor


def fan_directions(direction, fov, rays):
    """Unit ray directions spread over a fan (2D) or square frustum (3D) of angle ``fov``."""
    dirn = np.asarray(direction, dtype=np.float64)
    dirn = dirn / np.linalg.norm(dirn)
    if len(dirn) == 2:
        ang = np.linspace(-fov / 2, fov / 2, rays) if rays > 1 else np.zeros(1)
        c, s = np.cos(ang), np.sin(ang)
        return np.stack([c * dirn[0] - s * dirn[1], s * dirn[0] + c * dirn[1]], axis=1)
    side = max(1, int(round(math.sqrt(rays))))
    helper = np.array([0.0, 0.0, 1.0]) if abs(dirn[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(dirn, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(dirn, e1)
    span = np.tan(fov / 2) * (np.linspace(-1, 1, side) if side > 1 else np.zeros(1))
    a, b = np.meshgrid(span, span, indexing="ij")
    out = dirn + a.ravel()[:, None] * e1 + b.ravel()[:, None] * e2
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def virtual_scan(shape: Shape, position, direction, fov=math.pi / 3, rays=32, noise_sigma=0.0,
                 rng=None) -> OrientedPointCloud:
    """First-hit points and outward normals seen from a camera; noise is along each ray."""
    position = np.asarray(position, dtype=np.float64)
    if shape.contains(position[None])[0]:
        raise InvalidConfig("camera position lies inside the shape")
    dirs = fan_directions(direction, fov, rays)
    origins = np.broadcast_to(position, dirs.shape)
    t, normals = shape.intersect(origins, dirs)
    hit = np.isfinite(t)
    if not np.any(hit):
        raise EmptyScan("no ray hit the shape")
    t = t[hit]
    if noise_sigma > 0:
        t = t + noise_sigma * np.random.default_rng(rng).standard_normal(len(t))
    return OrientedPointCloud(position + t[:, None] * dirs[hit], normals[hit])


# ---------------------------------------------------------------------------
# metric


def sample_levelset(levelset, count, rng=0):
    if isinstance(levelset, Polyline):
        segs = levelset.segments()
        a = np.vstack([s[0] for s in segs])
        b = np.vstack([s[1] for s in segs])
        lengths = np.linalg.norm(b - a, axis=1)
        rng = np.random.default_rng(rng)
        k = rng.choice(len(a), size=count, p=lengths / lengths.sum())
        t = rng.random(count)
        return a[k] + t[:, None] * (b[k] - a[k])
    if isinstance(levelset, TriangleMesh):
        return levelset.sample(count, rng)
    return np.asarray(levelset, dtype=np.float64)


def chamfer_error(levelset, shape: Shape, n_samples=2000, rng=0) -> float:
    """Symmetric mean nearest-neighbour distance between levelset and shape boundary samples.

    ``levelset`` may be a Polyline, a TriangleMesh, another Shape, or an array of points.
    """
    rng = np.random.default_rng(rng)
    if isinstance(levelset, Shape):
        a = levelset.sample_boundary(n_samples, rng)
    else:
        a = sample_levelset(levelset, n_samples, rng)
    b = shape.sample_boundary(n_samples, rng)
    if len(a) == 0:
        raise EmptyResult("levelset has no points")
    da = cKDTree(b).query(a)[0].mean()
    db = cKDTree(a).query(b)[0].mean()
    return float(0.5 * (da + db))


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class RoundRecord:
    round: int
    strategy: str
    position: np.ndarray
    direction: np.ndarray
    new_points: int
    total_points: int
    integrated_uncertainty: float
    uncertainty_stderr: float
    chamfer: float
    score: float = float("nan")


@dataclass
class ScanSession:
    shape: Shape
    transform: NormalizationTransform
    space: ViewSphere
    cloud: OrientedPointCloud | None = None
    implicit: object = None
    rounds: list = field(default_factory=list)

    def record(self, rec: RoundRecord):
        self.rounds.append(rec)

    @property
    def chamfer_history(self):
        return [r.chamfer for r in self.rounds]

    @property
    def uncertainty_history(self):
        return [r.integrated_uncertainty for r in self.rounds]

    def write_summary(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "strategy", *(f"pos{k}" for k in range(self.space.d)),
                        *(f"dir{k}" for k in range(self.space.d)), "new_points", "total_points",
                        "integrated_uncertainty", "uncertainty_stderr", "chamfer_proxy_error", "score"])
            for r in self.rounds:
                w.writerow([r.round, r.strategy, *map(repr, map(float, r.position)),
                            *map(repr, map(float, r.direction)), r.new_points, r.total_points,
                            repr(r.integrated_uncertainty), repr(r.uncertainty_stderr), repr(r.chamfer),
                            repr(float(r.score))])


def workspace_transform(shape: Shape, view_radius_factor=1.5):
    """Fixed normalization for a session: the shape's bounds mapped onto the unit cube."""
    lo, hi = shape.bounds()
    extent = float(np.max(hi - lo))
    return NormalizationTransform(1.0 / extent, 0.5 * (lo + hi))


def workspace_sphere(shape: Shape, factor=1.5, mode="aimed", rng=0):
    lo, hi = shape.bounds()
    center = 0.5 * (lo + hi)
    pts = shape.sample_boundary(4096, rng)
    return ViewSphere(center, factor * float(np.linalg.norm(pts - center, axis=1).max()), mode)


def reconstruction_error(implicit, shape, config, rng=0):
    grid = grid_eval(implicit, config.grid_resolution)
    try:
        level = levelset_from_grid(grid)
    except EmptyResult:
        return float("inf"), grid
    return chamfer_error(level, shape, rng=rng), grid


def choose_view(strategy, implicit, space, previous_positions, config, rng):
    settings = ScoreSettings.from_config(config)
    if strategy == "ours":
        ranked = global_search(implicit, space, config.nbv_starts, config.nbv_steps, config.nbv_step_size,
                               config.fd_step, settings, seed=int(rng.integers(2**31)))
        return ranked[0]
    if strategy == "random":
        return baseline_random(space, rng, implicit, settings)
    if strategy == "furthest":
        return baseline_furthest_point(space, previous_positions, implicit, settings)
    raise InvalidConfig(f"unknown view strategy {strategy!r}")


def run_session(shape: Shape, config: RunConfig, strategy="ours", initial_angles=None, out_dir=None,
                initial=None, space_mode="aimed") -> ScanSession:
    """Scan, train, then repeatedly pick a view, rescan and fine-tune.

    ``initial`` may carry a precomputed ``(cloud, implicit, position, direction)``
    for round 0 so several strategies can share one pretraining run.
    """
    config = config.replace(d=shape.d)
    transform = workspace_transform(shape, config.view_radius_factor)
    space = workspace_sphere(shape, config.view_radius_factor, space_mode)
    session = ScanSession(shape, transform, space)
    rng = np.random.default_rng([config.seed, 7])
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    if initial is None:
        angles = np.zeros(shape.d - 1) if initial_angles is None else np.atleast_1d(initial_angles)
        if shape.d == 3 and initial_angles is None:
            angles = np.array([math.pi / 2, 0.0])
        pos, dirn = space.pose(space.aimed_params(angles))
        cloud = virtual_scan(shape, pos, dirn, config.scan_fov, config.scan_rays, config.scan_noise,
                             rng=np.random.default_rng([config.seed, 11, 0]))
        implicit = train(cloud, config, transform=transform)
    else:
        cloud, implicit, pos, dirn = initial
    iu, iu_se = integrated_uncertainty(implicit, config.mc_samples, seed=config.seed)
    err, grid = reconstruction_error(implicit, shape, config)
    session.record(RoundRecord(0, "initial", pos, dirn, cloud.n, cloud.n, iu, iu_se, err))
    _dump_round(out_dir, 0, cloud, implicit, grid)
    iu0 = iu
    positions = [pos]
    for r in range(1, config.max_rounds + 1):
        if config.stop_fraction > 0 and iu < config.stop_fraction * iu0:
            log.info("stopping: integrated uncertainty %.4g below %.2f of initial", iu, config.stop_fraction)
            break
        pose = choose_view(strategy, implicit, space, np.array(positions), config, rng)
        try:
            new = virtual_scan(shape, pose.position, pose.direction, config.scan_fov, config.scan_rays,
                               config.scan_noise, rng=np.random.default_rng([config.seed, 11, r]))
        except EmptyScan:
            new = None
        implicit = fine_tune(implicit, new, config, config.finetune_epochs)
        cloud = cloud if new is None else cloud.merge(new)
        positions.append(pose.position)
        iu, iu_se = integrated_uncertainty(implicit, config.mc_samples, seed=config.seed)
        err, grid = reconstruction_error(implicit, shape, config)
        session.record(RoundRecord(r, strategy, pose.position, pose.direction, 0 if new is None else new.n,
                                   cloud.n, iu, iu_se, err, pose.score))
        _dump_round(out_dir, r, cloud, implicit, grid)
        log.info("round %d (%s): points=%d IU=%.5g chamfer=%.5g", r, strategy, cloud.n, iu, err)
    session.cloud = cloud
    session.implicit = implicit
    if out_dir is not None:
        session.write_summary(out_dir / "summary.csv")
    return session


def _dump_round(out_dir, r, cloud, implicit, grid):
    if out_dir is None:
        return
    save_cloud(cloud, out_dir / f"round{r:02d}_cloud.xyz")
    save_implicit(implicit, out_dir / f"round{r:02d}.nssi")
    save_grid(grid, out_dir / f"round{r:02d}_grid.bin")

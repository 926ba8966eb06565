"""Statistical queries against a trained stochastic implicit function.

All public query methods take world coordinates; the networks live in the
normalized frame of the training cloud.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.special import ndtr
from skimage import measure

from .core import BoundingBox, NormalizationTransform, OrientedPointCloud, RunConfig, loose_box
from .errors import CheckpointError, EmptyResult, ShapeError
from .field import ScalarFieldNet, as_tensor, read_net, write_net

CHUNK = 8192


def normal_cdf(x):
    """Standard normal CDF (Cephes ``ndtr``, absolute error well below 1e-15)."""
    return ndtr(x)


def inside_from_moments(mean, variance):
    """``P(f <= 0)`` for ``f ~ N(mean, variance)``."""
    mean = np.asarray(mean, dtype=np.float64)
    return normal_cdf(-mean / np.sqrt(variance))


@dataclass(eq=False)
class StochasticImplicit:
    """Mean and covariance networks plus the frame they were trained in.

    ``cloud`` is the training cloud in normalized coordinates; ``code`` is the
    latent vector fed to both networks when they were trained as an autodecoder.
    """

    mean_net: ScalarFieldNet
    cov_net: ScalarFieldNet
    transform: NormalizationTransform
    config: RunConfig
    cloud: OrientedPointCloud
    code: torch.Tensor | None = None
    latent_table: torch.Tensor | None = None
    history: list = field(default_factory=list)

    @property
    def d(self):
        return self.transform.d

    @property
    def box(self) -> BoundingBox:
        """Reconstruction box in normalized coordinates."""
        return loose_box(self.d, self.config.box_margin)

    @property
    def world_box(self) -> BoundingBox:
        return self.box.map(self.transform.invert)

    def copy(self) -> "StochasticImplicit":
        return copy.deepcopy(self)

    def world_cloud(self) -> OrientedPointCloud:
        return self.transform.invert_cloud(self.cloud)

    # -- normalized-frame tensor queries (differentiable) -------------------

    def _z(self):
        return None if self.code is None else self.code.detach()

    def mean_t(self, xn):
        return self.mean_net(xn, z=self._z())

    def cov_t(self, x1n, x2n):
        return self.cov_net(x1n, x2n, z=self._z())

    # -- world-frame array queries -----------------------------------------

    def _points(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.d:
            raise ShapeError(f"query points must have {self.d} columns, got {x.shape[1]}")
        return self.transform.apply(x), single

    def _chunked(self, fn, *arrays):
        out = []
        with torch.no_grad():
            for k in range(0, len(arrays[0]), CHUNK):
                out.append(fn(*(as_tensor(a[k:k + CHUNK]) for a in arrays)).numpy())
        return np.concatenate(out) if out else np.zeros(0)

    def mean(self, x):
        xn, single = self._points(x)
        out = self._chunked(self.mean_t, xn)
        return out[0] if single else out

    def cov(self, x1, x2):
        a, single = self._points(x1)
        b, _ = self._points(x2)
        a, b = np.broadcast_arrays(a, b)
        out = self._chunked(self.cov_t, np.ascontiguousarray(a), np.ascontiguousarray(b))
        return out[0] if single else out

    def variance(self, x):
        return self.cov(x, x)

    def inside_probability(self, x):
        return inside_from_moments(self.mean(x), self.variance(x))

    def cov_matrix(self, x):
        """Dense covariance matrix over a set of world points."""
        xn, _ = self._points(x)
        n = len(xn)
        i, j = np.triu_indices(n)
        vals = self._chunked(self.cov_t, xn[i], xn[j])
        K = np.empty((n, n))
        K[i, j] = vals
        K[j, i] = vals
        return K


class GaussianFieldModel:
    """Analytic stand-in for a trained implicit: mean and covariance callables.

    ``mean_fn(x)`` maps ``(B, d)`` world points to means and ``cov_fn(x1, x2)``
    maps two ``(B, d)`` arrays to covariances.  Used for constructed scenes.
    """

    def __init__(self, mean_fn, cov_fn, world_box: BoundingBox):
        self.mean_fn = mean_fn
        self.cov_fn = cov_fn
        self.world_box = world_box

    @property
    def d(self):
        return self.world_box.d

    def mean(self, x):
        return np.asarray(self.mean_fn(np.atleast_2d(x)), dtype=np.float64)

    def cov(self, x1, x2):
        a, b = np.broadcast_arrays(np.atleast_2d(x1), np.atleast_2d(x2))
        return np.asarray(self.cov_fn(a, b), dtype=np.float64)

    def variance(self, x):
        return self.cov(x, x)

    def inside_probability(self, x):
        return inside_from_moments(self.mean(x), self.variance(x))

    def cov_matrix(self, x):
        x = np.atleast_2d(x)
        n = len(x)
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        K = self.cov(x[i.ravel()], x[j.ravel()]).reshape(n, n)
        return 0.5 * (K + K.T)


# ---------------------------------------------------------------------------
# grids and levelsets


@dataclass(eq=False)
class GridField:
    """Node values over a world-space box; arrays are indexed ``[i, j(, k)]`` by axis."""

    box: BoundingBox
    mean: np.ndarray
    variance: np.ndarray
    probability: np.ndarray

    @property
    def resolution(self):
        return self.mean.shape

    @property
    def d(self):
        return self.box.d

    def axes(self):
        return [np.linspace(lo, hi, r) for lo, hi, r in zip(self.box.min_corner, self.box.max_corner, self.resolution)]

    def nodes(self):
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def spacing(self):
        return self.box.extent / (np.asarray(self.resolution) - 1)


def grid_eval(implicit, resolution: int, box: BoundingBox | None = None) -> GridField:
    box = box if box is not None else implicit.world_box
    res = (int(resolution),) * box.d
    axes = [np.linspace(lo, hi, r) for lo, hi, r in zip(box.min_corner, box.max_corner, res)]
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    mean = implicit.mean(nodes)
    var = implicit.variance(nodes)
    prob = inside_from_moments(mean, var)
    return GridField(box, mean.reshape(res), var.reshape(res), prob.reshape(res))


_GRID_MAGIC = b"NSGD"
_GRID_VERSION = 1


def save_grid(grid: GridField, path):
    """``b"NSGD" | u32 version | u32 d | u32[d] resolution | f64[d] min | f64[d] max``
    followed by mean, variance and probability as row-major little-endian f64."""
    d = grid.d
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _GRID_MAGIC, _GRID_VERSION, d))
        fh.write(struct.pack(f"<{d}I", *grid.resolution))
        fh.write(np.asarray(grid.box.min_corner, "<f8").tobytes())
        fh.write(np.asarray(grid.box.max_corner, "<f8").tobytes())
        for arr in (grid.mean, grid.variance, grid.probability):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_grid(path) -> GridField:
    raw = Path(path).read_bytes()
    magic, version, d = struct.unpack_from("<4sII", raw)
    if magic != _GRID_MAGIC or version != _GRID_VERSION:
        raise CheckpointError(f"{path}: not a version-{_GRID_VERSION} grid file")
    off = 12
    res = struct.unpack_from(f"<{d}I", raw, off)
    off += 4 * d
    lo = np.frombuffer(raw, "<f8", d, off)
    hi = np.frombuffer(raw, "<f8", d, off + 8 * d)
    off += 16 * d
    count = int(np.prod(res))
    if len(raw) != off + 3 * 8 * count:
        raise CheckpointError(f"{path}: grid file has wrong length")
    arrays = [np.frombuffer(raw, "<f8", count, off + 8 * count * k).reshape(res).copy() for k in range(3)]
    return GridField(BoundingBox(lo.copy(), hi.copy()), *arrays)


@dataclass(eq=False)
class Polyline:
    """Zero-levelset curves in 2D, oriented with the negative side on the left."""

    curves: list

    def points(self):
        return np.vstack(self.curves)

    def segments(self):
        return [(c[:-1], c[1:]) for c in self.curves if len(c) > 1]

    def sample(self, spacing):
        """Points along every segment at roughly ``spacing`` apart."""
        out = []
        for a, b in self.segments():
            lengths = np.linalg.norm(b - a, axis=1)
            for p, q, ln in zip(a, b, lengths):
                k = max(1, int(np.ceil(ln / spacing)))
                t = (np.arange(k) + 0.5) / k
                out.append(p + t[:, None] * (q - p))
        return np.vstack(out) if out else np.zeros((0, 2))


@dataclass(eq=False)
class TriangleMesh:
    """Zero-levelset surface in 3D; faces wind counter-clockwise seen from outside."""

    vertices: np.ndarray
    faces: np.ndarray

    def face_normals(self):
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        n = np.cross(b - a, c - a)
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def sample(self, count, rng=0):
        rng = np.random.default_rng(rng)
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        idx = rng.choice(len(area), size=count, p=area / area.sum())
        r1, r2 = rng.random(count), rng.random(count)
        flip = r1 + r2 > 1
        r1[flip], r2[flip] = 1 - r1[flip], 1 - r2[flip]
        return a[idx] + r1[:, None] * (b[idx] - a[idx]) + r2[:, None] * (c[idx] - a[idx])


def extract_levelset(values: np.ndarray, box: BoundingBox, level: float = 0.0):
    """Zero crossing of a node-valued field (marching squares / cubes).

    ``values`` is indexed ``[i, j(, k)]`` along the box axes.  Returns a
    :class:`Polyline` in 2D and a :class:`TriangleMesh` in 3D, in the box's
    coordinates.  Raises :class:`EmptyResult` when the field never crosses
    ``level``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != box.d:
        raise ShapeError("grid dimension does not match box")
    if not (values.min() < level < values.max()):
        raise EmptyResult("field does not cross the requested level")
    spacing = box.extent / (np.asarray(values.shape) - 1)
    if box.d == 2:
        # 'low' winds counter-clockwise around sub-level regions in index space,
        # which keeps the inside (negative values) on the left of each segment.
        curves = measure.find_contours(values, level, positive_orientation="low")
        curves = [box.min_corner + c * spacing for c in curves if len(c) > 1]
        if not curves:
            raise EmptyResult("no contour segments found")
        return Polyline(curves)
    # with "descent" the winding is counter-clockwise seen from the positive (outer) side
    verts, faces, _, _ = measure.marching_cubes(values, level, spacing=tuple(spacing), gradient_direction="descent")
    if len(faces) == 0:
        raise EmptyResult("no triangles found")
    return TriangleMesh(verts + box.min_corner, faces.astype(np.int64))


def levelset_from_grid(grid: GridField):
    return extract_levelset(grid.mean, grid.box)


def write_obj(mesh: TriangleMesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v %.17g %.17g %.17g\n" % tuple(v))
        for f in mesh.faces + 1:
            fh.write("f %d %d %d\n" % tuple(f))


def write_polyline_csv(poly: Polyline, path):
    with open(path, "w") as fh:
        fh.write("curve,x,y\n")
        for k, c in enumerate(poly.curves):
            for x, y in c:
                fh.write(f"{k},{float(x)!r},{float(y)!r}\n")


def integrated_uncertainty(implicit, mc_samples: int, seed=0):
    """``|B| * E[variance]`` over uniform samples of the normalized box.

    Returns ``(estimate, standard_error)``.
    """
    box = implicit.box
    rng = np.random.default_rng(seed)
    xn = box.min_corner + rng.random((int(mc_samples), box.d)) * box.extent
    var = implicit.variance(implicit.transform.invert(xn))
    vol = box.volume
    return float(vol * var.mean()), float(vol * var.std(ddof=1) / np.sqrt(len(var))) if len(var) > 1 else 0.0


# ---------------------------------------------------------------------------
# implicit checkpoints
#
#   b"NSSI" | u32 version | u32 config_len | config text (utf-8, key=value lines)
#   | u32 d | f64 scale | f64[d] offset
#   | u64 n | f64[n*d] points | f64[n*d] normals          (normalized frame)
#   | u32 code_width | u32 table_rows | u32 table_width | f64[code_width] code | f64[rows*table_width] table
#   | mean network | covariance network                   (see field.write_net)

_IMPL_MAGIC = b"NSSI"
_IMPL_VERSION = 1


def save_implicit(implicit: StochasticImplicit, path):
    cfg = implicit.config.to_text().encode("utf-8")
    d = implicit.d
    code = np.zeros(0) if implicit.code is None else implicit.code.detach().numpy().ravel()
    table = np.zeros((0, 0)) if implicit.latent_table is None else implicit.latent_table.detach().numpy()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _IMPL_MAGIC, _IMPL_VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<Id", d, implicit.transform.scale))
        fh.write(np.asarray(implicit.transform.offset, "<f8").tobytes())
        fh.write(struct.pack("<Q", implicit.cloud.n))
        fh.write(np.asarray(implicit.cloud.points, "<f8").tobytes())
        fh.write(np.asarray(implicit.cloud.normals, "<f8").tobytes())
        fh.write(struct.pack("<III", len(code), *table.shape))
        fh.write(np.asarray(code, "<f8").tobytes())
        fh.write(np.ascontiguousarray(table, "<f8").tobytes())
        write_net(implicit.mean_net, fh)
        write_net(implicit.cov_net, fh)


def load_implicit(path) -> StochasticImplicit:
    def take(n, what):
        buf = fh.read(n)
        if len(buf) != n:
            raise CheckpointError(f"{path}: truncated while reading {what}")
        return buf

    with open(path, "rb") as fh:
        magic, version, cfg_len = struct.unpack("<4sII", take(12, "header"))
        if magic != _IMPL_MAGIC:
            raise CheckpointError(f"{path}: not a reconstruction checkpoint")
        if version != _IMPL_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        config = RunConfig.from_text(take(cfg_len, "config").decode("utf-8"))
        d, scale = struct.unpack("<Id", take(12, "transform"))
        offset = np.frombuffer(take(8 * d, "offset"), "<f8").astype(np.float64)
        (n,) = struct.unpack("<Q", take(8, "cloud size"))
        pts = np.frombuffer(take(8 * n * d, "points"), "<f8").reshape(n, d)
        nrm = np.frombuffer(take(8 * n * d, "normals"), "<f8").reshape(n, d)
        width, rows, table_width = struct.unpack("<III", take(12, "latent header"))
        code = np.frombuffer(take(8 * width, "code"), "<f8").astype(np.float64)
        table = np.frombuffer(take(8 * table_width * rows, "latent table"), "<f8").reshape(rows, table_width)
        mean_net = read_net(fh)
        cov_net = read_net(fh)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after checkpoint")
    return StochasticImplicit(
        mean_net, cov_net, NormalizationTransform(scale, offset), config, OrientedPointCloud(pts, nrm),
        code=torch.from_numpy(code.copy()) if width else None,
        latent_table=torch.from_numpy(table.copy()) if rows else None,
    )

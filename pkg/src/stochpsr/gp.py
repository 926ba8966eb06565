"""Training data for the mean and covariance fields.

Normals are smeared into a vector field with a compactly supported,
approximately Gaussian kernel and conditioned as a Gaussian process:

    mu    = K2 D^-1 N
    Sigma = K1 - K2 D^-1 K2^T

with ``K1 = F(x_i, x_j)`` over box samples, ``K2 = F(x_i, p_j)`` between
samples and cloud points, and ``D`` the row-sum lumping of ``K3 = F(p_i, p_j)``.
``Sigma`` is never formed; instead the sparse factor ``W = K2 D^-1/2`` is kept so
any entry costs one sparse row product.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .core import BoundingBox, OrientedPointCloud
from .errors import CheckpointError, InvalidConfig, ShapeError

LUMP_FLOOR = 1e-12


def bspline3(u):
    """Centred cubic B-spline (four boxes convolved), support ``[-2, 2]``, unit mass."""
    a = np.abs(np.asarray(u, dtype=np.float64))
    out = np.zeros_like(a)
    inner = a < 1.0
    outer = (a >= 1.0) & (a < 2.0)
    ai = a[inner]
    out[inner] = 2.0 / 3.0 - ai * ai + 0.5 * ai * ai * ai
    ao = 2.0 - a[outer]
    out[outer] = ao * ao * ao / 6.0
    return out


@dataclass(frozen=True)
class SmearKernel:
    """Tensor product of per-axis cubic B-splines with variance ``sigma**2``.

    Each axis factor is a probability density, so the kernel integrates to one.
    """

    sigma: float
    d: int

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidConfig(f"kernel sigma must be positive, got {self.sigma}")
        if self.d not in (2, 3):
            raise InvalidConfig(f"kernel dimension must be 2 or 3, got {self.d}")

    @property
    def knot_spacing(self) -> float:
        # the unit cubic B-spline has variance 1/3
        return self.sigma * math.sqrt(3.0)

    @property
    def axis_radius(self) -> float:
        """Half-width of the (Chebyshev) support box."""
        return 2.0 * self.knot_spacing

    @property
    def support_radius(self) -> float:
        """Euclidean radius outside which the kernel vanishes."""
        return self.axis_radius * math.sqrt(self.d)

    @property
    def peak(self) -> float:
        return (2.0 / (3.0 * self.knot_spacing)) ** self.d

    def axis_factor(self, t):
        h = self.knot_spacing
        return bspline3(np.asarray(t) / h) / h

    def __call__(self, x, y):
        """Kernel value between broadcastable ``(..., d)`` arrays."""
        diff = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
        return np.prod(self.axis_factor(diff), axis=-1)


def kernel_eval(kernel: SmearKernel, x, y) -> float:
    return float(kernel(x, y))


def sample_box(box: BoundingBox, count: int, rng) -> np.ndarray:
    """``count`` i.i.d. uniform positions in ``box``; ``rng`` is a seed or Generator."""
    if count < 1:
        raise InvalidConfig(f"sample count must be at least 1, got {count}")
    rng = np.random.default_rng(rng)
    return box.min_corner + rng.random((count, box.d)) * box.extent


def _kernel_pairs(kernel, tree_a, a, tree_b, b):
    """Sparse ``(len(a), len(b))`` matrix of kernel values over the support."""
    pairs = tree_a.sparse_distance_matrix(tree_b, kernel.axis_radius, p=np.inf, output_type="ndarray")
    rows = pairs["i"].astype(np.int64)
    cols = pairs["j"].astype(np.int64)
    vals = kernel(a[rows], b[cols])
    keep = vals > 0.0
    mat = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(len(a), len(b)))
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


@dataclass(frozen=True, eq=False)
class PosteriorSampleSet:
    """Box samples with their posterior mean vectors and a factored covariance.

    ``cov_factors`` is the CSR matrix ``W = K2 D^-1/2`` of shape ``(s, n)``;
    ``prior_diag`` holds ``F(x_i, x_i)``.
    """

    samples: np.ndarray
    mean_vectors: np.ndarray
    cov_factors: sp.csr_matrix
    prior_diag: np.ndarray
    kernel: SmearKernel
    lumped: np.ndarray

    @property
    def s(self):
        return self.samples.shape[0]

    @property
    def n(self):
        return self.cov_factors.shape[1]

    def cov_entry(self, i: int, j: int) -> float:
        return float(self.cov_entries(np.array([i]), np.array([j]))[0])

    def cov_entries(self, rows, cols) -> np.ndarray:
        """Vectorized ``Sigma[rows[k], cols[k]]``; diagonal entries clamped at zero."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        prior = self.kernel(self.samples[rows], self.samples[cols])
        w = self.cov_factors
        inner = np.asarray(w[rows].multiply(w[cols]).sum(axis=1)).ravel()
        out = prior - inner
        diag = rows == cols
        out[diag] = np.maximum(out[diag], 0.0)
        return out

    def variances(self) -> np.ndarray:
        idx = np.arange(self.s)
        return self.cov_entries(idx, idx)

    def dense_covariance(self) -> np.ndarray:
        """Full ``(s, s)`` covariance; for small sets and tests only."""
        i, j = np.meshgrid(np.arange(self.s), np.arange(self.s), indexing="ij")
        return self.cov_entries(i.ravel(), j.ravel()).reshape(self.s, self.s)


def assemble_posterior(cloud: OrientedPointCloud, samples, kernel: SmearKernel) -> PosteriorSampleSet:
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != cloud.d:
        raise ShapeError(f"samples must be (s, {cloud.d}), got {samples.shape}")
    pts = cloud.points
    tree_p = cKDTree(pts)
    tree_x = cKDTree(samples)
    k3 = _kernel_pairs(kernel, tree_p, pts, tree_p, pts)
    lumped = np.maximum(np.asarray(k3.sum(axis=1)).ravel(), LUMP_FLOOR)
    k2 = _kernel_pairs(kernel, tree_x, samples, tree_p, pts)
    mean_vectors = k2 @ (cloud.normals / lumped[:, None])
    w = (k2 @ sp.diags(1.0 / np.sqrt(lumped))).tocsr()
    w.sort_indices()
    prior = np.full(len(samples), kernel.peak)
    for arr in (samples, mean_vectors, prior, lumped):
        arr.setflags(write=False)
    return PosteriorSampleSet(samples, np.asarray(mean_vectors), w, prior, kernel, lumped)


def cov_entry(sample_set: PosteriorSampleSet, i: int, j: int) -> float:
    return sample_set.cov_entry(i, j)


# ---------------------------------------------------------------------------
# binary dump
#
#   magic  b"NSPS" | u32 version | u32 d | u64 s | u64 n | u64 nnz | f64 sigma
#   f64[s*d] samples | f64[s*d] mean_vectors | f64[s] prior_diag | f64[n] lumped
#   i64[s+1] indptr | i64[nnz] indices | f64[nnz] data      (all little-endian)

_MAGIC = b"NSPS"
_VERSION = 1
_HEADER = struct.Struct("<4sIIQQQd")


def dump_sample_set(sample_set: PosteriorSampleSet, path):
    w = sample_set.cov_factors
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, sample_set.kernel.d, sample_set.s, sample_set.n, w.nnz,
                              sample_set.kernel.sigma))
        for arr, dt in ((sample_set.samples, "<f8"), (sample_set.mean_vectors, "<f8"),
                        (sample_set.prior_diag, "<f8"), (sample_set.lumped, "<f8"),
                        (w.indptr, "<i8"), (w.indices, "<i8"), (w.data, "<f8")):
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_sample_set(path) -> PosteriorSampleSet:
    raw = open(path, "rb").read()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated sample set header")
    magic, version, d, s, n, nnz, sigma = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise CheckpointError(f"{path}: not a sample set file")
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported sample set version {version}")
    sizes = [(s * d, "<f8"), (s * d, "<f8"), (s, "<f8"), (n, "<f8"), (s + 1, "<i8"), (nnz, "<i8"), (nnz, "<f8")]
    need = _HEADER.size + sum(k * 8 for k, _ in sizes)
    if len(raw) != need:
        raise CheckpointError(f"{path}: expected {need} bytes, found {len(raw)}")
    off, out = _HEADER.size, []
    for count, dt in sizes:
        out.append(np.frombuffer(raw, dtype=dt, count=count, offset=off).copy())
        off += count * 8
    samples, mean_vectors, prior, lumped, indptr, indices, data = out
    w = sp.csr_matrix((data, indices, indptr), shape=(s, n))
    return PosteriorSampleSet(samples.reshape(s, d), mean_vectors.reshape(s, d), w, prior,
                              SmearKernel(sigma, d), lumped)

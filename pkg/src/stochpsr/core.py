"""Domain types shared by all modules: point clouds, boxes, normalization, config."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateInput, InvalidConfig, ShapeError

log = logging.getLogger(__name__)

_NORMAL_WARN_TOL = 1e-3


def _frozen(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class OrientedPointCloud:
    """Points with outward unit normals, both ``(n, d)`` float arrays.

    Normals are renormalized on construction; a warning is logged when an
    input normal is noticeably off unit length.
    """

    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        nrm = np.atleast_2d(np.asarray(self.normals, dtype=np.float64))
        if pts.ndim != 2 or nrm.shape != pts.shape:
            raise ShapeError(f"points {pts.shape} and normals {nrm.shape} must both be (n, d)")
        if pts.shape[0] < 1:
            raise ShapeError("point cloud must contain at least one point")
        if pts.shape[1] not in (2, 3):
            raise ShapeError(f"dimension must be 2 or 3, got {pts.shape[1]}")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(nrm))):
            raise ShapeError("point cloud contains non-finite coordinates")
        norms = np.linalg.norm(nrm, axis=1)
        if np.any(norms == 0.0):
            raise ShapeError("zero-length normal in point cloud")
        off = np.abs(norms - 1.0)
        if np.any(off > _NORMAL_WARN_TOL):
            log.warning("renormalized %d normals with |norm - 1| > %g", int(np.sum(off > _NORMAL_WARN_TOL)), _NORMAL_WARN_TOL)
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "normals", _frozen(nrm / norms[:, None]))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.n

    def merge(self, other: "OrientedPointCloud") -> "OrientedPointCloud":
        if other.d != self.d:
            raise ShapeError("cannot merge clouds of different dimension")
        return OrientedPointCloud(np.vstack([self.points, other.points]), np.vstack([self.normals, other.normals]))


@dataclass(frozen=True, eq=False)
class NormalizationTransform:
    """Maps world coordinates ``x`` to ``(x - offset) * scale``."""

    scale: float
    offset: np.ndarray

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise InvalidConfig(f"scale must be positive and finite, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "offset", _frozen(self.offset))

    @classmethod
    def identity(cls, d):
        return cls(1.0, np.zeros(d))

    @property
    def d(self):
        return self.offset.shape[0]

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.offset) * self.scale

    def invert(self, y):
        return np.asarray(y, dtype=np.float64) / self.scale + self.offset

    def apply_cloud(self, cloud: OrientedPointCloud) -> OrientedPointCloud:
        return OrientedPointCloud(self.apply(cloud.points), cloud.normals)

    def invert_cloud(self, cloud: OrientedPointCloud) -> OrientedPointCloud:
        return OrientedPointCloud(self.invert(cloud.points), cloud.normals)


@dataclass(frozen=True, eq=False)
class BoundingBox:
    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo, hi = _frozen(self.min_corner), _frozen(self.max_corner)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ShapeError("box corners must be d-vectors of equal length")
        if not np.all(hi > lo):
            raise InvalidConfig("box max_corner must exceed min_corner componentwise")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @property
    def d(self):
        return self.min_corner.shape[0]

    @property
    def extent(self):
        return self.max_corner - self.min_corner

    @property
    def center(self):
        return 0.5 * (self.min_corner + self.max_corner)

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.all((x >= self.min_corner) & (x <= self.max_corner), axis=-1)

    def map(self, transform_fn):
        """Box spanned by the images of the corners under an affine, axis-preserving map."""
        a, b = transform_fn(self.min_corner), transform_fn(self.max_corner)
        return BoundingBox(np.minimum(a, b), np.maximum(a, b))


def normalize_cloud(cloud: OrientedPointCloud):
    """Rescale so the longest axis spans exactly ``[-0.5, 0.5]``, centred at the origin.

    Returns the normalized cloud and the transform that produced it.
    """
    lo = cloud.points.min(axis=0)
    hi = cloud.points.max(axis=0)
    extent = float(np.max(hi - lo))
    if not extent > 0:
        raise DegenerateInput("point cloud has zero extent on every axis")
    transform = NormalizationTransform(1.0 / extent, 0.5 * (lo + hi))
    return transform.apply_cloud(cloud), transform


def loose_box(cloud_or_d, margin: float = 0.25) -> BoundingBox:
    """The normalized unit cube grown by ``margin`` on every side."""
    if not margin > 0:
        raise InvalidConfig(f"box margin must be positive, got {margin}")
    d = cloud_or_d if isinstance(cloud_or_d, (int, np.integer)) else cloud_or_d.d
    half = 0.5 + margin
    return BoundingBox(np.full(d, -half), np.full(d, half))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    d: int = 3
    # data generation
    kernel_sigma: float = 0.02
    box_margin: float = 0.25
    sample_at_points: bool = False
    # losses / optimisation
    lambda_screen: float = 100.0
    samples_per_epoch: int = 100_000
    batch_size: int = 512
    epochs: int = 100
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    diag_pair_fraction: float = 0.0
    finetune_epochs: int = 5
    checkpoint_every: int = 0
    seed: int = 0
    # networks
    hidden_width: int = 512
    depth: int = 5
    omega0: float = 30.0
    # queries and ray casting
    grid_resolution: int = 64
    ray_samples: int = 32
    qmc_points: int = 256
    qmc_replicates: int = 8
    mc_samples: int = 4096
    # next-best-view
    nbv_starts: int = 16
    nbv_steps: int = 50
    nbv_step_size: float = 0.05
    fd_step: float = 1e-3
    view_radius_factor: float = 1.5
    # simulated scanning
    scan_fov: float = math.pi / 3
    scan_rays: int = 32
    scan_noise: float = 0.0
    max_rounds: int = 4
    stop_fraction: float = 0.2
    # autodecoder
    latent_width: int = 16
    code_init_sigma: float = 0.01
    infer_iters: int = 200
    latent_learning_rate: float = 1e-3
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.d not in (2, 3):
            raise InvalidConfig(f"d must be 2 or 3, got {self.d}")
        positive = [
            "kernel_sigma", "box_margin", "samples_per_epoch", "batch_size", "learning_rate",
            "hidden_width", "depth", "omega0", "ray_samples", "qmc_points", "qmc_replicates",
            "mc_samples", "nbv_starts", "nbv_step_size", "fd_step", "view_radius_factor",
            "scan_fov", "scan_rays", "grid_resolution", "code_init_sigma", "latent_learning_rate",
            "threads",
        ]
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"{name} must be positive, got {getattr(self, name)}")
        nonneg = [
            "lambda_screen", "epochs", "weight_decay", "finetune_epochs", "checkpoint_every",
            "nbv_steps", "scan_noise", "max_rounds", "stop_fraction", "latent_width", "infer_iters",
        ]
        for name in nonneg:
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0.0 <= self.diag_pair_fraction <= 1.0:
            raise InvalidConfig("diag_pair_fraction must lie in [0, 1]")
        if self.depth < 2:
            raise InvalidConfig("depth must be at least 2 (one sine layer plus the linear head)")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig("seed must be a 64-bit unsigned integer")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name}={_format_value(getattr(self, f.name))}\n" for f in dataclasses.fields(self))

    @classmethod
    def field_types(cls):
        return {f.name: type(f.default) for f in dataclasses.fields(cls)}

    @classmethod
    def from_mapping(cls, values: dict, base: "RunConfig | None" = None) -> "RunConfig":
        types = cls.field_types()
        parsed = {}
        for key, raw in values.items():
            if key not in types:
                raise InvalidConfig(f"unknown config key {key!r}")
            parsed[key] = _parse_value(raw, types[key], key)
        base = base if base is not None else cls()
        return dataclasses.replace(base, **parsed)

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidConfig(f"config line {lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        return cls.from_mapping(values, base)

    @classmethod
    def load(cls, path, base=None) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), base)


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw, typ, key):
    if not isinstance(raw, str):
        return typ(raw)
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw, 0)
        return typ(raw)
    except ValueError:
        raise InvalidConfig(f"bad value for {key}: {raw!r}") from None


# ---------------------------------------------------------------------------
# point cloud I/O


def load_cloud(path) -> OrientedPointCloud:
    """Read a ``.ply`` file or whitespace-separated text (``x.. nx..`` per line)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(3)
    if head == b"ply":
        return _read_ply(path)
    data = np.loadtxt(path, dtype=np.float64, ndmin=2, comments="#")
    if data.shape[1] not in (4, 6):
        raise ShapeError(f"{path}: expected 4 or 6 columns (points then normals), got {data.shape[1]}")
    d = data.shape[1] // 2
    return OrientedPointCloud(data[:, :d], data[:, d:])


def save_cloud(cloud: OrientedPointCloud, path):
    path = Path(path)
    if path.suffix.lower() == ".ply":
        _write_ply(cloud, path)
    else:
        np.savetxt(path, np.hstack([cloud.points, cloud.normals]), fmt="%.17g")


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_ply(path) -> OrientedPointCloud:
    with open(path, "rb") as fh:
        fmt, elements = None, []
        while True:
            line = fh.readline()
            if not line:
                raise ShapeError(f"{path}: truncated PLY header")
            tok = line.decode("ascii").split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append((tok[1], int(tok[2]), []))
            elif tok[0] == "property":
                if tok[1] == "list":
                    if elements and elements[-1][0] == "vertex":
                        raise ShapeError(f"{path}: list properties on vertices are not supported")
                    elements[-1][2].append((tok[-1], None))
                else:
                    elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
            elif tok[0] == "end_header":
                break
        if not elements or elements[0][0] != "vertex":
            raise ShapeError(f"{path}: first PLY element must be 'vertex'")
        _, count, props = elements[0]
        names = [p[0] for p in props]
        if fmt == "ascii":
            rows = [fh.readline().split() for _ in range(count)]
            table = {name: np.array([float(r[i]) for r in rows]) for i, name in enumerate(names)}
        elif fmt in ("binary_little_endian", "binary_big_endian"):
            endian = "<" if fmt == "binary_little_endian" else ">"
            dtype = np.dtype([(name, endian + t) for name, t in props])
            buf = fh.read(dtype.itemsize * count)
            if len(buf) < dtype.itemsize * count:
                raise ShapeError(f"{path}: truncated PLY vertex data")
            rec = np.frombuffer(buf, dtype=dtype, count=count)
            table = {name: rec[name].astype(np.float64) for name in names}
        else:
            raise ShapeError(f"{path}: unsupported PLY format {fmt!r}")
    axes = ["x", "y", "z"] if "z" in table else ["x", "y"]
    normal_axes = ["n" + a for a in axes]
    missing = [k for k in axes + normal_axes if k not in table]
    if missing:
        raise ShapeError(f"{path}: PLY vertex element lacks properties {missing}")
    return OrientedPointCloud(
        np.column_stack([table[a] for a in axes]), np.column_stack([table[a] for a in normal_axes])
    )


def _write_ply(cloud: OrientedPointCloud, path):
    axes = "xyz"[: cloud.d]
    names = list(axes) + ["n" + a for a in axes]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {cloud.n}"]
    header += [f"property double {name}" for name in names] + ["end_header", ""]
    data = np.ascontiguousarray(np.hstack([cloud.points, cloud.normals]), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write("\n".join(header).encode("ascii"))
        fh.write(data.tobytes())

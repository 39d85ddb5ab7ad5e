"""Level-set geometry on a uniform Cartesian grid.

The meshing region is the positive phase ``phi > 0``; the zero level set is
the surface that surface particles live on.  Primitive shapes are rasterised
as exact signed distance fields, composite shapes through min/max CSG.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "GeometryError",
    "OutOfDomainError",
    "DegenerateNormalError",
    "ProjectionError",
    "LevelSetGrid",
    "FeatureCurve",
    "SingularityPoint",
    "Primitive",
    "build_levelset",
    "eval_phi",
    "eval_gradient",
    "eval_normal",
    "project_to_zero_levelset",
    "project_to_level",
    "nearest_point_on_polyline",
    "read_field_file",
    "write_field_file",
]


class GeometryError(ValueError):
    """Invalid geometry input."""


class OutOfDomainError(GeometryError):
    pass


class DegenerateNormalError(GeometryError):
    pass


class ProjectionError(GeometryError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass
class LevelSetGrid:
    """Nodal scalar field ``values[i, j(, k)]`` at ``origin + index * spacing``."""

    origin: np.ndarray
    spacing: np.ndarray
    values: np.ndarray
    # analytic SDF the grid was sampled from, if any (used by tests/diagnostics only)
    source: "Primitive | None" = field(default=None, repr=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.spacing = np.asarray(self.spacing, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.dim not in (2, 3):
            raise GeometryError(f"grid dimension must be 2 or 3, got {self.dim}")
        if self.origin.shape != (self.dim,) or self.spacing.shape != (self.dim,):
            raise GeometryError("origin/spacing do not match the value array rank")
        if np.any(self.spacing <= 0):
            raise GeometryError("grid spacing must be positive on every axis")
        if np.any(np.array(self.values.shape) < 2):
            raise GeometryError("grid needs at least 2 nodes per axis")

    @property
    def dim(self) -> int:
        return self.values.ndim

    @property
    def dims(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def cell_dims(self) -> tuple[int, ...]:
        return tuple(n - 1 for n in self.values.shape)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.spacing * (np.array(self.dims) - 1)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.upper - self.origin))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def node_coords(self) -> list[np.ndarray]:
        return [self.origin[a] + self.spacing[a] * np.arange(n) for a, n in enumerate(self.dims)]

    def cell_centers(self) -> np.ndarray:
        """Cell centres as an array of shape ``cell_dims + (dim,)``."""
        axes = [self.origin[a] + self.spacing[a] * (np.arange(n) + 0.5)
                for a, n in enumerate(self.cell_dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def cell_corner_values(self) -> np.ndarray:
        """Nodal values at the ``2**dim`` corners of every cell, stacked on the last axis."""
        v = self.values
        corners = []
        for offs in np.ndindex(*([2] * self.dim)):
            sl = tuple(slice(o, o + n - 1) for o, n in zip(offs, v.shape))
            corners.append(v[sl])
        return np.stack(corners, axis=-1)

    def cell_index(self, x: np.ndarray) -> np.ndarray:
        """Integer cell index containing each point, clipped to the grid."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        idx = np.floor((x - self.origin) / self.spacing).astype(np.int64)
        return np.clip(idx, 0, np.array(self.cell_dims) - 1)

    def contains(self, x: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        slack = tol * self.spacing
        return np.all((x >= self.origin - slack) & (x <= self.upper + slack), axis=1)


# ---------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Primitive:
    """Analytic signed distance description, positive inside the meshing region.

    ``kind`` is one of ``circle`` (also used for spheres), ``box``,
    ``zalesak`` or ``field`` (imported gridded values, see :func:`read_field_file`).
    """

    kind: str
    center: tuple[float, ...] = ()
    radius: float = 0.0
    lo: tuple[float, ...] = ()
    hi: tuple[float, ...] = ()
    slot_width: float = 0.0
    slot_length: float = 0.0
    path: str = ""

    @property
    def dim(self) -> int:
        if self.kind in ("circle", "sphere", "zalesak"):
            return len(self.center)
        if self.kind == "box":
            return len(self.lo)
        raise GeometryError("dimension of an imported field is read from its file")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind in ("circle", "sphere", "zalesak"):
            c = np.asarray(self.center, float)
            return c - self.radius, c + self.radius
        if self.kind == "box":
            return np.asarray(self.lo, float), np.asarray(self.hi, float)
        raise GeometryError(f"no analytic bounds for {self.kind!r}")

    def narrowest(self) -> float:
        """Thinnest geometric dimension, used to reject grids that are too coarse."""
        if self.kind in ("circle", "sphere"):
            return 2.0 * self.radius
        if self.kind == "box":
            return float(np.min(np.subtract(self.hi, self.lo)))
        if self.kind == "zalesak":
            bridge = self.radius - (self.slot_length - self.radius)
            return float(min(self.slot_width, bridge, self.radius - 0.5 * self.slot_width))
        return math.inf

    def slot_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned slot of a Zalesak disk: opens downward through the rim."""
        cx, cy = self.center
        w, length = self.slot_width, self.slot_length
        lo = np.array([cx - 0.5 * w, cy - self.radius - 1.0 * self.radius])
        hi = np.array([cx + 0.5 * w, cy - self.radius + length])
        return lo, hi

    def singular_points(self) -> np.ndarray:
        """Sharp corners of the shape (the 2D corners of a box, or the Zalesak slot corners)."""
        if self.kind == "zalesak":
            cx, cy = self.center
            hw = 0.5 * self.slot_width
            y_rim = cy - math.sqrt(self.radius**2 - hw**2)
            y_top = cy - self.radius + self.slot_length
            return np.array([[cx - hw, y_rim], [cx + hw, y_rim],
                             [cx + hw, y_top], [cx - hw, y_top]])
        if self.kind == "box":
            lo, hi = self.bounds()
            return np.array([[hi[a] if (k >> a) & 1 else lo[a] for a in range(len(lo))]
                             for k in range(2 ** len(lo))])
        return np.zeros((0, self.dim))

    def sdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind in ("circle", "sphere"):
            return self.radius - np.linalg.norm(x - np.asarray(self.center), axis=-1)
        if self.kind == "box":
            return -_box_sdf(x, *self.bounds())
        if self.kind == "zalesak":
            disk = self.radius - np.linalg.norm(x - np.asarray(self.center), axis=-1)
            slot_inside = -_box_sdf(x, *self.slot_box())
            return np.minimum(disk, -slot_inside)
        raise GeometryError(f"unknown primitive {self.kind!r}")


def _box_sdf(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Exact signed distance to an axis-aligned box, negative inside."""
    c = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    q = np.abs(x - c) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def build_levelset(primitive: Primitive, spacing: float, lo=None, hi=None,
                   ghost: float | None = None) -> LevelSetGrid:
    """Sample ``primitive`` on a grid covering ``[lo, hi]`` plus ghost layers.

    The box is padded by ``ghost`` (at least two cells).  For shapes with
    axis-aligned faces (box, slot) the origin is shifted by half a cell so
    that those faces cut through cell interiors rather than along grid lines.
    """
    if primitive.kind == "field":
        return read_field_file(primitive.path)
    if spacing <= 0:
        raise GeometryError("grid spacing must be positive")
    narrow = primitive.narrowest()
    if narrow < 2.0 * spacing:
        raise GeometryError(
            f"grid spacing {spacing:g} too coarse: narrowest feature {narrow:g} "
            f"needs spacing <= {narrow / 2:g}")
    plo, phi_ = primitive.bounds()
    lo = plo if lo is None else np.asarray(lo, float)
    hi = phi_ if hi is None else np.asarray(hi, float)
    pad = max(2.0 * spacing, 0.0 if ghost is None else ghost)
    n_pad = int(math.ceil(pad / spacing)) + (0.5 if primitive.kind in ("box", "zalesak") else 0.0)
    origin = lo - n_pad * spacing
    dims = np.ceil((hi - lo) / spacing + 2 * n_pad).astype(int) + 1
    axes = [origin[a] + spacing * np.arange(dims[a]) for a in range(len(dims))]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return LevelSetGrid(origin, np.full(len(dims), float(spacing)), primitive.sdf(pts),
                        source=primitive)


# ---------------------------------------------------------------------------
# queries


def _interp(grid: LevelSetGrid, x: np.ndarray, check: bool = True) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if check:
        bad = ~grid.contains(x)
        if np.any(bad):
            raise OutOfDomainError(f"query point {x[bad][0]} outside grid coverage "
                                   f"[{grid.origin}, {grid.upper}]")
    s = (x - grid.origin) / grid.spacing
    cd = np.array(grid.cell_dims)
    i0 = np.clip(np.floor(s).astype(np.int64), 0, cd - 1)
    t = np.clip(s - i0, 0.0, 1.0)
    out = np.zeros(len(x))
    v = grid.values
    for offs in np.ndindex(*([2] * grid.dim)):
        w = np.ones(len(x))
        for a, o in enumerate(offs):
            w = w * (t[:, a] if o else 1.0 - t[:, a])
        out += w * v[tuple(i0[:, a] + offs[a] for a in range(grid.dim))]
    return out


def eval_phi(grid: LevelSetGrid, x) -> np.ndarray | float:
    """Multilinear interpolation of nodal phi; scalar in, scalar out."""
    arr = np.asarray(x, dtype=float)
    out = _interp(grid, arr)
    return float(out[0]) if arr.ndim == 1 else out


def eval_gradient(grid: LevelSetGrid, x) -> np.ndarray:
    """Central difference of the interpolant with a one-cell stencil.

    Falls back to a one-sided stencil where the central one would leave the grid.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    _interp(grid, x)  # coverage check
    g = np.empty_like(x)
    for a in range(grid.dim):
        d = grid.spacing[a]
        xp = x.copy()
        xm = x.copy()
        xp[:, a] = np.minimum(x[:, a] + d, grid.upper[a])
        xm[:, a] = np.maximum(x[:, a] - d, grid.origin[a])
        g[:, a] = (_interp(grid, xp, False) - _interp(grid, xm, False)) / (xp[:, a] - xm[:, a])
    return g


def eval_normal(grid: LevelSetGrid, x, strict: bool = True) -> np.ndarray:
    """Outward unit normal ``-grad(phi)/|grad(phi)|``.

    With ``strict`` a vanishing gradient raises :class:`DegenerateNormalError`;
    otherwise those rows come back as zero vectors.
    """
    arr = np.asarray(x, dtype=float)
    g = eval_gradient(grid, arr)
    norm = np.linalg.norm(g, axis=1)
    bad = norm <= 1e-8
    if strict and np.any(bad):
        raise DegenerateNormalError(f"vanishing level-set gradient at {np.atleast_2d(arr)[bad][0]}")
    n = np.zeros_like(g)
    n[~bad] = -g[~bad] / norm[~bad, None]
    return n[0] if arr.ndim == 1 else n


def project_to_level(grid: LevelSetGrid, x, level=0.0, max_iter: int = 20,
                     tol: float | None = None) -> np.ndarray:
    """Newton iteration ``x <- x - (phi - level) grad / |grad|^2`` to the ``level`` isocontour."""
    arr = np.asarray(x, dtype=float)
    p = np.atleast_2d(arr).copy()
    level = np.broadcast_to(np.asarray(level, float), (len(p),))
    diag = grid.diagonal
    tol = 1e-8 * diag if tol is None else tol
    active = np.ones(len(p), dtype=bool)
    res = np.zeros(len(p))
    for _ in range(max_iter + 1):
        res[active] = _interp(grid, p[active]) - level[active]
        active &= np.abs(res) > tol
        if not active.any():
            break
        g = eval_gradient(grid, p[active])
        g2 = np.einsum("ij,ij->i", g, g)
        if np.any(g2 <= 1e-16):
            raise ProjectionError("vanishing gradient during projection", float(np.max(np.abs(res))))
        p[active] -= (res[active] / g2)[:, None] * g
    else:
        worst = float(np.max(np.abs(res)))
        if worst > 1e-6 * diag:
            raise ProjectionError(f"projection did not converge (residual {worst:.3e})", worst)
    return p[0] if arr.ndim == 1 else p


def project_to_zero_levelset(grid: LevelSetGrid, x, max_iter: int = 20) -> np.ndarray:
    return project_to_level(grid, x, 0.0, max_iter=max_iter)


# ---------------------------------------------------------------------------
# declared features


@dataclass
class FeatureCurve:
    """Piecewise-linear sharp edge."""

    id: int
    points: np.ndarray
    closed: bool = False

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if len(self.points) < 2:
            raise GeometryError(f"curve {self.id} needs at least 2 vertices")
        if np.any(np.linalg.norm(np.diff(self.points, axis=0), axis=1) == 0):
            raise GeometryError(f"curve {self.id} has repeated consecutive vertices")

    @property
    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        a = self.points
        b = np.roll(a, -1, axis=0)
        if not self.closed:
            a, b = a[:-1], b[:-1]
        return a, b

    @property
    def seg_lengths(self) -> np.ndarray:
        a, b = self.segments
        return np.linalg.norm(b - a, axis=1)

    @property
    def length(self) -> float:
        return float(self.seg_lengths.sum())

    def arclength(self, seg: np.ndarray, t: np.ndarray) -> np.ndarray:
        cum = np.concatenate([[0.0], np.cumsum(self.seg_lengths)])
        return cum[seg] + t * self.seg_lengths[seg]

    def point_at(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Position and segment index at arc length ``s``."""
        cum = np.concatenate([[0.0], np.cumsum(self.seg_lengths)])
        s = np.clip(np.asarray(s, float), 0.0, cum[-1])
        seg = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(self.seg_lengths) - 1)
        a, b = self.segments
        t = (s - cum[seg]) / self.seg_lengths[seg]
        return a[seg] + t[:, None] * (b[seg] - a[seg]), seg

    def tangent(self, seg: np.ndarray) -> np.ndarray:
        a, b = self.segments
        d = b[seg] - a[seg]
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass
class SingularityPoint:
    id: int
    position: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)


def nearest_point_on_polyline(curve: FeatureCurve, x):
    """Closest point on ``curve`` to each query.

    Returns ``(point, segment_index, parameter)``; ties go to the lowest
    segment index.  Accepts a single point or an ``(n, dim)`` array.
    """
    arr = np.asarray(x, dtype=float)
    q = np.atleast_2d(arr)
    a, b = curve.segments
    d = b - a
    L2 = np.einsum("ij,ij->i", d, d)
    t = np.einsum("qij,ij->qi", q[:, None, :] - a[None], d) / L2
    t = np.clip(t, 0.0, 1.0)
    foot = a[None] + t[..., None] * d[None]
    dist2 = np.sum((q[:, None, :] - foot) ** 2, axis=-1)
    seg = np.argmin(dist2, axis=1)  # first minimum wins ties
    rows = np.arange(len(q))
    p, tt = foot[rows, seg], t[rows, seg]
    if arr.ndim == 1:
        return p[0], int(seg[0]), float(tt[0])
    return p, seg, tt


# ---------------------------------------------------------------------------
# field files
#
# ASCII header, one "key value..." per line, then either whitespace-separated
# values or raw little-endian float64 after the line "data":
#
#   featuresph-field 1
#   dim 2
#   dims 64 48
#   origin 0.0 0.0
#   spacing 0.5 0.5
#   encoding ascii          (or: binary)
#   data
#   ...values, x index fastest...


def write_field_file(path, grid: LevelSetGrid, encoding: str = "ascii") -> None:
    header = [
        "featuresph-field 1",
        f"dim {grid.dim}",
        "dims " + " ".join(str(n) for n in grid.dims),
        "origin " + " ".join(repr(float(v)) for v in grid.origin),
        "spacing " + " ".join(repr(float(v)) for v in grid.spacing),
        f"encoding {encoding}",
        "data",
    ]
    flat = grid.values.ravel(order="F")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode())
        if encoding == "ascii":
            fh.write("\n".join(repr(float(v)) for v in flat).encode() + b"\n")
        elif encoding == "binary":
            fh.write(flat.astype("<f8").tobytes())
        else:
            raise GeometryError(f"unknown encoding {encoding!r}")


def read_field_file(path) -> LevelSetGrid:
    raw = Path(path).read_bytes()
    meta: dict[str, list[str]] = {}
    pos = 0
    while True:
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode().strip()
        pos = end + 1
        if line == "data":
            break
        if not line or line.startswith("#"):
            continue
        key, *vals = line.split()
        meta[key] = vals
    try:
        dim = int(meta["dim"][0])
        dims = tuple(int(v) for v in meta["dims"])
        origin = [float(v) for v in meta["origin"]]
        spacing = [float(v) for v in meta["spacing"]]
        encoding = meta.get("encoding", ["ascii"])[0]
    except KeyError as exc:
        raise GeometryError(f"{path}: missing header key {exc}") from None
    if len(dims) != dim:
        raise GeometryError(f"{path}: dims has {len(dims)} entries for dim {dim}")
    n = int(np.prod(dims))
    if encoding == "binary":
        flat = np.frombuffer(raw[pos:pos + 8 * n], dtype="<f8")
    else:
        flat = np.array(raw[pos:].split(), dtype=float)
    if flat.size != n:
        raise GeometryError(f"{path}: expected {n} values, found {flat.size}")
    return LevelSetGrid(origin, spacing, flat.reshape(dims, order="F").copy())


def polyline_length(points: Sequence[Sequence[float]]) -> float:
    p = np.asarray(points, float)
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())

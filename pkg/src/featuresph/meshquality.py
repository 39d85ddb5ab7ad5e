"""Triangulation of converged 2D particle sets and element quality statistics."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np
from scipy.spatial import cKDTree

from .geometry import LevelSetGrid, _interp

__all__ = [
    "MeshError",
    "TriMesh",
    "TetMesh",
    "QualityReport",
    "incircle",
    "delaunay_2d",
    "filter_to_domain",
    "triangle_quality",
    "tet_quality",
    "quality_report",
    "write_vtk",
    "read_vtk",
    "write_obj",
    "read_obj",
    "read_mesh",
    "write_report",
]

_EPS = np.finfo(float).eps
_INCIRCLE_ERR = (10.0 + 96.0 * _EPS) * _EPS


class MeshError(ValueError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise MeshError("triangle index out of range")

    def edges(self) -> set[tuple[int, int]]:
        out = set()
        for a, b, c in self.triangles:
            for u, v in ((a, b), (b, c), (c, a)):
                out.add((min(u, v), max(u, v)))
        return out


@dataclass
class TetMesh:
    vertices: np.ndarray
    tets: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, float)
        self.tets = np.asarray(self.tets, dtype=np.int64).reshape(-1, 4)
        if len(self.tets) and (self.tets.min() < 0 or self.tets.max() >= len(self.vertices)):
            raise MeshError("tetrahedron index out of range")


@dataclass
class QualityReport:
    kind: str                    # "triangle" or "tetrahedron"
    n_elements: int
    theta_min: float
    theta_max: float
    theta_min_mean: float        # mean of per-element minimum angles
    G_avg: float = math.nan
    G_min: float = math.nan
    n_below_30: int = 0          # triangles with an angle below 30 degrees
    ratio_min: float = math.nan
    ratio_avg: float = math.nan
    slivers_10: int = 0
    slivers_20: int = 0
    slivers_30: int = 0
    slivers_40: int = 0

    def as_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        if self.kind == "triangle":
            return (f"triangles {self.n_elements}: G_avg {self.G_avg:.4f} G_min {self.G_min:.4f} "
                    f"theta_min {self.theta_min:.2f} theta_max {self.theta_max:.2f} "
                    f"theta_min# {self.theta_min_mean:.2f} theta<30 {self.n_below_30}")
        return (f"tetrahedra {self.n_elements}: dihedral {self.theta_min:.2f}/{self.theta_max:.2f} "
                f"ratio {self.ratio_min:.4f}/{self.ratio_avg:.4f} theta_min# {self.theta_min_mean:.2f} "
                f"slivers <10/<20/<30/<40: {self.slivers_10}/{self.slivers_20}/"
                f"{self.slivers_30}/{self.slivers_40}")


# ---------------------------------------------------------------------------
# predicates


def _incircle_exact(a, b, c, d) -> int:
    ax, ay = (Fraction(float(a[0])) - Fraction(float(d[0]))), (Fraction(float(a[1])) - Fraction(float(d[1])))
    bx, by = (Fraction(float(b[0])) - Fraction(float(d[0]))), (Fraction(float(b[1])) - Fraction(float(d[1])))
    cx, cy = (Fraction(float(c[0])) - Fraction(float(d[0]))), (Fraction(float(c[1])) - Fraction(float(d[1])))
    det = ((ax * ax + ay * ay) * (bx * cy - cx * by)
           + (bx * bx + by * by) * (cx * ay - ax * cy)
           + (cx * cx + cy * cy) * (ax * by - bx * ay))
    return (det > 0) - (det < 0)


def _incircle_batch(pa, pb, pc, d) -> np.ndarray:
    """Sign of the in-circle determinant for many CCW triangles against one point.

    Positive means ``d`` lies strictly inside.  Results the floating-point
    error bound cannot certify are recomputed in exact rational arithmetic.
    """
    adx, ady = pa[:, 0] - d[0], pa[:, 1] - d[1]
    bdx, bdy = pb[:, 0] - d[0], pb[:, 1] - d[1]
    cdx, cdy = pc[:, 0] - d[0], pc[:, 1] - d[1]
    alift = adx * adx + ady * ady
    blift = bdx * bdx + bdy * bdy
    clift = cdx * cdx + cdy * cdy
    bc = bdx * cdy - cdx * bdy
    ca = cdx * ady - adx * cdy
    ab = adx * bdy - bdx * ady
    det = alift * bc + blift * ca + clift * ab
    perm = (alift * (np.abs(bdx * cdy) + np.abs(cdx * bdy))
            + blift * (np.abs(cdx * ady) + np.abs(adx * cdy))
            + clift * (np.abs(adx * bdy) + np.abs(bdx * ady)))
    sign = np.sign(det).astype(np.int64)
    unsure = np.flatnonzero(np.abs(det) <= _INCIRCLE_ERR * perm)
    for k in unsure:
        sign[k] = _incircle_exact(pa[k], pb[k], pc[k], d)
    return sign


def incircle(a, b, c, d) -> int:
    """+1 if ``d`` is strictly inside the circumcircle of CCW triangle ``abc``, 0 on it, -1 outside."""
    P = lambda v: np.asarray(v, float)[None]  # noqa: E731
    return int(_incircle_batch(P(a), P(b), P(c), np.asarray(d, float))[0])


# ---------------------------------------------------------------------------
# triangulation


def _merge_duplicates(points: np.ndarray, tol: float) -> np.ndarray:
    """Representative index per point; later points within ``tol`` of an earlier one map to it."""
    rep = np.arange(len(points))
    if tol > 0:
        for i, j in sorted(cKDTree(points).query_pairs(tol)):
            a, b = min(i, j), max(i, j)
            if rep[b] == b:
                rep[b] = rep[a]
    return rep


def delaunay_2d(points) -> TriMesh:
    """Bowyer-Watson incremental Delaunay triangulation.

    Points are inserted in input order into an enclosing super-triangle; the
    cavity of each insertion is the set of triangles whose circumcircle
    strictly contains the new point, so cocircular ties keep the earlier
    triangles.
    """
    pts = np.asarray(points, float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise MeshError("need at least three 2D points")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = float(np.max(hi - lo))
    if extent == 0:
        raise MeshError("all points coincide")
    rep = _merge_duplicates(pts, 1e-12 * extent)
    uniq = np.flatnonzero(rep == np.arange(len(pts)))
    if len(uniq) < 3:
        raise MeshError("fewer than three distinct points")
    base = pts[uniq[0]]
    far = pts[uniq] - base
    cross = far[:, 0, None] * far[None, :, 1] - far[:, 1, None] * far[None, :, 0] if len(uniq) <= 2000 else None
    if cross is not None and np.all(np.abs(cross) <= 1e-12 * extent**2):
        raise MeshError("all points are collinear")

    n = len(pts)
    mid = 0.5 * (lo + hi)
    M = 1e5 * extent
    verts = np.vstack([pts, mid + M * np.array([[-3.0, -3.0], [3.0, -3.0], [0.0, 3.0]])])
    cap = 2 * n + 8
    tri = np.zeros((cap, 3), dtype=np.int64)
    alive = np.zeros(cap, dtype=bool)
    tri[0] = (n, n + 1, n + 2)
    alive[0] = True
    used = 1
    free: list[int] = []

    for p in uniq:
        live = np.flatnonzero(alive[:used])
        t = tri[live]
        sgn = _incircle_batch(verts[t[:, 0]], verts[t[:, 1]], verts[t[:, 2]], verts[p])
        bad = live[sgn > 0]
        if len(bad) == 0:
            continue   # on an existing circumcircle boundary only: cannot happen for distinct points in the hull
        edges: dict[tuple[int, int], int] = {}
        for a, b, c in tri[bad]:
            for u, v in ((a, b), (b, c), (c, a)):
                key = (min(u, v), max(u, v))
                if key in edges:
                    del edges[key]
                else:
                    edges[key] = (u, v)
        alive[bad] = False
        free.extend(int(k) for k in bad)
        for u, v in edges.values():
            if free:
                slot = free.pop()
            else:
                if used == cap:
                    cap *= 2
                    tri = np.resize(tri, (cap, 3))
                    alive = np.concatenate([alive, np.zeros(cap - len(alive), dtype=bool)])
                slot = used
                used += 1
            tri[slot] = (u, v, p)
            alive[slot] = True

    out = tri[np.flatnonzero(alive[:used])]
    out = out[np.all(out < n, axis=1)]
    if len(out) == 0:
        raise MeshError("all points are collinear")
    return TriMesh(pts, out)


def filter_to_domain(mesh: TriMesh, grid: LevelSetGrid, tol: float | None = None) -> TriMesh:
    """Keep triangles whose centroid lies inside the meshing region.

    ``tol`` (default ``1e-6`` of the grid diagonal) discards triangles whose
    centroid sits on the boundary itself, which are flat fans of boundary
    particles.  Zero-area triangles are dropped as well.
    """
    tol = 1e-6 * grid.diagonal if tol is None else tol
    v = mesh.vertices[mesh.triangles]
    centroid = v.mean(axis=1)
    keep = _interp(grid, np.clip(centroid, grid.origin, grid.upper), check=False) > tol
    area = 0.5 * np.abs(_cross2(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]))
    span = np.ptp(mesh.vertices, axis=0)
    keep &= area > 1e-12 * float(np.prod(span))
    return TriMesh(mesh.vertices, mesh.triangles[keep])


def _cross2(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


# ---------------------------------------------------------------------------
# element metrics


def _triangle_metrics(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised G and angles (degrees) for an (m, 3, d) array of triangles."""
    e = np.stack([v[:, 2] - v[:, 1], v[:, 0] - v[:, 2], v[:, 1] - v[:, 0]], axis=1)  # edge opposite vertex k
    L = np.linalg.norm(e, axis=2)
    if v.shape[2] == 2:
        S = 0.5 * np.abs(_cross2(e[:, 2], -e[:, 1]))
    else:
        S = 0.5 * np.linalg.norm(np.cross(e[:, 2], -e[:, 1]), axis=1)
    P = 0.5 * L.sum(axis=1)
    H = L.max(axis=1)
    scale = np.maximum(H, 1e-300)
    degenerate = S <= 1e-14 * scale**2
    G = np.where(degenerate, 0.0, 2.0 * math.sqrt(3.0) * S / np.maximum(P * H, 1e-300))
    ang = np.empty_like(L)
    for k in range(3):
        a, b = e[:, (k + 1) % 3], e[:, (k + 2) % 3]
        cos = -np.einsum("ij,ij->i", a, b) / np.maximum(L[:, (k + 1) % 3] * L[:, (k + 2) % 3], 1e-300)
        ang[:, k] = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    ang[degenerate] = (0.0, 0.0, 180.0)
    return G, ang


def triangle_quality(tri) -> tuple[float, np.ndarray]:
    """``G = 2 sqrt(3) S / (P H)`` and the three interior angles in degrees."""
    v = np.asarray(tri, float)[None]
    G, ang = _triangle_metrics(v)
    return float(G[0]), ang[0]


_TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])   # face k omits vertex k
_TET_EDGES = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def _tet_metrics(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Radius ratio and six dihedral angles (degrees) for an (m, 4, 3) array."""
    a = v[:, 1:] - v[:, :1]
    vol = np.abs(np.einsum("ij,ij->i", a[:, 0], np.cross(a[:, 1], a[:, 2]))) / 6.0
    fv = v[:, _TET_FACES]                                   # (m, 4, 3, 3)
    fn = np.cross(fv[:, :, 1] - fv[:, :, 0], fv[:, :, 2] - fv[:, :, 0])
    farea = 0.5 * np.linalg.norm(fn, axis=2)
    r_in = 3.0 * vol / np.maximum(farea.sum(axis=1), 1e-300)
    rhs = 0.5 * np.einsum("mij,mij->mi", a, a)
    scale = np.max(np.linalg.norm(a, axis=2), axis=1)
    degenerate = vol <= 1e-14 * scale**3
    A = a.copy()
    A[degenerate] = np.eye(3)
    center = np.linalg.solve(A, rhs[..., None])[..., 0]
    r_circ = np.linalg.norm(center, axis=1)
    ratio = np.where(degenerate, 0.0, 3.0 * r_in / np.maximum(r_circ, 1e-300))

    # outward normals: face k is opposite vertex k
    unit = fn / np.maximum(np.linalg.norm(fn, axis=2, keepdims=True), 1e-300)
    opp = v - fv.mean(axis=2)
    flip = np.einsum("mkj,mkj->mk", unit, opp) > 0
    unit[flip] *= -1.0
    dih = np.empty((len(v), 6))
    for e, (i, j) in enumerate(_TET_EDGES):
        f1, f2 = [k for k in range(4) if k not in (i, j)]
        cos = -np.einsum("ij,ij->i", unit[:, f1], unit[:, f2])
        dih[:, e] = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    dih[degenerate] = 0.0
    return ratio, dih


def tet_quality(tet) -> tuple[float, np.ndarray]:
    """Radius ratio ``3 r_in / r_circ`` and the six dihedral angles in degrees."""
    v = np.asarray(tet, float)[None]
    ratio, dih = _tet_metrics(v)
    return float(ratio[0]), dih[0]


def quality_report(mesh: TriMesh | TetMesh) -> QualityReport:
    if isinstance(mesh, TriMesh):
        if len(mesh.triangles) == 0:
            raise MeshError("no triangles to evaluate")
        G, ang = _triangle_metrics(mesh.vertices[mesh.triangles])
        amin = ang.min(axis=1)
        return QualityReport("triangle", len(G), float(ang.min()), float(ang.max()), float(amin.mean()),
                             G_avg=float(G.mean()), G_min=float(G.min()), n_below_30=int(np.sum(amin < 30.0)))
    if len(mesh.tets) == 0:
        raise MeshError("no tetrahedra to evaluate")
    ratio, dih = _tet_metrics(mesh.vertices[mesh.tets])
    dmin = dih.min(axis=1)
    return QualityReport("tetrahedron", len(ratio), float(dih.min()), float(dih.max()), float(dmin.mean()),
                         ratio_min=float(ratio.min()), ratio_avg=float(ratio.mean()),
                         slivers_10=int(np.sum(dmin < 10)), slivers_20=int(np.sum(dmin < 20)),
                         slivers_30=int(np.sum(dmin < 30)), slivers_40=int(np.sum(dmin < 40)))


# ---------------------------------------------------------------------------
# file formats


def _pad3(v: np.ndarray) -> np.ndarray:
    return np.hstack([v, np.zeros((len(v), 3 - v.shape[1]))]) if v.shape[1] < 3 else v


def write_vtk(path, mesh: TriMesh | TetMesh | np.ndarray, point_data: dict[str, np.ndarray] | None = None,
              title: str = "featuresph") -> None:
    """Legacy ASCII UNSTRUCTURED_GRID; a bare point array is written as vertex cells."""
    if isinstance(mesh, TriMesh):
        verts, cells, ctype = mesh.vertices, mesh.triangles, 5
    elif isinstance(mesh, TetMesh):
        verts, cells, ctype = mesh.vertices, mesh.tets, 10
    else:
        verts = np.asarray(mesh, float)
        cells, ctype = np.arange(len(verts))[:, None], 1
    v3 = _pad3(verts)
    with open(path, "w") as fh:
        fh.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(v3)} double\n")
        for p in v3:
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        k = cells.shape[1]
        fh.write(f"CELLS {len(cells)} {len(cells) * (k + 1)}\n")
        for c in cells:
            fh.write(f"{k} " + " ".join(map(str, c)) + "\n")
        fh.write(f"CELL_TYPES {len(cells)}\n")
        fh.write("\n".join([str(ctype)] * len(cells)) + ("\n" if len(cells) else ""))
        if point_data:
            fh.write(f"POINT_DATA {len(v3)}\n")
            for name, arr in point_data.items():
                arr = np.asarray(arr)
                if arr.ndim == 1:
                    kind = "int" if np.issubdtype(arr.dtype, np.integer) else "double"
                    fh.write(f"SCALARS {name} {kind} 1\nLOOKUP_TABLE default\n")
                    fh.write("\n".join(f"{x:.17g}" if kind == "double" else str(x) for x in arr) + "\n")
                else:
                    fh.write(f"VECTORS {name} double\n")
                    for row in _pad3(arr.astype(float)):
                        fh.write(f"{row[0]:.17g} {row[1]:.17g} {row[2]:.17g}\n")


def read_vtk(path) -> TriMesh | TetMesh:
    """Read triangles or tetrahedra from a legacy ASCII unstructured grid."""
    with open(path) as fh:
        tokens = fh.read().split()
    try:
        i = tokens.index("POINTS")
        npts = int(tokens[i + 1])
        pts = np.array(tokens[i + 3:i + 3 + 3 * npts], float).reshape(npts, 3)
        j = tokens.index("CELLS")
        ncell = int(tokens[j + 1])
        pos = j + 3
        cells = []
        for _ in range(ncell):
            k = int(tokens[pos])
            cells.append([int(t) for t in tokens[pos + 1:pos + 1 + k]])
            pos += k + 1
    except (ValueError, IndexError) as exc:
        raise MeshError(f"{path}: malformed VTK file ({exc})") from exc
    sizes = {len(c) for c in cells}
    if sizes == {4}:
        return TetMesh(pts, np.array(cells))
    if sizes == {3}:
        flat = np.allclose(pts[:, 2], 0.0)
        return TriMesh(pts[:, :2] if flat else pts, np.array(cells))
    raise MeshError(f"{path}: expected only triangles or only tetrahedra, got cell sizes {sorted(sizes)}")


def write_obj(path, mesh: TriMesh) -> None:
    v3 = _pad3(mesh.vertices)
    with open(path, "w") as fh:
        for p in v3:
            fh.write(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        for a, b, c in mesh.triangles + 1:
            fh.write(f"f {a} {b} {c}\n")


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(t) for t in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(t.split("/")[0]) - 1 for t in parts[1:]]
                    faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
            except ValueError as exc:
                raise MeshError(f"{path}:{lineno}: {exc}") from exc
    pts = np.array(verts, float).reshape(-1, 3)
    flat = len(pts) and np.allclose(pts[:, 2], 0.0)
    return TriMesh(pts[:, :2] if flat else pts, np.array(faces, dtype=np.int64).reshape(-1, 3))


def read_mesh(path) -> TriMesh | TetMesh:
    path = str(path)
    if path.lower().endswith(".obj"):
        return read_obj(path)
    if path.lower().endswith(".vtk"):
        return read_vtk(path)
    raise MeshError(f"{path}: unsupported mesh format (use .vtk or .obj)")


def write_report(path, report: QualityReport) -> None:
    """One-row CSV of the report fields."""
    d = report.as_dict()
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(d))
        w.writeheader()
        w.writerow(d)

"""Cell tagging, feature indexing and per-feature mass budgets.

Every background cell gets exactly one of five types.  Singularity and curve
features keep the ids they were declared with; surface patches and positive
volumes are numbered afterwards, in flood-fill label order.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from scipy import ndimage
from skimage import measure

from .geometry import FeatureCurve, GeometryError, LevelSetGrid, SingularityPoint
from .sizing import SizingField

__all__ = [
    "CellType",
    "FeatureTagMap",
    "FeatureBudget",
    "classify_cells",
    "integrate_feature_mass",
    "particle_budget",
    "write_tag_vtk",
]


class CellType(IntEnum):
    """Ordered so that a lower value acts as boundary for every higher one."""

    SINGULARITY = 0
    CURVE = 1
    SURFACE = 2
    POSITIVE = 3
    NEGATIVE = 4


@dataclass
class FeatureTagMap:
    cell_type: np.ndarray          # CellType per cell, shape grid.cell_dims
    cell_feature: np.ndarray       # feature index per cell, -1 for negative cells
    feature_type: np.ndarray       # CellType per feature index
    curves: list[FeatureCurve]
    singularities: list[SingularityPoint]

    @property
    def n_features(self) -> int:
        return len(self.feature_type)

    def features_of(self, kind: CellType) -> list[int]:
        return [int(k) for k in np.flatnonzero(self.feature_type == kind)]

    def counts(self) -> dict[str, int]:
        return {t.name.lower(): int(np.sum(self.cell_type == t)) for t in CellType}

    def curve(self, k: int) -> FeatureCurve:
        return next(c for c in self.curves if c.id == k)

    def singularity(self, k: int) -> SingularityPoint:
        return next(s for s in self.singularities if s.id == k)


def _segment_cells(grid: LevelSetGrid, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    length = float(np.linalg.norm(b - a))
    n = max(2, int(np.ceil(8 * length / grid.spacing.min())) + 1)
    pts = a + np.linspace(0.0, 1.0, n)[:, None] * (b - a)
    return grid.cell_index(pts)


def _validate_ids(curves, singularities) -> None:
    ids = [c.id for c in curves] + [s.id for s in singularities]
    if len(set(ids)) != len(ids):
        raise GeometryError(f"overlapping feature ids among declared curves/singularities: {sorted(ids)}")
    if sorted(ids) != list(range(len(ids))):
        raise GeometryError(f"declared feature ids must be 0..{len(ids) - 1}, got {sorted(ids)}")


def classify_cells(grid: LevelSetGrid, curves=(), singularities=()) -> FeatureTagMap:
    curves = list(curves)
    singularities = list(singularities)
    _validate_ids(curves, singularities)

    corners = grid.cell_corner_values()
    vmin, vmax = corners.min(axis=-1), corners.max(axis=-1)
    ctype = np.full(grid.cell_dims, CellType.NEGATIVE, dtype=np.int8)
    ctype[(vmin <= 0) & (vmax > 0)] = CellType.SURFACE
    ctype[vmin > 0] = CellType.POSITIVE
    cfeat = np.full(grid.cell_dims, -1, dtype=np.int64)

    for c in sorted(curves, key=lambda c: c.id):
        if not np.all(grid.contains(c.points)):
            raise GeometryError(f"curve {c.id} leaves the grid")
        a, b = c.segments
        for sa, sb in zip(a, b):
            idx = tuple(_segment_cells(grid, sa, sb).T)
            free = ctype[idx] != CellType.CURVE
            sel = tuple(ix[free] for ix in idx)
            ctype[sel] = CellType.CURVE
            cfeat[sel] = c.id

    cd = np.array(grid.cell_dims)
    for s in singularities:
        if not grid.contains(s.position[None])[0]:
            raise GeometryError(f"singularity {s.id} at {s.position} lies outside the grid")
        # every cell within one spacing of the point, so surface bands are cut reliably
        lo = np.floor((s.position - grid.spacing - grid.origin) / grid.spacing).astype(int)
        hi = np.floor((s.position + grid.spacing - grid.origin) / grid.spacing).astype(int)
        lo, hi = np.clip(lo, 0, cd - 1), np.clip(hi, 0, cd - 1)
        sl = tuple(slice(l, h + 1) for l, h in zip(lo, hi))
        ctype[sl] = CellType.SINGULARITY
        cfeat[sl] = s.id

    ftype = [CellType.SINGULARITY if any(s.id == k for s in singularities) else CellType.CURVE
             for k in range(len(curves) + len(singularities))]
    face = ndimage.generate_binary_structure(grid.dim, 1)
    for kind in (CellType.SURFACE, CellType.POSITIVE):
        labels, n = ndimage.label(ctype == kind, structure=face)
        base = len(ftype)
        mask = labels > 0
        cfeat[mask] = labels[mask] - 1 + base
        ftype.extend([kind] * n)
    return FeatureTagMap(ctype, cfeat, np.array(ftype, dtype=np.int8), curves, singularities)


# ---------------------------------------------------------------------------
# mass integration


@dataclass
class FeatureBudget:
    mass: np.ndarray        # M_k, unit-mass particles
    count: np.ndarray       # N_k = max(1, round(M_k))
    v_ref: np.ndarray       # same integral with rho_t == 1
    # per-cell quadrature, reused as the sampling proposal
    volume_cell_mass: np.ndarray
    volume_cell_measure: np.ndarray
    volume_cell_owner: np.ndarray
    surface_cell_mass: np.ndarray
    surface_cell_measure: np.ndarray
    surface_cell_owner: np.ndarray

    @property
    def total(self) -> int:
        return int(self.count.sum())


def _nearest_owner(tags: FeatureTagMap, kind: CellType) -> np.ndarray:
    """Feature index of the nearest cell of ``kind``, for every cell."""
    is_kind = tags.cell_type == kind
    if not is_kind.any():
        return np.full(tags.cell_type.shape, -1)
    _, ind = ndimage.distance_transform_edt(~is_kind, return_indices=True)
    return tags.cell_feature[tuple(ind)]


def _surface_elements(grid: LevelSetGrid):
    """Zero-contour facets as (midpoint/centroid, measure) pairs."""
    if grid.dim == 2:
        mids, lens = [], []
        for c in measure.find_contours(grid.values, 0.0):
            p = grid.origin + c * grid.spacing
            seg = np.diff(p, axis=0)
            mids.append(0.5 * (p[1:] + p[:-1]))
            lens.append(np.linalg.norm(seg, axis=1))
        if not mids:
            return np.zeros((0, 2)), np.zeros(0)
        return np.concatenate(mids), np.concatenate(lens)
    verts, faces, _, _ = measure.marching_cubes(grid.values, 0.0, spacing=tuple(grid.spacing))
    verts = verts + grid.origin
    tri = verts[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    return tri.mean(axis=1), area


def _curve_quadrature(curve: FeatureCurve, sizing: SizingField, h_step: float):
    a, b = curve.segments
    mids, lens = [], []
    for sa, sb in zip(a, b):
        L = float(np.linalg.norm(sb - sa))
        n = max(1, int(np.ceil(L / h_step)))
        t = (np.arange(n) + 0.5) / n
        mids.append(sa + t[:, None] * (sb - sa))
        lens.append(np.full(n, L / n))
    return np.concatenate(mids), np.concatenate(lens)


def integrate_feature_mass(tags: FeatureTagMap, grid: LevelSetGrid, sizing: SizingField) -> FeatureBudget:
    d = grid.dim
    nf = tags.n_features
    mass = np.zeros(nf)
    vref = np.zeros(nf)

    centers = grid.cell_centers().reshape(-1, d)
    h_c = sizing.size(centers)
    if np.any(h_c <= 0):
        raise ValueError("sizing returned a non-positive target size")
    # positive-phase fraction of cut cells from the corner values, exact for a flat interface
    # parallel to a cell face (including one running through grid nodes)
    corners = grid.cell_corner_values()
    mag = np.abs(corners).sum(axis=-1)
    frac = np.where(mag > 0, np.maximum(corners, 0.0).sum(axis=-1) / np.where(mag > 0, mag, 1.0), 0.0).ravel()
    frac[tags.cell_type.ravel() == CellType.POSITIVE] = 1.0
    frac[tags.cell_type.ravel() == CellType.NEGATIVE] = 0.0
    vol_measure = frac * grid.cell_volume
    vol_mass = vol_measure * h_c ** (-d)
    vol_owner = _nearest_owner(tags, CellType.POSITIVE).ravel()
    vol_owner[vol_measure == 0] = -1
    if tags.features_of(CellType.POSITIVE):
        ok = vol_owner >= 0
        np.add.at(mass, vol_owner[ok], vol_mass[ok])
        np.add.at(vref, vol_owner[ok], vol_measure[ok])

    ncell = centers.shape[0]
    surf_mass = np.zeros(ncell)
    surf_measure = np.zeros(ncell)
    surf_owner = np.full(ncell, -1)
    if tags.features_of(CellType.SURFACE):
        mid, meas = _surface_elements(grid)
        if len(mid):
            cell = np.ravel_multi_index(tuple(grid.cell_index(mid).T), grid.cell_dims)
            np.add.at(surf_measure, cell, meas)
            np.add.at(surf_mass, cell, meas * sizing.size(mid) ** (-(d - 1)))
            owner = _nearest_owner(tags, CellType.SURFACE).ravel()
            has = surf_measure > 0
            surf_owner[has] = owner[has]
            np.add.at(mass, surf_owner[has], surf_mass[has])
            np.add.at(vref, surf_owner[has], surf_measure[has])

    step = 0.25 * sizing.h_min
    for c in tags.curves:
        mid, lens = _curve_quadrature(c, sizing, step)
        mass[c.id] = float(np.sum(lens / sizing.size(mid)))
        vref[c.id] = float(np.sum(lens))
    for s in tags.singularities:
        mass[s.id] = 1.0
        vref[s.id] = 1.0

    budget = FeatureBudget(mass, np.zeros(nf, dtype=int), vref,
                           vol_mass, vol_measure, vol_owner,
                           surf_mass, surf_measure, surf_owner)
    budget.count = particle_budget(budget)
    return budget


def particle_budget(budget: FeatureBudget | np.ndarray) -> np.ndarray:
    """``N_k = round(M_k)``, never below one."""
    m = np.asarray(budget.mass if isinstance(budget, FeatureBudget) else budget, dtype=float)
    return np.maximum(1, np.floor(m + 0.5)).astype(int)


def write_tag_vtk(path, grid: LevelSetGrid, tags: FeatureTagMap) -> None:
    """Legacy ASCII STRUCTURED_POINTS with cell scalars ``type`` and ``index``."""
    dims = list(grid.dims) + [1] * (3 - grid.dim)
    origin = list(grid.origin) + [0.0] * (3 - grid.dim)
    spacing = list(grid.spacing) + [1.0] * (3 - grid.dim)
    ncell = int(np.prod(grid.cell_dims))
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nfeature tag map\nASCII\nDATASET STRUCTURED_POINTS\n")
        fh.write("DIMENSIONS " + " ".join(map(str, dims)) + "\n")
        fh.write("ORIGIN " + " ".join(f"{v:.9g}" for v in origin) + "\n")
        fh.write("SPACING " + " ".join(f"{v:.9g}" for v in spacing) + "\n")
        fh.write(f"CELL_DATA {ncell}\n")
        for name, arr in (("type", tags.cell_type), ("index", tags.cell_feature)):
            fh.write(f"SCALARS {name} int 1\nLOOKUP_TABLE default\n")
            flat = arr.ravel(order="F")
            for start in range(0, ncell, 20):
                fh.write(" ".join(map(str, flat[start:start + 20])) + "\n")

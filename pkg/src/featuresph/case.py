"""Assemble a ready-to-relax particle system from a :class:`RunConfig`."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .features import CellType, FeatureBudget, FeatureTagMap, classify_cells, integrate_feature_mass
from .geometry import FeatureCurve, GeometryError, LevelSetGrid, Primitive, SingularityPoint, build_levelset
from .sampling import sample_feature_particles
from .sizing import SizingField
from .sph import ParticleSet

__all__ = ["Case", "build_primitive", "build_sizing", "build_tags", "build_case", "kernel_dimension"]


@dataclass
class Case:
    config: RunConfig
    grid: LevelSetGrid
    sizing: SizingField
    tags: FeatureTagMap
    budget: FeatureBudget
    particles: ParticleSet


def build_primitive(cfg: RunConfig) -> Primitive:
    return Primitive(cfg.geometry, center=tuple(cfg.center), radius=cfg.radius, lo=tuple(cfg.lo),
                     hi=tuple(cfg.hi), slot_width=cfg.slot_width, slot_length=cfg.slot_length,
                     path=cfg.field_path)


def build_sizing(cfg: RunConfig, grid: LevelSetGrid) -> SizingField:
    focus = np.asarray(cfg.sizing_focus, float) if cfg.sizing_focus else None
    return SizingField(cfg.sizing, cfg.h_min, cfg.h_max, grid.dim, focus=focus, slope=cfg.slope,
                       radius=cfg.sizing_radius, levelset=grid if cfg.sizing == "surface" else None)


def build_tags(cfg: RunConfig, prim: Primitive, grid: LevelSetGrid) -> FeatureTagMap:
    curves = [FeatureCurve(k, np.asarray(pts), closed=len(pts) > 2 and np.allclose(pts[0], pts[-1]))
              for k, pts in enumerate(cfg.curves)]
    for c in curves:
        if c.closed:
            c.points = c.points[:-1]
    points = [np.asarray(s, float) for s in cfg.singularities]
    if cfg.auto_singularities and prim.kind in ("box", "zalesak") and grid.dim == 2:
        points += list(prim.singular_points())
    sings = [SingularityPoint(len(curves) + k, p) for k, p in enumerate(points)]
    return classify_cells(grid, curves, sings)


def kernel_dimension(ptype: np.ndarray, dim: int) -> np.ndarray:
    """0 for singularities, 1 for curves, ``dim - 1`` for surfaces and ``dim`` for volumes."""
    return np.select([ptype == CellType.SINGULARITY, ptype == CellType.CURVE, ptype == CellType.SURFACE],
                     [0, 1, dim - 1], dim)


def build_case(cfg: RunConfig) -> Case:
    """Level set, sizing, feature tags, particle budget and the initial sample."""
    prim = build_primitive(cfg)
    grid = build_levelset(prim, cfg.grid_spacing, ghost=cfg.ghost or None)
    if not np.any(grid.values > 0):
        raise GeometryError("geometry has no positive phase on the grid")
    sizing = build_sizing(cfg, grid)
    tags = build_tags(cfg, prim, grid)
    if not np.any(tags.feature_type == CellType.POSITIVE):
        raise GeometryError("no volume cells: the positive phase is thinner than one grid cell")
    budget = integrate_feature_mass(tags, grid, sizing)
    xs, ftype, feat = [], [], []
    for k in range(tags.n_features):
        x = sample_feature_particles(k, int(budget.count[k]), tags, grid, budget, sizing, seed=cfg.seed,
                                     uniform=cfg.sampling == "uniform")
        xs.append(np.asarray(x, float).reshape(-1, grid.dim))
        ftype += [int(tags.feature_type[k])] * len(xs[-1])
        feat += [k] * len(xs[-1])
    ftype = np.asarray(ftype)
    particles = ParticleSet(np.concatenate(xs), ftype, np.asarray(feat), kernel_dimension(ftype, grid.dim))
    return Case(cfg, grid, sizing, tags, budget, particles)

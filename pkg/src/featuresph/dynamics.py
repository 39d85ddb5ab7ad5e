"""Group-wise time integration of the particle system.

Particles sharing a feature index form a group with its own timestep.  The
:class:`Relaxer` evaluates forces for the whole system at once and advances
only the groups it is told are active; inactive particles keep acting as
boundary particles for everybody else.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import CellType, FeatureTagMap
from .geometry import (LevelSetGrid, _interp, eval_gradient, eval_normal, nearest_point_on_polyline,
                       project_to_level, project_to_zero_levelset)
from .sizing import SizingField
from .sph import (NeighborTable, ParticleSet, build_neighbor_table, compute_gamma,
                  compute_pressure_force, compute_pressure_stiffness, compute_specific_volume, compute_viscous_force)

__all__ = [
    "IntegrationError",
    "StabilizationPolicy",
    "FeatureGroup",
    "Relaxer",
    "compute_group_timestep",
    "timestep_terms",
    "step_group",
    "constrain_to_feature",
    "stabilize",
    "REPAIR_OFFSET",
]

REPAIR_OFFSET = 0.05


class IntegrationError(RuntimeError):
    pass


@dataclass
class StabilizationPolicy:
    nullify_period: int = 100
    damping: float = 0.05
    dt_collapse_ratio: float = 0.1

    def __post_init__(self):
        if self.nullify_period < 1:
            raise ValueError("nullify_period must be >= 1")
        if not 0.0 <= self.damping <= 0.2:
            raise ValueError(f"damping {self.damping} outside [0, 0.2]")


@dataclass
class FeatureGroup:
    feature_index: int
    feature_type: CellType
    members: np.ndarray
    dt: float = 0.0
    phase: str = "one"
    steps_taken: int = 0
    converged: bool = False
    nullify_next: bool = field(default=False, repr=False)

    @property
    def movable(self) -> bool:
        return self.feature_type != CellType.SINGULARITY


def timestep_terms(accel: np.ndarray, v: np.ndarray, h: np.ndarray,
                   stiffness: np.ndarray | None = None) -> np.ndarray:
    """Per-particle (force, velocity, viscous, stiffness) limits; ``inf`` where a denominator vanishes.

    The stiffness limit ``1 / sqrt(k)`` keeps the explicit update inside its
    stability bound once forces get small near equilibrium, where the force
    limit alone grows without bound.
    """
    rc = 2.0 * h
    a = np.linalg.norm(accel, axis=1)
    s = np.linalg.norm(v, axis=1)
    nu = 0.1 * rc * s
    k = np.zeros(len(h)) if stiffness is None else np.asarray(stiffness, float)
    with np.errstate(divide="ignore"):
        t_force = np.where(a > 0, 0.25 * np.sqrt(rc / np.where(a > 0, a, 1.0)), np.inf)
        t_vel = np.where(s > 0, rc / (40.0 * np.where(s > 0, s, 1.0)), np.inf)
        t_visc = np.where(nu > 0, 0.125 * rc**2 / np.where(nu > 0, nu, 1.0), np.inf)
        t_stiff = np.where(k > 0, 1.0 / np.sqrt(np.where(k > 0, k, 1.0)), np.inf)
    return np.stack([t_force, t_vel, t_visc, t_stiff], axis=1)


def compute_group_timestep(accel: np.ndarray, v: np.ndarray, h: np.ndarray,
                           stiffness: np.ndarray | None = None) -> float:
    """Smallest of the stability limits over the group members passed in.

    Falls back to ``0.25 * min(r_c)`` when every limit is unbounded (all at rest, no force).
    """
    dt = float(np.min(timestep_terms(accel, v, h, stiffness))) if len(h) else np.inf
    if not np.isfinite(dt):
        dt = 0.25 * float(np.min(2.0 * h))
    return dt


class Relaxer:
    """Particle system bound to its geometry, sizing and feature tags."""

    def __init__(self, particles: ParticleSet, grid: LevelSetGrid, sizing: SizingField,
                 tags: FeatureTagMap, corrected: bool = True, p0: float = 1.0,
                 boundary_pairs: bool = True, kernel_scale: float = 1.0):
        self.p = particles
        self.grid = grid
        self.sizing = sizing
        self.tags = tags
        self.corrected = corrected
        self.p0 = p0
        self.boundary_pairs = boundary_pairs
        self.kernel_scale = kernel_scale
        self.accel = np.zeros_like(particles.x)
        self.accel_p = np.zeros_like(particles.x)
        self.table: NeighborTable | None = None
        self.stiffness = np.zeros(len(particles))
        self.repair_events = 0
        self.step_repairs = 0
        self.patch_reverts = 0
        self.groups = self._make_groups()
        self._anchor = {s.id: s.position.copy() for s in tags.singularities}
        self._curve_len = {c.id: (c.length, c.closed) for c in tags.curves}
        self._by_type = {t: np.flatnonzero(particles.ptype == t) for t in CellType}

    def _make_groups(self) -> list[FeatureGroup]:
        groups = []
        for k in range(self.tags.n_features):
            members = np.flatnonzero(self.p.feature == k)
            if len(members):
                groups.append(FeatureGroup(k, CellType(self.tags.feature_type[k]), members))
        return groups

    # -- geometry --------------------------------------------------------

    def _clip(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.grid.origin, self.grid.upper)

    def update_geometry(self) -> None:
        """Smoothing length, normals, curve tangents and arc coordinates at current positions."""
        p = self.p
        p.ht = self.sizing.size(self._clip(p.x))
        p.h = self.kernel_scale * p.ht
        bnd = p.ptype != CellType.POSITIVE
        if np.any(bnd):
            p.normal[bnd] = eval_normal(self.grid, self._clip(p.x[bnd]), strict=False)
        for c in self.tags.curves:
            idx = np.flatnonzero(p.feature == c.id)
            if len(idx):
                _, seg, t = nearest_point_on_polyline(c, p.x[idx])
                p.arc[idx] = c.arclength(seg, t)
                p.tangent[idx] = c.tangent(seg)

    def refresh(self) -> None:
        self.update_geometry()
        self.table = build_neighbor_table(self.p, self._curve_len)
        self.p.gamma = compute_gamma(self.p, self.table) if self.corrected else np.ones(len(self.p))
        self.stiffness = compute_pressure_stiffness(self.p, self.table, self.p0, self.corrected)

    # -- forces ----------------------------------------------------------

    def map_to_features(self, vec: np.ndarray, idx: np.ndarray | None = None) -> np.ndarray:
        """Remove the components of ``vec`` that would leave the particle's feature."""
        p = self.p
        out = vec.copy()
        surf = p.ptype == CellType.SURFACE
        curve = p.ptype == CellType.CURVE
        sing = p.ptype == CellType.SINGULARITY
        if idx is not None:
            keep = np.zeros(len(p), dtype=bool)
            keep[idx] = True
            surf &= keep
            curve &= keep
            sing &= keep
        n = p.normal[surf]
        out[surf] -= np.einsum("ij,ij->i", out[surf], n)[:, None] * n
        t = p.tangent[curve]
        out[curve] = np.einsum("ij,ij->i", out[curve], t)[:, None] * t
        out[sing] = 0.0
        return out

    def compute_forces(self, damping: float) -> None:
        """Refresh neighbours and evaluate pressure, viscous and damping terms."""
        self.refresh()
        p = self.p
        p.force_p = compute_pressure_force(p, self.table, self.p0, corrected=self.corrected,
                                           boundary_pairs=self.boundary_pairs)
        p.force_v = compute_viscous_force(p, self.table)
        self.accel_p = self.map_to_features(p.force_p)
        self.accel = self.map_to_features(p.force_p + p.force_v - damping * p.v)

    def specific_volume(self) -> np.ndarray:
        self.p.vtilde = compute_specific_volume(self.p, self.table)
        return self.p.vtilde

    # -- constraints -----------------------------------------------------

    def constrain(self, idx: np.ndarray, x_prev: np.ndarray | None = None) -> int:
        """Map particles ``idx`` back onto their features; returns the number of containment repairs.

        ``x_prev`` holds the positions before the drift.  A surface particle
        whose projection lands outside its own patch (on another patch or in
        the cells of a curve or singularity) is put back there.
        """
        p, grid = self.p, self.grid
        if len(idx) == 0:
            return 0
        kinds = p.ptype[idx]

        s = idx[kinds == CellType.SURFACE]
        if len(s):
            p.x[s] = project_to_zero_levelset(grid, self._clip(p.x[s]))
            if x_prev is not None:
                cell = tuple(grid.cell_index(p.x[s]).T)
                stray = self.tags.cell_feature[cell] != p.feature[s]
                if np.any(stray):
                    back = s[stray]
                    p.x[back] = x_prev[back]
                    p.v[back] = 0.0
                    self.patch_reverts += int(stray.sum())
            n = eval_normal(grid, p.x[s], strict=False)
            p.normal[s] = n
            p.v[s] -= np.einsum("ij,ij->i", p.v[s], n)[:, None] * n
            self.accel[s] -= np.einsum("ij,ij->i", self.accel[s], n)[:, None] * n

        c = idx[kinds == CellType.CURVE]
        for curve in self.tags.curves:
            ci = c[p.feature[c] == curve.id]
            if len(ci):
                foot, seg, t = nearest_point_on_polyline(curve, p.x[ci])
                p.x[ci] = foot
                tan = curve.tangent(seg)
                p.tangent[ci] = tan
                p.arc[ci] = curve.arclength(seg, t)
                p.v[ci] = np.einsum("ij,ij->i", p.v[ci], tan)[:, None] * tan
                self.accel[ci] = np.einsum("ij,ij->i", self.accel[ci], tan)[:, None] * tan

        for si in idx[kinds == CellType.SINGULARITY]:
            p.x[si] = self._anchor[int(p.feature[si])]
            p.v[si] = 0.0

        vol = idx[kinds == CellType.POSITIVE]
        repairs = 0
        if len(vol):
            xv = self._clip(p.x[vol])
            phi = _interp(grid, xv, check=False)
            bad = phi <= 0
            repairs = int(bad.sum())
            if repairs:
                b = vol[bad]
                target = REPAIR_OFFSET * self.sizing.size(xv[bad])
                p.x[b] = project_to_level(grid, xv[bad], target)
                g = eval_gradient(grid, p.x[b])
                n = -g / np.maximum(np.linalg.norm(g, axis=1), 1e-12)[:, None]
                out_v = np.maximum(np.einsum("ij,ij->i", p.v[b], n), 0.0)
                p.v[b] -= out_v[:, None] * n
        self.repair_events += repairs
        self.step_repairs = repairs
        return repairs

    # -- stepping --------------------------------------------------------

    def group_timestep(self, g: FeatureGroup) -> float:
        m = g.members
        return compute_group_timestep(self.accel[m], self.p.v[m], self.p.h[m], self.stiffness[m])

    def step(self, groups: list[FeatureGroup], policy: StabilizationPolicy, damping: float | None = None,
             step_no: int = 0) -> dict[int, float]:
        """One velocity-Verlet step for every group in ``groups``.

        Forces at the start of the step come from the previous call (or
        :meth:`prime`).  After the step the new forces are cached, the closing
        half-kick applied and the stabilisation rules evaluated.
        """
        p = self.p
        eps = policy.damping if damping is None else damping
        movable = [g for g in groups if g.movable]
        dt_p = np.zeros(len(p))
        dts = {}
        for g in movable:
            dt = self.group_timestep(g)
            dts[g.feature_index] = dt
            dt_p[g.members] = dt
        act = dt_p > 0
        idx = np.flatnonzero(act)

        x_prev = p.x.copy()
        p.v[act] += 0.5 * dt_p[act, None] * self.accel[act]
        p.x[act] += dt_p[act, None] * p.v[act]
        self._check_finite(idx, step_no)
        self.constrain(idx, x_prev)

        self.compute_forces(eps)
        p.v[act] += 0.5 * dt_p[act, None] * self.accel[act]
        self._check_finite(idx, step_no)

        for g in movable:
            dt_prev = g.dt
            g.dt = dts[g.feature_index]
            g.steps_taken += 1
            self.stabilize(g, policy, dt_prev, g.dt)
        return dts

    def prime(self, damping: float = 0.0) -> None:
        """Forces for the initial configuration."""
        self.constrain(np.arange(len(self.p)))
        self.repair_events = 0
        self.compute_forces(damping)

    def stabilize(self, g: FeatureGroup, policy: StabilizationPolicy, dt_prev: float, dt_now: float) -> bool:
        """Zero the group's velocities on the nullification period or a timestep collapse."""
        collapse = dt_prev > 0 and dt_now < policy.dt_collapse_ratio * dt_prev
        if g.steps_taken % policy.nullify_period == 0 or collapse:
            m = g.members
            self.p.v[m] = 0.0
            self.accel[m] = self.accel_p[m]
            return True
        return False

    def _check_finite(self, idx: np.ndarray, step_no: int) -> None:
        p = self.p
        bad = ~(np.all(np.isfinite(p.x[idx]), axis=1) & np.all(np.isfinite(p.v[idx]), axis=1))
        if np.any(bad):
            i = int(idx[bad][0])
            raise IntegrationError(f"non-finite state for particle {i} (feature {p.feature[i]}) "
                                   f"at step {step_no}")

    def kinetic_energy(self, members: np.ndarray | None = None) -> float:
        v = self.p.v if members is None else self.p.v[members]
        return 0.5 * float(np.sum(v * v))


def step_group(group: FeatureGroup, relaxer: Relaxer, policy: StabilizationPolicy, step_no: int = 0) -> float:
    """Advance one group by one step; returns its timestep (0 for singularities).

    Damping is dropped for groups in Phase Two whatever the policy says.
    """
    eps = 0.0 if group.phase == "two" else policy.damping
    return relaxer.step([group], policy, damping=eps, step_no=step_no).get(group.feature_index, 0.0)


def constrain_to_feature(relaxer: Relaxer, idx, x_prev: np.ndarray | None = None) -> int:
    """Project particles ``idx`` back onto their features; returns the number of volume repairs."""
    return relaxer.constrain(np.atleast_1d(np.asarray(idx, dtype=int)), x_prev)


def stabilize(group: FeatureGroup, relaxer: Relaxer, policy: StabilizationPolicy,
              dt_prev: float, dt_now: float) -> bool:
    """Zero the group's velocities if the period or a timestep collapse calls for it."""
    return relaxer.stabilize(group, policy, dt_prev, dt_now)

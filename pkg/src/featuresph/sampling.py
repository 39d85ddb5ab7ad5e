"""Initial particle placement with probability proportional to the target density."""
from __future__ import annotations

import numpy as np

from .features import CellType, FeatureBudget, FeatureTagMap
from .geometry import LevelSetGrid, _interp, project_to_zero_levelset
from .sizing import SizingField

__all__ = ["SamplingError", "feature_rng", "sample_feature_particles"]

MIN_ACCEPTANCE = 1e-4
_TRIAL_WINDOW = 1_000_000
_MAX_REDRAWS = 100


class SamplingError(RuntimeError):
    pass


def feature_rng(seed: int, feature: int) -> np.random.Generator:
    """Mersenne Twister stream for one feature, independent of every other feature's stream."""
    return np.random.Generator(np.random.MT19937(np.random.SeedSequence([int(seed), int(feature)])))


def _cell_density_max(grid: LevelSetGrid, sizing: SizingField, cells: np.ndarray, dim: int) -> np.ndarray:
    """Upper bound of rho_t over each cell from its corners and centre."""
    lo = grid.origin + cells * grid.spacing
    best = sizing.density(lo + 0.5 * grid.spacing, dim)
    for offs in np.ndindex(*([2] * grid.dim)):
        best = np.maximum(best, sizing.density(lo + np.array(offs) * grid.spacing, dim))
    return best


def _stratified_cells(rng, weights: np.ndarray, count: int) -> np.ndarray:
    """Systematic draw of ``count`` cell indices: one uniform variate per equal-mass stratum."""
    cdf = np.cumsum(weights)
    u = (np.arange(count) + rng.random(count)) / count * cdf[-1]
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(weights) - 1)


def _draw_stratified(grid, sizing, rng, flat_cells, weights, count, dim, uniform):
    """One sample per equal-mass stratum of the cell list, density rejection kept inside each cell."""
    pick = flat_cells[_stratified_cells(rng, weights, count)]
    cells = np.stack(np.unravel_index(pick, grid.cell_dims), axis=1)
    x = np.empty((count, grid.dim))
    todo = np.arange(count)
    while len(todo):
        c = cells[todo]
        trial = grid.origin + (c + rng.random((len(todo), grid.dim))) * grid.spacing
        if uniform:
            ok = np.ones(len(todo), dtype=bool)
        else:
            ok = rng.random(len(todo)) * _cell_density_max(grid, sizing, c, dim) <= sizing.density(trial, dim)
        x[todo[ok]] = trial[ok]
        todo = todo[~ok]
    return x


def _draw_in_cells(grid, sizing, rng, flat_cells, weights, count, dim, uniform, accept_extra=None):
    """Cell-weighted proposal followed by density rejection inside the cell."""
    prob = weights / weights.sum()
    out = []
    n_have = 0
    trials = accepted = 0
    batch = max(64, 2 * count)
    while n_have < count:
        pick = flat_cells[rng.choice(len(flat_cells), size=batch, p=prob)]
        cells = np.stack(np.unravel_index(pick, grid.cell_dims), axis=1)
        x = grid.origin + (cells + rng.random((batch, grid.dim))) * grid.spacing
        u = rng.random(batch)
        if uniform:
            ok = np.ones(batch, dtype=bool)
        else:
            ok = u * _cell_density_max(grid, sizing, cells, dim) <= sizing.density(x, dim)
        if accept_extra is not None:
            ok &= accept_extra(x)
        trials += batch
        accepted += int(ok.sum())
        if trials >= _TRIAL_WINDOW and accepted / trials < MIN_ACCEPTANCE:
            raise SamplingError(f"acceptance rate {accepted / trials:.2e} below {MIN_ACCEPTANCE:g}: "
                                "pathological sizing field")
        out.append(x[ok])
        n_have += int(ok.sum())
    return np.concatenate(out)[:count]


def sample_feature_particles(feature: int, count: int, tags: FeatureTagMap, grid: LevelSetGrid,
                             budget: FeatureBudget, sizing: SizingField, seed: int,
                             uniform: bool = False) -> np.ndarray:
    """Positions for one feature's particles.

    ``uniform`` switches volume features to a constant-probability proposal,
    the classic poor starting point.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    kind = CellType(tags.feature_type[feature])
    rng = feature_rng(seed, feature)
    d = grid.dim

    if kind == CellType.SINGULARITY:
        return tags.singularity(feature).position[None].copy()

    if kind == CellType.CURVE:
        curve = tags.curve(feature)
        a, b = curve.segments
        pieces, masses = [], []
        for sa, sb in zip(a, b):
            L = float(np.linalg.norm(sb - sa))
            n = max(1, int(np.ceil(4 * L / sizing.h_min)))
            t0 = np.arange(n) / n
            pieces.append((sa, sb, t0, 1.0 / n))
            mid = sa + (t0 + 0.5 / n)[:, None] * (sb - sa)
            masses.append(L / n / sizing.size(mid))
        seg_of = np.concatenate([np.full(len(p[2]), s) for s, p in enumerate(pieces)])
        t_of = np.concatenate([p[2] for p in pieces])
        dt_of = np.concatenate([np.full(len(p[2]), p[3]) for p in pieces])
        m = np.concatenate(masses)
        cdf = np.concatenate([[0.0], np.cumsum(m)])
        u = rng.random(count) * cdf[-1]
        k = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, len(m) - 1)
        frac = (u - cdf[k]) / m[k]
        t = t_of[k] + frac * dt_of[k]
        s = seg_of[k]
        return a[s] + t[:, None] * (b[s] - a[s])

    if kind == CellType.SURFACE:
        cells = np.flatnonzero(budget.surface_cell_owner == feature)
        w = budget.surface_cell_measure[cells] if uniform else budget.surface_cell_mass[cells]
        # stratified so that no stretch of the patch starts empty; projections near patch
        # ends can land on a neighbouring feature, those are redrawn
        out = np.empty((0, d))
        for r in range(_MAX_REDRAWS):
            draw = _draw_stratified if r == 0 else _draw_in_cells
            x = project_to_zero_levelset(grid, draw(grid, sizing, rng, cells, w, count - len(out), d - 1, uniform))
            own = tags.cell_feature[tuple(grid.cell_index(x).T)] == feature
            out = np.concatenate([out, x[own]])
            if len(out) == count:
                return out
        raise SamplingError(f"surface feature {feature}: projected samples keep leaving the patch")

    cells = np.flatnonzero(budget.volume_cell_owner == feature)
    w = budget.volume_cell_measure[cells] if uniform else budget.volume_cell_mass[cells]
    return _draw_in_cells(grid, sizing, rng, cells, w, count, d, uniform,
                          accept_extra=lambda x: _interp(grid, x, check=False) > 0)

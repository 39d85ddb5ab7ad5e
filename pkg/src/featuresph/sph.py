"""Kernel, neighbour search and the particle force laws.

All per-particle quantities are stored struct-of-arrays in :class:`ParticleSet`
and every operation is vectorised over the directed pair list of a
:class:`NeighborTable`.  Particles carry unit mass, so there is no mass array.

Kernel dimension follows the manifold a particle lives on: volume particles
use the ambient dimension, surface particles one less, curve particles 1.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .features import CellType

__all__ = [
    "ParticleSet",
    "NeighborTable",
    "PEER",
    "BOUNDARY",
    "GAMMA_FLOOR",
    "kernel_W",
    "kernel_dWdr",
    "kernel_d2Wdr2",
    "build_neighbor_table",
    "compute_gamma",
    "compute_pressure_force",
    "compute_viscous_force",
    "compute_pressure_stiffness",
    "compute_specific_volume",
    "feature_volume_sum",
]

PEER = 0
BOUNDARY = 1
GAMMA_FLOOR = 0.3

# Wendland C2 normalisation for support radius 2h, times h**dim
_ALPHA = {1: 5.0 / 8.0, 2: 7.0 / (4.0 * math.pi), 3: 21.0 / (16.0 * math.pi)}


def _alpha(h, dim):
    dim = np.asarray(dim)
    a = np.choose(np.clip(dim, 1, 3) - 1, [_ALPHA[1], _ALPHA[2], _ALPHA[3]])
    return a / np.asarray(h, float) ** dim


def kernel_W(r, h, dim):
    """Wendland C2 kernel with compact support ``2h`` (1D form for ``dim == 1``)."""
    r, h, dim = np.broadcast_arrays(np.asarray(r, float), np.asarray(h, float), np.asarray(dim))
    s = np.clip(r / (2.0 * h), 0.0, 1.0)
    w3 = (1.0 - s) ** 3
    shape = np.where(dim == 1, w3 * (3.0 * s + 1.0), w3 * (1.0 - s) * (4.0 * s + 1.0))
    out = _alpha(h, dim) * shape
    return out if out.ndim else float(out)


def kernel_dWdr(r, h, dim):
    r, h, dim = np.broadcast_arrays(np.asarray(r, float), np.asarray(h, float), np.asarray(dim))
    s = np.clip(r / (2.0 * h), 0.0, 1.0)
    w2 = (1.0 - s) ** 2
    ds = np.where(dim == 1, -12.0 * s * w2, -20.0 * s * w2 * (1.0 - s))
    out = _alpha(h, dim) * ds / (2.0 * h)
    return out if out.ndim else float(out)


def kernel_d2Wdr2(r, h, dim):
    r, h, dim = np.broadcast_arrays(np.asarray(r, float), np.asarray(h, float), np.asarray(dim))
    s = np.clip(r / (2.0 * h), 0.0, 1.0)
    d2s = np.where(dim == 1, (1.0 - s) * (36.0 * s - 12.0), (1.0 - s) ** 2 * (80.0 * s - 20.0))
    out = _alpha(h, dim) * d2s / (2.0 * h) ** 2
    return out if out.ndim else float(out)


@dataclass
class ParticleSet:
    x: np.ndarray
    ptype: np.ndarray          # CellType value (POSITIVE for volume particles)
    feature: np.ndarray
    kdim: np.ndarray           # kernel dimension
    v: np.ndarray | None = None
    h: np.ndarray | None = None
    normal: np.ndarray | None = None
    tangent: np.ndarray | None = None   # curve particles: local segment direction
    arc: np.ndarray | None = None       # curve particles: arc-length coordinate
    gamma: np.ndarray | None = None
    vtilde: np.ndarray | None = None
    force_p: np.ndarray | None = None
    force_v: np.ndarray | None = None
    ht: np.ndarray | None = None        # target size; the force kernel length h may be a multiple of it

    def __post_init__(self):
        self.x = np.asarray(self.x, float)
        n, d = self.x.shape
        self.ptype = np.asarray(self.ptype, np.int8)
        self.feature = np.asarray(self.feature, np.int64)
        self.kdim = np.asarray(self.kdim, np.int64)
        z = lambda: np.zeros((n, d))  # noqa: E731
        self.v = z() if self.v is None else np.asarray(self.v, float)
        self.h = np.ones(n) if self.h is None else np.asarray(self.h, float)
        self.normal = z() if self.normal is None else self.normal
        self.tangent = z() if self.tangent is None else self.tangent
        self.arc = np.full(n, np.nan) if self.arc is None else self.arc
        self.gamma = np.ones(n) if self.gamma is None else self.gamma
        self.vtilde = np.zeros(n) if self.vtilde is None else self.vtilde
        self.force_p = z() if self.force_p is None else self.force_p
        self.force_v = z() if self.force_v is None else self.force_v

    def __len__(self) -> int:
        return len(self.x)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def target(self) -> np.ndarray:
        """Target size ``h_t`` (defaults to the kernel length when not set separately)."""
        return self.h if self.ht is None else self.ht

    def copy(self) -> "ParticleSet":
        return ParticleSet(**{k: None if getattr(self, k) is None else np.array(getattr(self, k), copy=True)
                              for k in self.__dataclass_fields__})


@dataclass
class NeighborTable:
    """Directed pairs ``(i, j)``: ``j`` influences ``i`` either as a peer or a boundary particle."""

    i: np.ndarray
    j: np.ndarray
    r: np.ndarray
    e: np.ndarray           # (x_i - x_j) / |x_i - x_j|
    role: np.ndarray
    n_particles: int

    def __len__(self) -> int:
        return len(self.i)

    def neighbors(self, i: int, role: int | None = None) -> np.ndarray:
        m = self.i == i
        if role is not None:
            m &= self.role == role
        return self.j[m]

    def mask(self, role: int) -> np.ndarray:
        return self.role == role


def _roles(ptype: np.ndarray, feature: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    role = np.full(len(i), -1, dtype=np.int8)
    role[feature[i] == feature[j]] = PEER
    role[ptype[j] < ptype[i]] = BOUNDARY
    return role


def candidate_pairs(x: np.ndarray, radius: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All unordered pairs within ``max(radius_i, radius_j)``, returned in both directions."""
    tree = cKDTree(x)
    hits = tree.query_ball_point(x, radius, return_sorted=False)
    lengths = np.fromiter(map(len, hits), dtype=np.int64, count=len(hits))
    jj = np.fromiter(itertools.chain.from_iterable(hits), dtype=np.int64, count=int(lengths.sum()))
    ii = np.repeat(np.arange(len(x)), lengths)
    n = len(x)
    keys = np.concatenate([ii * n + jj, jj * n + ii])
    keys = np.unique(keys)
    ii, jj = keys // n, keys % n
    keep = ii != jj
    return ii[keep], jj[keep]


def build_neighbor_table(p: ParticleSet, curve_length: dict[int, tuple[float, bool]] | None = None,
                         movable_only: bool = True) -> NeighborTable:
    """Pairs within twice the larger kernel length of the two, labelled by the interaction hierarchy.

    A particle's kernel length is the larger of its force length ``h`` and its
    target size.  The wider cutoff keeps the one-sided sums complete when
    neighbours are smaller; symmetric pair terms vanish past ``2 h_ij`` anyway.

    Curve peers are separated by arc length (``curve_length`` maps a curve id to
    its total length and closedness, for wrap-around on closed curves).
    """
    reach = np.maximum(p.h, p.target)
    ii, jj = candidate_pairs(p.x, 2.0 * reach)
    if movable_only:
        keep = p.ptype[ii] != CellType.SINGULARITY
        ii, jj = ii[keep], jj[keep]
    role = _roles(p.ptype, p.feature, ii, jj)
    keep = role >= 0
    ii, jj, role = ii[keep], jj[keep], role[keep]
    dx = p.x[ii] - p.x[jj]
    r = np.linalg.norm(dx, axis=1)
    curve_peer = (role == PEER) & (p.ptype[ii] == CellType.CURVE)
    if np.any(curve_peer):
        ds = np.abs(p.arc[ii[curve_peer]] - p.arc[jj[curve_peer]])
        if curve_length:
            feat = p.feature[ii[curve_peer]]
            L = np.array([curve_length[int(k)][0] for k in feat])
            closed = np.array([curve_length[int(k)][1] for k in feat])
            ds = np.where(closed, np.minimum(ds, L - ds), ds)
        r = r.copy()
        r[curve_peer] = ds
    keep = (r < 2.0 * np.maximum(reach[ii], reach[jj])) & (r > 0)
    ii, jj, role, r, dx = ii[keep], jj[keep], role[keep], r[keep], dx[keep]
    chord = np.linalg.norm(dx, axis=1)
    e = dx / np.where(chord > 0, chord, 1.0)[:, None]
    return NeighborTable(ii, jj, r, e, role, len(p))


# ---------------------------------------------------------------------------
# sums


def _scatter(idx: np.ndarray, w: np.ndarray, n: int) -> np.ndarray:
    # empty inputs make bincount return integers
    if w.ndim == 1:
        return np.bincount(idx, weights=w, minlength=n).astype(float)
    return np.stack([np.bincount(idx, weights=w[:, a], minlength=n) for a in range(w.shape[1])],
                    axis=1).astype(float)


def compute_gamma(p: ParticleSet, table: NeighborTable) -> np.ndarray:
    """Shepard-like kernel completeness ``sum_j W(r_ij, h_t,i) h_t,j**d + W(0, h_t,i) h_t,i**d``.

    Sums over peers and boundary neighbours alike, with the kernel at the
    target size.  The returned values are unclamped; divide by
    ``np.maximum(gamma, GAMMA_FLOOR)``.
    """
    i, j = table.i, table.j
    k = p.kdim[i]
    ht = p.target
    w = kernel_W(table.r, ht[i], k) * ht[j] ** k
    self_term = kernel_W(0.0, ht, np.maximum(p.kdim, 1)) * ht ** p.kdim
    return _scatter(i, w, len(p)) + self_term


def boundary_directions(p: ParticleSet, table: NeighborTable, sel: np.ndarray) -> np.ndarray:
    """Unit direction pointing from particle ``i`` out through boundary particle ``b``.

    Volume particles use the level-set normal stored on ``b``.  Particles on
    lower-dimensional features use the conormal: the offset ``x_b - x_i``
    projected onto the tangent space of ``i``.
    """
    i, b = table.i[sel], table.j[sel]
    out = p.normal[b].copy()
    low = p.kdim[i] < p.dim
    if np.any(low):
        il, bl = i[low], b[low]
        d = p.x[bl] - p.x[il]
        curve = p.ptype[il] == CellType.CURVE
        n_i = p.normal[il]
        t_i = p.tangent[il]
        along = np.einsum("ij,ij->i", d, t_i)[:, None] * t_i
        off_normal = d - np.einsum("ij,ij->i", d, n_i)[:, None] * n_i
        c = np.where(curve[:, None], along, off_normal)
        norm = np.linalg.norm(c, axis=1)
        ok = norm > 1e-12
        c[ok] /= norm[ok, None]
        c[~ok] = 0.0
        out[low] = c
    return out


def compute_pressure_force(p: ParticleSet, table: NeighborTable, p0: float = 1.0,
                           corrected: bool = True, boundary_pairs: bool = True) -> np.ndarray:
    """Pressure acceleration on every particle.

    The pair sum runs over peers and, one-sidedly, over boundary neighbours.
    ``corrected`` adds the boundary closure ``-(C_i + C_b) W n_b / h_b`` and
    divides everything by ``gamma_i``; without it the plain pair sum is
    returned.  ``boundary_pairs=False`` restricts the corrected pair sum to
    peers only.
    """
    n = len(p)
    i, j = table.i, table.j
    k = p.kdim[i]
    ht = p.target
    coef = p0 * (ht[i] ** (2 * k) + ht[j] ** (2 * k))   # p0/rho_t,i^2 + p0/rho_t,j^2
    hij = 0.5 * (p.h[i] + p.h[j])
    peer = table.role == PEER
    pair_set = peer if (corrected and not boundary_pairs) else np.ones(len(i), dtype=bool)
    acc = -(coef * kernel_dWdr(table.r, hij, k))[:, None] * table.e
    out = _scatter(i[pair_set], acc[pair_set], n)
    if corrected:
        bnd = ~peer
        if np.any(bnd):
            nb = boundary_directions(p, table, bnd)
            # area h_b^(d-1) times density h_b^-d of the boundary sample
            w = coef[bnd] * kernel_W(table.r[bnd], hij[bnd], k[bnd]) / ht[j[bnd]]
            out -= _scatter(i[bnd], w[:, None] * nb, n)
        out /= np.maximum(p.gamma, GAMMA_FLOOR)[:, None]
    return out


def compute_pressure_stiffness(p: ParticleSet, table: NeighborTable, p0: float = 1.0,
                               corrected: bool = True) -> np.ndarray:
    """Row sum of the linearised pair-pressure Hessian per particle.

    Each pair contributes its radial ``|d2W/dr2|`` and transverse ``|dW/dr| / r``
    stiffness, scaled like :func:`compute_pressure_force`.
    """
    i, j = table.i, table.j
    k = p.kdim[i]
    ht = p.target
    coef = p0 * (ht[i] ** (2 * k) + ht[j] ** (2 * k))
    hij = 0.5 * (p.h[i] + p.h[j])
    st = coef * (np.abs(kernel_d2Wdr2(table.r, hij, k)) + np.abs(kernel_dWdr(table.r, hij, k)) / table.r)
    out = _scatter(i, st, len(p))
    if corrected:
        out /= np.maximum(p.gamma, GAMMA_FLOOR)
    return out


def compute_viscous_force(p: ParticleSet, table: NeighborTable) -> np.ndarray:
    """Pair viscosity over peers with ``eta = rho_t * 0.1 * r_c * |v|``."""
    n = len(p)
    peer = table.role == PEER
    i, j, r = table.i[peer], table.j[peer], table.r[peer]
    k = p.kdim[i]
    speed = np.linalg.norm(p.v, axis=1)
    nu_i = 0.2 * p.h[i] * speed[i]
    nu_j = 0.2 * p.h[j] * speed[j]
    ht = p.target
    eta_i = ht[i] ** (-k) * nu_i
    eta_j = ht[j] ** (-k) * nu_j
    denom = eta_i + eta_j
    hm = np.where(denom > 0, 2.0 * eta_i * eta_j / np.where(denom > 0, denom, 1.0), 0.0)
    inv_rho2 = ht[i] ** (2 * k) + ht[j] ** (2 * k)
    dw = kernel_dWdr(r, 0.5 * (p.h[i] + p.h[j]), k)
    vij = p.v[i] - p.v[j]
    acc = (hm * inv_rho2 * dw / r)[:, None] * vij
    return _scatter(i, acc, n)


def compute_specific_volume(p: ParticleSet, table: NeighborTable) -> np.ndarray:
    """``1 / (sum_peers W(r_ij, h_t,i) + W(0, h_t,i))`` with the particle's own kernel dimension."""
    peer = table.role == PEER
    i = table.i[peer]
    k = np.maximum(p.kdim, 1)
    ht = p.target
    w = kernel_W(table.r[peer], ht[i], k[i])
    return 1.0 / (_scatter(i, w, len(p)) + kernel_W(0.0, ht, k))


def feature_volume_sum(p: ParticleSet, vtilde: np.ndarray, v_ref: np.ndarray) -> np.ndarray:
    """Normalised feature volume: sum of specific volumes per feature over its reference measure."""
    tot = np.bincount(p.feature, weights=vtilde, minlength=len(v_ref))
    return tot / np.asarray(v_ref, float)

import itertools

import numpy as np
import pytest
from scipy import integrate

from featuresph.features import CellType
from featuresph.sph import (BOUNDARY, PEER, ParticleSet, build_neighbor_table, compute_gamma,
                            compute_pressure_force, compute_pressure_stiffness, compute_specific_volume,
                            compute_viscous_force, feature_volume_sum, kernel_d2Wdr2, kernel_dWdr, kernel_W)

VOL, SURF = CellType.POSITIVE, CellType.SURFACE


def particles(x, ptype=VOL, feature=0, ht=1.0, kappa=0.8, kdim=None, v=None):
    x = np.asarray(x, float)
    n, d = x.shape
    ptype = np.broadcast_to(np.asarray(ptype), n).copy()
    kd = np.where(ptype == VOL, d, d - 1) if kdim is None else np.broadcast_to(kdim, n)
    ht = np.broadcast_to(np.asarray(ht, float), n).copy()
    return ParticleSet(x=x, ptype=ptype, feature=np.broadcast_to(feature, n).copy(), kdim=kd,
                       h=kappa * ht, ht=ht, v=v)


def lattice(dim, extent=6, offset=0.0):
    axis = np.arange(-extent, extent + 1) + offset
    return np.array(list(itertools.product(axis, repeat=dim)), float)


# -- kernel ----------------------------------------------------------------


@pytest.mark.parametrize("dim", [1, 2, 3])
def test_kernel_support_and_peak(dim):
    assert kernel_W(2.0 * 0.7, 0.7, dim) == 0.0
    assert kernel_W(5.0, 0.7, dim) == 0.0
    assert kernel_dWdr(0.0, 0.7, dim) == 0.0
    r = np.linspace(0, 1.4, 200)
    assert np.all(kernel_dWdr(r, 0.7, dim) <= 0.0)


@pytest.mark.parametrize("dim", [1, 2, 3])
def test_kernel_normalisation(dim):
    h = 0.7
    shell = {1: 2.0, 2: 2 * np.pi, 3: 4 * np.pi}[dim]
    total, _ = integrate.quad(lambda r: shell * r ** (dim - 1) * kernel_W(r, h, dim), 0.0, 2 * h)
    assert total == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("dim", [1, 2, 3])
def test_kernel_derivatives_match_finite_differences(dim):
    r = np.linspace(0.05, 1.9, 40)
    eps = 1e-6
    fd1 = (kernel_W(r + eps, 1.0, dim) - kernel_W(r - eps, 1.0, dim)) / (2 * eps)
    fd2 = (kernel_dWdr(r + eps, 1.0, dim) - kernel_dWdr(r - eps, 1.0, dim)) / (2 * eps)
    np.testing.assert_allclose(kernel_dWdr(r, 1.0, dim), fd1, atol=1e-7)
    np.testing.assert_allclose(kernel_d2Wdr2(r, 1.0, dim), fd2, atol=1e-6)


# -- neighbours ------------------------------------------------------------


def test_far_pair_is_not_listed():
    p = particles([[0.0, 0.0], [3.0, 0.0]], kappa=1.0)
    assert len(build_neighbor_table(p)) == 0


def test_neighbor_table_matches_brute_force():
    rng = np.random.default_rng(0)
    n = 500
    x = rng.uniform(0, 10, (n, 2))
    ptype = rng.choice([SURF, VOL], n)
    feature = np.where(ptype == VOL, 0, rng.integers(1, 3, n))
    ht = rng.uniform(0.3, 0.8, n)
    p = particles(x, ptype, feature, ht)
    t = build_neighbor_table(p)
    got = {(a, b, r) for a, b, r in zip(t.i.tolist(), t.j.tolist(), t.role.tolist())}
    reach = np.maximum(p.h, p.target)
    want = set()
    for a in range(n):
        for b in range(n):
            if a == b or np.linalg.norm(x[a] - x[b]) >= 2 * max(reach[a], reach[b]):
                continue
            if feature[a] == feature[b]:
                want.add((a, b, PEER))
            elif ptype[b] < ptype[a]:
                want.add((a, b, BOUNDARY))
    assert got == want
    np.testing.assert_allclose(t.r, np.linalg.norm(x[t.i] - x[t.j], axis=1), rtol=1e-14)
    np.testing.assert_allclose(np.linalg.norm(t.e, axis=1), 1.0, rtol=1e-14)


def test_boundary_role_is_one_way():
    p = particles([[0.0, 0.0], [0.5, 0.0]], ptype=[SURF, VOL], feature=[0, 1])
    t = build_neighbor_table(p)
    assert (t.i.tolist(), t.j.tolist(), t.role.tolist()) == ([1], [0], [BOUNDARY])


# -- gamma -----------------------------------------------------------------


def centre_index(x):
    return int(np.argmin(np.linalg.norm(x, axis=1)))


@pytest.mark.parametrize("dim, expected", [(2, 1.038), (3, 1.034)])
def test_gamma_interior_lattice(dim, expected):
    x = lattice(dim, 4)
    p = particles(x)
    g = compute_gamma(p, build_neighbor_table(p))[centre_index(x)]
    # direct lattice summation of W(r, 1) with unit target volumes, frozen
    assert g == pytest.approx(expected, abs=2e-3)
    assert 0.95 <= g <= 1.05


@pytest.mark.parametrize("dim, expected", [(2, 0.498), (3, 0.502)])
def test_gamma_on_planar_boundary(dim, expected):
    # cell-centred half lattice x_0 >= 0.5, probe on the plane x_0 = 0 carrying no volume of its own
    x = lattice(dim, 4)
    half = x[x[:, 0] >= 0] + np.eye(dim)[0] * 0.5
    probe = np.zeros((1, dim))
    p = particles(np.vstack([probe, half]))
    g = compute_gamma(p, build_neighbor_table(p))[0] - kernel_W(0.0, 1.0, dim)
    assert g == pytest.approx(expected, abs=2e-3)
    assert abs(g - 0.5) <= 0.08


def test_gamma_isolated_particle():
    p = particles([[0.0, 0.0, 0.0]], ht=0.6)
    g = compute_gamma(p, build_neighbor_table(p))
    assert g[0] == pytest.approx(kernel_W(0.0, 0.6, 3) * 0.6**3, rel=1e-14)


def test_gamma_independent_of_force_kernel_scale():
    x = lattice(2, 4)
    a = particles(x, kappa=0.8)
    b = particles(x, kappa=1.0)
    np.testing.assert_allclose(compute_gamma(a, build_neighbor_table(a)),
                               compute_gamma(b, build_neighbor_table(b)), rtol=1e-14)


# -- pressure --------------------------------------------------------------


def test_symmetric_pair_forces_are_opposite():
    p = particles([[0.0, 0.0], [0.9, 0.3]])
    t = build_neighbor_table(p)
    p.gamma = compute_gamma(p, t)
    f = compute_pressure_force(p, t)
    np.testing.assert_allclose(f[0], -f[1], atol=1e-12)
    # repulsive: particle 0 is pushed away from particle 1
    assert np.dot(f[0], p.x[1] - p.x[0]) < 0


def test_isolated_particle_feels_nothing():
    p = particles([[0.0, 0.0]])
    t = build_neighbor_table(p)
    p.gamma = compute_gamma(p, t)
    np.testing.assert_array_equal(compute_pressure_force(p, t), 0.0)
    np.testing.assert_array_equal(compute_viscous_force(p, t), 0.0)


def test_no_force_across_same_type_features():
    p = particles([[0.0, 0.0], [0.5, 0.0]], feature=[0, 1])
    t = build_neighbor_table(p)
    assert len(t) == 0
    np.testing.assert_array_equal(compute_pressure_force(p, t), 0.0)


def wall_setup(height):
    """Surface particles on y=0 with outward normal -y and one volume particle above them."""
    xs = np.arange(-5.0, 5.5, 1.0)
    wall = np.column_stack([xs, np.zeros_like(xs)])
    x = np.vstack([wall, [[0.2, height]]])
    ptype = [SURF] * len(wall) + [VOL]
    p = particles(x, ptype, feature=[1] * len(wall) + [0])
    p.normal[: len(wall)] = [0.0, -1.0]
    return p, len(wall)


@pytest.mark.parametrize("height", [0.05, 0.3, 0.7, 1.2])
def test_boundary_force_points_into_domain(height):
    p, k = wall_setup(height)
    t = build_neighbor_table(p)
    p.gamma = compute_gamma(p, t)
    f = compute_pressure_force(p, t)[k]
    assert np.dot(f, [0.0, -1.0]) < 0


@pytest.mark.parametrize("height", [0.05, 0.3, 0.7])
def test_boundary_closure_alone_pushes_inward(height):
    p, k = wall_setup(height)
    t = build_neighbor_table(p)
    p.gamma = compute_gamma(p, t)
    p.h[:] = p.target
    with_closure = compute_pressure_force(p, t)[k]
    plain = compute_pressure_force(p, t, corrected=False)[k] / max(p.gamma[k], 0.3)
    assert (with_closure - plain)[1] > 0


@pytest.mark.parametrize("seed", range(5))
def test_peer_momentum_conservation(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 4, (100, 3))
    p = particles(x, ht=rng.uniform(0.4, 0.9, 100))
    t = build_neighbor_table(p)
    p.gamma = np.full(100, 0.87)
    f = compute_pressure_force(p, t)
    assert np.linalg.norm(f.sum(axis=0)) <= 1e-10 * np.abs(f).sum()


def test_baseline_force_is_plain_pair_sum():
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 2, (10, 2))
    p = particles(x, ptype=[SURF] * 3 + [VOL] * 7, feature=[1] * 3 + [0] * 7)
    p.normal[:3] = [0.0, -1.0]
    t = build_neighbor_table(p)
    p.gamma = rng.uniform(0.4, 1.2, 10)
    f = compute_pressure_force(p, t, corrected=False)
    want = np.zeros_like(x)
    for a, b in zip(t.i, t.j):
        d = x[a] - x[b]
        r = np.linalg.norm(d)
        k = p.kdim[a]
        c = p.target[a] ** (2 * k) + p.target[b] ** (2 * k)
        want[a] -= c * kernel_dWdr(r, 0.5 * (p.h[a] + p.h[b]), k) * d / r
    np.testing.assert_allclose(f, want, rtol=1e-12, atol=1e-15)


def test_stiffness_positive_and_scaled_by_gamma():
    p = particles(lattice(2, 3))
    t = build_neighbor_table(p)
    p.gamma = compute_gamma(p, t)
    k = compute_pressure_stiffness(p, t)
    raw = compute_pressure_stiffness(p, t, corrected=False)
    assert np.all(k > 0)
    np.testing.assert_allclose(k, raw / np.maximum(p.gamma, 0.3), rtol=1e-14)


# -- viscosity -------------------------------------------------------------


def test_viscous_zero_at_rest_and_for_equal_velocities():
    p = particles(lattice(2, 2))
    t = build_neighbor_table(p)
    np.testing.assert_array_equal(compute_viscous_force(p, t), 0.0)
    p.v[:] = [0.3, -0.2]
    np.testing.assert_allclose(compute_viscous_force(p, t), 0.0, atol=1e-15)


def test_viscous_opposes_approach():
    p = particles([[0.0, 0.0], [0.8, 0.0]], v=[[1.0, 0.0], [-1.0, 0.0]])
    f = compute_viscous_force(p, build_neighbor_table(p))
    vij = p.v[0] - p.v[1]
    assert np.dot(f[0], vij) < 0
    np.testing.assert_allclose(f[0], -f[1], atol=1e-15)


# -- specific volume -------------------------------------------------------


def test_specific_volume_isolated():
    p = particles([[0.0, 0.0]], ht=0.4)
    v = compute_specific_volume(p, build_neighbor_table(p))
    assert v[0] == pytest.approx(1.0 / kernel_W(0.0, 0.4, 2), rel=1e-14)


@pytest.mark.parametrize("s", [0.5, 1.0, 2.0])
def test_specific_volume_on_lattice(s):
    x = lattice(2, 4) * s
    p = particles(x, ht=s)
    v = compute_specific_volume(p, build_neighbor_table(p))[centre_index(x)]
    assert v == pytest.approx(s * s, rel=0.10)


def test_feature_volume_sum():
    p = particles(np.zeros((4, 2)), feature=[0, 0, 1, 1])
    got = feature_volume_sum(p, np.array([1.0, 2.0, 3.0, 5.0]), np.array([3.0, 4.0]))
    np.testing.assert_allclose(got, [1.0, 2.0])

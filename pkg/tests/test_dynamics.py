import numpy as np
import pytest

from featuresph.case import build_case, kernel_dimension
from featuresph.config import RunConfig
from featuresph.dynamics import (FeatureGroup, IntegrationError, Relaxer, StabilizationPolicy,
                                 compute_group_timestep, constrain_to_feature, stabilize, step_group)
from featuresph.features import CellType, classify_cells
from featuresph.geometry import FeatureCurve, Primitive, SingularityPoint, build_levelset, eval_normal, eval_phi
from featuresph.sizing import SizingField
from featuresph.sph import ParticleSet

BOX = Primitive("box", lo=(0.0, 0.0), hi=(10.0, 10.0))


def relaxer_for(x, ptype, feature, prim=BOX, curves=(), sings=(), spacing=0.1, h=1.0, cls=Relaxer):
    grid = build_levelset(prim, spacing)
    tags = classify_cells(grid, list(curves), list(sings))
    ptype = np.asarray(ptype)
    p = ParticleSet(np.asarray(x, float), ptype, np.asarray(feature), kernel_dimension(ptype, grid.dim))
    return cls(p, grid, SizingField("constant", h, h, grid.dim), tags, kernel_scale=0.8)


def volume_index(rx):
    return int(rx.tags.features_of(CellType.POSITIVE)[0])


def one_volume_particle(x, cls=Relaxer):
    grid = build_levelset(BOX, 0.1)
    vol = int(classify_cells(grid).features_of(CellType.POSITIVE)[0])
    return relaxer_for([x], [CellType.POSITIVE], [vol], cls=cls)


# -- timestep --------------------------------------------------------------


def test_timestep_force_limit():
    assert compute_group_timestep(np.array([[1.0, 0.0]]), np.zeros((1, 2)), np.array([0.5])) == 0.25


def test_timestep_velocity_limit():
    dt = compute_group_timestep(np.zeros((1, 2)), np.array([[1.0, 0.0]]), np.array([0.5]))
    # viscous limit 0.125 / 0.1 = 1.25 loses to the velocity limit 1/40
    assert dt == pytest.approx(0.025, rel=1e-15)


def test_timestep_fallback_at_rest():
    h = np.array([0.4, 0.2, 0.9])
    assert compute_group_timestep(np.zeros((3, 2)), np.zeros((3, 2)), h) == pytest.approx(0.25 * 0.4)


def test_timestep_stiffness_limit():
    dt = compute_group_timestep(np.array([[1e-8, 0.0]]), np.zeros((1, 2)), np.array([0.5]), np.array([16.0]))
    assert dt == pytest.approx(0.25)


# -- stepping --------------------------------------------------------------


def test_rest_state_is_fixed_point():
    rx = one_volume_particle([5.0, 5.0])
    rx.prime()
    x0 = rx.p.x.copy()
    for _ in range(3):
        rx.step(rx.groups, StabilizationPolicy())
    np.testing.assert_array_equal(rx.p.x, x0)
    np.testing.assert_array_equal(rx.p.v, 0.0)


class ConstantForce(Relaxer):
    force = np.array([0.3, -0.4])

    def compute_forces(self, damping):
        self.update_geometry()
        self.accel[:] = self.force
        self.accel_p = self.accel.copy()


def test_verlet_constant_force_from_rest():
    rx = one_volume_particle([5.0, 5.0], cls=ConstantForce)
    rx.prime()
    dt = rx.step(rx.groups, StabilizationPolicy())[rx.groups[0].feature_index]
    assert dt == pytest.approx(0.25 * np.sqrt(1.6 / 0.5))
    np.testing.assert_allclose(rx.p.x[0], [5.0, 5.0] + 0.5 * dt**2 * ConstantForce.force, rtol=1e-14)
    np.testing.assert_allclose(rx.p.v[0], dt * ConstantForce.force, rtol=1e-14)


def test_two_body_centre_of_mass_is_stationary():
    grid = build_levelset(BOX, 0.1)
    vol = int(classify_cells(grid).features_of(CellType.POSITIVE)[0])
    rx = relaxer_for([[4.6, 5.0], [5.4, 5.1]], [CellType.POSITIVE] * 2, [vol] * 2)
    rx.prime(0.05)
    com = rx.p.x.mean(axis=0)
    for _ in range(30):
        rx.step(rx.groups, StabilizationPolicy())
    assert np.linalg.norm(rx.p.x.mean(axis=0) - com) <= 1e-10
    assert np.linalg.norm(rx.p.x[0] - rx.p.x[1]) > np.hypot(0.8, 0.1)


def test_non_finite_state_is_reported():
    rx = one_volume_particle([5.0, 5.0])
    rx.prime()
    rx.accel[0] = [np.nan, 0.0]
    rx.p.v[0] = [np.nan, 0.0]
    with pytest.raises(IntegrationError, match="particle 0"):
        rx.step(rx.groups, StabilizationPolicy(), step_no=17)


def test_phase_two_drops_damping():
    def run(phase, damping):
        rx = one_volume_particle([5.0, 5.0], cls=ConstantForce)
        rx.prime()
        g = rx.groups[0]
        g.phase = phase
        for _ in range(3):
            step_group(g, rx, StabilizationPolicy(nullify_period=50, damping=damping))
        return rx.p.x.copy()

    np.testing.assert_array_equal(run("two", 0.2), run("two", 0.0))


# -- constraints -----------------------------------------------------------


def circle_relaxer():
    prim = Primitive("circle", center=(0.0, 0.0), radius=5.0)
    grid = build_levelset(prim, 0.1)
    tags = classify_cells(grid)
    surf = int(tags.features_of(CellType.SURFACE)[0])
    vol = int(tags.features_of(CellType.POSITIVE)[0])
    return relaxer_for([[5.3, 0.2], [0.0, 0.0]], [CellType.SURFACE, CellType.POSITIVE], [surf, vol], prim=prim)


def test_surface_particle_projected_and_force_made_tangential():
    rx = circle_relaxer()
    rx.update_geometry()
    n = rx.p.x[0] / np.linalg.norm(rx.p.x[0])
    rx.accel[0] = 2.0 * n
    rx.p.v[0] = -0.5 * n
    constrain_to_feature(rx, [0])
    assert abs(eval_phi(rx.grid, rx.p.x[0])) <= 1e-6 * rx.grid.diagonal
    # the level-set normal differs from the radial direction by the interpolation error
    m = eval_normal(rx.grid, rx.p.x[0])
    assert abs(rx.accel[0] @ m) <= 1e-12 and abs(rx.p.v[0] @ m) <= 1e-12
    np.testing.assert_allclose(rx.accel[0], 0.0, atol=2e-3)


def test_curve_particle_keeps_tangential_force():
    curve = FeatureCurve(0, [[2.0, 5.0], [8.0, 5.0]])
    rx = relaxer_for([[4.0, 5.3]], [CellType.CURVE], [0], curves=[curve])
    rx.accel[0] = [1.0, 1.0]
    constrain_to_feature(rx, 0)
    np.testing.assert_allclose(rx.p.x[0], [4.0, 5.0])
    np.testing.assert_allclose(rx.accel[0], [1.0, 0.0])


def test_singularity_reset_to_anchor():
    sing = SingularityPoint(0, np.array([0.0, 0.0]))
    rx = relaxer_for([[0.1, -0.05]], [CellType.SINGULARITY], [0], sings=[sing])
    constrain_to_feature(rx, 0)
    np.testing.assert_array_equal(rx.p.x[0], [0.0, 0.0])


def test_volume_particle_repaired_inside():
    rx = one_volume_particle([5.0, -0.2])
    rx.p.v[0] = [0.3, -1.0]
    assert constrain_to_feature(rx, 0) == 1
    assert eval_phi(rx.grid, rx.p.x[0]) == pytest.approx(0.05, abs=1e-6)
    assert rx.p.x[0, 0] == pytest.approx(5.0, abs=1e-9)
    # outward velocity removed, tangential kept
    np.testing.assert_allclose(rx.p.v[0], [0.3, 0.0], atol=1e-9)
    assert rx.repair_events == 1


# -- stabilisation ---------------------------------------------------------


def group_with_velocity():
    rx = one_volume_particle([5.0, 5.0])
    rx.p.v[0] = [1.0, 2.0]
    return rx, rx.groups[0]


def test_nullify_on_period():
    rx, g = group_with_velocity()
    g.steps_taken = 100
    assert stabilize(g, rx, StabilizationPolicy(nullify_period=100), 1e-2, 1e-2)
    np.testing.assert_array_equal(rx.p.v, 0.0)
    assert rx.kinetic_energy() == 0.0


def test_nullify_on_timestep_collapse():
    rx, g = group_with_velocity()
    g.steps_taken = 37
    assert stabilize(g, rx, StabilizationPolicy(nullify_period=100), 1e-2, 5e-4)
    np.testing.assert_array_equal(rx.p.v, 0.0)


def test_no_nullify_otherwise():
    rx, g = group_with_velocity()
    g.steps_taken = 37
    assert not stabilize(g, rx, StabilizationPolicy(nullify_period=100), 1e-2, 5e-3)
    np.testing.assert_array_equal(rx.p.v, [[1.0, 2.0]])


@pytest.mark.parametrize("kw", [{"nullify_period": 0}, {"damping": 0.3}, {"damping": -0.1}])
def test_policy_validation(kw):
    with pytest.raises(ValueError):
        StabilizationPolicy(**kw)


def test_group_movability():
    assert not FeatureGroup(0, CellType.SINGULARITY, np.arange(1)).movable
    assert FeatureGroup(0, CellType.SURFACE, np.arange(1)).movable


# -- invariants over a short run -------------------------------------------


@pytest.fixture(scope="module")
def small_box():
    return RunConfig(seed=4, geometry="box", lo=(0.0, 0.0), hi=(6.0, 6.0), grid_spacing=0.3 / 1.75,
                     sizing="point", h_min=0.3, h_max=0.6, sizing_focus=(6.0, 6.0), sizing_scale=8.5)


def run_steps(cfg, n):
    case = build_case(cfg)
    rx = Relaxer(case.particles, case.grid, case.sizing, case.tags, kernel_scale=cfg.kernel_scale)
    rx.prime(0.05)
    return case, rx


def test_run_invariants(small_box):
    case, rx = run_steps(small_box, 0)
    p = rx.p
    surf = p.ptype == CellType.SURFACE
    vol = p.ptype == CellType.POSITIVE
    sing = p.ptype == CellType.SINGULARITY
    anchors = p.x[sing].copy()
    policy = StabilizationPolicy(nullify_period=25)
    for step in range(1, 76):
        rx.step(rx.groups, policy, step_no=step)
        assert np.max(np.abs(eval_phi(rx.grid, p.x[surf]))) <= 1e-6 * rx.grid.diagonal
        assert np.all(eval_phi(rx.grid, p.x[vol]) > 0)
        np.testing.assert_array_equal(p.x[sing], anchors)
        if step % 25 == 0:
            assert rx.kinetic_energy() == 0.0


def test_runs_are_deterministic(small_box):
    out = []
    for _ in range(2):
        _, rx = run_steps(small_box, 0)
        for step in range(20):
            rx.step(rx.groups, StabilizationPolicy())
        out.append(rx.p.x.copy())
    np.testing.assert_array_equal(out[0], out[1])

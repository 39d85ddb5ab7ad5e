import itertools

import numpy as np
import pytest
from scipy import ndimage

from featuresph.features import (CellType, classify_cells, integrate_feature_mass, particle_budget,
                                 write_tag_vtk)
from featuresph.geometry import FeatureCurve, GeometryError, Primitive, SingularityPoint, build_levelset
from featuresph.sizing import SizingField


def zalesak_tags(spacing=0.25):
    prim = Primitive("zalesak", center=(0.0, 0.0), radius=15.0, slot_width=5.0, slot_length=25.0)
    grid = build_levelset(prim, spacing)
    sings = [SingularityPoint(k, p) for k, p in enumerate(prim.singular_points())]
    return grid, classify_cells(grid, [], sings)


def cube_tags():
    grid = build_levelset(Primitive("box", lo=(0.0,) * 3, hi=(1.0,) * 3), 0.05)
    corners = np.array(list(itertools.product([0.0, 1.0], repeat=3)))
    edges = [(a, b) for a, b in itertools.combinations(range(8), 2)
             if np.sum(corners[a] != corners[b]) == 1]
    curves = [FeatureCurve(k, [corners[a], corners[b]]) for k, (a, b) in enumerate(edges)]
    sings = [SingularityPoint(12 + k, c) for k, c in enumerate(corners)]
    return grid, classify_cells(grid, curves, sings)


def test_circle_has_one_surface_and_one_volume():
    grid = build_levelset(Primitive("circle", center=(0.0, 0.0), radius=5.0), 0.2)
    tags = classify_cells(grid)
    assert list(tags.feature_type) == [CellType.SURFACE, CellType.POSITIVE]
    assert np.all(tags.cell_feature[tags.cell_type == CellType.NEGATIVE] == -1)


def test_zalesak_nine_features():
    _, tags = zalesak_tags()
    ft = list(tags.feature_type)
    assert len(ft) == 9
    assert ft.count(CellType.SURFACE) == 4
    assert ft.count(CellType.SINGULARITY) == 4
    assert ft.count(CellType.POSITIVE) == 1


def test_cube_features():
    _, tags = cube_tags()
    ft = list(tags.feature_type)
    assert (ft.count(CellType.SURFACE), ft.count(CellType.CURVE), ft.count(CellType.SINGULARITY),
            ft.count(CellType.POSITIVE)) == (6, 12, 8, 1)


def test_partition_and_indices():
    grid, tags = zalesak_tags()
    assert sum(tags.counts().values()) == np.prod(grid.cell_dims)
    tagged = tags.cell_type != CellType.NEGATIVE
    assert np.all(tags.cell_feature[tagged] >= 0)
    assert set(np.unique(tags.cell_feature[tagged])) == set(range(tags.n_features))
    # type of every cell agrees with the lookup table of its feature
    assert np.all(tags.feature_type[tags.cell_feature[tagged]] == tags.cell_type[tagged])


def test_index_connectivity():
    for grid, tags in (zalesak_tags(0.5), cube_tags()):
        face = ndimage.generate_binary_structure(grid.dim, 1)
        for k in range(tags.n_features):
            if tags.feature_type[k] in (CellType.SURFACE, CellType.POSITIVE):
                _, n = ndimage.label(tags.cell_feature == k, structure=face)
                assert n == 1


def test_declaration_errors():
    grid = build_levelset(Primitive("circle", center=(0.0, 0.0), radius=5.0), 0.2)
    with pytest.raises(GeometryError):
        classify_cells(grid, [], [SingularityPoint(0, np.array([50.0, 0.0]))])
    c = FeatureCurve(0, [[0.0, 0.0], [1.0, 0.0]])
    with pytest.raises(GeometryError):
        classify_cells(grid, [c], [SingularityPoint(0, np.zeros(2))])


def test_uniform_square_mass():
    grid = build_levelset(Primitive("box", lo=(0.0, 0.0), hi=(1.0, 1.0)), 0.1 / 1.75)
    tags = classify_cells(grid)
    budget = integrate_feature_mass(tags, grid, SizingField("constant", 0.1, 0.1, 2))
    vol = tags.features_of(CellType.POSITIVE)[0]
    surf = tags.features_of(CellType.SURFACE)[0]
    assert budget.mass[vol] == pytest.approx(100.0, rel=0.01)
    # marching squares chamfers each corner by about 1.5 cells of edge length
    assert budget.mass[surf] == pytest.approx(40.0, rel=0.03)
    assert budget.v_ref[vol] == pytest.approx(1.0, rel=0.01)
    # per-cell masses add up to the feature mass
    own = budget.volume_cell_owner == vol
    assert budget.volume_cell_mass[own].sum() == pytest.approx(budget.mass[vol], rel=1e-9)


def test_straight_curve_mass():
    grid = build_levelset(Primitive("box", lo=(0.0, 0.0), hi=(1.0, 1.0)), 0.02)
    tags = classify_cells(grid, [FeatureCurve(0, [[0.0, 0.5], [1.0, 0.5]])])
    budget = integrate_feature_mass(tags, grid, SizingField("constant", 0.05, 0.05, 2))
    assert budget.mass[0] == pytest.approx(20.0, abs=1e-9)
    assert budget.count[0] == 20


def test_budget_rounding():
    np.testing.assert_array_equal(particle_budget(np.array([100.4, 0.3, 2.5, 7.6])), [100, 1, 3, 8])


def test_square_case_budget_matches_published_count():
    prim = Primitive("box", lo=(0.0, 0.0), hi=(100.0, 100.0))
    grid = build_levelset(prim, 0.244 / 1.75, ghost=4.88)
    sings = [SingularityPoint(k, p) for k, p in enumerate(prim.singular_points())]
    tags = classify_cells(grid, [], sings)
    sizing = SizingField.linear_distance((100.0, 100.0), 0.244, 4.88, 100 * np.sqrt(2))
    budget = integrate_feature_mass(tags, grid, sizing)
    assert budget.total == pytest.approx(2524, rel=0.03)


def test_square_case_budget_matches_quadrature_oracle():
    # 2D midpoint rule on a 4000^2 grid and 1D midpoint rule along each edge, frozen
    prim = Primitive("box", lo=(0.0, 0.0), hi=(100.0, 100.0))
    grid = build_levelset(prim, 0.244 / 1.75, ghost=4.88)
    sings = [SingularityPoint(k, p) for k, p in enumerate(prim.singular_points())]
    tags = classify_cells(grid, [], sings)
    sizing = SizingField.linear_distance((100.0, 100.0), 0.244, 4.88, 100 * np.sqrt(2))
    budget = integrate_feature_mass(tags, grid, sizing)
    vol = tags.features_of(CellType.POSITIVE)[0]
    assert budget.mass[vol] == pytest.approx(2682.98, rel=0.01)
    surf = sorted(budget.mass[tags.features_of(CellType.SURFACE)])
    np.testing.assert_allclose(surf, [25.21, 25.21, 81.44, 81.44], rtol=0.02)


def test_mass_converges_under_refinement():
    prim = Primitive("circle", center=(0.0, 0.0), radius=10.0)
    sizing = SizingField("point", 0.3, 2.0, 2, focus=np.array([10.0, 0.0]), slope=0.1)
    masses = []
    for dx in (0.2, 0.1):
        grid = build_levelset(prim, dx)
        tags = classify_cells(grid)
        masses.append(integrate_feature_mass(tags, grid, sizing).mass)
    np.testing.assert_allclose(masses[1], masses[0], rtol=0.02)


def test_sizing_must_be_positive():
    grid = build_levelset(Primitive("circle", center=(0.0, 0.0), radius=5.0), 0.2)
    tags = classify_cells(grid)
    bad = SizingField("constant", 1.0, 1.0, 2)
    bad.h_min = -1.0
    with pytest.raises(ValueError):
        integrate_feature_mass(tags, grid, bad)


def test_tag_vtk(tmp_path):
    grid, tags = zalesak_tags(0.5)
    path = tmp_path / "tags.vtk"
    write_tag_vtk(path, grid, tags)
    text = path.read_text()
    assert "SCALARS type int 1" in text and "SCALARS index int 1" in text
    assert f"CELL_DATA {np.prod(grid.cell_dims)}" in text

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from homdrift.geometry import (AlignmentError, CellGeometry, GeometryError, TilingError,
                               build_cell_grid, build_micro_domain)

SQUARE = CellGeometry("axis_square", side=0.25)


def test_obstacle_free_cell():
    g = build_cell_grid(CellGeometry("none"), 32)
    assert g.fluid_area == 1.0
    assert g.obstacle_perimeter == 0.0
    assert g.fluid_mask.all()
    assert len(g.boundary_faces) == 0


def test_square_cell_measures():
    g = build_cell_grid(SQUARE, 32)
    assert g.fluid_area == pytest.approx(0.9375, abs=1e-15)
    assert g.obstacle_perimeter == pytest.approx(1.0, abs=1e-15)
    assert g.discrete_area == g.fluid_area


def test_disk_cell_uses_analytic_measures():
    g = build_cell_grid(CellGeometry("disk", radius=0.25), 64)
    assert g.fluid_area == pytest.approx(1 - math.pi / 16, abs=1e-12)
    assert g.obstacle_perimeter == pytest.approx(math.pi / 2, abs=1e-12)
    assert g.boundary_faces.length.sum() == pytest.approx(math.pi / 2, abs=1e-12)


def test_boundary_faces_separate_fluid_and_solid():
    g = build_cell_grid(SQUARE, 32)
    bf = g.boundary_faces
    n = bf.normals
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0)
    assert np.all((n == 0).sum(axis=1) == 1)
    for i, j, ax, sg in zip(bf.i, bf.j, bf.axis, bf.sign):
        assert g.fluid_mask[i, j]
        ni, nj = g.neighbor(i, j, ax, sg)
        assert not g.fluid_mask[ni, nj]


def test_face_count_doubles_on_refinement():
    a = build_cell_grid(SQUARE, 32)
    b = build_cell_grid(SQUARE, 64)
    assert len(b.boundary_faces) == 2 * len(a.boundary_faces)
    assert a.obstacle_perimeter == b.obstacle_perimeter


def test_neighbor_round_trip():
    g = build_cell_grid(SQUARE, 16)
    for i, j in zip(*np.nonzero(g.fluid_mask)):
        for ax in (0, 1):
            assert g.neighbor(*g.neighbor(i, j, ax, 1), ax, -1) == (i, j)


@pytest.mark.parametrize("kw", [dict(side=0.3), dict(side=0.25, center=(0.51, 0.5))])
def test_misaligned_square(kw):
    with pytest.raises(AlignmentError):
        build_cell_grid(CellGeometry("axis_square", **kw), 32)


def test_obstacle_touching_cell_boundary():
    with pytest.raises(GeometryError):
        CellGeometry("axis_square", side=0.5, center=(0.25, 0.5))
    with pytest.raises(GeometryError):
        CellGeometry("disk", radius=0.5)


def test_coarse_grid_rejected():
    with pytest.raises(GeometryError):
        build_cell_grid(SQUARE, 4)


def test_micro_domain_obstacle_free():
    d = build_micro_domain(CellGeometry("none"), 0.25, 1.0, 16)
    assert d.n_eps == 8
    assert d.fluid_fraction == 1.0
    assert d.n_obstacles == 0


@pytest.mark.parametrize("eps,copies", [(0.25, 64), (0.125, 256)])
def test_micro_domain_square(eps, copies):
    d = build_micro_domain(SQUARE, eps, 1.0, 16)
    assert d.fluid_fraction == pytest.approx(0.9375, abs=1e-15)
    assert d.n_obstacles == copies
    # independent count: connected solid components of the mask
    _, n = ndimage.label(~d.fluid_mask)
    assert n == copies


def test_micro_obstacle_faces_match_cell():
    d = build_micro_domain(SQUARE, 0.25, 1.0, 16)
    cell = build_cell_grid(SQUARE, 16)
    assert len(d.obstacle_faces) == d.n_eps**2 * len(cell.boundary_faces)
    assert np.allclose(d.obstacle_faces.length, cell.boundary_faces.length[0] * 0.25)


def test_tiling_error():
    with pytest.raises(TilingError):
        build_micro_domain(SQUARE, 0.3, 1.0, 16)


@settings(max_examples=10, deadline=None)
@given(k=st.integers(2, 4), n=st.sampled_from([8, 16]), m=st.integers(1, 3))
def test_fluid_fraction_matches_cell_area(k, n, m):
    eps = 2.0**-k
    d = build_micro_domain(SQUARE, eps, m * eps, n)
    assert d.fluid_fraction == pytest.approx(d.cell_grid.fluid_area, abs=1e-14)

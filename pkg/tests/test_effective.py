import numpy as np
import pytest

from homdrift.cell_solver import solve_corrector
from homdrift.coefficients import CoefficientSet, project_zero_mean_BC, sample_coefficients
from homdrift.effective import (AssemblyError, EffectiveTable, TableError, assemble_Dstar,
                                compute_Bstar, eval_Dstar, tabulate_Dstar, write_table_csv)
from homdrift.geometry import CellGeometry, build_cell_grid

FREE = CellGeometry("none")
SQUARE = CellGeometry("axis_square", side=0.25)


def setup(geom, N, cs):
    g = build_cell_grid(geom, N)
    d, _ = project_zero_mean_BC(sample_coefficients(cs, g))
    return g, d


def test_Bstar_cases():
    g, d = setup(SQUARE, 16, CoefficientSet(B_kind="none", C_kind="none"))
    assert np.all(compute_Bstar(d, g) == 0)
    g, d = setup(FREE, 16, CoefficientSet(B_kind="constant", nu=(0.3, -0.1), C_kind="none"))
    assert np.allclose(compute_Bstar(d, g), [0.3, -0.1], atol=1e-15)
    g, d = setup(SQUARE, 64, CoefficientSet())
    B = compute_Bstar(d, g)
    assert abs(B[0] - 0.25 / 0.9375) < 1e-3 and B[1] == 0


def test_trivial_tensor():
    g, d = setup(FREE, 16, CoefficientSet(d1=0.7, d2=0.7, theta=0.7, theta_tilde=0.7,
                                          B_kind="constant", nu=(0.4, 0.1), C_kind="none"))
    c = solve_corrector(g, d, 0.3)
    assert np.abs(assemble_Dstar(d, g, c) - 0.7 * np.eye(2)).max() < 1e-10


def test_square_symmetry_and_refinement():
    def D(N):
        g, d = setup(SQUARE, N, CoefficientSet(B_kind="none", C_kind="none"))
        return assemble_Dstar(d, g, solve_corrector(g, d, 0.6))
    a, b = D(64), D(128)
    for M in (a, b):
        assert abs(M[0, 1]) < 1e-8 and abs(M[1, 0]) < 1e-8
        assert abs(M[0, 0] - M[1, 1]) < 1e-10
    assert abs(a[0, 0] - b[0, 0]) / b[0, 0] < 0.01
    assert 0.8 < b[0, 0] < 1.0


def test_gauge_invariance():
    g, d = setup(SQUARE, 64, CoefficientSet())
    c = solve_corrector(g, d, 0.9)
    a = assemble_Dstar(d, g, c)
    b = assemble_Dstar(d, g, c.shifted(0.7, -1.3))
    assert np.abs(a - b).max() / np.abs(a).max() < 1e-12


def test_grid_mismatch():
    g, d = setup(SQUARE, 16, CoefficientSet())
    g2, d2 = setup(SQUARE, 32, CoefficientSet())
    with pytest.raises(AssemblyError):
        assemble_Dstar(d, g, solve_corrector(g2, d2, 0.0))


@pytest.mark.parametrize("cs", [CoefficientSet(B_kind="none"), CoefficientSet(C_kind="none")])
def test_u0_independence(cs):
    g, d = setup(SQUARE, 16, cs)
    t = tabulate_Dstar(d, g, 1.0, 4)
    v = t.values
    assert np.abs(v - v[0]).max() < 1e-12
    assert np.allclose(eval_Dstar(t, 0.37), v[0], atol=1e-12)


def test_table_interpolation_against_direct_solve():
    g, d = setup(SQUARE, 32, CoefficientSet())
    t = tabulate_Dstar(d, g, 1.0, 5)
    assert not t.is_constant()
    for k, s in enumerate(t.samples):
        assert np.array_equal(eval_Dstar(t, s.u0), s.Dstar)
        assert s.spd
    for mid in (0.125, 0.375, 0.625, 0.875):
        direct = assemble_Dstar(d, g, solve_corrector(g, d, mid))
        assert np.abs(eval_Dstar(t, mid) - direct).max() / np.abs(direct).max() < 1e-3


def test_clamping_and_errors(caplog):
    g, d = setup(SQUARE, 16, CoefficientSet())
    t = tabulate_Dstar(d, g, 1.0, 3)
    D, clamped = eval_Dstar(t, 1.5, report=True)
    assert clamped and np.array_equal(D, t.samples[-1].Dstar)
    assert eval_Dstar(t, np.array([0.1, 0.2])).shape == (2, 2, 2)
    with pytest.raises(TableError):
        tabulate_Dstar(d, g, 1.0, 2)
    with pytest.raises(TableError):
        EffectiveTable(t.Bstar, t.samples[::-1], t.cell_measures)


def test_table_csv(tmp_path):
    g, d = setup(SQUARE, 16, CoefficientSet())
    t = tabulate_Dstar(d, g, 1.0, 3)
    p = tmp_path / "t.csv"
    write_table_csv(t, p)
    lines = p.read_text().splitlines()
    assert lines[0].startswith("# Bstar,")
    assert lines[1] == "u0,D11,D12,D21,D22"
    row = [float(x) for x in lines[2].split(",")]
    assert row[1] == t.samples[0].Dstar[0, 0]

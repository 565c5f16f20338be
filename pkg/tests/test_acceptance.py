"""The ten acceptance criteria at their stated tolerances and runtime budgets."""
import math
import time

import numpy as np
import pytest

from homdrift.cell_solver import solve_corrector, solve_periodic_poisson
from homdrift.coefficients import (Bump, CoefficientSet, divergence, integral_BC,
                                   obstacle_normal_velocity, project_zero_mean_BC,
                                   sample_coefficients, verify_assumptions)
from homdrift.effective import assemble_Dstar, tabulate_Dstar
from homdrift.geometry import CellGeometry, build_cell_grid, build_micro_domain
from homdrift.harness import RunConfig, oscillation_quadrature, run_convergence_study
from homdrift.macro_solver import run_macro
from homdrift.micro_solver import MicroProblem, initial_micro_state, run_micro

SQUARE = CellGeometry("axis_square", side=0.25)
FREE = CellGeometry("none")


def test_c01_assumption_validator(acceptance):
    t0 = time.perf_counter()
    g = build_cell_grid(SQUARE, 64)
    d, _ = project_zero_mean_BC(sample_coefficients(CoefficientSet(), g))
    rep = verify_assumptions(d, g)
    divB = np.abs(divergence(d)[g.fluid_mask]).max()
    bn = np.abs(obstacle_normal_velocity(d, g)).max()
    ibc = np.abs(integral_BC(d))
    dt = time.perf_counter() - t0
    ok = divB == 0 and bn == 0 and np.all(ibc < 1e-13) and rep["A2"].passed and dt < 1
    acceptance(1, "assumption validator", ok,
               f"div B={divB:.1e} B.n={bn:.1e} |int BC|={ibc.max():.1e} ({dt:.2f}s)")
    assert ok


def test_c02_trivial_effective_tensor(acceptance):
    t0 = time.perf_counter()
    theta = 0.6
    cs = CoefficientSet(d1=theta, d2=theta, theta=theta, theta_tilde=theta,
                        B_kind="constant", nu=(0.4, -0.3), C_kind="none")
    g = build_cell_grid(FREE, 32)
    d, _ = project_zero_mean_BC(sample_coefficients(cs, g))
    c = solve_corrector(g, d, 0.5)
    D = assemble_Dstar(d, g, c)
    wmax = np.abs(c.w).max()
    err = np.abs(D - theta * np.eye(2)).max()
    dt = time.perf_counter() - t0
    ok = wmax < 1e-10 and err < 1e-10 and dt < 5
    acceptance(2, "trivial effective tensor", ok, f"|w|={wmax:.1e} |D*-thetaI|={err:.1e} ({dt:.2f}s)")
    assert ok


def test_c03_gauge_invariance(acceptance):
    g = build_cell_grid(SQUARE, 64)
    d, _ = project_zero_mean_BC(sample_coefficients(CoefficientSet(), g))
    c = solve_corrector(g, d, 0.8)
    t0 = time.perf_counter()
    a = assemble_Dstar(d, g, c)
    b = assemble_Dstar(d, g, c.shifted(0.7, -1.3))
    dt = time.perf_counter() - t0
    rel = np.abs(a - b).max() / np.abs(a).max()
    ok = rel < 1e-12 and dt < 1
    acceptance(3, "gauge invariance of D*", ok, f"relative change={rel:.1e} ({dt:.2f}s)")
    assert ok


def test_c04_manufactured_convergence(acceptance):
    t0 = time.perf_counter()
    errs = []
    for N in (32, 64, 128):
        g = build_cell_grid(FREE, N)
        y1, y2 = g.centers()
        f = np.sin(2 * np.pi * y1) * np.cos(2 * np.pi * y2)
        v = solve_periodic_poisson(g, f).values
        errs.append(math.sqrt(np.mean((v - f / (8 * np.pi**2)) ** 2)))
    rates = [math.log2(errs[k] / errs[k + 1]) for k in range(2)]
    dt = time.perf_counter() - t0
    ok = all(abs(r - 2.0) <= 0.2 for r in rates) and dt < 30
    acceptance(4, "cell-solver manufactured convergence", ok,
               f"orders={rates[0]:.3f},{rates[1]:.3f} ({dt:.1f}s)")
    assert ok


def _default_problem(g=None, L=None):
    cfg = RunConfig()
    cs = cfg.coefficients if g is None else CoefficientSet(g=g)
    eps = 0.125
    tmp = build_micro_domain(cfg.geometry, eps, 1.0, cfg.cells_per_eps)
    pb = MicroProblem.from_coefficients(tmp, cs)
    Lm = L or cfg.L_micro(eps, pb.Bstar)
    dom = build_micro_domain(cfg.geometry, eps, Lm, cfg.cells_per_eps)
    return cfg, MicroProblem.from_coefficients(dom, cs)


def test_c05_micro_positivity_and_comparison(acceptance):
    t0 = time.perf_counter()
    cfg, pb = _default_problem()
    times = (0.0125, 0.025, 0.0375, 0.05)
    run = run_micro(pb, 0.05, times, dt_max=cfg.micro_dt_max)
    _, lo = _default_problem(Bump(0.6, 0.3))
    run_lo = run_micro(lo, 0.05, times, dt_max=run.dt)
    gap = max(float((a.u - b.u).max()) for (_, a), (_, b) in zip(run_lo.snapshots, run.snapshots))
    dt = time.perf_counter() - t0
    ok = run.min_u >= -1e-8 and run_lo.min_u >= -1e-8 and gap <= 1e-8 and dt < 180
    acceptance(5, "micro positivity and comparison", ok,
               f"min u={run.min_u:.1e} max(u_lo-u_hi)={gap:.1e} ({dt:.1f}s)")
    assert ok


def test_c06_micro_conservation(acceptance):
    t0 = time.perf_counter()
    cs = CoefficientSet(gN_kind="constant", k=0.0, g=Bump(1.0, 0.3))
    # box wide enough that the solution never reaches the Dirichlet edge
    dom = build_micro_domain(SQUARE, 0.125, 2.5, 8)
    pb = MicroProblem.from_coefficients(dom, cs)
    m0 = initial_micro_state(pb).mass()
    run = run_micro(pb, 0.05, (0.025, 0.05), dt_max=RunConfig().micro_dt_max)
    drift = max(abs(r[1] - m0) / m0 for r in run.rows)
    dt = time.perf_counter() - t0
    ok = drift < 1e-8 and dt < 180
    acceptance(6, "micro conservation", ok, f"relative mass drift={drift:.1e} ({dt:.1f}s)")
    assert ok


def test_c07_macro_uniform_decay(acceptance):
    t0 = time.perf_counter()
    g = build_cell_grid(SQUARE, 16)
    d, _ = project_zero_mean_BC(sample_coefficients(CoefficientSet(), g))
    table = tabulate_Dstar(d, g, 1.25, 5)
    lam = table.sink_rate
    u_c, T, M = 0.8, 0.1, 24
    st = run_macro(table, 3.0, M, lambda x1, x2: u_c + 0 * x1, T, 1e-4)[-1][1]
    err = abs(st.u[M // 2, M // 2] - u_c * math.exp(-lam * T))
    dt = time.perf_counter() - t0
    ok = err < 1e-4 and dt < 10
    acceptance(7, "macro uniform-decay oracle", ok, f"error={err:.1e} ({dt:.1f}s)")
    assert ok


@pytest.fixture(scope="module")
def default_study(tmp_path_factory):
    cfg = RunConfig(out_dir=str(tmp_path_factory.mktemp("study")))
    t0 = time.perf_counter()
    rep = run_convergence_study(cfg)
    return rep, time.perf_counter() - t0


def _fmt(a):
    return " > ".join(f"{x:.3e}" for x in a)


def test_c08_moving_frame_consistency(default_study, acceptance):
    rep, dt = default_study
    ok = rep.strictly_decreasing("l2_moving") and dt < 900
    detail = "; ".join(f"t={t:g}: {_fmt(rep.l2_moving[:, j])}" for j, t in enumerate(rep.times))
    acceptance(8, "homogenization consistency (moving-frame L2)", ok, f"{detail} ({dt:.0f}s)")
    assert ok


def test_c09_corrector_consistency(default_study, acceptance):
    rep, dt = default_study
    ok = rep.strictly_decreasing("h1_corrector") and dt < 900
    detail = "; ".join(f"t={t:g}: {_fmt(rep.h1_corrector[:, j])}" for j, t in enumerate(rep.times))
    acceptance(9, "corrector consistency (H1)", ok, f"{detail} ({dt:.0f}s)")
    assert ok


def test_c10_oscillation_quadrature(acceptance):
    t0 = time.perf_counter()
    cfg = RunConfig()
    # cos(2 pi x1) times a compact C^2 window so both sides are finite integrals
    eta = lambda x1, x2: np.clip(1.0 - (x1**2 + x2**2), 0.0, None) ** 3
    phi2 = lambda x1, x2: np.cos(2 * np.pi * x1) * eta(x1, x2)
    phi3 = lambda y1, y2: 1.0 + 0.5 * np.sin(2 * np.pi * y1)
    g = build_cell_grid(cfg.geometry, cfg.cells_per_eps)
    d, _ = project_zero_mean_BC(sample_coefficients(cfg.coefficients, g))
    from homdrift.effective import compute_Bstar
    Bstar = compute_Bstar(d, g)
    errs = []
    for eps in cfg.eps_list:
        q, lim = oscillation_quadrature(phi2, phi3, eps, cfg.geometry, cfg.cells_per_eps, 1.5,
                                        Bstar, cfg.T)
        errs.append(abs(q - lim))
    dt = time.perf_counter() - t0
    ok = all(a > b for a, b in zip(errs, errs[1:])) and dt < 60
    acceptance(10, "oscillation quadrature", ok, f"errors {_fmt(errs)} ({dt:.1f}s)")
    assert ok

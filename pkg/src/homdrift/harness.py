"""Experiment orchestration: configs, error metrics, pairings, epsilon sweeps."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
import logging
import math
import os
import time

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .coefficients import Bump, CoefficientSet, project_zero_mean_BC, sample_coefficients, \
    verify_assumptions
from .effective import EffectiveTable, tabulate_Dstar
from .geometry import CellGeometry, build_cell_grid, build_micro_domain
from .macro_solver import MacroState, run_macro
from .micro_solver import MicroProblem, MicroState, grad_l2_sq, run_micro, \
    shift_to_moving_frame

logger = logging.getLogger(__name__)


class StudyError(RuntimeError):
    """A sub-run failed; the message names the epsilon and the stage."""


# ---------------------------------------------------------------------------
# configuration


def _floats(s):
    return tuple(float(eval_frac(x)) for x in s.replace(",", " ").split())


def eval_frac(x):
    x = x.strip()
    if "/" in x:
        a, b = x.split("/")
        return float(a) / float(b)
    return float(x)


@dataclass
class RunConfig:
    geometry: CellGeometry = field(default_factory=CellGeometry)
    coefficients: CoefficientSet = field(default_factory=CoefficientSet)
    N_cell: int = 8
    M_macro: int = 128
    cells_per_eps: int = 8
    L_macro: float = 2.0
    macro_dt: float = 1e-4
    micro_dt_max: float = 1e-4
    eps_list: tuple = (0.25, 0.125, 0.0625)
    T: float = 0.05
    snapshot_times: tuple = (0.025, 0.05)
    u_max: float = 1.25
    n_samples: int = 5
    workers: int = 1
    out_dir: str = "out"

    def __post_init__(self):
        eps = list(self.eps_list)
        if not eps or any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("eps_list must be non-empty and strictly decreasing")
        if any(t <= 0 or t > self.T + 1e-14 for t in self.snapshot_times):
            raise ValueError("snapshot times must lie in (0, T]")
        if self.N_cell < 8 or self.M_macro < 4 or self.cells_per_eps < 8:
            raise ValueError("resolution too coarse")

    def L_micro(self, eps, Bstar):
        """Smallest lattice-aligned half-width holding the shifted window plus margin."""
        shift = float(np.abs(Bstar).max()) * self.T / eps
        need = max(self.L_macro, self.coefficients.g.support_halfwidth(),
                   self.coefficients.f.support_halfwidth()) + shift + 4 * eps
        return math.ceil(need / eps - 1e-9) * eps


def _bump(sec, prefix, default: Bump):
    return Bump(sec.getfloat(f"{prefix}_amplitude", default.amplitude),
                sec.getfloat(f"{prefix}_radius", default.radius),
                _floats(sec.get(f"{prefix}_center", f"{default.center[0]} {default.center[1]}")))


def load_config(path) -> RunConfig:
    """Read an INI file with [geometry] [coefficients] [discretization] [experiment] [output]."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    with open(path) as fh:
        cp.read_file(fh)
    for sec in ("geometry", "coefficients", "discretization", "experiment", "output"):
        if not cp.has_section(sec):
            cp.add_section(sec)
    g = cp["geometry"]
    d0 = CellGeometry()
    geom = CellGeometry(g.get("obstacle_kind", d0.obstacle_kind),
                        g.getfloat("side", d0.side), g.getfloat("radius", d0.radius),
                        _floats(g.get("center", "0.5 0.5")))
    c = cp["coefficients"]
    c0 = CoefficientSet()
    cs = CoefficientSet(
        D_kind=c.get("D_kind", c0.D_kind), d1=c.getfloat("d1", c0.d1), d2=c.getfloat("d2", c0.d2),
        d0=c.getfloat("d0", c0.d0), d_amp=c.getfloat("d_amp", c0.d_amp),
        B_kind=c.get("B_kind", c0.B_kind), b_max=c.getfloat("b_max", c0.b_max),
        nu=_floats(c.get("nu", "0 0")), strip=c.getfloat("strip", c0.strip),
        C_kind=c.get("C_kind", c0.C_kind), c0=c.getfloat("c0", c0.c0),
        c_offset=c.getfloat("c_offset", c0.c_offset),
        f=_bump(c, "f", c0.f), g=_bump(c, "g", c0.g),
        gN_kind=c.get("gN_kind", c0.gN_kind), k=c.getfloat("k", c0.k),
        theta=c.getfloat("theta", c0.theta), theta_tilde=c.getfloat("theta_tilde", c0.theta_tilde))
    d, e = cp["discretization"], cp["experiment"]
    base = RunConfig()
    return RunConfig(
        geometry=geom, coefficients=cs,
        N_cell=d.getint("N_cell", base.N_cell), M_macro=d.getint("M_macro", base.M_macro),
        cells_per_eps=d.getint("cells_per_eps", base.cells_per_eps),
        L_macro=d.getfloat("L_macro", base.L_macro), macro_dt=d.getfloat("macro_dt", base.macro_dt),
        micro_dt_max=d.getfloat("micro_dt_max", base.micro_dt_max),
        eps_list=_floats(e["eps_list"]) if "eps_list" in e else base.eps_list,
        T=e.getfloat("T", base.T),
        snapshot_times=_floats(e["snapshot_times"]) if "snapshot_times" in e else base.snapshot_times,
        u_max=e.getfloat("u_max", base.u_max), n_samples=e.getint("n_samples", base.n_samples),
        workers=e.getint("workers", base.workers),
        out_dir=cp["output"].get("out_dir", base.out_dir))


# ---------------------------------------------------------------------------
# error metrics


def moving_frame_l2_error(micro: MicroState, macro: MacroState, Bstar, t=None):
    """``||v^eps - u0||`` over unmasked macro cell centres, weighted by macro cell area."""
    if t is not None and (abs(micro.t - t) > 1e-12 or abs(macro.t - t) > 1e-12):
        raise ValueError("micro and macro states are at different times")
    x1, x2 = macro.centers()
    v, mask = shift_to_moving_frame(micro, Bstar, x1, x2)
    if mask.mean() < 0.5:
        logger.warning("only %.0f%% of macro sample points land in fluid; the shifted "
                       "samples resonate with the obstacle lattice", 100 * mask.mean())
    d = (v - macro.u)[mask]
    return float(np.sqrt((d**2).sum()) * macro.H)


def macro_interpolant(macro: MacroState):
    """Cubic spline of u0 with zero Dirichlet data; returns ``(value, grad)`` callables."""
    c = macro.centers_1d()
    L = macro.L
    xs = np.concatenate([[-L], c, [L]])
    U = np.pad(macro.u, 1)    # boundary values 0
    spl = RectBivariateSpline(xs, xs, U, kx=3, ky=3)

    def inside(p1, p2):
        return (np.abs(p1) <= L) & (np.abs(p2) <= L)

    def value(p1, p2):
        out = spl.ev(np.clip(p1, -L, L), np.clip(p2, -L, L))
        return np.where(inside(p1, p2), out, 0.0)

    def grad(p1, p2):
        q1, q2 = np.clip(p1, -L, L), np.clip(p2, -L, L)
        m = inside(p1, p2)
        return (np.where(m, spl.ev(q1, q2, dx=1), 0.0), np.where(m, spl.ev(q1, q2, dy=1), 0.0))

    return value, grad


def corrector_field(table: EffectiveTable, u0_vals, n, n_side):
    """``W(x/eps; u0)`` on the micro grid, linear in u0 between table nodes."""
    if not table.correctors:
        raise ValueError("table was built without correctors")
    nodes = table.u0_nodes
    if np.any(u0_vals < nodes[0] - 1e-12) or np.any(u0_vals > nodes[-1] + 1e-12):
        logger.warning("u0 outside the corrector table range; clamping")
    s = np.clip(u0_vals, nodes[0], nodes[-1])
    k = np.clip(np.searchsorted(nodes, s, side="right") - 1, 0, len(nodes) - 2)
    lam = (s - nodes[k]) / (nodes[k + 1] - nodes[k])
    reps = n_side // n
    W = np.stack([np.nan_to_num(np.tile(c.w, (1, reps, reps))) for c in table.correctors])
    ii, jj = np.indices((n_side, n_side))
    lo = W[k, :, ii, jj]          # (n_side, n_side, 2)
    hi = W[k + 1, :, ii, jj]
    return (1 - lam)[..., None] * lo + lam[..., None] * hi


def corrector_h1_error(micro: MicroState, macro: MacroState, table: EffectiveTable, Bstar, t=None):
    """``||grad(u^eps - u0(x - s) - eps W(x/eps; u0) . grad u0(x - s))||`` over fluid faces."""
    if t is not None and (abs(micro.t - t) > 1e-12 or abs(macro.t - t) > 1e-12):
        raise ValueError("micro and macro states are at different times")
    dom = micro.domain
    eps = micro.epsilon
    s = np.asarray(Bstar, dtype=float) * micro.t / eps
    x1, x2 = dom.centers()
    p1, p2 = x1 - s[0], x2 - s[1]
    value, grad = macro_interpolant(macro)
    u0 = value(p1, p2)
    g1, g2 = grad(p1, p2)
    if table.correctors and table.correctors[0].grid.N != dom.cells_per_eps:
        raise ValueError("corrector table must be sampled at N = cells_per_eps")
    W = corrector_field(table, u0, dom.cells_per_eps, dom.n_side)
    r = micro.u - u0 - eps * (W[..., 0] * g1 + W[..., 1] * g2)
    r = np.where(dom.fluid_mask, r, 0.0)
    return float(np.sqrt(grad_l2_sq(r, dom)))


# ---------------------------------------------------------------------------
# two-scale pairings


def _time_weights(times):
    """Trapezoid weights on [0, t_last] from snapshots (first snapshot may be t > 0)."""
    t = np.asarray(times, dtype=float)
    if t.size == 1:
        return np.array([t[0]]) if t[0] > 0 else np.array([1.0])
    w = np.zeros_like(t)
    dt = np.diff(t)
    w[:-1] += dt / 2
    w[1:] += dt / 2
    return w


def two_scale_drift_pairing(snapshots, phi1, phi2, phi3, Bstar):
    """Quadrature of ``int u^eps(t,x) phi1(t) phi2(x - B* t/eps) phi3(x/eps) dx dt``.

    ``snapshots`` is ``[(t, MicroState)]``; a single snapshot gives the
    spatial pairing at that time.
    """
    times = [t for t, _ in snapshots]
    w = _time_weights(times) if len(times) > 1 else np.ones(1)
    total = 0.0
    for wt, (t, st) in zip(w, snapshots):
        dom = st.domain
        eps = st.epsilon
        s = np.asarray(Bstar, dtype=float) * t / eps
        x1, x2 = dom.centers()
        y1, y2 = np.mod(x1 / eps, 1.0), np.mod(x2 / eps, 1.0)
        integrand = st.u * phi2(x1 - s[0], x2 - s[1]) * phi3(y1, y2)
        total += wt * phi1(t) * float(integrand[dom.fluid_mask].sum()) * dom.h**2
    return total


def two_scale_limit_pairing(macro_snapshots, phi1, phi2, phi3, cell_grid):
    """Limit side ``int phi1(t) int u0(t,x) phi2(x) dx int_Z phi3(y) dy dt``."""
    y1, y2 = cell_grid.centers()
    zint = float(phi3(y1, y2)[cell_grid.fluid_mask].sum()) * cell_grid.h**2
    times = [t for t, _ in macro_snapshots]
    w = _time_weights(times) if len(times) > 1 else np.ones(1)
    total = 0.0
    for wt, (t, st) in zip(w, macro_snapshots):
        x1, x2 = st.centers()
        total += wt * phi1(t) * float((st.u * phi2(x1, x2)).sum()) * st.H**2
    return total * zint


def oscillation_quadrature(phi2, phi3, epsilon, geometry: CellGeometry, cells_per_eps, L,
                           Bstar=(0.0, 0.0), t=0.0):
    """Drifted quadrature ``int_{Omega^eps} phi2(x - B* t/eps) phi3(x/eps) dx`` on the micro grid.

    Returns ``(quadrature, limit)`` with ``limit = int phi2 * int_Z phi3``
    computed by the same midpoint rule (cell grid for Z, fine grid for phi2).
    """
    dom = build_micro_domain(geometry, epsilon, L, cells_per_eps)
    s = np.asarray(Bstar, dtype=float) * t / epsilon
    x1, x2 = dom.centers()
    y1, y2 = np.mod(x1 / epsilon, 1.0), np.mod(x2 / epsilon, 1.0)
    q = float((phi2(x1 - s[0], x2 - s[1]) * phi3(y1, y2))[dom.fluid_mask].sum()) * dom.h**2
    cg = dom.cell_grid
    c1, c2 = cg.centers()
    zint = float(phi3(c1, c2)[cg.fluid_mask].sum()) * cg.h**2
    # int phi2 over the whole box, resolved far below the oscillation scale
    n = 2048
    xs = -L + (np.arange(n) + 0.5) * (2 * L / n)
    X1, X2 = np.meshgrid(xs, xs, indexing="ij")
    full = float(phi2(X1, X2).sum()) * (2 * L / n) ** 2
    return q, full * zint


# ---------------------------------------------------------------------------
# convergence study


@dataclass
class ConvergenceReport:
    eps_list: tuple
    times: tuple
    l2_moving: np.ndarray        # (n_eps, n_times)
    h1_corrector: np.ndarray
    Bstar: np.ndarray
    micro_summaries: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = (len(self.eps_list), len(self.times))
        for a in (self.l2_moving, self.h1_corrector):
            if a.shape != shape or not np.all(np.isfinite(a)):
                raise ValueError("report arrays must be finite with shape eps x times")

    def rates(self, metric):
        """``log2(e_k / e_{k+1})`` per snapshot (NaN when an error vanishes)."""
        a = self.l2_moving if metric == "l2_moving" else self.h1_corrector
        out = []
        for k in range(len(self.eps_list) - 1):
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = a[k] / a[k + 1]
                r = np.log(ratio) / np.log(self.eps_list[k] / self.eps_list[k + 1])
            out.append(np.where(np.isfinite(r), r, np.nan))
        return np.array(out)

    def strictly_decreasing(self, metric):
        a = self.l2_moving if metric == "l2_moving" else self.h1_corrector
        return bool(np.all(np.diff(a, axis=0) < 0))

    def write_csv(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        rep = os.path.join(out_dir, "report.csv")
        with open(rep, "w") as fh:
            fh.write("eps,t,l2_moving,h1_corrector\n")
            for i, e in enumerate(self.eps_list):
                for j, t in enumerate(self.times):
                    fh.write(f"{float(e)!r},{float(t)!r},{float(self.l2_moving[i, j])!r},"
                             f"{float(self.h1_corrector[i, j])!r}\n")
        rates = os.path.join(out_dir, "rates.csv")
        with open(rates, "w") as fh:
            fh.write("eps_pair,metric,rate\n")
            for metric in ("l2_moving", "h1_corrector"):
                R = self.rates(metric)
                for k in range(len(self.eps_list) - 1):
                    pair = f"{float(self.eps_list[k])!r}/{float(self.eps_list[k + 1])!r}"
                    # rate at the final snapshot
                    fh.write(f"{pair},{metric},{float(R[k, -1])!r}\n")
        return rep, rates


def build_effective_model(cfg: RunConfig, N=None):
    """Sample, project and tabulate; returns ``(disc, grid, table, assumption report)``."""
    N = N or cfg.N_cell
    grid = build_cell_grid(cfg.geometry, N)
    disc = sample_coefficients(cfg.coefficients, grid)
    disc, _ = project_zero_mean_BC(disc)
    report = verify_assumptions(disc, grid, macro_halfwidth=cfg.L_macro)
    table = tabulate_Dstar(disc, grid, cfg.u_max, cfg.n_samples, keep_correctors=True)
    return disc, grid, table, report


def estimate_cells(cfg: RunConfig, Bstar):
    out = {}
    for eps in cfg.eps_list:
        n = int(round(2 * cfg.L_micro(eps, Bstar) / eps)) * cfg.cells_per_eps
        out[eps] = n * n
    return out


def _micro_job(cfg: RunConfig, eps, disc_cell, Bstar):
    L = cfg.L_micro(eps, Bstar)
    dom = build_micro_domain(cfg.geometry, eps, L, cfg.cells_per_eps)
    pb = MicroProblem(dom, disc_cell, eps, cfg.coefficients.f, cfg.coefficients.g,
                      cfg.coefficients.gN_kind, cfg.coefficients.k, Bstar)
    return run_micro(pb, cfg.T, cfg.snapshot_times, dt_max=cfg.micro_dt_max)


def run_convergence_study(cfg: RunConfig, write=True) -> ConvergenceReport:
    t0 = time.perf_counter()
    try:
        disc, grid, table, assumptions = build_effective_model(cfg)
    except Exception as exc:
        raise StudyError(f"stage=effective: {exc}") from exc
    for line in assumptions.lines():
        logger.info(line)
    Bstar = table.Bstar
    if cfg.cells_per_eps == cfg.N_cell:
        disc_micro = disc
    else:
        g2 = build_cell_grid(cfg.geometry, cfg.cells_per_eps)
        disc_micro, _ = project_zero_mean_BC(sample_coefficients(cfg.coefficients, g2))
        _, _, table_c, _ = build_effective_model(cfg, cfg.cells_per_eps)
        table = replace(table, correctors=table_c.correctors)
    logger.info("micro cell counts: %s", estimate_cells(cfg, Bstar))
    try:
        f = cfg.coefficients.f if cfg.coefficients.f.amplitude else None
        macro = run_macro(table, cfg.L_macro, cfg.M_macro, cfg.coefficients.g, cfg.T, cfg.macro_dt,
                          cfg.snapshot_times, f, cfg.coefficients.gN_kind, cfg.coefficients.k)
    except Exception as exc:
        raise StudyError(f"stage=macro: {exc}") from exc
    macro_at = dict(macro)

    runs = {}
    if cfg.workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(cfg.workers) as ex:
            futs = {eps: ex.submit(_micro_job, cfg, eps, disc_micro, Bstar) for eps in cfg.eps_list}
            for eps in cfg.eps_list:
                try:
                    runs[eps] = futs[eps].result()
                except Exception as exc:
                    raise StudyError(f"eps={eps}, stage=micro: {exc}") from exc
    else:
        for eps in cfg.eps_list:
            try:
                runs[eps] = _micro_job(cfg, eps, disc_micro, Bstar)
            except Exception as exc:
                raise StudyError(f"eps={eps}, stage=micro: {exc}") from exc

    times = tuple(sorted(cfg.snapshot_times))
    l2 = np.zeros((len(cfg.eps_list), len(times)))
    h1 = np.zeros_like(l2)
    for i, eps in enumerate(cfg.eps_list):
        snaps = dict(runs[eps].snapshots)
        for j, t in enumerate(times):
            try:
                l2[i, j] = moving_frame_l2_error(snaps[t], macro_at[t], Bstar)
                h1[i, j] = corrector_h1_error(snaps[t], macro_at[t], table, Bstar)
            except Exception as exc:
                raise StudyError(f"eps={eps}, t={t}, stage=errors: {exc}") from exc
    report = ConvergenceReport(tuple(cfg.eps_list), times, l2, h1, Bstar,
                               {eps: runs[eps].rows for eps in cfg.eps_list})
    logger.info("convergence study finished in %.1f s", time.perf_counter() - t0)
    if write:
        report.write_csv(cfg.out_dir)
    return report

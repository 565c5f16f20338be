"""Semi-implicit time stepping of the upscaled reaction-dispersion equation.

    du/dt - div(D*(u) grad u) = f - (|Gamma_N|/|Z|) g_N(u)

on the box ``(-L, L)^2`` with homogeneous Dirichlet data. Each step lags the
tensor at the old state (one Picard sweep) and solves a single linear system.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .effective import EffectiveTable, eval_Dstar

logger = logging.getLogger(__name__)

LEAK_TOL = 1e-8


class MacroSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class MacroState:
    L: float
    M: int
    u: np.ndarray
    t: float = 0.0

    @property
    def H(self):
        return 2.0 * self.L / self.M

    def centers_1d(self):
        return -self.L + (np.arange(self.M) + 0.5) * self.H

    def centers(self):
        c = self.centers_1d()
        return np.meshgrid(c, c, indexing="ij")

    def mass(self):
        return float(self.u.sum() * self.H**2)

    def l2(self):
        return float(np.sqrt((self.u**2).sum()) * self.H)

    def boundary_max(self):
        u = self.u
        return float(max(np.abs(u[0]).max(), np.abs(u[-1]).max(),
                         np.abs(u[:, 0]).max(), np.abs(u[:, -1]).max()))


def initial_state(L, M, g):
    """Cell-centre samples of ``g`` (callable of x1, x2)."""
    st = MacroState(L, M, np.zeros((M, M)))
    x1, x2 = st.centers()
    return replace(st, u=np.asarray(g(x1, x2), dtype=float))


def _ids(M):
    return np.arange(M * M).reshape(M, M)


def assemble_dispersion(u, H, table: EffectiveTable):
    """Matrix of ``-div(D*(u_lag) grad .)`` with zero Dirichlet ghosts.

    Face fluxes carry the full tensor: normal part by two-point differences,
    cross part by averaging the tangential central differences of the two
    adjacent cells.
    """
    M = u.shape[0]
    ids = _ids(M)
    rows, cols, vals = [], [], []

    def add(r, c_i, c_j, coef):
        # c_i/c_j may step one cell outside; the ghost is minus the edge cell
        sgn = np.ones_like(coef)
        out = (c_i < 0) | (c_i >= M) | (c_j < 0) | (c_j >= M)
        sgn[out] = -1.0
        ci = np.clip(c_i, 0, M - 1)
        cj = np.clip(c_j, 0, M - 1)
        rows.append(r)
        cols.append(ids[ci, cj])
        vals.append(sgn * coef)

    for axis in (0, 1):
        tang = 1 - axis
        # interior faces between P (low) and Q (high) along axis
        if axis == 0:
            Pi, Pj = np.meshgrid(np.arange(M - 1), np.arange(M), indexing="ij")
            Qi, Qj = Pi + 1, Pj
        else:
            Pi, Pj = np.meshgrid(np.arange(M), np.arange(M - 1), indexing="ij")
            Qi, Qj = Pi, Pj + 1
        Pi, Pj, Qi, Qj = (a.ravel() for a in (Pi, Pj, Qi, Qj))
        Df = eval_Dstar(table, 0.5 * (u[Pi, Pj] + u[Qi, Qj]))
        dn = Df[:, axis, axis] / H**2
        dt_ = Df[:, axis, tang] / (4.0 * H**2)
        P = ids[Pi, Pj]
        Q = ids[Qi, Qj]
        # flux F = -dn (u_Q - u_P) - dt_ * sum of tangential differences;
        # row P gets +F, row Q gets -F
        for r, s in ((P, 1.0), (Q, -1.0)):
            add(r, Pi, Pj, s * dn)
            add(r, Qi, Qj, -s * dn)
            for (ci, cj) in ((Pi, Pj), (Qi, Qj)):
                up = (ci + (tang == 0), cj + (tang == 1))
                dn_ = (ci - (tang == 0), cj - (tang == 1))
                add(r, up[0], up[1], -s * dt_)
                add(r, dn_[0], dn_[1], s * dt_)
        # outer boundary faces: ghost -u_P, normal part only
        edge = np.arange(M)
        for k in (0, M - 1):
            if axis == 0:
                bi, bj = np.full(M, k), edge
            else:
                bi, bj = edge, np.full(M, k)
            Db = eval_Dstar(table, 0.5 * u[bi, bj])
            add(ids[bi, bj], bi, bj, 2.0 * Db[:, axis, axis] / H**2)
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(M * M, M * M))
    A.sum_duplicates()
    return A


class LaggedSolver:
    """Linear solves for a slowly changing step matrix.

    A constant table gives a constant matrix, factorised once per ``dt``.
    Otherwise the last factorisation preconditions GMRES and is refreshed
    whenever the iteration count grows.
    """

    def __init__(self, tol=1e-12, max_iter=8):
        self.tol = tol
        self.max_iter = max_iter
        self._lu = None
        self._key = None
        self.refactors = 0

    def factor(self, S, key=None):
        self._lu = spla.splu(S.tocsc())
        self._key = key
        self.refactors += 1

    def solve(self, S, rhs, key=None):
        if self._lu is None or (key is not None and key == self._key):
            if self._lu is None:
                self.factor(S, key)
            if key is not None:
                return self._lu.solve(rhs)
        if key is None:
            P = spla.LinearOperator(S.shape, matvec=self._lu.solve)
            its = [0]

            def count(_):
                its[0] += 1
            x, info = spla.gmres(S, rhs, x0=self._lu.solve(rhs), M=P, rtol=self.tol,
                                 atol=0.0, restart=20, maxiter=self.max_iter,
                                 callback=count, callback_type="pr_norm")
            if info == 0:
                if its[0] > 3:
                    self.factor(S)
                return x
        self.factor(S, key)
        return self._lu.solve(rhs)


def step_macro(state: MacroState, table: EffectiveTable, dt: float, fbar=None,
               gN_kind: str = "linear", k: float = 0.0, solver: LaggedSolver | None = None,
               _cache=None) -> MacroState:
    """One semi-implicit step: lagged dispersion and linear sink implicit, source explicit."""
    if not dt > 0:
        raise MacroSolveError("dt must be positive")
    u = state.u
    M = state.M
    lam = table.sink_rate
    diag = 1.0 / dt + (lam if gN_kind == "linear" else 0.0)
    constant = table.is_constant()
    key = (M, state.H, float(dt), gN_kind) if constant else None
    if constant and _cache is not None and _cache.get("key") == key:
        S = _cache["S"]
    else:
        A = assemble_dispersion(u, state.H, table)
        S = A + diag * sp.identity(M * M, format="csr")
        if _cache is not None:
            _cache.update(key=key, S=S)
    rhs = u.ravel() / dt
    if fbar is not None:
        rhs = rhs + np.asarray(fbar).ravel()
    if gN_kind == "constant":
        rhs = rhs - lam * k
    try:
        if solver is None:
            un = spla.spsolve(S.tocsc(), rhs)
        else:
            un = solver.solve(S, rhs, key)
    except Exception as exc:
        raise MacroSolveError(f"linear solve failed at t={state.t}: {exc}") from exc
    if not np.all(np.isfinite(un)):
        raise MacroSolveError(f"non-finite macro state at t={state.t + dt}")
    new = replace(state, u=un.reshape(M, M), t=state.t + dt)
    if new.boundary_max() > LEAK_TOL:
        logger.debug("macro solution reaches the box boundary (%.2e)", new.boundary_max())
    return new


def run_macro(table: EffectiveTable, L: float, M: int, g, T: float, dt: float,
              snapshot_times=None, f=None, gN_kind="linear", k=0.0):
    """Integrate to each snapshot time exactly; returns ``[(t, MacroState), ...]``.

    ``g`` and ``f`` are callables of (x1, x2).
    """
    times = sorted(set([T] if snapshot_times is None else list(snapshot_times)))
    if times and (times[0] < 0 or times[-1] > T + 1e-14):
        raise MacroSolveError("snapshot times must lie in [0, T]")
    state = initial_state(L, M, g)
    fbar = None
    if f is not None:
        x1, x2 = state.centers()
        fbar = np.asarray(f(x1, x2), dtype=float)
        if not np.any(fbar):
            fbar = None
    out = []
    solver, cache = LaggedSolver(), {}
    for ts in times:
        span = ts - state.t
        if span > 1e-14:
            n = int(np.ceil(span / dt - 1e-9))
            step = span / n
            for _ in range(n):
                state = step_macro(state, table, step, fbar, gN_kind, k, solver, cache)
            state = replace(state, t=ts)
        out.append((ts, state))
    return out


def macro_summary_rows(snapshots):
    """Rows ``(t, mass, min, max, l2)``."""
    return [(t, s.mass(), float(s.u.min()), float(s.u.max()), s.l2()) for t, s in snapshots]

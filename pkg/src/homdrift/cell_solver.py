"""Periodic elliptic problems on the perforated cell.

All problems share one cell-centred finite-volume operator: two-point
diffusive fluxes with face-sampled D, central convective fluxes, periodic
wrap, and no-flux (or prescribed-flux) obstacle faces. Rows are scaled by
``1/h^2`` so the operator approximates the differential operator itself.

The operators have the constants as kernel and, because every interior face
flux appears twice with opposite signs, the constants also span the left
kernel. Solves therefore run GMRES on the mean-zero subspace.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging
import math

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coefficients import DiscreteCoefficients, integral_B
from .geometry import CellGrid

logger = logging.getLogger(__name__)

SOLVE_TOL = 1e-10
COMPAT_TOL = 1e-10


class IncompatibleDataError(ValueError):
    """Volume source and boundary flux do not balance."""


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual=math.nan):
        super().__init__(f"{msg} (relative residual {residual:.3e})")
        self.residual = residual


class ResolutionError(ValueError):
    """Cell Peclet number too large for central differencing."""


@dataclass(frozen=True)
class PeriodicField:
    """Values on fluid cells (NaN on solid cells)."""

    values: np.ndarray
    mean_zero: bool
    residual_norm: float

    def fluid_values(self, mask):
        return self.values[mask]


@dataclass(frozen=True)
class CellCorrector:
    u0_value: float
    w: np.ndarray            # (2, N, N), NaN on solid cells
    grid: CellGrid
    disc: DiscreteCoefficients
    residual_norm: float
    solvability: np.ndarray  # discrete int B(1-2Cu0).grad w_i, i = 1, 2

    @property
    def w1(self):
        return PeriodicField(self.w[0], True, self.residual_norm)

    @property
    def w2(self):
        return PeriodicField(self.w[1], True, self.residual_norm)

    @property
    def grad_matrix(self):
        return corrector_gradient_matrix(self)

    def shifted(self, c1, c2):
        """Same corrector with constants added to (w1, w2)."""
        w = self.w.copy()
        w[0] += c1
        w[1] += c2
        return CellCorrector(self.u0_value, w, self.grid, self.disc,
                             self.residual_norm, self.solvability)


# ---------------------------------------------------------------------------
# operator assembly


def _face_pairs(grid, axis):
    """Fluid/fluid face pairs along ``axis``: (low cell, high cell) flat unknown ids."""
    idx = grid.fluid_index()
    nb = np.roll(idx, -1, axis=axis)
    both = (idx >= 0) & (nb >= 0)
    return both, idx[both], nb[both]


def assemble_operator(grid: CellGrid, Dx, Dy, Ux=None, Uy=None):
    """Sparse matrix of ``-div(D grad w) + div(U w)`` on fluid cells.

    ``Dx``/``Dy`` hold the normal diffusivity on x/y faces, ``Ux``/``Uy`` the
    normal velocity (low -> high cell) on the same faces.
    """
    h = grid.h
    n = grid.n_fluid
    rows, cols, vals = [], [], []
    for axis, Df, Uf in ((0, Dx, Ux), (1, Dy, Uy)):
        both, p, q = _face_pairs(grid, axis)
        d = Df[both] / h**2
        u = np.zeros_like(d) if Uf is None else Uf[both] / (2.0 * h)
        # row p: d (w_p - w_q) + u (w_p + w_q); row q: d (w_q - w_p) - u (w_p + w_q)
        rows += [p, p, q, q]
        cols += [p, q, q, p]
        vals += [d + u, -d + u, d - u, -d - u]
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    A.sum_duplicates()
    return A


def _project(v):
    return v - v.mean()


def solve_mean_zero(A, b, tol=SOLVE_TOL, maxiter=None):
    """Solve the singular system ``A x = b`` for the mean-zero ``x``.

    GMRES on the mean-zero subspace, right-preconditioned by an LU
    factorisation of a slightly shifted ``A``. Returns ``(x, rel_residual)``.
    """
    n = A.shape[0]
    b = _project(np.asarray(b, dtype=float))
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0.0
    maxiter = 10 * n if maxiter is None else maxiter
    shift = 1e-8 * max(abs(A.diagonal()).max(), 1.0)
    lu = spla.splu((A + shift * sp.identity(n, format="csr")).tocsc())
    M = spla.LinearOperator((n, n), matvec=lambda v: _project(lu.solve(np.asarray(v).ravel())))
    AM = spla.LinearOperator((n, n), matvec=lambda v: _project(A @ M.matvec(v)))
    restart = min(50, n)
    z, info = spla.gmres(AM, b, rtol=0.1 * tol, atol=0.0, restart=restart,
                         maxiter=max(1, maxiter // restart))
    x = _project(M.matvec(z))
    res = np.linalg.norm(b - A @ x) / bnorm
    if res > tol:
        raise ConvergenceError("mean-zero GMRES stagnated", res)
    return x, float(res)


def _to_grid(grid, x):
    out = np.full(grid.shape, np.nan)
    out[grid.fluid_mask] = x
    return out


def _flux_source(grid, neumann_flux):
    """Per-cell contribution ``-(1/h^2) sum q_f |f|`` of prescribed obstacle fluxes."""
    src = np.zeros(grid.shape)
    bf = grid.boundary_faces
    if neumann_flux is not None and len(bf):
        np.add.at(src, (bf.i, bf.j), -np.asarray(neumann_flux) * bf.length / grid.h**2)
    return src


def solve_periodic_poisson(grid: CellGrid, rhs, neumann_flux=None,
                           compat_tol=COMPAT_TOL, solve_tol=SOLVE_TOL) -> PeriodicField:
    """Solve ``-Lap v = rhs`` with outward flux ``-dv/dn = neumann_flux`` on obstacle faces.

    ``rhs`` is a cell array (solid entries ignored); ``neumann_flux`` has one
    entry per ``grid.boundary_faces`` face.
    """
    rhs = np.where(grid.fluid_mask, np.asarray(rhs, dtype=float), 0.0)
    bf = grid.boundary_faces
    total = rhs.sum() * grid.h**2
    flux_total = 0.0 if neumann_flux is None else float(np.sum(np.asarray(neumann_flux) * bf.length))
    scale = max(np.abs(rhs).sum() * grid.h**2, abs(flux_total), 1.0)
    if abs(total - flux_total) > compat_tol * scale:
        raise IncompatibleDataError(
            f"int rhs - int flux = {total - flux_total:.3e} exceeds tolerance"
        )
    ones = np.ones(grid.shape)
    A = assemble_operator(grid, ones, ones)
    b = (rhs + _flux_source(grid, neumann_flux))[grid.fluid_mask]
    x, res = solve_mean_zero(A, b, tol=solve_tol)
    return PeriodicField(_to_grid(grid, x), True, res)


def solve_aux_G(grid: CellGrid, disc: DiscreteCoefficients):
    """Periodic ``G_i`` with ``-Lap G_i = B*_i - B_i(y)`` and zero obstacle flux."""
    Bstar = integral_B(disc) / grid.discrete_area
    Bc = disc.B_cell
    return tuple(solve_periodic_poisson(grid, Bstar[i] - Bc[..., i]) for i in range(2))


def solve_aux_H(grid: CellGrid, disc: DiscreteCoefficients):
    """Periodic ``H_i`` with ``-Lap H_i = (B C)_i`` and zero obstacle flux."""
    BC = disc.B_cell * disc.C[..., None]
    return tuple(solve_periodic_poisson(grid, BC[..., i]) for i in range(2))


def solve_aux_Pi(grid: CellGrid, obstacle_free_grid: CellGrid):
    """Torus problem ``-Lap Pi = chi_fluid - |Z|`` on the unperforated grid."""
    if not obstacle_free_grid.fluid_mask.all():
        raise ValueError("Pi lives on the full torus; pass an obstacle-free grid")
    rhs = grid.fluid_mask.astype(float) - grid.discrete_area
    return solve_periodic_poisson(obstacle_free_grid, rhs)


# ---------------------------------------------------------------------------
# corrector problem


def drift_faces(disc: DiscreteCoefficients, u0):
    """Face normal velocities of ``B (1 - 2 C u0)`` with C averaged to faces."""
    Ux = disc.Bx * (1.0 - 2.0 * u0 * disc.C_xface())
    Uy = disc.By * (1.0 - 2.0 * u0 * disc.C_yface())
    return Ux, Uy


def cell_peclet(grid, disc, u0):
    Ux, Uy = drift_faces(disc, u0)
    umax = max(np.abs(Ux).max(), np.abs(Uy).max())
    eig = np.linalg.eigvalsh(disc.D_cell[grid.fluid_mask])
    return umax * grid.h / eig.min()


def corrector_rhs(grid, disc, u0):
    """Right-hand sides (2, n_fluid) of the two corrector problems."""
    h = grid.h
    Bstar = integral_B(disc) / grid.discrete_area
    Bt = disc.B_cell * (1.0 - 2.0 * u0 * disc.C)[..., None]
    rhs = []
    for i in range(2):
        r = Bstar[i] - Bt[..., i]
        # (D e_i).n on every fluid/fluid face: +D[a, i] for the low cell, -D[a, i] for the high
        for axis, Dface in ((0, disc.Dx_face), (1, disc.Dy_face)):
            both = grid.fluid_mask & np.roll(grid.fluid_mask, -1, axis=axis)
            q = np.where(both, Dface[..., axis, i], 0.0) / h
            r = r + q - np.roll(q, 1, axis=axis)
        rhs.append(r[grid.fluid_mask])
    return np.array(rhs)


def solve_corrector(grid: CellGrid, disc: DiscreteCoefficients, u0_value: float,
                    solve_tol=SOLVE_TOL) -> CellCorrector:
    """Solve the cell problem for ``W = (w1, w2)`` at macro state ``u0_value``."""
    pe = cell_peclet(grid, disc, u0_value)
    if pe >= 2.0:
        raise ResolutionError(f"cell Peclet number {pe:.3f} >= 2 at u0={u0_value}; refine N")
    Ux, Uy = drift_faces(disc, u0_value)
    A = assemble_operator(grid, disc.Dx_face[..., 0, 0], disc.Dy_face[..., 1, 1], Ux, Uy)
    rhs = corrector_rhs(grid, disc, u0_value)
    w = np.full((2,) + grid.shape, np.nan)
    res = 0.0
    for i in range(2):
        x, r = solve_mean_zero(A, rhs[i], tol=solve_tol)
        w[i][grid.fluid_mask] = x
        res = max(res, r)
    solv = np.array([drift_gradient_pairing(grid, Ux, Uy, w[i]) for i in range(2)])
    return CellCorrector(float(u0_value), w, grid, disc, res, solv)


def drift_gradient_pairing(grid, Ux, Uy, v):
    """Face quadrature of ``int U . grad v`` over fluid/fluid faces."""
    total = 0.0
    for axis, U in ((0, Ux), (1, Uy)):
        both = grid.fluid_mask & np.roll(grid.fluid_mask, -1, axis=axis)
        dv = np.roll(v, -1, axis=axis) - v
        total += np.sum(U[both] * dv[both]) * grid.h
    return total


def corrector_gradient_matrix(c: CellCorrector):
    """Per-cell matrix ``G[..., a, j] = d w_j / d y_a``.

    Each cell averages its two face gradients along ``a``; faces on the
    obstacle take the value implied by ``D (grad w_j + e_j) . n = 0``.
    """
    grid, disc = c.grid, c.disc
    mask = grid.fluid_mask
    G = np.full(grid.shape + (2, 2), np.nan)
    for axis, Dface in ((0, disc.Dx_face), (1, disc.Dy_face)):
        nb = np.roll(mask, -1, axis=axis)
        for j in range(2):
            w = c.w[j]
            face = (np.roll(w, -1, axis=axis) - w) / grid.h
            wall = -Dface[..., axis, j] / Dface[..., axis, axis]
            face = np.where(mask & nb, face, np.where(mask ^ nb, wall, np.nan))
            G[..., axis, j] = 0.5 * (face + np.roll(face, 1, axis=axis))
    G[~mask] = np.nan
    return G


def solvability_scale(c: CellCorrector):
    """``||B||_inf * ||grad w||_2`` used to normalise the solvability identity."""
    G = corrector_gradient_matrix(c)[c.grid.fluid_mask]
    gnorm = math.sqrt(np.nansum(G**2) * c.grid.h**2)
    return max(np.abs(c.disc.B_cell).max(), 1e-300) * max(gnorm, 1e-300)



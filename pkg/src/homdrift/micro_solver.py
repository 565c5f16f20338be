"""IMEX time stepping of the epsilon-problem on a truncated perforated box.

Per step: explicit upwind fluxes for ``(1/eps) B P(u)`` with
``P(u) = u (1 - C u)``, explicit Robin outflux ``eps g_N(u)`` on obstacle
faces, explicit source, then one implicit diffusion solve with zero Dirichlet
data on the outer box. The diffusion matrix is factorised once per time step
size.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
import logging
import math

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coefficients import CoefficientSet, DiscreteCoefficients, sample_coefficients, \
    project_zero_mean_BC
from .geometry import MicroDomain

logger = logging.getLogger(__name__)

CFL = 0.4


class StabilityError(RuntimeError):
    pass


class TruncationError(RuntimeError):
    def __init__(self, msg, required_L=math.nan):
        super().__init__(f"{msg} (need L_micro >= {required_L:.4g})")
        self.required_L = required_L


@dataclass(frozen=True)
class MicroState:
    domain: MicroDomain
    u: np.ndarray           # full box array, zero on solid cells
    t: float
    epsilon: float

    def mass(self):
        return float(self.u[self.domain.fluid_mask].sum() * self.domain.h**2)

    def l2(self):
        return float(np.sqrt((self.u[self.domain.fluid_mask] ** 2).sum()) * self.domain.h)

    def grad_l2_sq(self):
        return grad_l2_sq(self.u, self.domain)

    def fluid_values(self):
        return self.u[self.domain.fluid_mask]


def grad_l2_sq(v, domain):
    """Squared L2 norm of the face gradient over fluid/fluid faces."""
    m = domain.fluid_mask
    total = 0.0
    for axis in (0, 1):
        a = [slice(None)] * 2
        b = [slice(None)] * 2
        a[axis] = slice(1, None)
        b[axis] = slice(0, -1)
        both = m[tuple(a)] & m[tuple(b)]
        d = v[tuple(a)] - v[tuple(b)]
        total += float((d[both] ** 2).sum())
    # (dv/h)^2 * h^2 per face
    return total


def _tile_face(cell_face, n, n_side, axis):
    """Tile a periodic cell face array onto the (n_side + 1) faces along ``axis``.

    Face ``k`` separates box cells ``k - 1`` and ``k``; it maps to the cell
    face stored at index ``(k - 1) mod n``.
    """
    k = (np.arange(n_side + 1) - 1) % n
    t = np.arange(n_side) % n
    if axis == 0:
        return cell_face[np.ix_(k, t)]
    return cell_face[np.ix_(t, k)]


@dataclass
class MicroProblem:
    domain: MicroDomain
    disc: DiscreteCoefficients
    epsilon: float
    f: object
    g: object
    gN_kind: str
    k: float
    Bstar: np.ndarray
    moving_source: bool = True
    Dx: np.ndarray = field(init=False, repr=False)
    Dy: np.ndarray = field(init=False, repr=False)
    Bx: np.ndarray = field(init=False, repr=False)
    By: np.ndarray = field(init=False, repr=False)
    Cx: np.ndarray = field(init=False, repr=False)
    Cy: np.ndarray = field(init=False, repr=False)
    robin_weight: np.ndarray = field(init=False, repr=False)
    _lu: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        dom, disc = self.domain, self.disc
        n, ns = dom.cells_per_eps, dom.n_side
        if disc.N != n:
            raise ValueError("cell coefficients must be sampled at N = cells_per_eps")
        mask = dom.fluid_mask
        self.Dx = _tile_face(disc.Dx_face[..., 0, 0], n, ns, 0)
        self.Dy = _tile_face(disc.Dy_face[..., 1, 1], n, ns, 1)
        self.Bx = _tile_face(disc.Bx, n, ns, 0)
        self.By = _tile_face(disc.By, n, ns, 1)
        self.Cx = _tile_face(disc.C_xface(), n, ns, 0)
        self.Cy = _tile_face(disc.C_yface(), n, ns, 1)
        # no transport through faces touching a solid cell
        pad = np.pad(mask, 1, constant_values=True)
        sx = ~(pad[:-1, 1:-1] & pad[1:, 1:-1])
        sy = ~(pad[1:-1, :-1] & pad[1:-1, 1:])
        if np.any(self.Bx[sx] != 0) or np.any(self.By[sy] != 0):
            raise ValueError("drift crosses an obstacle face")
        of = dom.obstacle_faces
        w = np.zeros(dom.shape)
        np.add.at(w, (of.i, of.j), of.length / dom.h**2)
        self.robin_weight = w
        self.C_cell = np.tile(disc.C, (dom.n_eps, dom.n_eps))

    @classmethod
    def from_coefficients(cls, domain, cs: CoefficientSet, Bstar=None, project=True,
                          moving_source=True):
        disc = sample_coefficients(cs, domain.cell_grid)
        if project:
            disc, _ = project_zero_mean_BC(disc)
        if Bstar is None:
            from .effective import compute_Bstar
            Bstar = compute_Bstar(disc, domain.cell_grid)
        return cls(domain, disc, domain.epsilon, cs.f, cs.g, cs.gN_kind, cs.k,
                   np.asarray(Bstar, dtype=float), moving_source)

    # -- bounds -----------------------------------------------------------

    def gN(self, u):
        return u if self.gN_kind == "linear" else np.full_like(u, self.k)

    def max_abs_B(self):
        return float(max(np.abs(self.Bx).max(), np.abs(self.By).max()))

    def max_dP(self, M):
        cf = np.concatenate([self.Cx.ravel(), self.Cy.ravel()])
        return float(max(1.0, abs(1 - 2 * cf.max() * M), abs(1 - 2 * cf.min() * M)))

    def M_bound(self, T, g_values=None):
        """Data bound on max u: initial max plus accumulated source (and injection)."""
        g_max = float(np.max(g_values)) if g_values is not None else self.g.sup
        extra = T * self.f.sup
        if self.gN_kind == "constant" and self.k < 0:
            extra += T * (-self.k) * self.epsilon * float(self.robin_weight.max())
        return g_max + extra

    def dt_max(self, M):
        b = self.max_abs_B()
        if b == 0:
            return math.inf
        return CFL * self.epsilon * self.domain.h / (b * self.max_dP(M))

    # -- operators ----------------------------------------------------------

    def _factor(self, dt):
        key = float(dt)
        if key not in self._lu:
            dom = self.domain
            mask = dom.fluid_mask
            idx = dom.fluid_index()
            nf = int(mask.sum())
            h2 = dom.h**2
            rows, cols, vals = [], [], []
            pidx = np.pad(idx, 1, constant_values=-2)   # -2: outside the box
            for axis, D in ((0, self.Dx), (1, self.Dy)):
                lo = pidx[:-1, 1:-1] if axis == 0 else pidx[1:-1, :-1]
                hi = pidx[1:, 1:-1] if axis == 0 else pidx[1:-1, 1:]
                d = D / h2
                inner = (lo >= 0) & (hi >= 0)
                p, q, c = lo[inner], hi[inner], d[inner]
                rows += [p, q, p, q]
                cols += [q, p, p, q]
                vals += [-c, -c, c, c]
                # Dirichlet faces on the box edge: flux 2 D u_P / h
                for own, other in ((lo, hi), (hi, lo)):
                    e = (own >= 0) & (other == -2)
                    rows.append(own[e])
                    cols.append(own[e])
                    vals.append(2.0 * d[e])
            A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(nf, nf))
            S = sp.identity(nf, format="csc") + dt * A.tocsc()
            self._lu[key] = spla.splu(S.tocsc())
        return self._lu[key]

    def advective_divergence(self, u):
        """``div((1/eps) B P(u))`` with upwind states and face-averaged C."""
        up = np.pad(u, 1)
        Fx = _upwind_flux(self.Bx, up[:-1, 1:-1], up[1:, 1:-1], self.Cx)
        Fy = _upwind_flux(self.By, up[1:-1, :-1], up[1:-1, 1:], self.Cy)
        return ((Fx[1:, :] - Fx[:-1, :]) + (Fy[:, 1:] - Fy[:, :-1])) / (self.epsilon * self.domain.h)

    def source(self, t):
        x1, x2 = self.domain.centers()
        if self.moving_source:
            s = self.Bstar * t / self.epsilon
            x1, x2 = x1 - s[0], x2 - s[1]
        return np.asarray(self.f(x1, x2), dtype=float)


def _upwind_flux(B, uL, uR, C):
    pos = np.maximum(B, 0.0)
    neg = np.minimum(B, 0.0)
    return pos * uL * (1.0 - C * uL) + neg * uR * (1.0 - C * uR)


def initial_micro_state(problem: MicroProblem) -> MicroState:
    dom = problem.domain
    x1, x2 = dom.centers()
    u = np.where(dom.fluid_mask, problem.g(x1, x2), 0.0)
    return MicroState(dom, u, 0.0, problem.epsilon)


def step_micro(state: MicroState, problem: MicroProblem, dt: float, M_bound: float | None = None):
    """Advance one IMEX step of size ``dt``."""
    dom = problem.domain
    mask = dom.fluid_mask
    u = state.u
    if M_bound is None:
        M_bound = max(float(u.max()), 0.0)
    limit = problem.dt_max(M_bound)
    if dt > limit * (1 + 1e-12):
        raise StabilityError(f"dt={dt:.3e} exceeds advective bound {limit:.3e}")
    rhs = u - dt * problem.advective_divergence(u)
    if problem.epsilon and dom.obstacle_faces.i.size:
        rhs -= dt * problem.epsilon * problem.gN(u) * problem.robin_weight
    if problem.f.amplitude:
        rhs += dt * problem.source(state.t)
    un = np.zeros_like(u)
    un[mask] = problem._factor(dt).solve(rhs[mask])
    return MicroState(dom, un, state.t + dt, state.epsilon)


@dataclass
class MicroRun:
    snapshots: list          # [(t, MicroState)]
    rows: list               # [(t, mass, min, max, energy)]
    min_u: float
    max_u: float
    M_bound: float
    energy_bound: float
    dt: float
    n_steps: int


def run_micro(problem: MicroProblem, T: float, snapshot_times=None, dt_max=None, g_override=None):
    """Integrate to each snapshot time with a CFL-limited fixed step.

    Energy is ``0.5 ||u||^2 + theta * int_0^t ||grad u||^2``; its data bound
    follows from testing the equation with ``u`` (the drift term integrates
    to zero by incompressibility).
    """
    times = sorted(set([T] if snapshot_times is None else list(snapshot_times)))
    if times and (times[0] < 0 or times[-1] > T + 1e-14):
        raise ValueError("snapshot times must lie in [0, T]")
    state = initial_micro_state(problem)
    if g_override is not None:
        state = replace(state, u=np.where(problem.domain.fluid_mask, g_override, 0.0))
    Mb = problem.M_bound(T, state.fluid_values() if g_override is not None else None)
    if Mb > 0 and problem.max_dP(Mb) > 0 and float(np.max(problem.Cx)) * Mb > 0.5:
        logger.warning("P' changes sign below M_bound; upwinding is not monotone")
    dt_cfl = problem.dt_max(Mb)
    dt0 = min(dt_cfl, dt_max if dt_max is not None else math.inf)
    if not math.isfinite(dt0):
        dt0 = T / 100 if T > 0 else 1.0
    theta = problem.disc.source.theta
    g_l2 = state.l2()
    f_l2 = problem.f.l2_norm()
    energy_bound = 0.5 * g_l2**2 + T * f_l2 * (g_l2 + T * f_l2)
    grad_int = 0.0
    snaps, rows = [], []
    umin, umax = float(state.fluid_values().min(initial=0.0)), float(state.u.max())
    n_steps = 0
    for ts in times:
        span = ts - state.t
        if span > 1e-14:
            n = int(math.ceil(span / dt0 - 1e-9))
            dt = span / n
            for _ in range(n):
                state = step_micro(state, problem, dt, Mb)
                n_steps += 1
                grad_int += dt * state.grad_l2_sq()
                vals = state.fluid_values()
                umin = min(umin, float(vals.min()))
                umax = max(umax, float(vals.max()))
                if umax > Mb * (1 + 1e-6) + 1e-300:
                    raise StabilityError(f"max u = {umax:.6g} exceeds M_bound = {Mb:.6g}")
            state = replace(state, t=ts)
        energy = 0.5 * state.l2() ** 2 + theta * grad_int
        snaps.append((ts, state))
        rows.append((ts, state.mass(), float(state.fluid_values().min()),
                     float(state.fluid_values().max()), energy))
    return MicroRun(snaps, rows, umin, umax, Mb, energy_bound, dt0, n_steps)


def shift_to_moving_frame(state: MicroState, Bstar, x1, x2):
    """Sample ``u(t, x + B* t / eps)`` at points ``(x1, x2)``.

    Bilinear interpolation over fluid neighbours (weights renormalised);
    points whose shifted position lies in a solid cell are masked out.
    Returns ``(values, mask)``.
    """
    dom = state.domain
    s = np.asarray(Bstar, dtype=float) * state.t / state.epsilon
    p1 = np.asarray(x1, dtype=float) + s[0]
    p2 = np.asarray(x2, dtype=float) + s[1]
    L = dom.L_micro
    reach = max(np.abs(p1).max(initial=0.0), np.abs(p2).max(initial=0.0))
    if reach >= L:
        raise TruncationError("moving-frame window leaves the micro box", reach)
    return interpolate_fluid(state.u, dom, p1, p2)


def interpolate_fluid(u, dom, p1, p2):
    h = dom.h
    L = dom.L_micro
    ns = dom.n_side
    mask = dom.fluid_mask
    c1 = np.floor((p1 + L) / h).astype(int)
    c2 = np.floor((p2 + L) / h).astype(int)
    inside = mask[np.clip(c1, 0, ns - 1), np.clip(c2, 0, ns - 1)]
    xi1 = (p1 + L) / h - 0.5
    xi2 = (p2 + L) / h - 0.5
    i0 = np.floor(xi1).astype(int)
    j0 = np.floor(xi2).astype(int)
    a = xi1 - i0
    b = xi2 - j0
    pad_u = np.pad(u, 1)
    pad_m = np.pad(mask, 1, constant_values=True).astype(float)   # outside box: u = 0, counts
    num = np.zeros_like(a)
    den = np.zeros_like(a)
    for di, wi in ((0, 1 - a), (1, a)):
        for dj, wj in ((0, 1 - b), (1, b)):
            ii = np.clip(i0 + di + 1, 0, ns + 1)
            jj = np.clip(j0 + dj + 1, 0, ns + 1)
            w = wi * wj * pad_m[ii, jj]
            num += w * pad_u[ii, jj]
            den += w
    vals = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return np.where(inside, vals, np.nan), inside

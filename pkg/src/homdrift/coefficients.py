"""Model data D, B, C, f, g, g_N: definition, sampling and assumption checks.

The velocity field B is always built from a stream function sampled at grid
nodes (or from constant face values), so the discrete divergence vanishes
identically rather than approximately.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
import math

import numpy as np

from .geometry import CellGrid


class ConfigurationError(ValueError):
    """Coefficient family is incompatible with the geometry."""


class ProjectionError(ValueError):
    """int B C cannot be removed by a constant shift of C."""


@dataclass(frozen=True)
class Bump:
    """Compactly supported C^2 bump ``a (1 - |x - c|^2 / rho^2)^3_+``."""

    amplitude: float = 0.0
    radius: float = 0.5
    center: tuple = (0.0, 0.0)

    def __call__(self, x1, x2):
        r2 = ((x1 - self.center[0]) ** 2 + (x2 - self.center[1]) ** 2) / self.radius**2
        return self.amplitude * np.clip(1.0 - r2, 0.0, None) ** 3

    @property
    def sup(self):
        return max(self.amplitude, 0.0)

    def support_halfwidth(self):
        """Half-width of the smallest origin-centred box containing the support."""
        if self.amplitude == 0:
            return 0.0
        return max(abs(self.center[0]), abs(self.center[1])) + self.radius

    def l2_norm(self):
        # int (1 - r^2/rho^2)^6 over the disk = pi rho^2 / 7
        return abs(self.amplitude) * math.sqrt(math.pi * self.radius**2 / 7.0)


@dataclass(frozen=True)
class CoefficientSet:
    """Families for the cell data plus macro sources.

    D_kind:  "constant" -> diag(d1, d2);
             "isotropic" -> d0 (1 + d_amp cos(2 pi y1) cos(2 pi y2)) I.
    B_kind:  "none", "constant" (nu), "strip_shear" (b_max, strip).
    C_kind:  "none", "constant" (c0), "strip" (odd-mirror profile, c0);
             c_offset is added to any family.
    gN_kind: "linear" (g_N(r) = r) or "constant" (g_N(r) = k).
    """

    D_kind: str = "constant"
    d1: float = 1.0
    d2: float = 1.0
    d0: float = 1.0
    d_amp: float = 0.0
    B_kind: str = "strip_shear"
    b_max: float = 1.0
    nu: tuple = (0.0, 0.0)
    strip: float = 0.25
    C_kind: str = "strip"
    c0: float = 0.5
    c_offset: float = 0.0
    f: Bump = field(default_factory=Bump)
    g: Bump = field(default_factory=lambda: Bump(1.0, 0.4, (0.0, 0.0)))
    gN_kind: str = "linear"
    k: float = 0.0
    theta: float = 1.0
    theta_tilde: float = 1.0

    def __post_init__(self):
        if not 0 < self.theta <= self.theta_tilde:
            raise ConfigurationError("need 0 < theta <= theta_tilde")
        if self.D_kind not in ("constant", "isotropic"):
            raise ConfigurationError(f"unknown D family {self.D_kind!r}")
        if self.B_kind not in ("none", "constant", "strip_shear"):
            raise ConfigurationError(f"unknown B family {self.B_kind!r}")
        if self.C_kind not in ("none", "constant", "strip"):
            raise ConfigurationError(f"unknown C family {self.C_kind!r}")
        if self.gN_kind not in ("linear", "constant"):
            raise ConfigurationError(f"unknown g_N family {self.gN_kind!r}")
        if not 0 < self.strip <= 0.5:
            raise ConfigurationError("strip width must lie in (0, 1/2]")
        if self.f.amplitude < 0 or self.g.amplitude < 0:
            raise ConfigurationError("f and g must be nonnegative")

    def gN(self, r):
        r = np.asarray(r, dtype=float)
        if self.gN_kind == "linear":
            return r.copy()
        return np.full_like(r, self.k)


# ---------------------------------------------------------------------------
# analytic profiles


def strip_profile(y, s):
    """sin^2(pi y / s) on [0, s] and sin^2(pi (1 - y) / s) on [1 - s, 1]."""
    y = np.mod(y, 1.0)
    out = np.zeros_like(y, dtype=float)
    lo = y <= s
    hi = y >= 1.0 - s
    out[lo] = np.sin(math.pi * y[lo] / s) ** 2
    out[hi] = np.sin(math.pi * (1.0 - y[hi]) / s) ** 2
    return out


def strip_stream(y, s):
    """Antiderivative of :func:`strip_profile` on [0, 1] (not periodic)."""
    y = np.asarray(y, dtype=float)

    def hump(t):
        return t / 2.0 - s * np.sin(2.0 * math.pi * t / s) / (4.0 * math.pi)

    out = hump(np.clip(y, 0.0, s))
    top = y > 1.0 - s
    out = np.where(top, s / 2.0 + hump(np.clip(y - (1.0 - s), 0.0, s)), out)
    return out


def strip_c_profile(y, s):
    """+sin^2 on the lower strip, -sin^2 on the upper strip (odd mirror)."""
    y = np.mod(y, 1.0)
    sgn = np.where(y < 0.5, 1.0, -1.0)
    return sgn * strip_profile(y, s)


# ---------------------------------------------------------------------------
# discrete coefficients


@dataclass(frozen=True)
class DiscreteCoefficients:
    """Cell data on a :class:`CellGrid`.

    Face arrays are indexed by the cell on their low side: ``Bx[i, j]`` is the
    normal velocity through the face between ``(i, j)`` and ``(i + 1, j)``
    (periodic), ``By[i, j]`` between ``(i, j)`` and ``(i, j + 1)``.
    """

    N: int
    h: float
    fluid_mask: np.ndarray
    D_cell: np.ndarray      # (N, N, 2, 2)
    Dx_face: np.ndarray     # (N, N, 2, 2)
    Dy_face: np.ndarray     # (N, N, 2, 2)
    Bx: np.ndarray          # (N, N)
    By: np.ndarray          # (N, N)
    C: np.ndarray           # (N, N), cell centres
    gN_kind: str
    k: float
    source: CoefficientSet

    @property
    def B_cell(self):
        """Cell-centred velocity, average of the two opposite face fluxes."""
        b1 = 0.5 * (self.Bx + np.roll(self.Bx, 1, axis=0))
        b2 = 0.5 * (self.By + np.roll(self.By, 1, axis=1))
        return np.stack([b1, b2], axis=-1)

    def C_xface(self):
        return 0.5 * (self.C + np.roll(self.C, -1, axis=0))

    def C_yface(self):
        return 0.5 * (self.C + np.roll(self.C, -1, axis=1))

    def gN(self, r):
        r = np.asarray(r, dtype=float)
        return r.copy() if self.gN_kind == "linear" else np.full_like(r, self.k)

    def with_C(self, C):
        return replace(self, C=np.asarray(C, dtype=float))


def _sample_D(cs, y1, y2):
    shape = np.broadcast(y1, y2).shape
    D = np.zeros(shape + (2, 2))
    if cs.D_kind == "constant":
        D[..., 0, 0] = cs.d1
        D[..., 1, 1] = cs.d2
    else:
        d = cs.d0 * (1.0 + cs.d_amp * np.cos(2 * math.pi * y1) * np.cos(2 * math.pi * y2))
        D[..., 0, 0] = d
        D[..., 1, 1] = d
    return D


def _sample_C(cs, y2):
    if cs.C_kind == "none":
        c = np.zeros_like(y2)
    elif cs.C_kind == "constant":
        c = np.full_like(y2, cs.c0)
    else:
        c = cs.c0 * strip_c_profile(y2, cs.strip)
    return c + cs.c_offset


def sample_coefficients(cs: CoefficientSet, grid: CellGrid) -> DiscreteCoefficients:
    """Sample the coefficient families on ``grid``.

    Raises :class:`ConfigurationError` when B is nonzero on a face touching
    the obstacle.
    """
    N, h = grid.N, grid.h
    c = (np.arange(N) + 0.5) * h
    nodes = np.arange(N + 1) * h
    y1, y2 = np.meshgrid(c, c, indexing="ij")

    D_cell = _sample_D(cs, y1, y2)
    Dx_face = _sample_D(cs, y1 + h / 2, y2)
    Dy_face = _sample_D(cs, y1, y2 + h / 2)

    if cs.B_kind == "none":
        Bx = np.zeros((N, N))
        By = np.zeros((N, N))
    elif cs.B_kind == "constant":
        Bx = np.full((N, N), float(cs.nu[0]))
        By = np.full((N, N), float(cs.nu[1]))
    else:
        # psi depends on y2 only: B1 = dpsi/dy2 via node differences, B2 = 0
        psi = cs.b_max * strip_stream(nodes, cs.strip)
        row = np.diff(psi) / h
        Bx = np.broadcast_to(row, (N, N)).copy()
        By = np.zeros((N, N))

    C = _sample_C(cs, y2)

    fluid = grid.fluid_mask
    if not fluid.all():
        touch_x = fluid ^ np.roll(fluid, -1, axis=0)
        touch_y = fluid ^ np.roll(fluid, -1, axis=1)
        solid_x = ~fluid & ~np.roll(fluid, -1, axis=0)
        solid_y = ~fluid & ~np.roll(fluid, -1, axis=1)
        if np.any(Bx[touch_x] != 0) or np.any(By[touch_y] != 0):
            raise ConfigurationError("velocity field overlaps the obstacle (B.n != 0 on Gamma_N)")
        Bx[solid_x] = 0.0
        By[solid_y] = 0.0
        C = np.where(fluid, C, 0.0)

    return DiscreteCoefficients(
        N=N, h=h, fluid_mask=fluid.copy(), D_cell=D_cell, Dx_face=Dx_face,
        Dy_face=Dy_face, Bx=Bx, By=By, C=C, gN_kind=cs.gN_kind, k=cs.k, source=cs,
    )


def integral_B(disc: DiscreteCoefficients):
    """Midpoint quadrature of B over fluid cells."""
    Bc = disc.B_cell[disc.fluid_mask]
    return Bc.sum(axis=0) * disc.h**2


def integral_BC(disc: DiscreteCoefficients):
    Bc = disc.B_cell[disc.fluid_mask]
    return (Bc * disc.C[disc.fluid_mask][:, None]).sum(axis=0) * disc.h**2


def project_zero_mean_BC(disc: DiscreteCoefficients, rtol: float = 1e-10):
    """Shift C by a constant so that the discrete ``int_Z B C dy`` vanishes.

    Returns ``(new_coefficients, alpha)``.
    """
    IB = integral_B(disc)
    IBC = integral_BC(disc)
    scale = max(np.abs(disc.B_cell).max() * max(np.abs(disc.C).max(), 1.0), 1e-300)
    a = int(np.argmax(np.abs(IB)))
    if abs(IB[a]) <= 1e-14 * max(np.abs(disc.B_cell).max(), 1e-300):
        if np.all(np.abs(IBC) <= rtol * scale):
            return disc, 0.0
        raise ProjectionError("int B = 0 but int B C != 0; supply a compliant C")
    alpha = IBC[a] / IB[a]
    other = 1 - a
    if abs(IBC[other] - alpha * IB[other]) > rtol * scale:
        raise ProjectionError("int B C is not parallel to B*; supply a compliant C")
    C = np.where(disc.fluid_mask, disc.C - alpha, 0.0)
    out = disc.with_C(C)
    # one refinement pass mops up round-off left by the first shift
    resid = integral_BC(out)[a] / IB[a]
    if resid != 0.0:
        out = out.with_C(np.where(disc.fluid_mask, out.C - resid, 0.0))
        alpha += resid
    return out, float(alpha)


# ---------------------------------------------------------------------------
# discrete operators used by the checks


def divergence(disc: DiscreteCoefficients, Fx=None, Fy=None):
    """Discrete divergence of a face field (defaults to B), per cell."""
    Fx = disc.Bx if Fx is None else Fx
    Fy = disc.By if Fy is None else Fy
    return ((Fx - np.roll(Fx, 1, axis=0)) + (Fy - np.roll(Fy, 1, axis=1))) / disc.h


def obstacle_normal_velocity(disc: DiscreteCoefficients, grid: CellGrid):
    bf = grid.boundary_faces
    if len(bf) == 0:
        return np.zeros(0)
    vals = np.empty(len(bf))
    for n, (i, j, ax, sg) in enumerate(zip(bf.i, bf.j, bf.axis, bf.sign)):
        if ax == 0:
            vals[n] = disc.Bx[i, j] if sg > 0 else -disc.Bx[(i - 1) % disc.N, j]
        else:
            vals[n] = disc.By[i, j] if sg > 0 else -disc.By[i, (j - 1) % disc.N]
    return vals


@dataclass
class AssumptionCheck:
    name: str
    passed: bool
    residuals: dict
    note: str = ""


@dataclass
class AssumptionReport:
    checks: list

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def names(self):
        return [c.name for c in self.checks]

    def lines(self):
        out = []
        for c in self.checks:
            res = ", ".join(f"{k}={v:.3e}" for k, v in c.residuals.items())
            tail = f"  ({c.note})" if c.note else ""
            out.append(f"{c.name:4s} {'PASS' if c.passed else 'FAIL'}  {res}{tail}")
        return out


def verify_assumptions(disc: DiscreteCoefficients, grid: CellGrid, tol: float = 1e-12,
                       macro_halfwidth: float | None = None) -> AssumptionReport:
    """Measure (A1)-(A5) and the zero-mean condition on int B C."""
    cs = disc.source
    fluid = disc.fluid_mask
    checks = []

    # A1: ellipticity on cells and faces touching fluid
    Ds = [disc.D_cell[fluid], disc.Dx_face[fluid], disc.Dy_face[fluid]]
    eig = np.concatenate([np.linalg.eigvalsh(0.5 * (D + np.swapaxes(D, -1, -2))) for D in Ds])
    lo, hi = float(eig.min()), float(eig.max())
    a1 = lo > 0 and lo >= cs.theta - tol and hi <= cs.theta_tilde + tol
    checks.append(AssumptionCheck("A1", a1, {"min_eig": lo, "max_eig": hi},
                                  f"theta={cs.theta}, theta_tilde={cs.theta_tilde}"))

    # A2: div B = 0, div(BC) = 0, B.n = 0 on Gamma_N
    divB = np.abs(divergence(disc)[fluid]).max(initial=0.0)
    divBC = np.abs(divergence(disc, disc.Bx * disc.C_xface(),
                              disc.By * disc.C_yface())[fluid]).max(initial=0.0)
    bn = np.abs(obstacle_normal_velocity(disc, grid)).max(initial=0.0)
    scale = max(np.abs(disc.B_cell).max(), 1.0)
    a2 = max(divB, divBC, bn) <= tol * scale
    checks.append(AssumptionCheck("A2", a2, {"max_div_B": float(divB), "max_div_BC": float(divBC),
                                             "max_Bn_Gamma": float(bn)}))

    # zero-mean condition int_Z B C dy = 0
    ibc = np.abs(integral_BC(disc))
    checks.append(AssumptionCheck("bc", bool(ibc.max() <= tol * scale),
                                  {"int_BC_1": float(ibc[0]), "int_BC_2": float(ibc[1])}))

    # A3 and A5: nonnegative, compactly supported sources inside the macro box
    for name, bump in (("A3", cs.f), ("A5", cs.g)):
        inside = True
        if macro_halfwidth is not None and bump.amplitude > 0:
            inside = bump.support_halfwidth() < macro_halfwidth
        checks.append(AssumptionCheck(name, bump.amplitude >= 0 and inside,
                                      {"min_value": min(bump.amplitude, 0.0),
                                       "support_halfwidth": bump.support_halfwidth()}))

    # A4: -g_N(x) x < 0 for x != 0 and g_N nondecreasing
    r = np.linspace(-2.0, 2.0, 401)
    r = r[r != 0]
    gn = disc.gN(r)
    sign_viol = float(np.max(gn * r * -1.0))
    mono_viol = float(max(0.0, -np.diff(gn).min()))
    note = "" if cs.gN_kind == "linear" else "constant g_N violates the sign condition for k*x <= 0"
    checks.append(AssumptionCheck("A4", sign_viol < 0 and mono_viol <= tol,
                                  {"max_neg_gN_x": sign_viol, "monotonicity": mono_viol}, note))
    order = {"A1": 0, "A2": 1, "bc": 2, "A3": 3, "A4": 4, "A5": 5}
    checks.sort(key=lambda c: order[c.name])
    return AssumptionReport(checks)

"""Effective drift B* and the state-dependent dispersion tensor D*(u0, W)."""
from __future__ import annotations

from dataclasses import dataclass, field
import logging

import numpy as np
from scipy.interpolate import PchipInterpolator

from .cell_solver import CellCorrector, corrector_gradient_matrix, solve_corrector
from .coefficients import DiscreteCoefficients, integral_B
from .geometry import CellGrid

logger = logging.getLogger(__name__)


class AssemblyError(ValueError):
    """Corrector and coefficients live on different grids."""


class TableError(ValueError):
    pass


def compute_Bstar(disc: DiscreteCoefficients, grid: CellGrid):
    """Cell average of B over the fluid part of the cell."""
    return integral_B(disc) / grid.discrete_area


def assemble_Dstar(disc: DiscreteCoefficients, grid: CellGrid, corrector: CellCorrector):
    """Midpoint quadrature of the three terms of D*(u0, W).

    ``D*_ij = (1/|Z|) [ int (D (I + G))_ij + int (B*_i - B_i (1 - 2 C u0)) w_j ]``
    with ``G_aj = d w_j / d y_a``.
    """
    if corrector.grid.N != grid.N or corrector.disc.N != disc.N \
            or not np.array_equal(corrector.grid.fluid_mask, grid.fluid_mask):
        raise AssemblyError("corrector was solved on a different grid")
    mask = grid.fluid_mask
    area = grid.discrete_area
    dA = grid.h**2
    u0 = corrector.u0_value
    G = corrector_gradient_matrix(corrector)[mask]
    D = disc.D_cell[mask]
    first = np.einsum("nab,nbj->aj", D, np.eye(2)[None] + G) * dA
    W = np.stack([corrector.w[0][mask], corrector.w[1][mask]], axis=-1)
    Bstar = compute_Bstar(disc, grid)
    Bt = disc.B_cell[mask] * (1.0 - 2.0 * u0 * disc.C[mask])[:, None]
    second = np.outer(Bstar, W.sum(axis=0)) * dA
    third = np.einsum("na,nj->aj", Bt, W) * dA
    return (first + second - third) / area


def symmetric_part_min_eig(D):
    return float(np.linalg.eigvalsh(0.5 * (D + D.T)).min())


@dataclass(frozen=True)
class EffectiveTensorSample:
    u0: float
    Dstar: np.ndarray
    corrector_ref: int
    spd: bool


@dataclass
class EffectiveTable:
    Bstar: np.ndarray
    samples: list
    cell_measures: tuple      # (|Z|, |Gamma_N|)
    correctors: list = field(default_factory=list, repr=False)
    _interp: object = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.samples) < 3:
            raise TableError("table needs at least 3 samples")
        u = self.u0_nodes
        if np.any(np.diff(u) <= 0):
            raise TableError("table nodes must be strictly increasing")
        vals = np.array([s.Dstar.ravel() for s in self.samples])
        self._interp = PchipInterpolator(u, vals, axis=0, extrapolate=False)

    @property
    def u0_nodes(self):
        return np.array([s.u0 for s in self.samples])

    @property
    def u_max(self):
        return float(self.samples[-1].u0)

    @property
    def values(self):
        return np.array([s.Dstar for s in self.samples])

    @property
    def sink_rate(self):
        """``|Gamma_N| / |Z|``."""
        return self.cell_measures[1] / self.cell_measures[0]

    def is_constant(self, tol=0.0):
        v = self.values
        return bool(np.abs(v - v[0]).max() <= tol)


def eval_Dstar(table: EffectiveTable, s, report=False):
    """Interpolated D*(s); ``s`` may be an array (result shape ``s.shape + (2, 2)``).

    Values outside ``[0, u_max]`` are clamped; with ``report=True`` the call
    returns ``(D, clamped)``.
    """
    if table is None or not table.samples:
        raise TableError("empty effective table")
    s = np.asarray(s, dtype=float)
    lo, hi = table.u0_nodes[0], table.u0_nodes[-1]
    clamped = bool(np.any(s < lo) or np.any(s > hi))
    if clamped:
        logger.warning("D* evaluated outside the table range [%g, %g]; clamping", lo, hi)
    sc = np.clip(s, lo, hi).ravel()
    out = table._interp(sc).reshape(-1, 2, 2)
    # nodes return the stored samples bit for bit
    nodes = table.u0_nodes
    k = np.searchsorted(nodes, sc)
    hit = (k < nodes.size) & (nodes[np.minimum(k, nodes.size - 1)] == sc)
    if np.any(hit):
        out[hit] = table.values[k[hit]]
    out = out.reshape(s.shape + (2, 2))
    return (out, clamped) if report else out


def tabulate_Dstar(disc: DiscreteCoefficients, grid: CellGrid, u_max: float,
                   n_samples: int = 5, keep_correctors: bool = True) -> EffectiveTable:
    """Solve the cell problem on ``linspace(0, u_max, n_samples)``."""
    if n_samples < 3:
        raise TableError("n_samples must be >= 3")
    samples, correctors = [], []
    for k, u0 in enumerate(np.linspace(0.0, u_max, n_samples)):
        try:
            c = solve_corrector(grid, disc, u0)
        except Exception as exc:
            raise type(exc)(f"corrector solve failed at u0={u0}: {exc}") from exc
        D = assemble_Dstar(disc, grid, c)
        spd = symmetric_part_min_eig(D) > 0
        if not spd:
            logger.warning("symmetric part of D* not positive definite at u0=%g", u0)
        samples.append(EffectiveTensorSample(float(u0), D, k, spd))
        if keep_correctors:
            correctors.append(c)
    return EffectiveTable(compute_Bstar(disc, grid), samples,
                          (grid.fluid_area, grid.obstacle_perimeter), correctors)


def write_table_csv(table: EffectiveTable, path):
    with open(path, "w") as fh:
        fh.write(f"# Bstar,{float(table.Bstar[0])!r},{float(table.Bstar[1])!r}\n")
        fh.write("u0,D11,D12,D21,D22\n")
        for s in table.samples:
            vals = [s.u0] + [float(x) for x in s.Dstar.ravel()]
            fh.write(",".join(repr(float(v)) for v in vals) + "\n")

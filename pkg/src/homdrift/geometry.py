"""Perforated unit cell and truncated periodically perforated micro domains.

Arrays are indexed ``[i, j]`` with ``i`` along the first coordinate and
``j`` along the second, so ``field[i, j]`` lives at the cell centre
``((i + 1/2) h, (j + 1/2) h)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np


class GeometryError(ValueError):
    """Obstacle placement is invalid (e.g. touches the cell boundary)."""


class AlignmentError(GeometryError):
    """Square obstacle edges do not fall on grid lines."""


class TilingError(GeometryError):
    """Micro box is not an integer number of epsilon-cells."""


OBSTACLE_KINDS = ("none", "axis_square", "disk")

# (axis, sign) for the four face directions of a cell
DIRECTIONS = ((0, 1), (0, -1), (1, 1), (1, -1))


def _is_integral(x, tol=1e-9):
    return abs(x - round(x)) <= tol * max(1.0, abs(x))


@dataclass(frozen=True)
class CellGeometry:
    """Obstacle placed inside the unit square ``Y = [0, 1]^2``."""

    obstacle_kind: str = "axis_square"
    side: float = 0.25
    radius: float = 0.25
    center: tuple = (0.5, 0.5)

    def __post_init__(self):
        if self.obstacle_kind not in OBSTACLE_KINDS:
            raise GeometryError(f"unknown obstacle kind {self.obstacle_kind!r}")
        cx, cy = self.center
        if self.obstacle_kind == "axis_square":
            if self.side <= 0:
                raise GeometryError("square side must be positive")
            half = 0.5 * self.side
            gap = min(cx - half, cy - half, 1 - cx - half, 1 - cy - half)
        elif self.obstacle_kind == "disk":
            if self.radius <= 0:
                raise GeometryError("disk radius must be positive")
            gap = min(cx, cy, 1 - cx, 1 - cy) - self.radius
        else:
            gap = 1.0
        if gap <= 0:
            raise GeometryError("obstacle must stay strictly inside the cell")

    @property
    def has_obstacle(self):
        return self.obstacle_kind != "none"

    def solid(self, y1, y2):
        """Boolean mask of points inside the obstacle (periodic in y)."""
        y1 = np.mod(y1, 1.0)
        y2 = np.mod(y2, 1.0)
        cx, cy = self.center
        if self.obstacle_kind == "axis_square":
            half = 0.5 * self.side
            return (np.abs(y1 - cx) < half) & (np.abs(y2 - cy) < half)
        if self.obstacle_kind == "disk":
            return (y1 - cx) ** 2 + (y2 - cy) ** 2 < self.radius**2
        return np.zeros(np.broadcast(y1, y2).shape, dtype=bool)

    def analytic_area(self):
        if self.obstacle_kind == "axis_square":
            return 1.0 - self.side**2
        if self.obstacle_kind == "disk":
            return 1.0 - math.pi * self.radius**2
        return 1.0

    def analytic_perimeter(self):
        if self.obstacle_kind == "axis_square":
            return 4.0 * self.side
        if self.obstacle_kind == "disk":
            return 2.0 * math.pi * self.radius
        return 0.0


@dataclass(frozen=True)
class BoundaryFaces:
    """Fluid/solid faces: owning fluid cell, axis and sign of the outward normal."""

    i: np.ndarray
    j: np.ndarray
    axis: np.ndarray
    sign: np.ndarray
    length: np.ndarray

    def __len__(self):
        return len(self.i)

    @property
    def normals(self):
        n = np.zeros((len(self), 2))
        n[np.arange(len(self)), self.axis] = self.sign
        return n


def _find_boundary_faces(fluid, periodic, face_length):
    """Faces between a fluid cell and a solid neighbour.

    Faces on the edge of a non-periodic array are not included.
    """
    ii, jj, ax, sg = [], [], [], []
    nx, ny = fluid.shape
    for axis, sign in DIRECTIONS:
        if periodic:
            nb = np.roll(fluid, -sign, axis=axis)
            hit = fluid & ~nb
        else:
            nb = np.ones_like(fluid)
            src = [slice(None), slice(None)]
            dst = [slice(None), slice(None)]
            if sign > 0:
                src[axis] = slice(1, None)
                dst[axis] = slice(0, -1)
            else:
                src[axis] = slice(0, -1)
                dst[axis] = slice(1, None)
            nb[tuple(dst)] = fluid[tuple(src)]
            hit = fluid & ~nb
        i, j = np.nonzero(hit)
        ii.append(i)
        jj.append(j)
        ax.append(np.full(i.size, axis))
        sg.append(np.full(i.size, sign))
    i = np.concatenate(ii)
    j = np.concatenate(jj)
    order = np.lexsort((np.concatenate(sg), np.concatenate(ax), j, i))
    return BoundaryFaces(
        i=i[order],
        j=j[order],
        axis=np.concatenate(ax)[order],
        sign=np.concatenate(sg)[order],
        length=np.full(i.size, face_length),
    )


@dataclass(frozen=True)
class CellGrid:
    """Cell-centred discretisation of the perforated cell ``Z``.

    ``fluid_area`` and ``obstacle_perimeter`` are exact for square obstacles
    and analytic for disks. ``discrete_area`` is always ``h^2`` times the
    number of fluid cells; every discrete quadrature normalises by it so that
    discrete identities (e.g. ``B* |Z| = int B``) hold to round-off.
    """

    geometry: CellGeometry
    N: int
    h: float
    fluid_mask: np.ndarray
    boundary_faces: BoundaryFaces
    fluid_area: float
    obstacle_perimeter: float
    discrete_area: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "discrete_area", self.h**2 * int(self.fluid_mask.sum()))

    @property
    def shape(self):
        return (self.N, self.N)

    @property
    def n_fluid(self):
        return int(self.fluid_mask.sum())

    def centers(self):
        c = (np.arange(self.N) + 0.5) * self.h
        return np.meshgrid(c, c, indexing="ij")

    def neighbor(self, i, j, axis, sign):
        """Periodic neighbour index of cell ``(i, j)``."""
        if axis == 0:
            return (i + sign) % self.N, j
        return i, (j + sign) % self.N

    def fluid_index(self):
        """Map cell -> unknown number, -1 on solid cells."""
        idx = np.full(self.shape, -1, dtype=np.int64)
        idx[self.fluid_mask] = np.arange(self.n_fluid)
        return idx


def build_cell_grid(geom: CellGeometry, N: int) -> CellGrid:
    """Discretise the cell with ``N x N`` square cells."""
    if N < 8:
        raise GeometryError("cell grid needs N >= 8")
    h = 1.0 / N
    if geom.obstacle_kind == "axis_square":
        cx, cy = geom.center
        for v in (geom.side * N, (cx - geom.side / 2) * N, (cy - geom.side / 2) * N):
            if not _is_integral(v):
                raise AlignmentError(
                    f"square obstacle (side {geom.side}, centre {geom.center}) "
                    f"is not aligned with a grid of N={N}"
                )
    y1, y2 = np.meshgrid((np.arange(N) + 0.5) * h, (np.arange(N) + 0.5) * h, indexing="ij")
    fluid = ~geom.solid(y1, y2)
    if not fluid.any():
        raise GeometryError("cell has no fluid cells")
    faces = _find_boundary_faces(fluid, periodic=True, face_length=h)
    if geom.obstacle_kind == "axis_square":
        area = h**2 * int(fluid.sum())
        perimeter = len(faces) * h
    else:
        area = geom.analytic_area()
        perimeter = geom.analytic_perimeter()
        if len(faces):
            # staircase faces share the analytic perimeter so boundary
            # quadratures see the true |Gamma_N|
            faces = BoundaryFaces(
                faces.i, faces.j, faces.axis, faces.sign,
                np.full(len(faces), perimeter / len(faces)),
            )
    return CellGrid(
        geometry=geom,
        N=N,
        h=h,
        fluid_mask=fluid,
        boundary_faces=faces,
        fluid_area=area,
        obstacle_perimeter=perimeter,
    )


@dataclass(frozen=True)
class MicroDomain:
    """Box ``(-L, L)^2`` minus epsilon-scaled periodic copies of the obstacle."""

    geometry: CellGeometry
    epsilon: float
    L_micro: float
    cells_per_eps: int
    cell_grid: CellGrid
    n_eps: int
    h: float
    fluid_mask: np.ndarray
    obstacle_faces: BoundaryFaces
    outer_faces: BoundaryFaces
    n_obstacles: int

    @property
    def shape(self):
        return self.fluid_mask.shape

    @property
    def n_side(self):
        return self.fluid_mask.shape[0]

    @property
    def fluid_fraction(self):
        return float(self.fluid_mask.mean())

    def centers_1d(self):
        return -self.L_micro + (np.arange(self.n_side) + 0.5) * self.h

    def centers(self):
        c = self.centers_1d()
        return np.meshgrid(c, c, indexing="ij")

    def fluid_index(self):
        idx = np.full(self.shape, -1, dtype=np.int64)
        idx[self.fluid_mask] = np.arange(int(self.fluid_mask.sum()))
        return idx


def build_micro_domain(geom: CellGeometry, epsilon: float, L_micro: float,
                       cells_per_eps: int) -> MicroDomain:
    """Tile the discretised cell over ``(-L, L)^2`` with period ``epsilon``.

    The box origin ``-L`` sits on the epsilon-lattice, so every obstacle copy
    is complete.
    """
    if cells_per_eps < 8:
        raise GeometryError("cells_per_eps must be >= 8")
    ratio = 2.0 * L_micro / epsilon
    if epsilon <= 0 or not _is_integral(L_micro / epsilon):
        raise TilingError(f"L_micro/epsilon = {L_micro / epsilon} is not an integer")
    n_eps = int(round(ratio))
    cell = build_cell_grid(geom, cells_per_eps)
    fluid = np.tile(cell.fluid_mask, (n_eps, n_eps))
    h = epsilon / cells_per_eps
    obstacle = _find_boundary_faces(fluid, periodic=False, face_length=h)
    if geom.obstacle_kind == "disk" and len(cell.boundary_faces):
        obstacle = BoundaryFaces(obstacle.i, obstacle.j, obstacle.axis, obstacle.sign,
                                 np.full(len(obstacle), cell.boundary_faces.length[0] * epsilon))
    outer = _outer_faces(fluid, h)
    return MicroDomain(
        geometry=geom,
        epsilon=epsilon,
        L_micro=L_micro,
        cells_per_eps=cells_per_eps,
        cell_grid=cell,
        n_eps=n_eps,
        h=h,
        fluid_mask=fluid,
        obstacle_faces=obstacle,
        outer_faces=outer,
        n_obstacles=n_eps**2 if geom.has_obstacle else 0,
    )


def _outer_faces(fluid, h):
    n = fluid.shape[0]
    ii, jj, ax, sg = [], [], [], []
    edge = np.arange(n)
    for axis, sign in DIRECTIONS:
        k = n - 1 if sign > 0 else 0
        if axis == 0:
            i, j = np.full(n, k), edge
        else:
            i, j = edge, np.full(n, k)
        keep = fluid[i, j]
        ii.append(i[keep])
        jj.append(j[keep])
        ax.append(np.full(keep.sum(), axis))
        sg.append(np.full(keep.sum(), sign))
    i = np.concatenate(ii)
    return BoundaryFaces(i, np.concatenate(jj), np.concatenate(ax),
                         np.concatenate(sg), np.full(i.size, h))

"""
Structured box grids and nodal fields.

Provides the Grid type with interior/boundary bookkeeping, nodal scalar and
boundary fields, second-order gradients, normal traces, quadrature weights and
multilinear probing.
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.interpolate import RegularGridInterpolator

AXIS_NAMES = ("x", "y", "z")


class GridError(Exception):
    """Raised for invalid grid construction or out-of-domain queries."""
    pass


def _frozen(values: np.ndarray) -> np.ndarray:
    array = np.array(values, dtype=float, copy=True)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class Grid:
    """Axis-aligned box grid with uniform spacing per axis."""

    dim: int
    n_per_axis: tuple[int, ...]
    extent: tuple[tuple[float, float], ...]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n_per_axis

    @property
    def node_count(self) -> int:
        return int(np.prod(self.n_per_axis))

    @cached_property
    def spacing(self) -> tuple[float, ...]:
        return tuple((hi - lo) / (n - 1) for (lo, hi), n in zip(self.extent, self.n_per_axis))

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        """1D node coordinates per axis."""
        return tuple(np.linspace(lo, hi, n) for (lo, hi), n in zip(self.extent, self.n_per_axis))

    @cached_property
    def multi_indices(self) -> np.ndarray:
        """(N, dim) integer index tuples in C order."""
        grids = np.meshgrid(*[np.arange(n) for n in self.n_per_axis], indexing="ij")
        stacked = np.stack([g.ravel() for g in grids], axis=1)
        stacked.flags.writeable = False
        return stacked

    @cached_property
    def coordinates(self) -> np.ndarray:
        """(N, dim) node coordinates."""
        lows = np.array([lo for lo, _ in self.extent])
        return _frozen(lows + self.multi_indices * np.array(self.spacing))

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        idx = self.multi_indices
        upper = np.array(self.n_per_axis) - 1
        mask = np.any((idx == 0) | (idx == upper), axis=1)
        mask.flags.writeable = False
        return mask

    @cached_property
    def interior_ids(self) -> np.ndarray:
        ids = np.flatnonzero(~self.boundary_mask)
        ids.flags.writeable = False
        return ids

    @cached_property
    def boundary_ids(self) -> np.ndarray:
        ids = np.flatnonzero(self.boundary_mask)
        ids.flags.writeable = False
        return ids

    @cached_property
    def boundary_position(self) -> np.ndarray:
        """Map node id -> position in boundary_ids, -1 for interior nodes."""
        position = np.full(self.node_count, -1, dtype=int)
        position[self.boundary_ids] = np.arange(self.boundary_ids.size)
        position.flags.writeable = False
        return position

    @cached_property
    def _face_assignment(self) -> tuple[np.ndarray, np.ndarray]:
        # Edges and corners belong to the first axis (x, then y, then z) they touch.
        idx = self.multi_indices[self.boundary_ids]
        upper = np.array(self.n_per_axis) - 1
        on_low = idx == 0
        on_high = idx == upper
        touching = on_low | on_high
        axis = np.argmax(touching, axis=1)
        rows = np.arange(idx.shape[0])
        side = np.where(on_high[rows, axis], 1.0, -1.0)
        axis.flags.writeable = False
        side.flags.writeable = False
        return axis, side

    @property
    def boundary_axis(self) -> np.ndarray:
        return self._face_assignment[0]

    @property
    def boundary_side(self) -> np.ndarray:
        return self._face_assignment[1]

    @cached_property
    def normals(self) -> np.ndarray:
        """(B, dim) unit outward normals of the assigned faces."""
        axis, side = self._face_assignment
        normals = np.zeros((self.boundary_ids.size, self.dim))
        normals[np.arange(axis.size), axis] = side
        return _frozen(normals)

    def normal(self, node_id: int) -> np.ndarray:
        position = self.boundary_position[node_id]
        if position < 0:
            raise GridError(f"Node {node_id} is not a boundary node")
        return self.normals[position]

    @cached_property
    def volume_weights(self) -> np.ndarray:
        """Trapezoidal cell-volume weights per node."""
        idx = self.multi_indices
        upper = np.array(self.n_per_axis) - 1
        factors = np.where((idx == 0) | (idx == upper), 0.5, 1.0) * np.array(self.spacing)
        return _frozen(np.prod(factors, axis=1))

    @cached_property
    def boundary_weights(self) -> np.ndarray:
        """Trapezoidal face-area weights per boundary node, summed over every face it touches."""
        idx = self.multi_indices[self.boundary_ids]
        upper = np.array(self.n_per_axis) - 1
        spacing = np.array(self.spacing)
        at_end = (idx == 0) | (idx == upper)
        weights = np.zeros(idx.shape[0])
        for axis in range(self.dim):
            tangential = [b for b in range(self.dim) if b != axis]
            face_weight = np.ones(idx.shape[0])
            for b in tangential:
                face_weight *= np.where(at_end[:, b], 0.5, 1.0) * spacing[b]
            for end in (0, upper[axis]):
                weights += np.where(idx[:, axis] == end, face_weight, 0.0)
        return _frozen(weights)

    def node_id(self, index: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(index), self.n_per_axis))

    def face_neighbours(self, node_id: int, axis: int) -> tuple[Optional[int], Optional[int]]:
        """Neighbours of a boundary node along a tangential axis (None past an edge)."""
        index = list(self.multi_indices[node_id])
        neighbours: list[Optional[int]] = []
        for step in (-1, 1):
            moved = index[axis] + step
            if 0 <= moved < self.n_per_axis[axis]:
                shifted = list(index)
                shifted[axis] = moved
                neighbours.append(self.node_id(shifted))
            else:
                neighbours.append(None)
        return neighbours[0], neighbours[1]

    def contains(self, points: np.ndarray, atol: float = 1e-12) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        lows = np.array([lo for lo, _ in self.extent]) - atol
        highs = np.array([hi for _, hi in self.extent]) + atol
        return np.all((points >= lows) & (points <= highs), axis=1)

    def locate_nodes(self, points: np.ndarray, atol: float = 1e-9) -> np.ndarray:
        """Node ids coinciding with the given coordinates."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if not np.all(self.contains(points, atol)):
            raise GridError("Points outside the grid extent")
        lows = np.array([lo for lo, _ in self.extent])
        fractional = (points - lows) / np.array(self.spacing)
        rounded = np.rint(fractional)
        if np.any(np.abs(fractional - rounded) * np.array(self.spacing) > atol):
            raise GridError("Points do not coincide with grid nodes")
        return np.ravel_multi_index(tuple(rounded.astype(int).T), self.n_per_axis)

    def to_descriptor(self) -> dict:
        return {"dim": self.dim, "n": list(self.n_per_axis), "extent": [list(e) for e in self.extent]}

    @classmethod
    def from_descriptor(cls, descriptor: dict) -> "Grid":
        return build_grid(descriptor["dim"], descriptor["n"], descriptor.get("extent"))

    def refined(self) -> "Grid":
        """Grid with every cell halved (coarse nodes are a subset of the new nodes)."""
        return build_grid(self.dim, [2 * n - 1 for n in self.n_per_axis], self.extent)


def build_grid(
    dim: int,
    n: Sequence[int],
    extent: Optional[Sequence[Sequence[float]]] = None
) -> Grid:
    """
    Build a structured grid over a box.

    Args:
        dim: Spatial dimension (2 or 3)
        n: Nodes per axis, each at least 3
        extent: Per-axis (low, high) intervals, unit box by default

    Returns:
        Immutable Grid

    Raises:
        GridError: If the dimension, node counts or extent are invalid
    """
    if dim not in (2, 3):
        raise GridError(f"Grid dimension must be 2 or 3, got {dim}")
    n = tuple(int(v) for v in n)
    if len(n) != dim:
        raise GridError(f"Expected {dim} node counts, got {len(n)}")
    if any(v < 3 for v in n):
        raise GridError(f"Each axis needs at least 3 nodes to have an interior, got {list(n)}")
    if extent is None:
        extent = [(0.0, 1.0)] * dim
    extent = tuple((float(lo), float(hi)) for lo, hi in extent)
    if len(extent) != dim:
        raise GridError(f"Expected {dim} extent intervals, got {len(extent)}")
    if any(hi <= lo for lo, hi in extent):
        raise GridError(f"Extent intervals must have positive length: {extent}")
    return Grid(dim=dim, n_per_axis=n, extent=extent)


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Nodal values over the whole grid."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float).ravel()
        if values.size != self.grid.node_count:
            raise GridError(f"Field has {values.size} values for {self.grid.node_count} nodes")
        if not np.all(np.isfinite(values)):
            raise GridError("Field values must be finite")
        object.__setattr__(self, "values", _frozen(values))

    @classmethod
    def constant(cls, grid: Grid, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.node_count, float(value)))

    @classmethod
    def from_function(cls, grid: Grid, func: Callable[[np.ndarray], np.ndarray]) -> "ScalarField":
        values = np.broadcast_to(np.asarray(func(grid.coordinates), dtype=float), (grid.node_count,))
        return cls(grid, values)

    def reshaped(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    def boundary(self) -> "BoundaryField":
        return BoundaryField(self.grid, self.values[self.grid.boundary_ids])

    def to_frame(self) -> pd.DataFrame:
        return _frame(self.grid, np.arange(self.grid.node_count), self.values)


@dataclass(frozen=True, eq=False)
class BoundaryField:
    """Values at boundary nodes, ordered as grid.boundary_ids."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float).ravel()
        if values.size != self.grid.boundary_ids.size:
            raise GridError(
                f"Boundary field has {values.size} values for {self.grid.boundary_ids.size} boundary nodes"
            )
        if not np.all(np.isfinite(values)):
            raise GridError("Boundary field values must be finite")
        object.__setattr__(self, "values", _frozen(values))

    @classmethod
    def constant(cls, grid: Grid, value: float) -> "BoundaryField":
        return cls(grid, np.full(grid.boundary_ids.size, float(value)))

    @classmethod
    def from_function(cls, grid: Grid, func: Callable[[np.ndarray], np.ndarray]) -> "BoundaryField":
        points = grid.coordinates[grid.boundary_ids]
        values = np.broadcast_to(np.asarray(func(points), dtype=float), (points.shape[0],))
        return cls(grid, values)

    def at(self, node_id: int) -> float:
        position = self.grid.boundary_position[node_id]
        if position < 0:
            raise GridError(f"Node {node_id} is not a boundary node")
        return float(self.values[position])

    def to_frame(self) -> pd.DataFrame:
        return _frame(self.grid, self.grid.boundary_ids, self.values)


def _frame(grid: Grid, node_ids: np.ndarray, values: np.ndarray) -> pd.DataFrame:
    data = {"node_id": node_ids}
    coords = grid.coordinates[node_ids]
    for axis in range(grid.dim):
        data[AXIS_NAMES[axis]] = coords[:, axis]
    data["value"] = values
    return pd.DataFrame(data)


def gradient(u: ScalarField) -> np.ndarray:
    """
    Nodal gradient: central differences inside, one-sided second order at the boundary.

    Returns:
        (N, dim) array
    """
    parts = np.gradient(u.reshaped(), *u.grid.spacing, edge_order=2)
    return np.stack([p.ravel() for p in parts], axis=1)


def normal_trace(grid: Grid, vector_field: np.ndarray) -> BoundaryField:
    """Outward normal component of a nodal vector field at every boundary node."""
    vector_field = np.asarray(vector_field, dtype=float)
    if vector_field.shape != (grid.node_count, grid.dim):
        raise GridError(f"Vector field shape {vector_field.shape} does not match grid")
    axis, side = grid.boundary_axis, grid.boundary_side
    return BoundaryField(grid, vector_field[grid.boundary_ids, axis] * side)


def volume_integral(u: ScalarField) -> float:
    return float(np.dot(u.grid.volume_weights, u.values))


def boundary_integral(f: BoundaryField) -> float:
    return float(np.dot(f.grid.boundary_weights, f.values))


def boundary_inner(f: BoundaryField, g: BoundaryField) -> float:
    """Area-weighted boundary pairing <f, g>."""
    return float(np.dot(f.grid.boundary_weights, f.values * g.values))


def boundary_norm(f: BoundaryField) -> float:
    return float(np.sqrt(boundary_inner(f, f)))


def l2_norm(u: ScalarField) -> float:
    return float(np.sqrt(np.dot(u.grid.volume_weights, u.values ** 2)))


def interpolate(u: ScalarField, points: np.ndarray) -> np.ndarray:
    """
    Multilinear interpolation of a nodal field at arbitrary points.

    Raises:
        GridError: If any point lies outside the grid extent
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != u.grid.dim:
        raise GridError(f"Points must have {u.grid.dim} coordinates")
    if not np.all(u.grid.contains(points)):
        raise GridError("Probe point outside the domain")
    lows = np.array([lo for lo, _ in u.grid.extent])
    highs = np.array([hi for _, hi in u.grid.extent])
    interpolator = RegularGridInterpolator(u.grid.axes, u.reshaped(), method="linear")
    return interpolator(np.clip(points, lows, highs))


__all__ = [
    "AXIS_NAMES",
    "Grid",
    "GridError",
    "ScalarField",
    "BoundaryField",
    "build_grid",
    "gradient",
    "normal_trace",
    "volume_integral",
    "boundary_integral",
    "boundary_inner",
    "boundary_norm",
    "l2_norm",
    "interpolate",
]

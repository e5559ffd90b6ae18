"""Shared domain types: boxes, uniform grids, cost functions and controllers.

Everything in here is immutable after construction and all operations are
pure functions, so they are safe to use from parallel workers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError

#: Reserved cell id for "outside the grid domain".
SINK = -1

MICRO = 10 ** 6


def _as_vector(x, name: str) -> np.ndarray:
    v = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if v.ndim != 1:
        raise ContractError(f"{name} must be a 1-D vector, got shape {v.shape}")
    v.setflags(write=False)
    return v


@dataclass(frozen=True)
class Box:
    """Axis-aligned hyper-interval [lower, upper]."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = _as_vector(self.lower, "lower")
        hi = _as_vector(self.upper, "upper")
        if lo.shape != hi.shape:
            raise ContractError("lower/upper dimension mismatch")
        if np.any(lo > hi):
            raise ContractError("box requires lower[i] <= upper[i]")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dims(self) -> int:
        return self.lower.shape[0]

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)


@dataclass(frozen=True)
class Grid:
    """Uniform grid of half-open cells tiling a constraint box.

    Cell i along an axis covers [lo + i*eta, lo + (i+1)*eta); the last cell
    per axis is clipped to the domain and closed at the upper bound, so the
    quantizer is total on the (closed) domain box.
    """

    domain: Box
    eta: np.ndarray
    cells_per_dim: np.ndarray = field(init=False)
    strides: np.ndarray = field(init=False)

    def __post_init__(self):
        eta = _as_vector(self.eta, "eta")
        if eta.shape[0] != self.domain.dims:
            raise ContractError("eta dimension mismatch")
        if np.any(eta <= 0):
            raise ContractError("eta must be positive")
        object.__setattr__(self, "eta", eta)
        ratio = self.domain.width / eta
        # Snap near-integer ratios so fp noise cannot create sliver cells.
        snapped = np.where(np.abs(ratio - np.round(ratio)) < 1e-9,
                           np.round(ratio), np.ceil(ratio))
        cells = np.maximum(snapped.astype(np.int64), 1)
        strides = np.ones_like(cells)
        strides[:-1] = np.cumprod(cells[::-1])[-2::-1]
        cells.setflags(write=False)
        strides.setflags(write=False)
        object.__setattr__(self, "cells_per_dim", cells)
        object.__setattr__(self, "strides", strides)

    @property
    def dims(self) -> int:
        return self.domain.dims

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells_per_dim))

    def coords_of(self, cell: int) -> np.ndarray:
        if cell == SINK or not 0 <= cell < self.n_cells:
            raise ContractError(f"invalid cell id {cell}")
        return np.array(np.unravel_index(cell, self.cells_per_dim), dtype=np.int64)

    def id_of(self, coords) -> int:
        coords = np.asarray(coords, dtype=np.int64)
        if np.any(coords < 0) or np.any(coords >= self.cells_per_dim):
            raise ContractError(f"cell coordinates {coords} out of range")
        return int(coords @ self.strides)


def quantize(grid: Grid, x) -> int:
    """Map a point to the id of the cell containing it, or SINK outside."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (grid.dims,):
        raise ContractError(f"point has shape {x.shape}, expected ({grid.dims},)")
    lo, hi = grid.domain.lower, grid.domain.upper
    if np.any(x < lo) or np.any(x > hi):
        return SINK
    idx = np.floor((x - lo) / grid.eta).astype(np.int64)
    idx = np.minimum(idx, grid.cells_per_dim - 1)  # x == upper lands in the last cell
    return int(idx @ grid.strides)


def quantize_many(grid: Grid, xs: np.ndarray) -> np.ndarray:
    """Vectorized quantize for an (N, dims) array of points."""
    xs = np.asarray(xs, dtype=np.float64)
    lo, hi = grid.domain.lower, grid.domain.upper
    outside = np.any(xs < lo, axis=1) | np.any(xs > hi, axis=1)
    idx = np.floor((xs - lo) / grid.eta).astype(np.int64)
    np.minimum(idx, grid.cells_per_dim - 1, out=idx)
    ids = idx @ grid.strides
    ids[outside] = SINK
    return ids


def cell_center(grid: Grid, cell: int) -> np.ndarray:
    """Geometric center of a (possibly clipped) cell box."""
    lo, hi = cell_box(grid, cell)
    return 0.5 * (lo + hi)


def cell_box(grid: Grid, cell: int) -> tuple[np.ndarray, np.ndarray]:
    """Lower/upper corners of a cell; the last cell per axis is clipped."""
    coords = grid.coords_of(cell)
    lo = grid.domain.lower + coords * grid.eta
    hi = np.minimum(lo + grid.eta, grid.domain.upper)
    return lo, hi


def cell_centers(grid: Grid, cells: np.ndarray | None = None) -> np.ndarray:
    """Centers for an array of cell ids (default: all cells), shape (N, dims)."""
    if cells is None:
        cells = np.arange(grid.n_cells, dtype=np.int64)
    coords = np.stack(np.unravel_index(cells, grid.cells_per_dim), axis=1)
    lo = grid.domain.lower + coords * grid.eta
    hi = np.minimum(lo + grid.eta, grid.domain.upper)
    return 0.5 * (lo + hi)


class CostKind(str, Enum):
    IS = "is"   # input switches
    DR = "dr"   # deviation from reference
    EC = "ec"   # energy consumption
    ID = "id"   # input deviation
    CC = "cc"   # combined, normalized


@dataclass(frozen=True)
class CostSpec:
    """Per-step cost c(u, x, u') selected by `kind`.

    All norms are squared Euclidean. The combined kind averages the DR/EC/ID
    terms, each divided by its maximum over the synthesized controller's
    domain (see arena.compute_normalizers).
    """

    kind: CostKind
    reference: np.ndarray | None = None     # DR/CC
    projection: tuple[int, ...] | None = None  # state coords entering DR
    u0: np.ndarray | None = None            # EC/ID/CC
    max_dr: float | None = None             # CC only
    max_ec: float | None = None
    max_id: float | None = None

    def __post_init__(self):
        kind = CostKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.reference is not None:
            object.__setattr__(self, "reference", _as_vector(self.reference, "reference"))
        if self.u0 is not None:
            object.__setattr__(self, "u0", _as_vector(self.u0, "u0"))
        if self.projection is not None:
            object.__setattr__(self, "projection", tuple(int(i) for i in self.projection))
        if kind in (CostKind.DR, CostKind.CC):
            if self.reference is None or self.projection is None:
                raise ConfigError(f"{kind.value} cost needs reference and projection")
            if len(self.projection) != self.reference.shape[0]:
                raise ConfigError("projection/reference length mismatch")
        if kind in (CostKind.EC, CostKind.CC) and self.u0 is None:
            raise ConfigError(f"{kind.value} cost needs u0")
        if kind is CostKind.CC:
            norm = (self.max_dr, self.max_ec, self.max_id)
            if any(m is None for m in norm):
                raise ConfigError("combined cost needs all three normalizers")
            if any(m <= 0 for m in norm):
                raise ConfigError("combined-cost normalizers must be strictly positive")

    def with_normalizers(self, max_dr: float, max_ec: float, max_id: float) -> "CostSpec":
        return CostSpec(kind=self.kind, reference=self.reference,
                        projection=self.projection, u0=self.u0,
                        max_dr=max_dr, max_ec=max_ec, max_id=max_id)


def _sqdist(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(d @ d)


def cost(spec: CostSpec, u, x, u2) -> float:
    """Step cost c(u, x, u') for the configured kind."""
    u = np.asarray(u, dtype=np.float64)
    u2 = np.asarray(u2, dtype=np.float64)
    k = spec.kind
    if k is CostKind.IS:
        return 0.0 if np.array_equal(u, u2) else 1.0
    if k is CostKind.DR:
        x = np.asarray(x, dtype=np.float64)
        return _sqdist(x[list(spec.projection)], spec.reference)
    if k is CostKind.EC:
        return _sqdist(u, spec.u0)
    if k is CostKind.ID:
        return _sqdist(u, u2)
    # combined
    x = np.asarray(x, dtype=np.float64)
    dr = _sqdist(x[list(spec.projection)], spec.reference)
    ec = _sqdist(u, spec.u0)
    idv = _sqdist(u, u2)
    return (dr / spec.max_dr + ec / spec.max_ec + idv / spec.max_id) / 3.0


def _dr_cell_max(spec: CostSpec, box_lo: np.ndarray, box_hi: np.ndarray) -> float:
    """Max of the squared reference deviation over a cell: farthest corner per axis."""
    total = 0.0
    for j, axis in enumerate(spec.projection):
        r = spec.reference[j]
        total += max((box_lo[axis] - r) ** 2, (box_hi[axis] - r) ** 2)
    return total


def cell_cost(spec: CostSpec, u, cell_box: tuple[np.ndarray, np.ndarray], u2) -> float:
    """Upper bound of c(u, ., u') over a cell box (exact maximum).

    Only the reference-deviation term depends on the state; its maximum is
    attained at the per-axis farthest corner of the cell.
    """
    u = np.asarray(u, dtype=np.float64)
    u2 = np.asarray(u2, dtype=np.float64)
    lo, hi = cell_box
    k = spec.kind
    if k is CostKind.IS:
        return 0.0 if np.array_equal(u, u2) else 1.0
    if k is CostKind.DR:
        return _dr_cell_max(spec, lo, hi)
    if k is CostKind.EC:
        return _sqdist(u, spec.u0)
    if k is CostKind.ID:
        return _sqdist(u, u2)
    dr = _dr_cell_max(spec, lo, hi)
    ec = _sqdist(u, spec.u0)
    idv = _sqdist(u, u2)
    return (dr / spec.max_dr + ec / spec.max_ec + idv / spec.max_id) / 3.0


@dataclass(frozen=True)
class SafeSet:
    """Safety region Z = U x state_box: inputs are unrestricted, selected
    state coordinates are box-constrained."""

    state_box: Box

    def contains(self, u, x) -> bool:
        return self.state_box.contains(x)

    def cell_allowed(self, u, box_lo: np.ndarray, box_hi: np.ndarray) -> bool:
        return bool(np.all(box_lo >= self.state_box.lower)
                    and np.all(box_hi <= self.state_box.upper))


@dataclass(frozen=True)
class ControlSystemSpec:
    """Sampled-data control system with disturbance bound and grid.

    `f(x, u)` must accept states of shape (..., n) and broadcast, returning
    derivatives of the same shape. `jacobian_bound` bounds the Jacobian of f
    entry-wise over the domain: off-diagonal entries are absolute bounds,
    diagonal entries are (signed) upper bounds.
    """

    name: str
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jacobian_bound: np.ndarray
    w: np.ndarray
    inputs: np.ndarray           # (n_inputs, input_dim)
    tau: float
    grid: Grid
    safe_set: SafeSet
    disturbance_map: np.ndarray | None = None  # maps signal space into state space
    signal_bound: np.ndarray | None = None     # amplitude box of the signal space

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        if inputs.shape[0] == 0:
            raise ContractError("inputs must be non-empty")
        if len({tuple(row) for row in inputs}) != inputs.shape[0]:
            raise ContractError("inputs must be duplicate-free")
        inputs.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        w = _as_vector(self.w, "w")
        if np.any(w < 0):
            raise ContractError("w must be non-negative")
        object.__setattr__(self, "w", w)
        L = np.asarray(self.jacobian_bound, dtype=np.float64)
        if L.shape != (self.grid.dims, self.grid.dims):
            raise ContractError("jacobian_bound must be n x n")
        L.setflags(write=False)
        object.__setattr__(self, "jacobian_bound", L)
        if self.tau <= 0:
            raise ContractError("tau must be positive")
        if self.disturbance_map is not None:
            D = np.atleast_2d(np.asarray(self.disturbance_map, dtype=np.float64))
            D.setflags(write=False)
            object.__setattr__(self, "disturbance_map", D)
        if self.signal_bound is not None:
            object.__setattr__(self, "signal_bound",
                               _as_vector(self.signal_bound, "signal_bound"))

    @property
    def n_inputs(self) -> int:
        return self.inputs.shape[0]

    @property
    def dims(self) -> int:
        return self.grid.dims


class Controller:
    """Set-valued controller: cell id -> set of admissible input indices."""

    def __init__(self, enabled: np.ndarray):
        enabled = np.asarray(enabled, dtype=bool)
        if enabled.ndim != 2:
            raise ContractError("enabled must be (n_cells, n_inputs)")
        enabled.setflags(write=False)
        self.enabled = enabled

    @property
    def n_cells(self) -> int:
        return self.enabled.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.enabled.shape[1]

    def inputs_of(self, cell: int) -> np.ndarray:
        if cell == SINK:
            return np.empty(0, dtype=np.int64)
        return np.flatnonzero(self.enabled[cell])

    def domain_cells(self) -> np.ndarray:
        return np.flatnonzero(self.enabled.any(axis=1))

    @property
    def realizable(self) -> bool:
        return bool(self.enabled.any())

    def __eq__(self, other) -> bool:
        return isinstance(other, Controller) and np.array_equal(self.enabled, other.enabled)

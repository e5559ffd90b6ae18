"""Finite over-approximation of the sampled closed-loop dynamics.

The model maps every (cell, input) pair to the set of cells intersecting an
attainable-set over-approximation: a box around the nominal trajectory from
the cell center, whose radius integrates the growth dynamics r' = L r + w.
Pairs whose box leaves the grid domain map to the sink.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .core import SINK, Box, ControlSystemSpec, Grid, cell_centers
from .errors import ConfigError, ContractError, NumericalBlowupError

_MODEL_MAGIC = b"QSMD"
_MODEL_VERSION = 1


def rk4_step(f, x, u, h: float, substeps: int = 1) -> np.ndarray:
    """Classical 4th-order Runge-Kutta over [0, h] with uniform substeps.

    Integrates the undisturbed dynamics under constant input; `x` may carry
    leading batch dimensions if `f` broadcasts over them.
    """
    if h <= 0:
        raise ContractError("step size must be positive")
    if substeps < 1:
        raise ContractError("substeps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    hs = h / substeps
    for _ in range(substeps):
        k1 = f(x, u)
        k2 = f(x + 0.5 * hs * k1, u)
        k3 = f(x + 0.5 * hs * k2, u)
        k4 = f(x + hs * k3, u)
        x = x + (hs / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x)):
        raise NumericalBlowupError(
            f"non-finite state while integrating under input {u}", x=x, u=u)
    return x


def growth_bound(L: np.ndarray, w: np.ndarray, r0, tau: float,
                 substeps: int = 5) -> np.ndarray:
    """Radius r(tau) of the attainable-set bound: integrate r' = L r + w.

    Off-diagonal entries of L must be non-negative (they bound magnitudes);
    the diagonal may be negative, giving contracting radii.
    """
    L = np.asarray(L, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    r0 = np.asarray(r0, dtype=np.float64)
    if np.any(r0 < 0):
        raise ContractError("r0 must be non-negative")
    off = L - np.diag(np.diag(L))
    if np.any(off < 0):
        raise ConfigError("growth matrix must have non-negative off-diagonal entries")
    r = rk4_step(lambda rr, _u: rr @ L.T + w, r0, None, tau, substeps)
    # The exact solution is non-negative; clip RK4 noise.
    return np.maximum(r, 0.0)


def expand_rectangles(strides: np.ndarray, lo: np.ndarray, hi: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Expand coordinate rectangles into sorted linear cell ids.

    lo/hi have shape (P, dims), inclusive. Returns (targets, indptr) where
    targets[indptr[p]:indptr[p+1]] lists rectangle p in ascending id order.
    Rectangles are grouped by span so the expansion is a handful of
    broadcasted additions rather than a per-pair Python loop.
    """
    lo = np.asarray(lo, dtype=np.int64)
    hi = np.asarray(hi, dtype=np.int64)
    P, dims = lo.shape
    spans = hi - lo + 1
    counts = spans.prod(axis=1)
    indptr = np.zeros(P + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    targets = np.empty(indptr[-1], dtype=np.int64)
    base = lo @ strides
    uniq, inverse = np.unique(spans, axis=0, return_inverse=True)
    for g in range(uniq.shape[0]):
        shape = uniq[g]
        mesh = np.meshgrid(*(np.arange(s, dtype=np.int64) for s in shape), indexing="ij")
        offs = np.zeros(int(shape.prod()), dtype=np.int64)
        for d in range(dims):
            offs += mesh[d].ravel() * strides[d]
        rows = np.flatnonzero(inverse == g)
        block = base[rows, None] + offs[None, :]
        pos = indptr[rows, None] + np.arange(offs.size, dtype=np.int64)[None, :]
        targets[pos.ravel()] = block.ravel()
    return targets, indptr


@dataclass
class SymbolicModel:
    """Finite transition system over grid cells and a finite input alphabet.

    Successor sets of non-sink pairs are axis-aligned coordinate rectangles,
    stored as inclusive per-axis index ranges; `successors` expands them in
    ascending (sorted, duplicate-free) order of linearized cell id.
    """

    grid: Grid
    inputs: np.ndarray          # (n_inputs, input_dim)
    tau: float
    sink: np.ndarray            # (n_cells, n_inputs) bool
    succ_lo: np.ndarray         # (n_cells, n_inputs, dims) int32
    succ_hi: np.ndarray         # (n_cells, n_inputs, dims) int32
    initial: np.ndarray | None = None  # default: every cell

    @property
    def n_cells(self) -> int:
        return self.grid.n_cells

    @property
    def n_inputs(self) -> int:
        return self.inputs.shape[0]

    def successor_counts(self) -> np.ndarray:
        """Number of successors per (cell, input); sink pairs count 1."""
        spans = (self.succ_hi.astype(np.int64) - self.succ_lo + 1).prod(axis=2)
        return np.where(self.sink, 1, spans)

    @property
    def n_transitions(self) -> int:
        return int(self.successor_counts().sum())

    def successors(self, cell: int, u: int) -> np.ndarray:
        """Sorted successor cell ids of (cell, u); [SINK] for sink pairs."""
        if not 0 <= cell < self.n_cells:
            raise ContractError(f"invalid cell id {cell}")
        if not 0 <= u < self.n_inputs:
            raise ContractError(f"invalid input index {u}")
        if self.sink[cell, u]:
            return np.array([SINK], dtype=np.int64)
        targets, _ = expand_rectangles(self.grid.strides,
                                       self.succ_lo[None, cell, u],
                                       self.succ_hi[None, cell, u])
        return targets

    def pair_successor_table(self, cells: np.ndarray, input_idx: int
                             ) -> tuple[np.ndarray, np.ndarray]:
        """Concatenated successor lists for (cells x {input_idx}) pairs.

        Sink pairs contribute a single SINK entry. Returns (targets, indptr).
        """
        cells = np.asarray(cells, dtype=np.int64)
        lo = self.succ_lo[cells, input_idx].astype(np.int64)
        hi = self.succ_hi[cells, input_idx].astype(np.int64)
        snk = self.sink[cells, input_idx]
        # Sink pairs become degenerate one-cell rectangles, then overwritten.
        hi = np.where(snk[:, None], lo, hi)
        targets, indptr = expand_rectangles(self.grid.strides, lo, hi)
        targets[indptr[:-1][snk]] = SINK
        return targets, indptr

    def iter_pairs(self) -> Iterator[tuple[int, int]]:
        for c in range(self.n_cells):
            for u in range(self.n_inputs):
                yield c, u

    def transition_map(self) -> dict[tuple[int, int], np.ndarray]:
        """Explicit adjacency map; intended for small models only."""
        return {(c, u): self.successors(c, u) for c, u in self.iter_pairs()}

    def flat_successor_table(self) -> tuple[np.ndarray, np.ndarray]:
        """All successor lists in (cell-major, input-minor) pair order."""
        n, m = self.n_cells, self.n_inputs
        lo = self.succ_lo.reshape(n * m, -1).astype(np.int64)
        hi = self.succ_hi.reshape(n * m, -1).astype(np.int64)
        snk = self.sink.reshape(n * m)
        hi = np.where(snk[:, None], lo, hi)
        targets, indptr = expand_rectangles(self.grid.strides, lo, hi)
        targets[indptr[:-1][snk]] = SINK
        return targets, indptr


def build_symbolic_model(sys: ControlSystemSpec, substeps: int = 5) -> SymbolicModel:
    """Enumerate the over-approximated transition relation of the tau-sampled system.

    For each (cell, input): nominal RK4 trajectory from the cell center plus
    the growth-bound radius with r0 = eta/2 yields a closed box; successors
    are all cells intersecting it, or exactly {SINK} if it leaves the domain.
    """
    grid = sys.grid
    n, dims, m = grid.n_cells, grid.dims, sys.n_inputs
    centers = cell_centers(grid)
    radius = growth_bound(sys.jacobian_bound, sys.w, grid.eta / 2.0, sys.tau, substeps)
    lo_dom, hi_dom = grid.domain.lower, grid.domain.upper

    sink = np.empty((n, m), dtype=bool)
    succ_lo = np.zeros((n, m, dims), dtype=np.int32)
    succ_hi = np.zeros((n, m, dims), dtype=np.int32)
    for j in range(m):
        xi = rk4_step(sys.f, centers, sys.inputs[j], sys.tau, substeps)
        a = xi - radius
        b = xi + radius
        inside = np.all(a >= lo_dom, axis=1) & np.all(b <= hi_dom, axis=1)
        sink[:, j] = ~inside
        lo_idx = np.floor((a - lo_dom) / grid.eta).astype(np.int32)
        hi_idx = np.floor((b - lo_dom) / grid.eta).astype(np.int32)
        np.clip(lo_idx, 0, grid.cells_per_dim - 1, out=lo_idx)
        np.clip(hi_idx, 0, grid.cells_per_dim - 1, out=hi_idx)
        succ_lo[:, j] = np.where(inside[:, None], lo_idx, 0)
        succ_hi[:, j] = np.where(inside[:, None], hi_idx, 0)
    sink.setflags(write=False)
    succ_lo.setflags(write=False)
    succ_hi.setflags(write=False)
    return SymbolicModel(grid=grid, inputs=sys.inputs, tau=sys.tau,
                         sink=sink, succ_lo=succ_lo, succ_hi=succ_hi)


def _write_array(fh, arr: np.ndarray, dtype: str):
    data = np.ascontiguousarray(arr, dtype=dtype)
    fh.write(struct.pack("<q", data.size))
    fh.write(data.tobytes())


def _read_array(fh, dtype: str) -> np.ndarray:
    (size,) = struct.unpack("<q", fh.read(8))
    item = np.dtype(dtype).itemsize
    return np.frombuffer(fh.read(size * item), dtype=dtype).copy()


def save_model(model: SymbolicModel, path) -> None:
    """Persist the transition table (little-endian, delta-encoded lists)."""
    grid = model.grid
    targets, indptr = model.flat_successor_table()
    counts = np.diff(indptr)
    firsts = targets[indptr[:-1]]
    deltas = np.diff(targets)
    keep = np.ones(targets.size, dtype=bool)
    keep[indptr[:-1]] = False  # drop the diff entries that cross pair boundaries
    deltas = deltas[keep[1:]]
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<IIIId", _MODEL_VERSION, grid.dims, model.n_inputs,
                             model.inputs.shape[1], model.tau))
        _write_array(fh, grid.eta, "<f8")
        _write_array(fh, grid.domain.lower, "<f8")
        _write_array(fh, grid.domain.upper, "<f8")
        _write_array(fh, model.inputs.ravel(), "<f8")
        _write_array(fh, counts, "<i8")
        _write_array(fh, firsts, "<i8")
        _write_array(fh, deltas, "<i4")


def load_model(path) -> SymbolicModel:
    with open(path, "rb") as fh:
        if fh.read(4) != _MODEL_MAGIC:
            raise ConfigError(f"{path}: not a model file")
        version, dims, m, input_dim, tau = struct.unpack("<IIIId", fh.read(24))
        if version != _MODEL_VERSION:
            raise ConfigError(f"{path}: unsupported model version {version}")
        eta = _read_array(fh, "<f8")
        lower = _read_array(fh, "<f8")
        upper = _read_array(fh, "<f8")
        inputs = _read_array(fh, "<f8").reshape(m, input_dim)
        counts = _read_array(fh, "<i8")
        firsts = _read_array(fh, "<i8")
        deltas = _read_array(fh, "<i4")
    grid = Grid(domain=Box(lower, upper), eta=eta)
    n = grid.n_cells
    if counts.size != n * m:
        raise ConfigError(f"{path}: transition table size mismatch")
    # Segment sums of deltas give last = first + sum(deltas of that pair).
    dcounts = counts - 1
    dends = np.cumsum(dcounts)
    csum = np.concatenate([[0], np.cumsum(deltas, dtype=np.int64)])
    lasts = firsts + (csum[dends] - csum[dends - dcounts])
    sink_flat = firsts == SINK
    lo_flat = np.zeros((n * m, dims), dtype=np.int32)
    hi_flat = np.zeros((n * m, dims), dtype=np.int32)
    ok = ~sink_flat
    lo_flat[ok] = np.stack(np.unravel_index(firsts[ok], grid.cells_per_dim), axis=1)
    hi_flat[ok] = np.stack(np.unravel_index(lasts[ok], grid.cells_per_dim), axis=1)
    spans = (hi_flat[ok].astype(np.int64) - lo_flat[ok] + 1).prod(axis=1)
    if not np.array_equal(spans, counts[ok]):
        raise ConfigError(f"{path}: a successor list is not a coordinate box")
    return SymbolicModel(grid=grid, inputs=inputs, tau=tau,
                         sink=sink_flat.reshape(n, m),
                         succ_lo=lo_flat.reshape(n, m, dims),
                         succ_hi=hi_flat.reshape(n, m, dims))


def export_model_csv(model: SymbolicModel, path) -> None:
    """Human-readable (cell, input, successor) rows; meant for small models."""
    with open(path, "w", newline="") as fh:
        fh.write("cell,input,successor\n")
        for c, u in model.iter_pairs():
            for s in model.successors(c, u):
                fh.write(f"{c},{u},{int(s)}\n")

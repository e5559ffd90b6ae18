"""Maximal permissive safety controller on the symbolic model.

The fixed point is computed with a counting worklist: a (cell, input) pair
dies as soon as one of its successor cells dies, a cell dies when its last
enabled pair dies. Total work is linear in the transition count.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .abstraction import SymbolicModel, expand_rectangles
from .core import SINK, Controller, SafeSet
from .errors import ConfigError, ContractError

_CTRL_MAGIC = b"QSCT"
_CTRL_VERSION = 1


@dataclass(frozen=True)
class SafetySpecAbstract:
    """Cell-level safety predicate: which (input, cell) pairs lie inside Z."""

    allowed_matrix: np.ndarray  # (n_cells, n_inputs) bool

    def allowed(self, u_idx: int, cell: int) -> bool:
        if cell == SINK:
            return False
        return bool(self.allowed_matrix[cell, u_idx])

    @staticmethod
    def from_safe_set(model: SymbolicModel, safe: SafeSet) -> "SafetySpecAbstract":
        """Allow (u, cell) iff the whole cell box lies inside the safe box."""
        grid = model.grid
        ids = np.arange(grid.n_cells, dtype=np.int64)
        coords = np.stack(np.unravel_index(ids, grid.cells_per_dim), axis=1)
        lo = grid.domain.lower + coords * grid.eta
        hi = np.minimum(lo + grid.eta, grid.domain.upper)
        ok = (np.all(lo >= safe.state_box.lower, axis=1)
              & np.all(hi <= safe.state_box.upper, axis=1))
        mat = np.repeat(ok[:, None], model.n_inputs, axis=1)
        mat.setflags(write=False)
        return SafetySpecAbstract(mat)

    @staticmethod
    def from_callable(model: SymbolicModel, fn) -> "SafetySpecAbstract":
        """Evaluate fn(u_idx, cell_lo, cell_hi) -> bool for every pair."""
        grid = model.grid
        mat = np.empty((grid.n_cells, model.n_inputs), dtype=bool)
        for c in range(grid.n_cells):
            coords = grid.coords_of(c)
            lo = grid.domain.lower + coords * grid.eta
            hi = np.minimum(lo + grid.eta, grid.domain.upper)
            for u in range(model.n_inputs):
                mat[c, u] = bool(fn(u, lo, hi))
        mat.setflags(write=False)
        return SafetySpecAbstract(mat)


def solve_safety(model: SymbolicModel, spec: SafetySpecAbstract) -> Controller:
    """Largest controller whose closed loop stays inside the allowed pairs.

    An empty domain is reported through the returned controller
    (``realizable`` is False), not as an exception.
    """
    n, m = model.n_cells, model.n_inputs
    if spec.allowed_matrix.shape != (n, m):
        raise ContractError("safety spec does not match the model shape")
    enabled0 = spec.allowed_matrix & ~model.sink
    pair_ids = np.flatnonzero(enabled0.ravel())
    if pair_ids.size == 0:
        return Controller(np.zeros((n, m), dtype=bool))
    pair_cell = pair_ids // m

    lo = model.succ_lo.reshape(n * m, -1)[pair_ids].astype(np.int64)
    hi = model.succ_hi.reshape(n * m, -1)[pair_ids].astype(np.int64)
    targets, indptr = expand_rectangles(model.grid.strides, lo, hi)

    # Reverse adjacency: successor cell -> positions of pairs that use it.
    order = np.argsort(targets, kind="stable")
    rev_pairs = np.repeat(np.arange(pair_ids.size, dtype=np.int64),
                          np.diff(indptr))[order]
    rev_counts = np.bincount(targets, minlength=n)
    rev_indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(rev_counts, out=rev_indptr[1:])

    alive = np.ones(pair_ids.size, dtype=bool)
    cell_count = np.bincount(pair_cell, minlength=n)
    cell_dead = cell_count == 0
    queue = list(np.flatnonzero(cell_dead))
    while queue:
        c = queue.pop()
        ps = rev_pairs[rev_indptr[c]:rev_indptr[c + 1]]
        newly = ps[alive[ps]]
        if newly.size == 0:
            continue
        alive[newly] = False
        cells = pair_cell[newly]
        np.subtract.at(cell_count, cells, 1)
        for cc in np.unique(cells):
            if cell_count[cc] == 0 and not cell_dead[cc]:
                cell_dead[cc] = True
                queue.append(int(cc))

    final = np.zeros(n * m, dtype=bool)
    final[pair_ids[alive]] = True
    return Controller(final.reshape(n, m))


def save_controller(controller: Controller, path) -> None:
    """Bitset file: header plus packed (cells x inputs) booleans."""
    bits = np.packbits(controller.enabled.ravel())
    with open(path, "wb") as fh:
        fh.write(_CTRL_MAGIC)
        fh.write(struct.pack("<IQI", _CTRL_VERSION,
                             controller.n_cells, controller.n_inputs))
        fh.write(bits.tobytes())


def load_controller(path) -> Controller:
    with open(path, "rb") as fh:
        if fh.read(4) != _CTRL_MAGIC:
            raise ConfigError(f"{path}: not a controller file")
        version, n, m = struct.unpack("<IQI", fh.read(16))
        if version != _CTRL_VERSION:
            raise ConfigError(f"{path}: unsupported controller version {version}")
        bits = np.frombuffer(fh.read(), dtype=np.uint8)
    flat = np.unpackbits(bits, count=n * m).astype(bool)
    return Controller(flat.reshape(n, m))


def export_controller_csv(controller: Controller, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("cell,input\n")
        for c in controller.domain_cells():
            for u in controller.inputs_of(int(c)):
                fh.write(f"{c},{u}\n")

"""Bipartite weighted game arena built from a safety controller.

Min nodes are (cell, last input) pairs over the controller domain, max nodes
are the controller's enabled (cell, input) pairs. Min edges switch the input
and carry the cell-level cost upper bound in integer micro-units; max edges
resolve the abstract nondeterminism and cost nothing.
"""
from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .abstraction import SymbolicModel, expand_rectangles
from .core import MICRO, Controller, CostKind, CostSpec, Grid, cell_centers
from .errors import ConfigError, ContractError, UnrealizableError

_ARENA_MAGIC = b"QSAR"
_WEIGHTS_MAGIC = b"QSWT"
_FORMAT_VERSION = 1


@dataclass
class Arena:
    """CSR-encoded bipartite game graph with integer micro-unit min weights."""

    n_inputs: int
    vmin_pairs: np.ndarray   # (n_min, 2) int64: (cell, input)
    vmax_pairs: np.ndarray   # (n_max, 2) int64
    min_indptr: np.ndarray   # (n_min+1,) int64
    min_targets: np.ndarray  # vmax ids, ascending per node
    min_weights: np.ndarray  # int64 micro-units, aligned with min_targets
    max_indptr: np.ndarray   # (n_max+1,) int64
    max_targets: np.ndarray  # vmin ids, ascending per node

    @property
    def n_min(self) -> int:
        return self.vmin_pairs.shape[0]

    @property
    def n_max(self) -> int:
        return self.vmax_pairs.shape[0]

    def validate(self) -> None:
        if np.any(np.diff(self.min_indptr) < 1) or np.any(np.diff(self.max_indptr) < 1):
            raise ContractError("arena is not total: a node has no outgoing edge")
        if self.min_targets.size and (self.min_targets.min() < 0
                                      or self.min_targets.max() >= self.n_max):
            raise ContractError("min edge target out of range")
        if self.max_targets.size and (self.max_targets.min() < 0
                                      or self.max_targets.max() >= self.n_min):
            raise ContractError("max edge target out of range")
        if np.any(self.min_weights < 0):
            raise ContractError("negative edge weight")

    def vmin_id(self, dom_rank: np.ndarray, cell: int, u: int) -> int:
        r = int(dom_rank[cell])
        if r < 0:
            raise ContractError(f"cell {cell} outside the controller domain")
        return r * self.n_inputs + u

    def topology_bytes(self) -> bytes:
        h = hashlib.sha256()
        for arr in (self.vmin_pairs, self.vmax_pairs, self.min_indptr,
                    self.min_targets, self.max_indptr, self.max_targets):
            h.update(np.ascontiguousarray(arr, dtype="<i8").tobytes())
        h.update(struct.pack("<I", self.n_inputs))
        return h.digest()


def dr_cell_max_many(grid: Grid, cells: np.ndarray, reference: np.ndarray,
                     projection: tuple[int, ...]) -> np.ndarray:
    """Per-cell maximum squared reference deviation (farthest corner)."""
    coords = np.stack(np.unravel_index(cells, grid.cells_per_dim), axis=1)
    lo = grid.domain.lower + coords * grid.eta
    hi = np.minimum(lo + grid.eta, grid.domain.upper)
    total = np.zeros(len(cells), dtype=np.float64)
    for j, axis in enumerate(projection):
        r = reference[j]
        total += np.maximum((lo[:, axis] - r) ** 2, (hi[:, axis] - r) ** 2)
    return total


def compute_normalizers(model: SymbolicModel, controller: Controller, *,
                        reference: np.ndarray, projection: tuple[int, ...],
                        u0: np.ndarray) -> tuple[float, float, float]:
    """Maxima of the DR/EC/ID cell costs over the controller's domain.

    The previous input ranges over the whole alphabet, the next input over
    the inputs enabled somewhere. Zero maxima are replaced by 1 (reported as
    a warning) so the combined cost stays defined.
    """
    dom = controller.domain_cells()
    if dom.size == 0:
        raise UnrealizableError("cannot normalize costs: empty controller domain")
    U = model.inputs
    max_dr = float(dr_cell_max_many(model.grid, dom, np.asarray(reference, float),
                                    tuple(projection)).max())
    max_ec = float((((U - np.asarray(u0, float)) ** 2).sum(axis=1)).max())
    enabled_inputs = np.flatnonzero(controller.enabled[dom].any(axis=0))
    diff = U[:, None, :] - U[None, enabled_inputs, :]
    max_id = float((diff ** 2).sum(axis=2).max())
    out = []
    for name, val in (("max_DR", max_dr), ("max_EC", max_ec), ("max_ID", max_id)):
        if val == 0.0:
            warnings.warn(f"{name} is zero over the controller domain; using 1")
            val = 1.0
        out.append(val)
    return tuple(out)


def _edge_costs(spec: CostSpec, grid: Grid, dom_cells: np.ndarray,
                inputs: np.ndarray, rank_e: np.ndarray, u_e: np.ndarray,
                u2_e: np.ndarray) -> np.ndarray:
    """Vectorized cell-cost upper bounds for min edges."""
    kind = spec.kind
    m = inputs.shape[0]
    if kind in (CostKind.DR, CostKind.CC):
        dr_cell = dr_cell_max_many(grid, dom_cells, spec.reference, spec.projection)
    if kind in (CostKind.EC, CostKind.CC):
        ec_u = ((inputs - spec.u0) ** 2).sum(axis=1)
    if kind in (CostKind.ID, CostKind.CC):
        d = inputs[:, None, :] - inputs[None, :, :]
        id_uu = (d ** 2).sum(axis=2)
    if kind is CostKind.IS:
        return (u_e != u2_e).astype(np.float64)
    if kind is CostKind.DR:
        return dr_cell[rank_e]
    if kind is CostKind.EC:
        return ec_u[u_e]
    if kind is CostKind.ID:
        return id_uu[u_e, u2_e]
    return (dr_cell[rank_e] / spec.max_dr + ec_u[u_e] / spec.max_ec
            + id_uu[u_e, u2_e] / spec.max_id) / 3.0


def build_arena(model: SymbolicModel, controller: Controller,
                cost_spec: CostSpec) -> Arena:
    """Assemble the game graph; only the weights depend on the cost spec."""
    if controller.enabled.shape != (model.n_cells, model.n_inputs):
        raise ContractError("controller does not match the model shape")
    dom = controller.domain_cells()
    if dom.size == 0:
        raise UnrealizableError("cannot build an arena from an empty controller")
    m = model.n_inputs
    grid = model.grid
    dom_rank = np.full(model.n_cells, -1, dtype=np.int64)
    dom_rank[dom] = np.arange(dom.size)

    en = controller.enabled[dom]                      # (D, m)
    if np.any(model.sink[dom] & en):
        raise ContractError("controller enables a sink pair")
    k_counts = en.sum(axis=1).astype(np.int64)        # inputs per domain cell
    vmax_rank, vmax_u = np.nonzero(en)                # sorted by (cell, input)
    n_max = vmax_rank.size
    vmax_base = np.zeros(dom.size + 1, dtype=np.int64)
    np.cumsum(k_counts, out=vmax_base[1:])

    n_min = dom.size * m
    vmin_pairs = np.stack([np.repeat(dom, m),
                           np.tile(np.arange(m, dtype=np.int64), dom.size)], axis=1)
    vmax_pairs = np.stack([dom[vmax_rank], vmax_u], axis=1)

    # Min edges: (x, u) -> (x, u') for every enabled u', ascending in u'.
    counts_per_vmin = np.repeat(k_counts, m)
    min_indptr = np.zeros(n_min + 1, dtype=np.int64)
    np.cumsum(counts_per_vmin, out=min_indptr[1:])
    E = int(min_indptr[-1])
    pos = np.arange(E, dtype=np.int64) - np.repeat(min_indptr[:-1], counts_per_vmin)
    rank_of_vmin = np.arange(n_min, dtype=np.int64) // m
    u_of_vmin = np.arange(n_min, dtype=np.int64) % m
    rank_e = np.repeat(rank_of_vmin, counts_per_vmin)
    min_targets = vmax_base[rank_e] + pos
    u_e = np.repeat(u_of_vmin, counts_per_vmin)
    u2_e = vmax_u[min_targets]
    costs = _edge_costs(cost_spec, grid, dom, model.inputs, rank_e, u_e, u2_e)
    min_weights = np.floor(costs * MICRO + 0.5).astype(np.int64)  # round half up

    # Max edges: (x, u') -> (x', u') over the abstract successors.
    lo = model.succ_lo[dom[vmax_rank], vmax_u].astype(np.int64)
    hi = model.succ_hi[dom[vmax_rank], vmax_u].astype(np.int64)
    succ_cells, max_indptr = expand_rectangles(grid.strides, lo, hi)
    succ_ranks = dom_rank[succ_cells]
    if np.any(succ_ranks < 0):
        raise ContractError("controller is not closed: successor outside the domain")
    u2_per_edge = np.repeat(vmax_u, np.diff(max_indptr))
    max_targets = succ_ranks * m + u2_per_edge

    arena = Arena(n_inputs=m, vmin_pairs=vmin_pairs, vmax_pairs=vmax_pairs,
                  min_indptr=min_indptr, min_targets=min_targets,
                  min_weights=min_weights, max_indptr=max_indptr,
                  max_targets=max_targets)
    arena.validate()
    return arena


def arena_from_lists(min_edges, max_edges, n_inputs: int = 1) -> Arena:
    """Construct an arena from explicit adjacency lists (testing, toys).

    min_edges[i] is a list of (target vmax id, integer weight); max_edges[j]
    a list of target vmin ids. Edge lists are sorted by target.
    """
    n_min, n_max = len(min_edges), len(max_edges)
    min_indptr = np.zeros(n_min + 1, dtype=np.int64)
    min_indptr[1:] = np.cumsum([len(e) for e in min_edges])
    mt, mw = [], []
    for edges in min_edges:
        for t, w in sorted(edges):
            mt.append(t)
            mw.append(w)
    max_indptr = np.zeros(n_max + 1, dtype=np.int64)
    max_indptr[1:] = np.cumsum([len(e) for e in max_edges])
    xt = [t for edges in max_edges for t in sorted(edges)]
    arena = Arena(
        n_inputs=n_inputs,
        vmin_pairs=np.stack([np.arange(n_min, dtype=np.int64),
                             np.zeros(n_min, dtype=np.int64)], axis=1),
        vmax_pairs=np.stack([np.arange(n_max, dtype=np.int64),
                             np.zeros(n_max, dtype=np.int64)], axis=1),
        min_indptr=min_indptr,
        min_targets=np.asarray(mt, dtype=np.int64),
        min_weights=np.asarray(mw, dtype=np.int64),
        max_indptr=max_indptr,
        max_targets=np.asarray(xt, dtype=np.int64),
    )
    arena.validate()
    return arena


def cost_spec_key(spec: CostSpec) -> str:
    """Stable content hash of a cost spec, used to key weight files."""
    h = hashlib.sha256()
    h.update(spec.kind.value.encode())
    for part in (spec.reference, spec.u0):
        h.update(b"|")
        if part is not None:
            h.update(np.ascontiguousarray(part, dtype="<f8").tobytes())
    h.update(repr(spec.projection).encode())
    for v in (spec.max_dr, spec.max_ec, spec.max_id):
        h.update(struct.pack("<d", -1.0 if v is None else v))
    return h.hexdigest()[:16]


def arena_key(arena: Arena) -> str:
    return arena.topology_bytes().hex()[:16]


def save_arena(arena: Arena, path) -> None:
    """Topology only; weights are stored separately per cost spec."""
    with open(path, "wb") as fh:
        fh.write(_ARENA_MAGIC)
        fh.write(struct.pack("<IIqq", _FORMAT_VERSION, arena.n_inputs,
                             arena.n_min, arena.n_max))
        for arr in (arena.vmin_pairs.ravel(), arena.vmax_pairs.ravel(),
                    arena.min_indptr, arena.min_targets,
                    arena.max_indptr, arena.max_targets):
            data = np.ascontiguousarray(arr, dtype="<i8")
            fh.write(struct.pack("<q", data.size))
            fh.write(data.tobytes())


def load_arena(path, weights_path=None) -> Arena:
    def rd(fh):
        (size,) = struct.unpack("<q", fh.read(8))
        return np.frombuffer(fh.read(size * 8), dtype="<i8").copy()

    with open(path, "rb") as fh:
        if fh.read(4) != _ARENA_MAGIC:
            raise ConfigError(f"{path}: not an arena file")
        version, m, n_min, n_max = struct.unpack("<IIqq", fh.read(24))
        if version != _FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported arena version {version}")
        vmin_pairs = rd(fh).reshape(n_min, 2)
        vmax_pairs = rd(fh).reshape(n_max, 2)
        min_indptr = rd(fh)
        min_targets = rd(fh)
        max_indptr = rd(fh)
        max_targets = rd(fh)
    weights = np.zeros(min_targets.size, dtype=np.int64)
    arena = Arena(n_inputs=m, vmin_pairs=vmin_pairs, vmax_pairs=vmax_pairs,
                  min_indptr=min_indptr, min_targets=min_targets,
                  min_weights=weights, max_indptr=max_indptr,
                  max_targets=max_targets)
    if weights_path is not None:
        arena.min_weights = load_weights(arena, weights_path)
    arena.validate()
    return arena


def save_weights(arena: Arena, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", _FORMAT_VERSION))
        fh.write(arena.topology_bytes())
        data = np.ascontiguousarray(arena.min_weights, dtype="<i8")
        fh.write(struct.pack("<q", data.size))
        fh.write(data.tobytes())


def load_weights(arena: Arena, path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != _WEIGHTS_MAGIC:
            raise ConfigError(f"{path}: not a weights file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported weights version {version}")
        digest = fh.read(32)
        if digest != arena.topology_bytes():
            raise ConfigError(f"{path}: weights were built for a different arena")
        (size,) = struct.unpack("<q", fh.read(8))
        if size != arena.min_targets.size:
            raise ConfigError(f"{path}: weight count mismatch")
        return np.frombuffer(fh.read(size * 8), dtype="<i8").copy()

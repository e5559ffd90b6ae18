"""Game solvers over bipartite arenas.

Discounted games are solved by Jacobi value iteration on the per-round
fixed-point equations (one round = an input choice followed by an abstract
successor choice, so the discount exponent counts controller steps).

Mean-payoff games are solved exactly: a discounted solve at a discount close
to one proposes a memoryless strategy pair, the induced lasso cycle means are
evaluated in exact integer arithmetic, and the proposal is certified optimal
with per-value-level potential functions (no positive cycle above the level
when the minimizer is fixed, none below when the maximizer is fixed). On
failure the discount escalates toward one, which must eventually succeed
because optimal discounted strategies stabilize near one.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .arena import Arena
from .core import MICRO
from .errors import ConfigError, ContractError

_VALUES_MAGIC = b"QSVS"
_VALUES_VERSION = 1

MEAN_PAYOFF = Fraction(1)


@dataclass
class Strategy:
    """Memoryless strategies for both players (edge-resolved)."""

    sigma_min: np.ndarray       # per vmin node: chosen vmax id
    sigma_max: np.ndarray       # per vmax node: chosen vmin id
    sigma_min_edge: np.ndarray  # index into arena.min_targets
    sigma_max_edge: np.ndarray  # index into arena.max_targets


@dataclass
class ValueTable:
    """Per-min-node game values; max-node values are derived on demand.

    Discounted tables store floats (in micro-units) with a residual bound;
    mean-payoff tables store exact rationals as (num, den) pairs.
    """

    lam: Fraction                       # discount; Fraction(1) marks mean payoff
    values: np.ndarray | None = None    # float64 micro-units (discounted)
    nums: np.ndarray | None = None      # int64 (mean payoff)
    dens: np.ndarray | None = None
    residual_bound: float = 0.0
    residuals: list = field(default_factory=list)

    @property
    def is_mean_payoff(self) -> bool:
        return self.lam == 1

    def as_floats(self) -> np.ndarray:
        """Values in micro-units as floats."""
        if self.is_mean_payoff:
            return self.nums / self.dens
        return self.values

    def fraction(self, node: int) -> Fraction:
        if not self.is_mean_payoff:
            raise ContractError("exact values exist only for mean-payoff tables")
        return Fraction(int(self.nums[node]), int(self.dens[node]))

    def max_fraction(self) -> Fraction:
        """Exact maximum over min nodes (the guarantee bound)."""
        if not self.is_mean_payoff:
            raise ContractError("exact values exist only for mean-payoff tables")
        uniq = {(int(n), int(d)) for n, d in zip(self.nums, self.dens)}
        return max(Fraction(n, d) for n, d in uniq)


def _first_best_edge(per_edge: np.ndarray, seg_starts: np.ndarray,
                     seg_best: np.ndarray, seg_of_edge: np.ndarray) -> np.ndarray:
    """First edge index per segment attaining the segment optimum."""
    E = per_edge.size
    pos = np.where(per_edge == seg_best[seg_of_edge], np.arange(E), E)
    return np.minimum.reduceat(pos, seg_starts)


def _segment_ids(indptr: np.ndarray) -> np.ndarray:
    return np.repeat(np.arange(indptr.size - 1), np.diff(indptr))


def solve_dpg(arena: Arena, lam, tol: float = 1e-9, v0: np.ndarray | None = None,
              max_sweeps: int = 2_000_000) -> tuple[ValueTable, Strategy]:
    """Discounted game by value iteration, in the units of the arena weights.

    Stops when the remaining distance to the fixed point (residual scaled by
    lam/(1-lam)) is below `tol`. Ties in the extracted strategies break
    toward the lowest successor node index.
    """
    lam_f = Fraction(lam)
    if not 0 <= lam_f < 1:
        raise ContractError("discount must lie in [0, 1); use solve_mpg at 1")
    arena.validate()
    lam = float(lam_f)
    w = arena.min_weights.astype(np.float64)
    base = (1.0 - lam) * w
    min_seg = _segment_ids(arena.min_indptr)
    max_starts = arena.max_indptr[:-1]
    min_starts = arena.min_indptr[:-1]

    v = np.zeros(arena.n_min) if v0 is None else v0.astype(np.float64).copy()
    residuals: list[float] = []
    for _ in range(max_sweeps):
        vmax = np.maximum.reduceat(v[arena.max_targets], max_starts)
        edge_vals = base + lam * vmax[arena.min_targets]
        v_new = np.minimum.reduceat(edge_vals, min_starts)
        delta = float(np.max(np.abs(v_new - v)))
        residuals.append(delta)
        v = v_new
        if delta * lam <= tol * (1.0 - lam):
            break
    else:
        raise ConfigError("value iteration did not converge within the sweep budget")

    vmax = np.maximum.reduceat(v[arena.max_targets], max_starts)
    edge_vals = base + lam * vmax[arena.min_targets]
    min_best = np.minimum.reduceat(edge_vals, min_starts)
    e_min = _first_best_edge(edge_vals, min_starts, min_best, min_seg)
    max_seg = _segment_ids(arena.max_indptr)
    tgt_vals = v[arena.max_targets]
    e_max = _first_best_edge(tgt_vals, max_starts, vmax, max_seg)

    strat = Strategy(sigma_min=arena.min_targets[e_min],
                     sigma_max=arena.max_targets[e_max],
                     sigma_min_edge=e_min, sigma_max_edge=e_max)
    table = ValueTable(lam=lam_f, values=v,
                       residual_bound=residuals[-1] * lam / (1.0 - lam) if lam else 0.0,
                       residuals=residuals)
    return table, strat


def _pair_lasso_values(arena: Arena, strat: Strategy) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-node cycle means of the play induced by a strategy pair.

    Nodes are globally indexed: min nodes first, then max nodes. The value of
    a node is the per-round mean weight of the cycle its lasso reaches,
    reduced to lowest terms.
    """
    n_min, n_max = arena.n_min, arena.n_max
    N = n_min + n_max
    succ = np.empty(N, dtype=np.int64)
    succ[:n_min] = n_min + strat.sigma_min
    succ[n_min:] = strat.sigma_max
    w_out = np.zeros(N, dtype=np.int64)
    w_out[:n_min] = arena.min_weights[strat.sigma_min_edge]

    nums = np.zeros(N, dtype=np.int64)
    dens = np.ones(N, dtype=np.int64)
    state = np.zeros(N, dtype=np.int8)  # 0 unseen, 1 on current walk, 2 resolved
    for start in range(N):
        if state[start]:
            continue
        path: list[int] = []
        pos: dict[int, int] = {}
        node = start
        while state[node] == 0:
            state[node] = 1
            pos[node] = len(path)
            path.append(node)
            node = int(succ[node])
        if state[node] == 1:
            # new cycle: path[pos[node]:]
            cyc = path[pos[node]:]
            total = sum(int(w_out[c]) for c in cyc)
            rounds = sum(1 for c in cyc if c < n_min)
            g = math.gcd(total, rounds)
            cn, cd = total // g, rounds // g
            for c in cyc:
                nums[c], dens[c] = cn, cd
                state[c] = 2
            tail = path[:pos[node]]
        else:
            cn, cd = int(nums[node]), int(dens[node])
            tail = path
        for c in tail:
            nums[c], dens[c] = cn, cd
            state[c] = 2
    return nums, dens


def _frac_cmp_all(an, ad, bn, bd, op: str) -> bool:
    """Vectorized exact fraction comparison a (op) b, overflow-safe."""
    an = np.asarray(an); ad = np.asarray(ad)
    bn = np.asarray(bn); bd = np.asarray(bd)
    hi = max(int(np.abs(an).max(initial=0)), 1) * max(int(bd.max(initial=1)), 1)
    hi2 = max(int(np.abs(bn).max(initial=0)), 1) * max(int(ad.max(initial=1)), 1)
    if max(hi, hi2) < 2 ** 62:
        lhs = an * bd
        rhs = bn * ad
    else:  # rare: fall back to exact big-int objects
        lhs = an.astype(object) * bd.astype(object)
        rhs = bn.astype(object) * ad.astype(object)
    return bool(np.all(lhs >= rhs)) if op == "ge" else bool(np.all(lhs <= rhs))


def _no_bad_cycle(src: np.ndarray, dst: np.ndarray, wshift: np.ndarray,
                  maximize: bool) -> bool:
    """True iff the subgraph has no positive (maximize) / negative cycle.

    Bellman-Ford style potential sweeps; stabilization within |V| sweeps is
    equivalent to the absence of a bad cycle.
    """
    if src.size == 0:
        return True
    nodes, idx = np.unique(np.concatenate([src, dst]), return_inverse=True)
    K = nodes.size
    s = idx[:src.size]
    d = idx[src.size:]
    order = np.argsort(s, kind="stable")
    s, d, w = s[order], d[order], wshift[order]
    counts = np.bincount(s, minlength=K)
    has_out = counts > 0
    starts = np.zeros(K, dtype=np.int64)
    starts[1:] = np.cumsum(counts)[:-1]
    seg_starts = starts[has_out]
    out_nodes = np.flatnonzero(has_out)
    phi = np.zeros(K, dtype=np.int64)
    reduce_fn = np.maximum.reduceat if maximize else np.minimum.reduceat
    for _ in range(K + 1):
        cand = w + phi[d]
        upd = reduce_fn(cand, seg_starts)
        new_phi = phi.copy()
        if maximize:
            np.maximum(phi[out_nodes], upd, out=upd)
        else:
            np.minimum(phi[out_nodes], upd, out=upd)
        new_phi[out_nodes] = upd
        if np.array_equal(new_phi, phi):
            return True
        if np.abs(new_phi).max() > 4 * 10 ** 18:
            return False
        phi = new_phi
    return False


def _certify_side(arena: Arena, nums: np.ndarray, dens: np.ndarray,
                  src: np.ndarray, dst: np.ndarray, w: np.ndarray,
                  side_max_free: bool) -> bool:
    """Certify optimality of one fixed strategy against a free opponent.

    With the minimizer fixed (max free) values must not increase along any
    edge and no value level may contain a cycle with mean above the level;
    dually with the maximizer fixed.
    """
    n_min = arena.n_min
    if side_max_free:
        if not _frac_cmp_all(nums[src], dens[src], nums[dst], dens[dst], "ge"):
            return False
    else:
        if not _frac_cmp_all(nums[src], dens[src], nums[dst], dens[dst], "le"):
            return False

    pairs = np.stack([nums, dens], axis=1)
    _, level_id = np.unique(pairs, axis=0, return_inverse=True)

    inlevel = level_id[src] == level_id[dst]
    s, d, ww = src[inlevel], dst[inlevel], w[inlevel]
    lev = level_id[s]
    order = np.argsort(lev, kind="stable")
    s, d, ww, lev = s[order], d[order], ww[order], lev[order]
    boundaries = np.flatnonzero(np.diff(lev)) + 1
    blocks = np.split(np.arange(s.size), boundaries)
    for block in blocks:
        if block.size == 0:
            continue
        node = s[block[0]]
        p, q = int(nums[node]), int(dens[node])
        wshift = q * ww[block] - p * (s[block] < n_min)
        if not _no_bad_cycle(s[block], d[block], wshift, maximize=side_max_free):
            return False
    return True


def _certify_pair(arena: Arena, strat: Strategy,
                  nums: np.ndarray, dens: np.ndarray) -> bool:
    n_min, n_max = arena.n_min, arena.n_max
    # Minimizer fixed, maximizer free.
    src_a = np.concatenate([np.arange(n_min, dtype=np.int64),
                            n_min + _segment_ids(arena.max_indptr)])
    dst_a = np.concatenate([n_min + strat.sigma_min, arena.max_targets])
    w_a = np.concatenate([arena.min_weights[strat.sigma_min_edge],
                          np.zeros(arena.max_targets.size, dtype=np.int64)])
    if not _certify_side(arena, nums, dens, src_a, dst_a, w_a, side_max_free=True):
        return False
    # Maximizer fixed, minimizer free.
    src_b = np.concatenate([_segment_ids(arena.min_indptr),
                            n_min + np.arange(n_max, dtype=np.int64)])
    dst_b = np.concatenate([n_min + arena.min_targets, strat.sigma_max])
    w_b = np.concatenate([arena.min_weights,
                          np.zeros(n_max, dtype=np.int64)])
    return _certify_side(arena, nums, dens, src_b, dst_b, w_b, side_max_free=False)


def solve_mpg(arena: Arena, tol: float = 1e-9,
              start_discount: Fraction = Fraction(7, 8),
              max_escalations: int = 6) -> tuple[ValueTable, Strategy]:
    """Exact mean-payoff values (per round) and optimal strategies."""
    arena.validate()
    lam = Fraction(start_discount)
    v_warm: np.ndarray | None = None
    for _ in range(max_escalations + 1):
        table, strat = solve_dpg(arena, lam, tol=tol, v0=v_warm)
        v_warm = table.values
        nums, dens = _pair_lasso_values(arena, strat)
        if _certify_pair(arena, strat, nums, dens):
            vt = ValueTable(lam=MEAN_PAYOFF, nums=nums[:arena.n_min].copy(),
                            dens=dens[:arena.n_min].copy())
            return vt, strat
        lam = (1 + lam) / 2
    raise ConfigError(
        "mean-payoff certification kept failing while escalating the discount; "
        "the arena may have pathological near-ties")


@dataclass
class LimitCheckReport:
    lambdas: list
    gaps: list                 # per lambda: per-node |V_lam - mpg| (micro-units)
    max_gaps: list
    monotone: bool
    mpg_values: np.ndarray


def dpg_mpg_limit_check(arena: Arena, lambdas, tol: float = 1e-9,
                        slack: float = 1e-6) -> LimitCheckReport:
    """Gap between discounted and mean-payoff values as the discount grows.

    The per-node gap sequence must be non-increasing (within `slack`
    micro-units) for increasing discounts.
    """
    lams = [Fraction(l) for l in lambdas]
    if any(lams[i] >= lams[i + 1] for i in range(len(lams) - 1)):
        raise ContractError("discount list must be strictly increasing")
    mpg_table, _ = solve_mpg(arena, tol=tol)
    nu = mpg_table.nums / mpg_table.dens
    gaps = []
    v_warm = None
    for lam in lams:
        table, _ = solve_dpg(arena, lam, tol=tol, v0=v_warm)
        v_warm = table.values
        gaps.append(np.abs(table.values - nu))
    monotone = all(bool(np.all(gaps[i + 1] <= gaps[i] + slack))
                   for i in range(len(gaps) - 1))
    return LimitCheckReport(lambdas=lams, gaps=gaps,
                            max_gaps=[float(g.max()) for g in gaps],
                            monotone=monotone, mpg_values=nu)


def save_values(table: ValueTable, strat: Strategy, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_VALUES_MAGIC)
        mp = 1 if table.is_mean_payoff else 0
        fh.write(struct.pack("<IIqqd", _VALUES_VERSION, mp,
                             table.lam.numerator, table.lam.denominator,
                             table.residual_bound))
        def wr(arr, dtype):
            data = np.ascontiguousarray(arr, dtype=dtype)
            fh.write(struct.pack("<q", data.size))
            fh.write(data.tobytes())
        if mp:
            wr(table.nums, "<i8")
            wr(table.dens, "<i8")
        else:
            wr(table.values, "<f8")
        wr(strat.sigma_min, "<i8")
        wr(strat.sigma_max, "<i8")
        wr(strat.sigma_min_edge, "<i8")
        wr(strat.sigma_max_edge, "<i8")


def load_values(path) -> tuple[ValueTable, Strategy]:
    with open(path, "rb") as fh:
        if fh.read(4) != _VALUES_MAGIC:
            raise ConfigError(f"{path}: not a value/strategy file")
        version, mp, lnum, lden, residual = struct.unpack("<IIqqd", fh.read(32))
        if version != _VALUES_VERSION:
            raise ConfigError(f"{path}: unsupported version {version}")
        def rd(dtype):
            (size,) = struct.unpack("<q", fh.read(8))
            return np.frombuffer(fh.read(size * np.dtype(dtype).itemsize),
                                 dtype=dtype).copy()
        if mp:
            table = ValueTable(lam=MEAN_PAYOFF, nums=rd("<i8"), dens=rd("<i8"),
                               residual_bound=residual)
        else:
            table = ValueTable(lam=Fraction(lnum, lden), values=rd("<f8"),
                               residual_bound=residual)
        strat = Strategy(sigma_min=rd("<i8"), sigma_max=rd("<i8"),
                         sigma_min_edge=rd("<i8"), sigma_max_edge=rd("<i8"))
    return table, strat


def export_values_csv(table: ValueTable, strat: Strategy, path) -> None:
    """(node, value, chosen successor) rows for the min player."""
    with open(path, "w", newline="") as fh:
        fh.write("node,value,successor\n")
        if table.is_mean_payoff:
            for i in range(strat.sigma_min.size):
                fh.write(f"{i},{int(table.nums[i])}/{int(table.dens[i])},"
                         f"{int(strat.sigma_min[i])}\n")
        else:
            for i in range(strat.sigma_min.size):
                fh.write(f"{i},{table.values[i]!r},{int(strat.sigma_min[i])}\n")

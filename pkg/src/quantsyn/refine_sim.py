"""Controller refinement and closed-loop evaluation.

The game strategy is turned into a lookup table over (cell, previous input);
the sample-and-hold loop quantizes the state, applies the looked-up input and
integrates the disturbed dynamics over one sampling period. Disturbance
signals are evaluated at integrator sub-step midpoints, so they are not held
constant over a sampling period.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .arena import Arena
from .core import (SINK, Controller, ControlSystemSpec, CostKind, CostSpec,
                   quantize_many)
from .errors import ContractError, SafetyViolationError
from .games import Strategy


@dataclass(frozen=True)
class Implementation:
    """Deterministic controller: (cell, previous input index) -> input index.

    Entries outside the safety controller's domain are -1; feeding such a
    cell into the loop is a safety violation.
    """

    lookup: np.ndarray  # (n_cells, n_inputs) int16

    @property
    def n_inputs(self) -> int:
        return self.lookup.shape[1]

    def __call__(self, cell: int, u_idx: int) -> int:
        if cell == SINK:
            raise ContractError("cell outside the grid domain")
        out = int(self.lookup[cell, u_idx])
        if out < 0:
            raise ContractError(f"cell {cell} outside the controller domain")
        return out


def refine(strategy: Strategy, arena: Arena, controller: Controller) -> Implementation:
    """Project the min player's choices onto the input alphabet."""
    if strategy.sigma_min.size != arena.n_min:
        raise ContractError("strategy does not match the arena")
    n_cells, m = controller.enabled.shape
    if m != arena.n_inputs:
        raise ContractError("controller does not match the arena input count")
    lookup = np.full((n_cells, m), -1, dtype=np.int16)
    cells = arena.vmin_pairs[:, 0]
    prev_u = arena.vmin_pairs[:, 1]
    chosen = arena.vmax_pairs[strategy.sigma_min]
    if np.any(chosen[:, 0] != cells):
        raise ContractError("strategy leaves the current cell on a min move")
    if not controller.enabled[chosen[:, 0], chosen[:, 1]].all():
        raise ContractError("strategy picks an input outside the safety controller")
    lookup[cells, prev_u] = chosen[:, 1]
    lookup.setflags(write=False)
    return Implementation(lookup=lookup)


@dataclass(frozen=True)
class DisturbanceSignal:
    """Named signal d(t) in the system's disturbance-signal space."""

    kind: str
    fn: Callable[[float], np.ndarray]
    dim: int

    def __call__(self, t: float) -> np.ndarray:
        return self.fn(t)


def none_signal(dim: int) -> DisturbanceSignal:
    zero = np.zeros(dim)
    return DisturbanceSignal("none", lambda t: zero, dim)


def const_signal(value) -> DisturbanceSignal:
    value = np.asarray(value, dtype=np.float64)
    return DisturbanceSignal("const", lambda t: value, value.size)


def sin_signal(tau: float, amplitude) -> DisturbanceSignal:
    amplitude = np.asarray(amplitude, dtype=np.float64)
    scale = 1.0 / (2.0 * np.pi * tau)
    return DisturbanceSignal("sin", lambda t: amplitude * np.sin(t * scale),
                             amplitude.size)


def custom_signal(fn: Callable[[float], np.ndarray], dim: int) -> DisturbanceSignal:
    return DisturbanceSignal("custom", fn, dim)


def effective_disturbance(sys: ControlSystemSpec, d: np.ndarray) -> np.ndarray:
    """Map a signal into the state space and clamp it to the modeled bound."""
    if sys.disturbance_map is not None:
        omega = sys.disturbance_map @ d
    else:
        omega = np.asarray(d, dtype=np.float64)
    return np.clip(omega, -sys.w, sys.w)


@dataclass
class SimulationReport:
    """Closed-loop trace with per-step costs and both running objectives."""

    trajectory: np.ndarray      # (steps+1, n)
    inputs: np.ndarray          # (steps,) applied input indices
    costs: np.ndarray           # (steps,) c(u(t), x(t), u(t+1))
    running_average: np.ndarray # (steps,)
    discounted: np.ndarray      # (steps,) normalized partial sums
    lam: float
    safe: bool
    steps: int

    @property
    def final_average(self) -> float:
        return float(self.running_average[-1])


def _cost_batch(spec: CostSpec, u_prev: np.ndarray, x: np.ndarray,
                u_new: np.ndarray) -> np.ndarray:
    kind = spec.kind
    if kind is CostKind.IS:
        return np.any(u_prev != u_new, axis=1).astype(np.float64)
    if kind is CostKind.DR:
        d = x[:, list(spec.projection)] - spec.reference
        return (d ** 2).sum(axis=1)
    if kind is CostKind.EC:
        d = u_prev - spec.u0
        return (d ** 2).sum(axis=1)
    if kind is CostKind.ID:
        d = u_prev - u_new
        return (d ** 2).sum(axis=1)
    d = x[:, list(spec.projection)] - spec.reference
    dr = (d ** 2).sum(axis=1)
    ec = ((u_prev - spec.u0) ** 2).sum(axis=1)
    idv = ((u_prev - u_new) ** 2).sum(axis=1)
    return (dr / spec.max_dr + ec / spec.max_ec + idv / spec.max_id) / 3.0


def _integrate_disturbed(sys: ControlSystemSpec, x: np.ndarray, u: np.ndarray,
                         signal: DisturbanceSignal, t0: float,
                         substeps: int) -> np.ndarray:
    """One sampling period of the disturbed flow; signal read at sub-step midpoints."""
    hs = sys.tau / substeps
    for s in range(substeps):
        omega = effective_disturbance(sys, signal(t0 + (s + 0.5) * hs))
        k1 = sys.f(x, u) + omega
        k2 = sys.f(x + 0.5 * hs * k1, u) + omega
        k3 = sys.f(x + 0.5 * hs * k2, u) + omega
        k4 = sys.f(x + hs * k3, u) + omega
        x = x + (hs / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def simulate_batch(sys: ControlSystemSpec, impl: Implementation,
                   x0s: np.ndarray, u_inits, disturbance: DisturbanceSignal,
                   steps: int, cost_spec: CostSpec, lam,
                   substeps: int = 5) -> list[SimulationReport]:
    """Run several sample-and-hold loops in lockstep (shared disturbance clock)."""
    x = np.atleast_2d(np.asarray(x0s, dtype=np.float64)).copy()
    B = x.shape[0]
    u_idx = np.broadcast_to(np.asarray(u_inits, dtype=np.int64), (B,)).copy()
    lam_f = float(lam)
    if not 0.0 <= lam_f <= 1.0:
        raise ContractError("discount must lie in [0, 1]")
    grid = sys.grid
    U = sys.inputs

    traj = np.empty((B, steps + 1, grid.dims))
    inputs = np.empty((B, steps), dtype=np.int64)
    costs = np.empty((B, steps))
    traj[:, 0] = x
    for t in range(steps):
        cells = quantize_many(grid, x)
        if np.any(cells == SINK):
            run = int(np.flatnonzero(cells == SINK)[0])
            raise SafetyViolationError(
                f"run {run} left the grid domain at step {t}", step=t)
        u_new = impl.lookup[cells, u_idx].astype(np.int64)
        if np.any(u_new < 0):
            run = int(np.flatnonzero(u_new < 0)[0])
            raise SafetyViolationError(
                f"run {run} left the controller domain at step {t}", step=t)
        costs[:, t] = _cost_batch(cost_spec, U[u_idx], x, U[u_new])
        x = _integrate_disturbed(sys, x, U[u_new], disturbance,
                                 t * sys.tau, substeps)
        inputs[:, t] = u_new
        traj[:, t + 1] = x
        u_idx = u_new

    t_idx = np.arange(1, steps + 1)
    reports = []
    for b in range(B):
        run_avg = np.cumsum(costs[b]) / t_idx
        if lam_f == 1.0:
            disc = run_avg.copy()
        else:
            # normalized discounted partial sums (1-lam) * sum lam^i c_i
            disc = (1.0 - lam_f) * np.cumsum(costs[b] * lam_f ** np.arange(steps))
        box = sys.safe_set.state_box
        safe = bool(np.all(traj[b] >= box.lower) and np.all(traj[b] <= box.upper))
        reports.append(SimulationReport(
            trajectory=traj[b], inputs=inputs[b], costs=costs[b],
            running_average=run_avg, discounted=disc, lam=lam_f,
            safe=bool(safe), steps=steps))
    return reports


def simulate(sys: ControlSystemSpec, impl: Implementation, x0, u_init: int,
             disturbance: DisturbanceSignal, steps: int, cost_spec: CostSpec,
             lam, substeps: int = 5) -> SimulationReport:
    """Single closed-loop run; raises SafetyViolationError if it leaves the domain."""
    return simulate_batch(sys, impl, np.atleast_2d(np.asarray(x0, float)),
                          u_init, disturbance, steps, cost_spec, lam,
                          substeps=substeps)[0]


def limit_average_converged(report: SimulationReport, window: int,
                            eps: float) -> bool:
    """Compare the mean step cost over the last two disjoint windows."""
    if report.steps < 2 * window:
        raise ContractError("need at least two windows of steps")
    c = report.costs
    a = float(np.mean(c[-2 * window:-window]))
    b = float(np.mean(c[-window:]))
    return abs(a - b) < eps


def _disturbance_lattice(sys: ControlSystemSpec, step: float) -> np.ndarray:
    """Deterministic grid of candidate signal values for the adversary probe.

    With a disturbance map the lattice lives in the signal space within the
    declared signal bound; otherwise it spans [-w, w] per state axis.
    """
    if sys.disturbance_map is not None:
        if sys.signal_bound is None:
            raise ContractError("system has a disturbance map but no signal bound")
        bound = np.asarray(sys.signal_bound, dtype=np.float64)
    else:
        bound = sys.w
    axes = []
    for b in bound:
        if b == 0 or step <= 0:
            axes.append(np.array([0.0]))
        else:
            k = int(np.floor(b / step))
            axes.append(np.arange(-k, k + 1) * step)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def adversary_probe(arena: Arena, sigma_max: np.ndarray, sys: ControlSystemSpec,
                    impl: Implementation, x0, steps: int,
                    disturbance_lattice_step: float, u_init: int = 0,
                    substeps: int = 5) -> float:
    """Fraction of steps where a lattice disturbance realizes the adversary's choice.

    At each step the maximizer's strategy names a target cell; the probe
    scans constant-over-the-step lattice disturbances for one whose endpoint
    quantizes into that cell, follows it when found and applies zero
    disturbance otherwise.
    """
    grid = sys.grid
    m = arena.n_inputs
    dom_cells = np.unique(arena.vmin_pairs[:, 0])
    dom_rank = np.full(grid.n_cells, -1, dtype=np.int64)
    dom_rank[dom_cells] = np.arange(dom_cells.size)
    # vmax id lookup per (cell rank, input)
    vmax_lookup = np.full((dom_cells.size, m), -1, dtype=np.int64)
    vmax_lookup[dom_rank[arena.vmax_pairs[:, 0]], arena.vmax_pairs[:, 1]] = \
        np.arange(arena.n_max)

    lattice = _disturbance_lattice(sys, disturbance_lattice_step)
    omegas = np.stack([effective_disturbance(sys, d) for d in lattice])
    zero_idx = int(np.flatnonzero(np.all(lattice == 0.0, axis=1))[0])
    hs = sys.tau / substeps

    x = np.asarray(x0, dtype=np.float64).copy()
    u_idx = int(u_init)
    feasible = 0
    for t in range(steps):
        cells = quantize_many(grid, x[None, :])
        cell = int(cells[0])
        if cell == SINK or impl.lookup[cell, u_idx] < 0:
            raise SafetyViolationError(f"probe left the domain at step {t}", step=t)
        u_new = int(impl.lookup[cell, u_idx])
        node = vmax_lookup[dom_rank[cell], u_new]
        target_cell = int(arena.vmin_pairs[sigma_max[node], 0])

        # Integrate all candidates in one batch; constant disturbance per step.
        xs = np.broadcast_to(x, (omegas.shape[0], x.size)).copy()
        u_vec = sys.inputs[u_new]
        for _ in range(substeps):
            k1 = sys.f(xs, u_vec) + omegas
            k2 = sys.f(xs + 0.5 * hs * k1, u_vec) + omegas
            k3 = sys.f(xs + 0.5 * hs * k2, u_vec) + omegas
            k4 = sys.f(xs + hs * k3, u_vec) + omegas
            xs = xs + (hs / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        end_cells = quantize_many(grid, xs)
        hits = np.flatnonzero(end_cells == target_cell)
        if hits.size:
            feasible += 1
            x = xs[int(hits[0])]
        else:
            x = xs[zero_idx]  # lattice always contains the zero disturbance
        u_idx = u_new
    return feasible / steps


def trace_csv(report: SimulationReport, sys: ControlSystemSpec, path) -> None:
    """Trace rows: t, state, input index, input vector, cost, averages."""
    n = sys.grid.dims
    U = sys.inputs
    with open(path, "w", newline="") as fh:
        cols = (["t"] + [f"x{i+1}" for i in range(n)] + ["input"]
                + [f"u{i+1}" for i in range(U.shape[1])]
                + ["cost", "running_average", "discounted"])
        fh.write(",".join(cols) + "\n")
        for t in range(report.steps):
            u = int(report.inputs[t])
            row = ([str(t)] + [repr(float(v)) for v in report.trajectory[t]]
                   + [str(u)] + [repr(float(v)) for v in U[u]]
                   + [repr(float(report.costs[t])),
                      repr(float(report.running_average[t])),
                      repr(float(report.discounted[t]))])
            fh.write(",".join(row) + "\n")
        row = ([str(report.steps)]
               + [repr(float(v)) for v in report.trajectory[report.steps]]
               + [""] * (1 + U.shape[1]) + ["", "", ""])
        fh.write(",".join(row) + "\n")

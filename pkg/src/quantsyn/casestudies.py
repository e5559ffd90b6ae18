"""Built-in case studies: an HVAC rooftop unit and the cart-pole.

The HVAC model is a four-state linear system (zone temperature, a fan state,
relative humidity, a compressor state) with staged fan/compressor inputs and
an input-channel disturbance. The cart-pole keeps the pole near the upright
position under a bounded acceleration input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .arena import compute_normalizers
from .core import (Box, ControlSystemSpec, CostKind, CostSpec, Grid, SafeSet)
from .errors import ConfigError
from .refine_sim import (DisturbanceSignal, const_signal, none_signal,
                         sin_signal)

BUILTIN_NAMES = ("hvac", "cartpole", "cartpole-desk")


@dataclass
class CaseStudy:
    """A fully parameterized system plus its cost and evaluation presets."""

    system: ControlSystemSpec
    dr_reference: np.ndarray
    dr_projection: tuple[int, ...]
    u0: np.ndarray
    disturbances: dict[str, DisturbanceSignal]
    sim_steps: int
    window: int
    eps: float
    probe_lattice_step: float
    substeps: int = 5

    def base_cost(self, kind: CostKind | str) -> CostSpec:
        kind = CostKind(kind)
        if kind is CostKind.IS:
            return CostSpec(kind=kind)
        if kind is CostKind.DR:
            return CostSpec(kind=kind, reference=self.dr_reference,
                            projection=self.dr_projection)
        if kind is CostKind.EC:
            return CostSpec(kind=kind, u0=self.u0)
        if kind is CostKind.ID:
            return CostSpec(kind=kind)
        raise ConfigError("combined cost needs normalizers; use cc_cost()")

    def cc_cost(self, model, controller) -> CostSpec:
        """Combined cost with normalizers computed over the controller domain."""
        mdr, mec, mid = compute_normalizers(
            model, controller, reference=self.dr_reference,
            projection=self.dr_projection, u0=self.u0)
        return CostSpec(kind=CostKind.CC, reference=self.dr_reference,
                        projection=self.dr_projection, u0=self.u0,
                        max_dr=mdr, max_ec=mec, max_id=mid)

    def cost(self, kind: CostKind | str, model=None, controller=None) -> CostSpec:
        kind = CostKind(kind)
        if kind is CostKind.CC:
            if model is None or controller is None:
                raise ConfigError("combined cost needs the model and controller")
            return self.cc_cost(model, controller)
        return self.base_cost(kind)


def hvac(x2_bounds: tuple[float, float] = (-3.0, 3.0),
         x4_bounds: tuple[float, float] = (-15.0, 15.0)) -> CaseStudy:
    """Rooftop-unit HVAC zone model with staged fan/compressor inputs.

    Temperature (x1) and relative humidity (x3) are safety-constrained; the
    bounds on the two actuator states x2/x4 are configuration defaults chosen
    so that the model stays at a tractable size.
    """
    A = 1e-4 * np.array([
        [-28.0, -5.6, 0.0, 0.0],
        [0.0, -8.3, 0.0, 0.0],
        [0.0, 0.0, -17.0, 1.0],
        [0.0, 0.0, 0.0, -2.8],
    ])
    B = 1e-4 * np.array([
        [-0.8, -1.7],
        [0.0, 5.8],
        [-1.7, 0.08],
        [0.0, 2.3],
    ])

    def f(x, u):
        return np.asarray(x, float) @ A.T + np.asarray(u, float) @ B.T

    inputs = np.array([(a, b) for a in (-25.0, 0.0, 25.0, 50.0)
                       for b in (-50.0, 0.0, 50.0)])
    w = np.abs(B @ np.array([10.0, 10.0]))
    L = np.abs(A) - np.diag(np.abs(np.diag(A))) + np.diag(np.diag(A))
    tau = 100.0
    grid = Grid(domain=Box(
        lower=[-1.0, x2_bounds[0], -5.0, x4_bounds[0]],
        upper=[1.0, x2_bounds[1], 5.0, x4_bounds[1]]),
        eta=[0.2, 1.0, 0.4, 10.0])
    safe = SafeSet(Box(lower=[-1.0, -np.inf, -5.0, -np.inf],
                       upper=[1.0, np.inf, 5.0, np.inf]))
    system = ControlSystemSpec(
        name="hvac", f=f, jacobian_bound=L, w=w, inputs=inputs, tau=tau,
        grid=grid, safe_set=safe, disturbance_map=B,
        signal_bound=np.array([10.0, 10.0]))
    amp = np.array([10.0, -10.0])
    return CaseStudy(
        system=system,
        dr_reference=np.array([0.0, 0.0]),
        dr_projection=(0, 2),
        u0=np.array([-25.0, -50.0]),
        disturbances={"dsin": sin_signal(tau, amp),
                      "dcon": const_signal(amp),
                      "none": none_signal(2)},
        sim_steps=10_000, window=1_000, eps=1e-4, probe_lattice_step=1.0)


def _cartpole(desk: bool) -> CaseStudy:
    alpha = 1.0
    beta = 0.0125

    def f(x, u):
        x = np.asarray(x, float)
        uu = np.asarray(u, float)[..., 0]
        x1 = x[..., 0]
        f2 = -(alpha ** 2 * np.sin(x1) + uu * np.cos(x1)) - 2.0 * beta * uu
        f4 = np.broadcast_to(uu, x1.shape)
        return np.stack([x[..., 1], f2, x[..., 3], f4], axis=-1)

    if desk:
        eta = np.array([0.05, 0.1, 0.1, 0.1]) * 4.0
        inputs = np.linspace(-5.0, 5.0, 11).reshape(-1, 1)
        steps, window = 1_000, 250
    else:
        eta = np.array([0.05, 0.1, 0.1, 0.1])
        inputs = np.linspace(-5.0, 5.0, 101).reshape(-1, 1)
        steps, window = 1_000, 250
    box = Box(lower=[math.pi / 2, -1.0, -2.4, -1.4],
              upper=[3 * math.pi / 2, 1.0, 2.4, 1.4])
    grid = Grid(domain=box, eta=eta)
    # |d f2 / d x1| <= alpha^2 + |u|; the position rows feed on the velocities.
    L = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [alpha ** 2 + 5.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, 0.0, 0.0],
    ])
    system = ControlSystemSpec(
        name="cartpole-desk" if desk else "cartpole",
        f=f, jacobian_bound=L, w=np.zeros(4), inputs=inputs, tau=0.35,
        grid=grid, safe_set=SafeSet(box))
    return CaseStudy(
        system=system,
        dr_reference=np.array([math.pi, 0.0]),
        dr_projection=(0, 2),
        u0=np.array([0.0]),
        disturbances={"none": none_signal(4)},
        sim_steps=steps, window=window, eps=1e-4, probe_lattice_step=1.0)


def cartpole() -> CaseStudy:
    """Cart-pole at the published discretization (101 inputs)."""
    return _cartpole(desk=False)


def cartpole_desk() -> CaseStudy:
    """Coarse cart-pole: cell edges scaled by 4, 11 inputs, desk-scale model."""
    return _cartpole(desk=True)


def builtin(name: str, **overrides) -> CaseStudy:
    """Fully populated case study by name: hvac, cartpole, cartpole-desk."""
    if name == "hvac":
        return hvac(**overrides)
    if name == "cartpole":
        return cartpole(**overrides)
    if name == "cartpole-desk":
        return cartpole_desk(**overrides)
    raise ConfigError(f"unknown built-in system {name!r}; "
                      f"expected one of {', '.join(BUILTIN_NAMES)}")

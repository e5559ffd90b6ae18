"""Symbolic safety-controller synthesis with game-optimized implementations.

Pipeline: build a finite over-approximating model of the sampled dynamics,
solve the safety fixed point, assemble a weighted bipartite game over the
permissive controller, solve discounted or mean-payoff games for both
players, refine the minimizer's strategy into a deterministic controller and
evaluate it in closed-loop simulation.
"""

from .core import (SINK, MICRO, Box, ControlSystemSpec, Controller, CostKind,
                   CostSpec, Grid, SafeSet, cell_box, cell_center, cell_centers,
                   cost, cell_cost, quantize, quantize_many)
from .abstraction import (SymbolicModel, build_symbolic_model, growth_bound,
                          rk4_step, save_model, load_model, export_model_csv)
from .safety import (SafetySpecAbstract, solve_safety, save_controller,
                     load_controller, export_controller_csv)
from .arena import (Arena, arena_from_lists, build_arena, compute_normalizers,
                    save_arena, load_arena, save_weights, load_weights)
from .games import (MEAN_PAYOFF, LimitCheckReport, Strategy, ValueTable,
                    dpg_mpg_limit_check, solve_dpg, solve_mpg, save_values,
                    load_values, export_values_csv)
from .refine_sim import (DisturbanceSignal, Implementation, SimulationReport,
                         adversary_probe, const_signal, custom_signal,
                         effective_disturbance, limit_average_converged,
                         none_signal, refine, simulate, simulate_batch,
                         sin_signal, trace_csv)
from .casestudies import BUILTIN_NAMES, CaseStudy, builtin
from . import errors

__version__ = "0.1.0"

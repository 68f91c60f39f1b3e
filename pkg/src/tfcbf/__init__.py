"""Time-varying fixed-time barrier controllers for multi-agent STL tasks."""

from .fxt import FxTParams, epsilon_max, residual_level, time_bound, comparison_ode_oracle
from .stl import parse_formula, robustness, is_satisfied, SampledSignal
from .barrier import build_barrier, eval_barrier, eval_barrier_gradient, next_switch, sup_gradient_norm
from .qp import QpInstance, QpSolution, assemble, solve, control_step
from .sim import coupling_disturbance, integrator, omni_robot, run_scenario, step

__version__ = "0.1.0"

"""A single integrator reaches x >= 1 before the same time bound from any start.

The barrier is H = x - 1 - margin with a constant profile, so H < 0 at the
start and the controller must drive it to zero. Because the slack variable
absorbs part of each step, the gain has to be large for the closed loop to
track the nominal rate; the reach times below stay under T regardless of
how far away the agent begins.
"""

import numpy as np

from tfcbf.barrier import ProfileOptions, build_barrier
from tfcbf.fxt import FxTParams, time_bound
from tfcbf.qp import Controller
from tfcbf.sim import Agent, integrator, run_scenario
from tfcbf.stl import parse_formula


def reach_time(x0, gain=100.0, dt=1e-3):
    phi = parse_formula("G[0,10] x1 >= 1", 1)
    spec = build_barrier(phi, 5.0, ProfileOptions(adaptive=False), check=False)
    model = integrator(1, 1, gain=gain)
    params = FxTParams(1.0, 1.0, 0.0, 2.0)
    agent = Agent(model, 0, Controller(spec, model, params, 0, delta=0.0))
    traj, _ = run_scenario([agent], [x0], dt, 4.0)
    inside = np.nonzero(traj.H[:, 0] >= 0)[0]
    return traj.t[inside[0]] if inside.size else np.inf


if __name__ == "__main__":
    T = time_bound(FxTParams(1.0, 1.0, 0.0, 2.0))
    print(f"time bound T = {T:.4f} s")
    for x0 in (-10.0, -1e3, -1e5):
        print(f"  x(0) = {x0:>9g}: enters the set at t = {reach_time(x0):.3f} s")

"""Closed-loop simulation of coupled control-affine agents.

Every agent follows ``dx_k = f_k(x_k, t) + g_k(x_k, t) u_k + c_k(x, t)``.
Controls are computed once per step from the shared state snapshot and held
over the step; each agent block is then advanced with RK4 while the other
agents stay frozen at the snapshot. The time grid is ``k * dt`` plus an
exact sample at every barrier switch instant, so no RK4 step straddles a
discontinuity of a barrier.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .barrier import BarrierSpec, _value_and_grad, eval_barrier
from .fxt import FxTParams, epsilon_max, time_bound
from .qp import Controller
from .stl import SampledSignal, robustness

__all__ = [
    "OmniRobotParams",
    "AgentModel",
    "integrator",
    "omni_robot",
    "custom_affine",
    "coupling_disturbance",
    "Agent",
    "World",
    "SimulationError",
    "CouplingBoundError",
    "step",
    "time_grid",
    "Trajectory",
    "Report",
    "run_scenario",
]


class SimulationError(RuntimeError):
    """Numerical failure inside the closed loop."""


class CouplingBoundError(SimulationError):
    """A coupling term exceeded its declared norm bound."""


# ----------------------------------------------------------------- models


@dataclass(frozen=True)
class OmniRobotParams:
    """Three-wheeled omnidirectional robot with wheels 120 degrees apart."""

    R: float = 0.02
    L: float = 0.2

    @property
    def B(self) -> np.ndarray:
        c, s = math.cos(math.pi / 6), math.sin(math.pi / 6)
        return np.array([[0.0, c, -c], [-1.0, s, s], [self.L, self.L, self.L]])

    @property
    def body_map(self) -> np.ndarray:
        """``(B^T)^-1 * R``: wheel speeds to body-frame velocity."""
        return np.linalg.inv(self.B.T) * self.R

    def input_matrix(self, theta: float) -> np.ndarray:
        c, s = math.cos(theta), math.sin(theta)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return rot @ self.body_map


@dataclass(eq=False)
class AgentModel:
    """Control-affine agent ``f(x, t) + g(x, t) u``.

    ``coupling_bound`` is the declared bound on the coupling term acting on
    this agent; ``lower``/``upper`` are optional input bounds.
    """

    id: int
    kind: str
    n: int
    m: int
    f: Callable
    g: Callable
    coupling_bound: float = 0.0
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    params: object = None

    def drift(self, xk, t):
        return np.asarray(self.f(xk, t), dtype=float)

    def input_map(self, xk, t):
        G = np.asarray(self.g(xk, t), dtype=float)
        if self.kind == "omni_robot" and abs(np.linalg.det(G)) < 1e-12:
            raise SimulationError(f"agent {self.id}: input matrix lost full row rank")
        return G


def integrator(id: int, n: int, gain: float = 1.0, coupling_bound: float = 0.0, **kw) -> AgentModel:
    """``dx = gain * u`` with ``m = n``."""
    G = gain * np.eye(n)
    return AgentModel(id, "integrator", n, n, lambda x, t: np.zeros(n), lambda x, t: G,
                      coupling_bound, params={"gain": gain}, **kw)


def omni_robot(id: int, params: OmniRobotParams | None = None, coupling_bound: float = 0.0, **kw) -> AgentModel:
    """Planar pose ``(px, py, theta)`` driven by three wheel speeds; no drift."""
    params = params or OmniRobotParams()
    return AgentModel(id, "omni_robot", 3, 3, lambda x, t: np.zeros(3),
                      lambda x, t: params.input_matrix(x[2]), coupling_bound, params=params, **kw)


def custom_affine(id: int, n: int, m: int, f: Callable, g: Callable, coupling_bound: float = 0.0, **kw) -> AgentModel:
    return AgentModel(id, "custom-affine", n, m, f, g, coupling_bound, **kw)


# ------------------------------------------------------------- couplings


def coupling_disturbance(kind: str, C: float, seed: int = 0, n: int = 2, spec: BarrierSpec | None = None,
                         offset: int = 0, n_terms: int = 5):
    """Bounded coupling generator ``c(x, t)`` for one agent of state size ``n``.

    ``zero`` gives 0. ``sinusoid`` is a sum of ``n_terms`` (at most 5)
    seeded sinusoids whose amplitude vectors have norms summing to ``C``.
    ``worst-case-radial`` pushes with norm ``C`` against the barrier
    gradient of the agent block (needs ``spec`` and the agent ``offset``).
    """
    if C < 0:
        raise ValueError("C must be >= 0")
    if kind == "zero" or C == 0:
        return lambda x, t: np.zeros(n)
    if kind == "sinusoid":
        if not 1 <= n_terms <= 5:
            raise ValueError("n_terms must be in 1..5")
        rng = np.random.default_rng(seed)
        amp = rng.normal(size=(n_terms, n))
        amp *= C / np.linalg.norm(amp, axis=1).sum()
        freq = rng.uniform(0.05, 1.0, size=n_terms)
        phase = rng.uniform(0.0, 2 * np.pi, size=n_terms)

        def sinusoid(x, t):
            return np.sin(freq * t + phase) @ amp

        return sinusoid
    if kind == "worst-case-radial":
        if spec is None:
            raise ValueError("worst-case-radial needs the agent's barrier spec")

        def radial(x, t):
            _, G, _, _ = _value_and_grad(spec, spec.project(x)[None, :], t)
            full = np.zeros(spec.dim)
            full[spec.index_map] = np.nan_to_num(G[0])
            gk = full[offset : offset + n]
            nk = np.linalg.norm(gk)
            return -C * gk / nk if nk > 0 else np.zeros(n)

        return radial
    raise ValueError(f"unknown disturbance kind {kind!r}")


# -------------------------------------------------------------- stepping


@dataclass(eq=False)
class Agent:
    model: AgentModel
    offset: int
    controller: Controller | None = None
    coupling: Callable | None = None

    @property
    def block(self) -> slice:
        return slice(self.offset, self.offset + self.model.n)


@dataclass(frozen=True)
class World:
    t: float
    x: np.ndarray


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("FIXTIME_THREADS", "1")))
    except ValueError:
        return 1


def _control(agent: Agent, x, t):
    if agent.controller is None:
        return np.zeros(agent.model.m), 0.0, None
    return agent.controller.step(x, t)


def _coupling(agent: Agent, x, t):
    if agent.coupling is None:
        return np.zeros(agent.model.n)
    c = np.asarray(agent.coupling(x, t), dtype=float)
    if np.linalg.norm(c) > agent.model.coupling_bound + 1e-12:
        raise CouplingBoundError(
            f"agent {agent.model.id}: |c| = {np.linalg.norm(c):.6g} > {agent.model.coupling_bound:.6g} at t = {t:g}"
        )
    return c


def step(world: World, agents, dt: float, pool: ThreadPoolExecutor | None = None):
    """Advance the world by ``dt``; returns ``(world', [(u, eps, telemetry), ...])``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x, t = world.x, world.t
    if pool is not None and len(agents) > 1:
        controls = list(pool.map(lambda a: _control(a, x, t), agents))
    else:
        controls = [_control(a, x, t) for a in agents]

    x_new = x.copy()
    for agent, (u, _, _) in zip(agents, controls):
        mdl, blk = agent.model, agent.block
        xs = x.copy()

        def rhs(xk, tau):
            xs[blk] = xk
            return mdl.drift(xk, tau) + mdl.input_map(xk, tau) @ u + _coupling(agent, xs, tau)

        xk = x[blk]
        k1 = rhs(xk, t)
        k2 = rhs(xk + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = rhs(xk + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = rhs(xk + dt * k3, t + dt)
        x_new[blk] = xk + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(x_new)):
        raise SimulationError(f"state became non-finite at t = {t + dt:g}")
    return World(t + dt, x_new), controls


def time_grid(dt: float, t_end: float, breakpoints=()) -> np.ndarray:
    """``k * dt`` up to ``t_end`` plus exact breakpoints inside ``(0, t_end)``.

    Grid points within 1e-9 of a breakpoint are replaced by it.
    """
    if not (dt > 0 and t_end > 0):
        raise ValueError("dt and t_end must be positive")
    n = int(math.floor(t_end / dt + 1e-9))
    grid = np.arange(n + 1) * dt
    if t_end - grid[-1] > 1e-9:
        grid = np.append(grid, t_end)
    else:
        grid[-1] = t_end
    pts = list(grid)
    for s in sorted(set(breakpoints)):
        if not 0 < s < t_end:
            continue
        i = int(np.argmin(np.abs(grid - s)))
        if abs(grid[i] - s) <= 1e-9:
            pts[i] = s
        else:
            pts.append(s)
    return np.array(sorted(set(pts)))


# ------------------------------------------------------------ recording


@dataclass
class Trajectory:
    """Samples of the closed loop; ``H_left`` is NaN except at switch samples."""

    t: np.ndarray
    x: np.ndarray  # (T, dim)
    u: list  # per agent (T, m_k)
    eps: np.ndarray  # (T, agents)
    H: np.ndarray
    H_left: np.ndarray
    delta: np.ndarray  # (agents,)
    switch_flag: np.ndarray  # (T, agents) bool
    solve_times: np.ndarray  # (T, agents)
    delta_condition: np.ndarray  # (T, agents) bool
    agent_ids: tuple = ()
    offsets: tuple = ()
    dims: tuple = ()

    def signal(self) -> SampledSignal:
        return SampledSignal(self.t, self.x)

    def agent_state(self, k: int) -> np.ndarray:
        return self.x[:, self.offsets[k] : self.offsets[k] + self.dims[k]]


@dataclass
class Report:
    agents: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"meta": self.meta, "agents": self.agents}


def switch_excursion(traj: Trajectory, k: int, s: float, window: float) -> float:
    """Largest depth ``max(0, -H)`` of agent ``k`` on ``[s, s + window]``."""
    sel = (traj.t >= s - 1e-12) & (traj.t <= s + window + 1e-12)
    if not np.any(sel):
        return 0.0
    return float(max(0.0, -np.min(traj.H[sel, k])))


def run_scenario(agents, x0, dt: float, t_end: float, formulas=None, excursion_window: float = 10.0,
                 progress: Callable | None = None):
    """Simulate ``[0, t_end]`` and summarise each controlled agent.

    ``formulas`` optionally maps an agent index to its task formula for the
    end-to-end robustness check.
    """
    x0 = np.asarray(x0, dtype=float)
    formulas = formulas or {}
    breaks = sorted({s for a in agents if a.controller is not None for s in a.controller.spec.switches})
    grid = time_grid(dt, t_end, breaks)
    T, K = len(grid), len(agents)
    X = np.empty((T, len(x0)))
    U = [np.empty((T, a.model.m)) for a in agents]
    E = np.zeros((T, K))
    H = np.full((T, K), np.nan)
    HL = np.full((T, K), np.nan)
    flags = np.zeros((T, K), dtype=bool)
    st = np.zeros((T, K))
    ok = np.ones((T, K), dtype=bool)

    nthreads = _worker_count()
    pool = ThreadPoolExecutor(nthreads) if nthreads > 1 and K > 1 else None
    world = World(0.0, x0.copy())
    try:
        for i, t in enumerate(grid):
            world = World(float(t), world.x)
            X[i] = world.x
            for k, a in enumerate(agents):
                if a.controller is None:
                    continue
                spec = a.controller.spec
                if any(abs(t - s) <= 1e-12 for s in spec.switches):
                    flags[i, k] = True
                    HL[i, k] = eval_barrier(spec, spec.project(world.x), t, left=True)
            if i + 1 < T:
                world, controls = step(world, agents, grid[i + 1] - t, pool)
            else:
                controls = [_control(a, world.x, world.t) for a in agents]
            for k, (u, eps, tele) in enumerate(controls):
                U[k][i] = u
                E[i, k] = eps
                if tele is not None:
                    H[i, k] = tele.H
                    st[i, k] = tele.solve_time
                    ok[i, k] = tele.delta_condition
            if progress is not None:
                progress(i, T)
    finally:
        if pool is not None:
            pool.shutdown()

    deltas = np.array([a.controller.delta if a.controller else np.nan for a in agents])
    traj = Trajectory(grid, X, U, E, H, HL, deltas, flags, st, ok,
                      tuple(a.model.id for a in agents), tuple(a.offset for a in agents),
                      tuple(a.model.n for a in agents))
    report = summarize(traj, agents, formulas, excursion_window)
    return traj, report


def summarize(traj: Trajectory, agents, formulas, excursion_window: float = 10.0) -> Report:
    rep = Report(meta={"t_end": float(traj.t[-1]), "samples": int(len(traj.t))})
    sig = None
    for k, a in enumerate(agents):
        row = {"agent_id": a.model.id, "model": a.model.kind, "x0": traj.agent_state(k)[0].tolist()}
        ctl = a.controller
        if ctl is not None:
            p: FxTParams = ctl.params
            Tk = time_bound(p)
            floor = 0.0 - epsilon_max(p)
            after = traj.t >= Tk
            Hk = traj.H[:, k]
            switches = []
            for s in ctl.spec.switches:
                if s >= traj.t[-1]:
                    continue
                i = int(np.argmin(np.abs(traj.t - s)))
                switches.append({
                    "t": float(s),
                    "H_left": float(traj.H_left[i, k]),
                    "H_right": float(Hk[i]),
                    "excursion": switch_excursion(traj, k, s, excursion_window),
                })
            times = traj.solve_times[:, k]
            row.update({
                "delta": ctl.delta,
                "delta_estimate": ctl.delta_estimate,
                "alpha": p.alpha, "beta": p.beta, "mu": p.mu, "kk": p.kk,
                "time_bound": Tk,
                "floor": floor,
                "min_H": float(np.min(Hk)),
                "min_H_after_transient": float(np.min(Hk[after])) if np.any(after) else math.nan,
                "eps_max": float(np.max(traj.eps[:, k])),
                "eps_mean": float(np.mean(traj.eps[:, k])),
                "eps_active_fraction": float(np.mean(traj.eps[:, k] > 0)),
                "solve_time_median": float(np.median(times)),
                "solve_time_max": float(np.max(times)),
                "delta_condition_fraction": float(np.mean(traj.delta_condition[:, k])),
                "switches": switches,
            })
        if k in formulas:
            sig = sig or traj.signal()
            row["robustness"] = float(robustness(formulas[k], sig, 0.0))
        rep.agents.append(row)
    return rep

import math

import numpy as np
import pytest

from tfcbf.barrier import ProfileOptions, build_barrier
from tfcbf.fxt import FxTParams, epsilon_max, time_bound
from tfcbf.qp import Controller
from tfcbf.sim import (
    Agent,
    CouplingBoundError,
    OmniRobotParams,
    SimulationError,
    World,
    coupling_disturbance,
    custom_affine,
    integrator,
    omni_robot,
    run_scenario,
    step,
    switch_excursion,
    time_grid,
)
from tfcbf.stl import is_satisfied, parse_formula

CONST = ProfileOptions(adaptive=False)


def single(formula, x0, gain=1.0, params=None, delta=0.0, C=0.0, kind="zero", margins=CONST, seed=0):
    n = len(x0)
    phi = parse_formula(formula, n)
    spec = build_barrier(phi, 5.0, margins=margins, x0=np.asarray(x0, float), check=False)
    model = integrator(1, n, gain=gain, coupling_bound=C)
    params = params or FxTParams(1.0, 1.0, 0.0, 4.0)
    ctl = Controller(spec, model, params, 0, coupling_bound=C, delta=delta)
    coup = coupling_disturbance(kind, C, seed=seed, n=n, spec=spec, offset=0)
    return phi, spec, Agent(model, 0, ctl, coup)


# ----------------------------------------------------------------- models


def test_drift_only_motion_is_exact():
    mdl = custom_affine(1, 2, 1, lambda x, t: np.array([1.0, -2.0]), lambda x, t: np.zeros((2, 1)))
    traj, _ = run_scenario([Agent(mdl, 0)], [0.5, 0.5], 0.1, 2.0)
    assert np.allclose(traj.x, 0.5 + np.outer(traj.t, [1.0, -2.0]), atol=1e-12)


def test_omni_robot_input_matrix():
    p = OmniRobotParams()
    nu = np.array([0.3, -0.1, 0.7])
    wheels = p.B.T @ nu / p.R
    for th in (0.0, 0.4, -2.0):
        c, s = math.cos(th), math.sin(th)
        rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        assert np.allclose(p.input_matrix(th) @ wheels, rot @ nu)
    mdl = omni_robot(1, p)
    assert mdl.input_map(np.array([0, 0, 0.4]), 0.0).shape == (3, 3)


def test_rank_loss_detected():
    mdl = omni_robot(1, OmniRobotParams(R=0.0))
    with pytest.raises(SimulationError):
        mdl.input_map(np.zeros(3), 0.0)


def test_time_grid_breakpoints():
    g = time_grid(0.3, 1.0, [0.5, 0.6, 5.0])
    assert g[0] == 0.0 and g[-1] == 1.0
    assert 0.5 in g and 0.6 in g
    assert np.all(np.diff(g) > 0)
    with pytest.raises(ValueError):
        time_grid(0.0, 1.0)


def test_step_validates_dt():
    with pytest.raises(ValueError):
        step(World(0.0, np.zeros(1)), [], 0.0)


# -------------------------------------------------------------- couplings


@pytest.mark.parametrize("kind", ["zero", "sinusoid", "worst-case-radial"])
def test_coupling_respects_bound(kind):
    _, spec, _ = single("G[0,5] norm(x - [1,1]) <= 2", [0.0, 0.0])
    c = coupling_disturbance(kind, 0.7, seed=3, n=2, spec=spec)
    rng = np.random.default_rng(0)
    for _ in range(500):
        x, t = rng.uniform(-5, 5, 2), rng.uniform(0, 100)
        assert np.linalg.norm(c(x, t)) <= 0.7 + 1e-12
    if kind == "worst-case-radial":
        assert np.linalg.norm(c(np.array([3.0, 0.0]), 1.0)) == pytest.approx(0.7)


def test_coupling_kinds_validated():
    with pytest.raises(ValueError):
        coupling_disturbance("gust", 1.0)
    with pytest.raises(ValueError):
        coupling_disturbance("worst-case-radial", 1.0)
    with pytest.raises(ValueError):
        coupling_disturbance("sinusoid", -1.0)


def test_coupling_bound_enforced():
    _, spec, agent = single("G[0,5] x1 >= 1", [2.0], C=0.5)
    agent.coupling = lambda x, t: np.array([1.0])
    with pytest.raises(CouplingBoundError):
        run_scenario([agent], [2.0], 0.01, 1.0)


# ------------------------------------------------------------ closed loop


def _three(threads, monkeypatch):
    monkeypatch.setenv("FIXTIME_THREADS", str(threads))
    agents, x0 = [], []
    for k, (xs, target) in enumerate([([0.0, 0.0], [2, 1]), ([3.0, 3.0], [1, 2]), ([-2.0, 1.0], [0, 0])]):
        phi = parse_formula(f"G[2,8] norm(q - {target}) <= 1", 6, {"q": [2 * k, 2 * k + 1]})
        spec = build_barrier(phi, 5.0, x0=np.array(sum(([0.0, 0.0], [3.0, 3.0], [-2.0, 1.0]), [])), check=False)
        mdl = integrator(k + 1, 2, gain=5.0, coupling_bound=0.5)
        ctl = Controller(spec, mdl, FxTParams(1, 1, 0, 4), 2 * k, coupling_bound=0.5, delta=0.55)
        agents.append(Agent(mdl, 2 * k, ctl, coupling_disturbance("sinusoid", 0.5, seed=k, n=2)))
        x0 += xs
    return run_scenario(agents, x0, 0.01, 8.0)[0]


def test_threads_bit_identical(monkeypatch):
    a = _three(1, monkeypatch)
    b = _three(4, monkeypatch)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.eps, b.eps)


def test_switch_is_sampled_and_monotone():
    phi, spec, agent = single("G[0,4] x1 >= -1 && G[0,9] x1 <= 5", [0.0], gain=5.0)
    traj, rep = run_scenario([agent], [0.0], 0.03, 6.0)
    i = int(np.where(traj.switch_flag[:, 0])[0][0])
    assert traj.t[i] == 4.0
    assert traj.H[i, 0] >= traj.H_left[i, 0]
    sw = rep.agents[0]["switches"]
    assert sw[0]["t"] == 4.0 and sw[0]["H_right"] >= sw[0]["H_left"]


def test_unit_gain_reach_matches_effective_bound():
    # with unit gradient and unit gain the slack halves the gain: alpha = beta = 2 acts like 1
    p = FxTParams(2.0, 2.0, 0.0, 2.0)
    T_eff = time_bound(FxTParams(1.0, 1.0, 0.0, 2.0))
    for x0 in (-10.0, -1e3):
        phi, spec, agent = single("G[0,10] x1 >= 1", [x0], gain=1.0, params=p)
        traj, _ = run_scenario([agent], [x0], 1e-3, 4.0)
        reach = traj.t[np.argmax(traj.H[:, 0] >= -1e-9)]
        assert traj.H[-1, 0] >= -1e-9 and reach <= T_eff + 1e-3


@pytest.mark.parametrize("kind", ["sinusoid", "worst-case-radial"])
def test_floor_respected_under_disturbance(kind):
    p = FxTParams(1.0, 1.0, 0.0, 4.0)
    phi, spec, agent = single("G[0,30] x1 >= 1", [4.0], gain=20.0, params=p, delta=1.1, C=1.0, kind=kind)
    traj, rep = run_scenario([agent], [4.0], 0.01, 30.0)
    row = rep.agents[0]
    assert row["floor"] == 0.0 - epsilon_max(p.with_delta(1.1))
    assert row["min_H_after_transient"] >= row["floor"]
    assert row["delta_condition_fraction"] == 1.0


def test_radial_push_is_worse_than_sinusoid():
    mins = {}
    for kind in ("sinusoid", "worst-case-radial"):
        _, _, agent = single("G[0,20] x1 >= 1", [1.2], gain=1.0, delta=0.0, C=1.0, kind=kind)
        traj, _ = run_scenario([agent], [1.2], 0.01, 20.0)
        mins[kind] = np.min(traj.H[:, 0])
    assert mins["worst-case-radial"] < mins["sinusoid"]


def test_coupling_free_task_satisfied():
    phi, spec, agent = single("F[2,6] norm(x - [3,3]) <= 1 && G[0,8] x2 >= -2", [0.0, 0.0],
                              gain=1e3, margins=ProfileOptions())
    traj, rep = run_scenario([agent], [0.0, 0.0], 0.01, 8.0, formulas={0: phi})
    assert rep.agents[0]["robustness"] >= 0
    assert is_satisfied(phi, traj.signal())


def test_excursion_window():
    _, _, agent = single("G[0,4] x1 >= -1 && G[0,9] x1 <= 5", [0.0], gain=5.0)
    traj, _ = run_scenario([agent], [0.0], 0.05, 6.0)
    assert switch_excursion(traj, 0, 4.0, 1.0) == max(0.0, -np.min(traj.H[(traj.t >= 4.0) & (traj.t <= 5.0), 0]))
    assert switch_excursion(traj, 0, 100.0, 1.0) == 0.0

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tfcbf.barrier import build_barrier, eval_barrier, eval_barrier_gradient
from tfcbf.fxt import FxTParams
from tfcbf.qp import (
    Controller,
    QpInstance,
    SaturationError,
    assemble,
    control_step,
    kkt_residual,
    rho,
    solve,
)
from tfcbf.sim import integrator, omni_robot
from tfcbf.stl import parse_formula

from oracles import grid_qp_objective, qp_objective

P = FxTParams(1.0, 1.0, 0.0, 4.0)

finite = st.floats(-5, 5, allow_nan=False)


def test_closed_form_example():
    sol = solve(QpInstance([1.0], 0.0, 2.0))
    assert sol.u[0] == pytest.approx(1.0) and sol.eps == pytest.approx(1.0)
    assert sol.active_set == ("cbf",)


def test_zero_gradient_all_slack():
    sol = solve(QpInstance([0.0, 0.0], 0.0, 3.0))
    assert np.allclose(sol.u, 0) and sol.eps == pytest.approx(3.0)


def test_inactive_constraint():
    sol = solve(QpInstance([2.0, -1.0], 1.0, 0.5))
    assert np.all(sol.u == 0) and sol.eps == 0.0 and sol.active_set == ()


def test_rho():
    assert rho(0.0, P) == 0.0
    assert rho(1.0, P) == 2.0 and rho(-1.0, P) == -2.0
    r = 0.3
    assert rho(r, P) == pytest.approx(r**0.75 + r**1.25)


def test_non_finite_instance():
    with pytest.raises(ValueError):
        QpInstance([np.nan], 0.0, 1.0)


def test_contradictory_bounds():
    with pytest.raises(SaturationError) as e:
        solve(QpInstance([1.0, 1.0], 0.0, 1.0, lower=[0.0, 2.0], upper=[1.0, 1.0]))
    assert e.value.u_clamped.shape == (2,)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=1, max_size=4), finite, finite)
def test_unboxed_kkt(a, drift, rhs):
    inst = QpInstance(a, drift, rhs)
    sol = solve(inst)
    assert sol.kkt_residual <= 1e-8
    assert kkt_residual(inst, sol.u, sol.eps, sol.multipliers) == sol.kkt_residual
    # slack is the least violation: zero exactly when u = 0 already satisfies the constraint
    r = rhs - drift
    assert (sol.eps == 0.0) == (r <= 0)
    # u is parallel to the input gradient
    a = np.asarray(a)
    assert np.allclose(sol.u, sol.eps * a, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=1, max_size=3), finite, finite, st.floats(0.05, 3), st.floats(0.05, 3))
def test_boxed_matches_grid_oracle(a, drift, rhs, lo, hi):
    m = len(a)
    inst = QpInstance(a, drift, rhs, lower=np.full(m, -lo), upper=np.full(m, hi))
    sol = solve(inst)
    assert sol.kkt_residual <= 1e-8
    assert np.all(sol.u >= -lo - 1e-12) and np.all(sol.u <= hi + 1e-12)
    ref = grid_qp_objective(inst)
    assert qp_objective(inst, sol.u[None, :])[0] <= ref + 1e-9
    assert abs(sol.objective - ref) <= 1e-3 * max(1.0, ref)


def test_bounds_force_slack():
    # demand of 10 at unit gradient, inputs capped at 1
    inst = QpInstance([1.0], 0.0, 10.0, lower=[-1.0], upper=[1.0])
    sol = solve(inst)
    assert sol.u[0] == pytest.approx(1.0) and sol.eps == pytest.approx(9.0)
    assert set(sol.active_set) == {"cbf", "u0<=hi"}


def test_solution_continuous_in_data():
    base = QpInstance([0.7, -0.2], 0.1, 1.3, lower=[-0.5, -0.5], upper=[0.5, 0.5])
    s0 = solve(base)
    for h in (1e-4, 1e-6):
        s1 = solve(QpInstance([0.7, -0.2], 0.1, 1.3 + h, lower=[-0.5, -0.5], upper=[0.5, 0.5]))
        assert np.linalg.norm(s1.u - s0.u) + abs(s1.eps - s0.eps) <= 10 * h


# ------------------------------------------------------------- assembly


def _agent2_spec():
    phi = parse_formula("G[0,10] norm(q - [1,1]) <= 3 && F[2,6] norm(p - q) <= 4", 4,
                        {"p": [0, 1], "q": [2, 3]})
    return build_barrier(phi, 5.0, check=False)


def test_assemble_uses_agent_block():
    spec = _agent2_spec()
    model = integrator(2, 2, gain=2.0)
    x = np.array([-1.0, 0.0, 3.0, 2.5])
    t = 1.0
    inst = assemble(spec, model, x, t, P, 0.3, offset=2)
    g, gt = eval_barrier_gradient(spec, spec.project(x), t)
    full = np.zeros(4)
    full[spec.index_map] = g
    assert np.allclose(inst.grad_u, 2.0 * full[2:4])
    assert inst.drift_term == pytest.approx(gt)
    H = eval_barrier(spec, spec.project(x), t)
    assert inst.H == pytest.approx(H)
    assert inst.rhs_core == pytest.approx(0.3 - rho(H, P))


def test_rhs_is_delta_on_boundary():
    # H = x1 - gamma vanishes exactly at x1 = gamma
    phi = parse_formula("G[0,5] x1 >= 0", 1)
    spec = build_barrier(phi, 5.0, check=False)
    gamma = spec.members[0].profile(0.0)
    inst = assemble(spec, integrator(1, 1), np.array([gamma]), 0.0, P, 0.7, 0)
    assert inst.H == 0.0 and inst.rhs_core == 0.7


def test_control_step_telemetry():
    phi = parse_formula("G[0,5] x1 >= 1", 1)
    spec = build_barrier(phi, 5.0, check=False)
    u, eps, tele = control_step(spec, integrator(1, 1, gain=10.0), np.array([-2.0]), 0.0, P)
    assert u[0] > 0 and eps > 0 and tele.eps == eps
    assert tele.H < 0 and tele.solve_time >= 0 and tele.grad_norm == pytest.approx(1.0)
    assert tele.active_set == ("cbf",)


def test_controller_delta_estimate():
    phi = parse_formula("G[0,5] 3*x1 + 4*x2 >= 1", 2)
    spec = build_barrier(phi, 5.0, check=False)
    probe = {"domain": ([-1, -1], [1, 1]), "times": [0.0], "samples": 32}
    c = Controller(spec, integrator(1, 2), P, 0, coupling_bound=2.0, delta_probe=probe)
    assert c.delta == pytest.approx(5.0 * 1.1 * 2.0) and c.params.delta == c.delta
    c2 = Controller(spec, integrator(1, 2), P, 0, coupling_bound=2.0, delta=0.5, delta_probe=probe)
    assert c2.delta == 0.5 and c2.delta_estimate == pytest.approx(11.0)
    with pytest.raises(ValueError):
        Controller(spec, integrator(1, 2), P, 0)


def test_controller_delta_condition_flag():
    phi = parse_formula("G[0,5] x1 >= 1", 1)
    spec = build_barrier(phi, 5.0, check=False)
    # delta covers C * ||grad H|| = 1
    ok = Controller(spec, integrator(1, 1), P, 0, coupling_bound=1.0, delta=1.0)
    assert ok.step(np.array([5.0]), 0.0)[2].delta_condition
    low = Controller(spec, integrator(1, 1), P, 0, coupling_bound=1.0, delta=0.0)
    assert not low.step(np.array([5.0]), 0.0)[2].delta_condition


def test_omni_robot_input_gradient():
    phi = parse_formula("G[0,5] 1*x1 + 0*x2 + 0*x3 >= -10", 3)
    spec = build_barrier(phi, 5.0, check=False)
    model = omni_robot(1)
    x = np.array([0.0, 0.0, 0.3])
    inst = assemble(spec, model, x, 0.0, P, 0.0, 0)
    assert np.allclose(inst.grad_u, np.array([1.0, 0.0, 0.0]) @ model.input_map(x, 0.0))

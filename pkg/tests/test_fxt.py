import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from tfcbf.fxt import (
    CONTRACTING,
    CRITICAL,
    STRONG,
    WEAK,
    ConvergenceError,
    FxTParams,
    comparison_ode_oracle,
    epsilon_max,
    quadratic_roots,
    regime,
    residual_level,
    time_bound,
)


def test_contracting_case():
    assert time_bound(FxTParams(1, 1, -1, 2)) == pytest.approx(math.pi)
    assert residual_level(FxTParams(1, 1, -1, 2)) == 0.0


def test_critical_case():
    p = FxTParams(1, 1, 2, 2, kk=2)
    assert regime(p) == CRITICAL
    assert time_bound(p) == pytest.approx(2.0)
    assert residual_level(p) == pytest.approx(4.0)  # kk**mu * (beta/alpha)**(mu/2)


def test_zero_delta_cases_agree():
    p = FxTParams(1, 1, 0.0, 4)
    assert regime(p) == CONTRACTING
    assert time_bound(p) == pytest.approx(2 * math.pi)
    # the weak-regime formula evaluated at delta = 0
    r = quadratic_roots(1, 1, 0.0)
    weak = 4 / (1 * r.k1) * (math.pi / 2 - math.atan(r.k2))
    assert weak == pytest.approx(2 * math.pi)
    # and the weak branch is continuous as delta -> 0+
    assert time_bound(FxTParams(1, 1, 1e-12, 4)) == pytest.approx(2 * math.pi, rel=1e-9)


def test_reported_floors():
    assert epsilon_max(FxTParams(1, 1, 0.9741, 4)) == pytest.approx(0.48705, abs=1e-12)
    assert epsilon_max(FxTParams(0.4, 0.4, 0.9713, 4)) == pytest.approx(13.09, abs=0.05)


def test_strong_residual_against_mpmath():
    a, b, d, mu = 0.4, 0.4, 0.9713, 4
    with mpmath.workdps(50):
        c = (mpmath.mpf(d) + mpmath.sqrt(mpmath.mpf(d) ** 2 - 4 * mpmath.mpf(a) * b)) / (2 * a)
        ref = float(c**mu)
    assert residual_level(FxTParams(a, b, d, mu)) == pytest.approx(ref, rel=1e-14)


def test_quadratic_roots_examples():
    r = quadratic_roots(1, 2, 3)
    assert (r.real, r.b, r.c) == (True, 1.0, 2.0)
    r = quadratic_roots(1, 1, 2)
    assert r.real and r.b == pytest.approx(1.0) and r.c == pytest.approx(1.0)
    r = quadratic_roots(1, 1, 0)
    assert not r.real and r.k1 == pytest.approx(1.0) and r.k2 == 0.0
    with pytest.raises(ValueError):
        quadratic_roots(0, 1, 1)


def test_quadratic_roots_no_cancellation():
    # small root of s^2 - 1e8 s + 1 is ~1e-8; the naive formula loses it
    r = quadratic_roots(1.0, 1.0, 1e8)
    with mpmath.workdps(60):
        small = (mpmath.mpf(10) ** 8 - mpmath.sqrt(mpmath.mpf(10) ** 16 - 4)) / 2
    assert r.b == pytest.approx(float(small), rel=1e-14)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 10), st.floats(0.01, 10), st.floats(0.0, 20))
def test_roots_solve_polynomial(a1, a2, a3):
    r = quadratic_roots(a1, a2, a3)
    disc = a3 * a3 - 4 * a1 * a2
    assert r.real == (disc >= 0)
    if r.real:
        for s in (r.b, r.c):
            assert abs(a1 * s * s - a3 * s + a2) <= 1e-9 * max(1.0, a3 * abs(s), a2)
        assert r.b <= r.c


def test_params_validation():
    for bad in [(0, 1, 0, 2), (1, -1, 0, 2), (1, 1, 0, 1.0), (1, 1, math.nan, 2)]:
        with pytest.raises(ValueError):
            FxTParams(*bad)
    with pytest.raises(ValueError):
        FxTParams(1, 1, 0, 2, kk=1.0)


def test_regimes():
    assert regime(FxTParams(1, 1, 3, 2)) == STRONG
    assert regime(FxTParams(1, 1, 1, 2)) == WEAK
    assert regime(FxTParams(1, 1, -0.5, 2)) == CONTRACTING


# --------------------------------------------------------------- oracle


def test_oracle_large_start_within_bound():
    p = FxTParams(1, 1, 0.0, 2)
    t, v = comparison_ode_oracle(p, 1e6)
    assert t <= math.pi


def test_oracle_at_boundary():
    p = FxTParams(1, 1, 0.9741, 4)
    t, _ = comparison_ode_oracle(p, residual_level(p) * 1.0001)
    assert t < 1e-3 * time_bound(p)


def test_oracle_dt_contract():
    p = FxTParams(1, 1, 0.0, 2)
    with pytest.raises(ValueError):
        comparison_ode_oracle(p, 10.0, dt=0.1)


def test_oracle_matches_exact_integral():
    # reach time from v0 is the integral of dV / |dV/dt| down to the level
    p = FxTParams(1.3, 0.7, 0.5, 3)
    lvl = residual_level(p)
    f = lambda v: 1.0 / (p.alpha * v**p.gamma1 + p.beta * v**p.gamma2 - p.delta)
    exact, _ = quad(f, lvl * (1 + 1e-9), 50.0, limit=200)
    t, _ = comparison_ode_oracle(p, 50.0)
    assert t == pytest.approx(exact, rel=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 5), st.floats(0.1, 5), st.floats(-3, 0), st.floats(1.05, 8))
def test_contracting_regime_reach_is_bounded(a, b, d, mu):
    p = FxTParams(a, b, d, mu)
    T = time_bound(p)
    for v0 in (10.0, 1e9):
        t, _ = comparison_ode_oracle(p, v0)
        # the bound is tight as v0 -> inf, so allow integration error
        assert t <= T * (1 + 1e-6)


def test_scenario_parameters_reach_within_bound():
    for p in (FxTParams(1, 1, 0.9741, 4), FxTParams(1, 1, 0.0, 4)):
        T = time_bound(p)
        for v0 in (10.0, 1e3, 1e6, 1e9):
            assert comparison_ode_oracle(p, v0)[0] <= T


def test_known_counterexample_exceeds_bound():
    # weak regime: the ODE needs slightly longer than the closed form allows
    p = FxTParams(4.0703, 1.7748, 1.6310, 2.3742)
    assert regime(p) == WEAK
    t, _ = comparison_ode_oracle(p, 1e6)
    assert t > time_bound(p)


def test_strong_regime_level_can_be_unreachable():
    # the residual level sits below the ODE equilibrium, so no crossing exists
    p = FxTParams(4.30128095527909, 0.2645693189967754, 2.1889663392898324, 2.229589344217913)
    assert regime(p) == STRONG
    lvl = residual_level(p)
    vdot = -p.alpha * lvl**p.gamma1 - p.beta * lvl**p.gamma2 + p.delta
    assert vdot > 0
    with pytest.raises(ConvergenceError):
        comparison_ode_oracle(p, 10.0)


# ----------------------------------------------------------- properties


@settings(max_examples=200, deadline=None)
@given(st.floats(0.1, 5), st.floats(0.1, 5), st.floats(1.05, 8), st.floats(0, 6), st.floats(0, 6))
def test_epsilon_max_monotone_within_regime(a, b, mu, d1, d2):
    lo, hi = sorted((d1, d2))
    p_lo, p_hi = FxTParams(a, b, lo, mu), FxTParams(a, b, hi, mu)
    assume(regime(p_lo) == regime(p_hi) or regime(p_lo) == CONTRACTING)
    assert epsilon_max(p_lo) <= epsilon_max(p_hi) * (1 + 1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 5), st.floats(0.1, 5), st.floats(-5, 6), st.floats(1.05, 8))
def test_epsilon_max_equals_residual(a, b, d, mu):
    p = FxTParams(a, b, d, mu)
    assert epsilon_max(p) == residual_level(p)
    if d <= 0:
        assert epsilon_max(p) == 0.0


def test_regime_boundary_jump_is_documented():
    # with kk = 1.2 the level jumps at delta = 2 sqrt(alpha beta)
    a, b, mu = 1.0, 1.0, 4
    s = 2.0
    below = residual_level(FxTParams(a, b, s * (1 - 1e-9), mu))
    at = residual_level(FxTParams(a, b, s, mu))
    above = residual_level(FxTParams(a, b, s * (1 + 1e-9), mu))
    assert below == pytest.approx(1.0) and above == pytest.approx(1.0, rel=1e-3)
    assert at == pytest.approx(1.2**4)


def test_strong_log_guard():
    # 1 + b can only vanish for negative roots; the guard still exists for safety
    p = FxTParams(1, 1, 3, 2)
    r = quadratic_roots(1, 1, 3)
    assert abs(1 + r.b) > 1e-12
    assert np.isfinite(time_bound(p))

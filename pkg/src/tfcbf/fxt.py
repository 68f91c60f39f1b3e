"""Fixed-time stability bounds.

Closed-form settling-time bound, residual Lyapunov level and the barrier
floor for the differential inequality

    dV/dt <= -alpha * V**(1 + 1/mu) - beta * V**(1 - 1/mu) + delta

together with an RK4 comparison-ODE oracle that integrates the inequality
with equality so the closed forms can be checked numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FxTParams",
    "RootData",
    "ConvergenceError",
    "regime",
    "time_bound",
    "residual_level",
    "epsilon_max",
    "quadratic_roots",
    "comparison_ode_oracle",
]

STRONG = "delta > 2*sqrt(alpha*beta)"
CRITICAL = "delta = 2*sqrt(alpha*beta)"
WEAK = "0 <= delta < 2*sqrt(alpha*beta)"
CONTRACTING = "delta <= 0"

# relative tolerance used to decide delta == 2*sqrt(alpha*beta)
_CRITICAL_RTOL = 1e-12


class ConvergenceError(RuntimeError):
    """The comparison ODE did not reach the residual level in time."""


@dataclass(frozen=True)
class FxTParams:
    """Tuning constants of the fixed-time inequality.

    ``alpha``, ``beta`` and ``delta`` play the roles of the two decay gains
    and the additive disturbance level; ``mu`` sets the exponents
    ``gamma1 = 1 + 1/mu`` and ``gamma2 = 1 - 1/mu``. ``kk`` only matters in
    the critical case where ``delta == 2*sqrt(alpha*beta)``.
    """

    alpha: float
    beta: float
    delta: float
    mu: float
    kk: float = 1.2

    def __post_init__(self):
        for name in ("alpha", "beta", "delta", "mu", "kk"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.mu <= 1:
            raise ValueError("mu must be > 1")
        if self.kk <= 1:
            raise ValueError("kk must be > 1")

    @property
    def gamma1(self) -> float:
        return 1.0 + 1.0 / self.mu

    @property
    def gamma2(self) -> float:
        return 1.0 - 1.0 / self.mu

    def with_delta(self, delta: float) -> "FxTParams":
        return FxTParams(self.alpha, self.beta, delta, self.mu, self.kk)


@dataclass(frozen=True)
class RootData:
    """Roots of ``a1*s**2 - a3*s + a2``.

    ``b`` and ``c`` (``b <= c``) are set when the discriminant is
    non-negative, otherwise ``k1`` and ``k2`` are set instead.
    """

    real: bool
    b: float | None = None
    c: float | None = None
    k1: float | None = None
    k2: float | None = None


def regime(p: FxTParams) -> str:
    """Label of the case that applies to ``p``; delta == 0 is contracting."""
    s = 2.0 * math.sqrt(p.alpha * p.beta)
    if p.delta <= 0:
        return CONTRACTING
    if math.isclose(p.delta, s, rel_tol=_CRITICAL_RTOL, abs_tol=0.0):
        return CRITICAL
    if p.delta > s:
        return STRONG
    return WEAK


def quadratic_roots(a1: float, a2: float, a3: float) -> RootData:
    """Solve ``a1*s**2 - a3*s + a2 = 0`` without subtractive cancellation.

    >>> quadratic_roots(1.0, 2.0, 3.0)
    RootData(real=True, b=1.0, c=2.0, k1=None, k2=None)
    """
    if a1 <= 0:
        raise ValueError("a1 must be positive")
    disc = a3 * a3 - 4.0 * a1 * a2
    if disc < 0:
        root = math.sqrt(-disc)
        return RootData(real=False, k1=math.sqrt(-disc / (4.0 * a1 * a1)), k2=-a3 / root)
    sq = math.sqrt(disc)
    if a3 == 0.0:
        # disc >= 0 with a3 == 0 only if a2 <= 0
        r = sq / (2.0 * a1)
        return RootData(real=True, b=-r, c=r)
    q = 0.5 * (a3 + math.copysign(sq, a3))
    r1 = q / a1
    r2 = a2 / q if q != 0.0 else r1
    lo, hi = sorted((r1, r2))
    return RootData(real=True, b=lo, c=hi)


def time_bound(p: FxTParams) -> float:
    """Upper bound on the time to reach the residual set."""
    mu, a, b, d = p.mu, p.alpha, p.beta, p.delta
    case = regime(p)
    if case == CONTRACTING:
        return mu * math.pi / (2.0 * math.sqrt(a * b))
    if case == CRITICAL:
        return mu / math.sqrt(a * b) / (p.kk - 1.0)
    roots = quadratic_roots(a, b, d)
    if case == STRONG:
        if abs(1.0 + roots.b) < 1e-12:
            raise ZeroDivisionError("|1 + b| vanishes in the logarithm argument")
        return mu / (a * (roots.c - roots.b)) * math.log(abs(1.0 + roots.c) / abs(1.0 + roots.b))
    return mu / (a * roots.k1) * (math.pi / 2.0 - math.atan(roots.k2))


def residual_level(p: FxTParams) -> float:
    """Lyapunov level ``v`` such that the residual set is ``{V <= v}``."""
    mu, a, b, d = p.mu, p.alpha, p.beta, p.delta
    case = regime(p)
    if case == CONTRACTING:
        return 0.0
    if case == CRITICAL:
        return p.kk**mu * (b / a) ** (mu / 2.0)
    if case == STRONG:
        return quadratic_roots(a, b, d).c ** mu
    return d / (2.0 * math.sqrt(a * b))


def epsilon_max(p: FxTParams) -> float:
    """Largest barrier violation left once the residual set is reached.

    Numerically identical to :func:`residual_level`; the barrier is then
    guaranteed to satisfy ``H >= -epsilon_max(p)``.
    """
    return residual_level(p)


def _vdot(v: float, p: FxTParams) -> float:
    v = max(v, 0.0)
    return -p.alpha * v**p.gamma1 - p.beta * v**p.gamma2 + p.delta


def comparison_ode_oracle(p: FxTParams, v0: float, dt: float | None = None):
    """Integrate the comparison ODE with RK4 from ``v0``.

    Returns ``(t_reach, v_final)`` where ``t_reach`` is the first time the
    state falls to ``residual_level(p) * (1 + 1e-9)``; the crossing is
    located inside the last step by linear interpolation. ``dt`` defaults
    to ``1e-3 * time_bound(p)`` and is shortened while V is large, where
    the decay term is stiff, and while V approaches 0.

    Raises:
        ConvergenceError: no crossing within ``10 * time_bound(p)``.
    """
    T = time_bound(p)
    if dt is None:
        dt = 1e-3 * T
    if dt <= 0 or dt > 1e-3 * T * (1 + 1e-12):
        raise ValueError("dt must be in (0, 1e-3 * time_bound]")
    level = residual_level(p) * (1.0 + 1e-9)
    if v0 <= level:
        return 0.0, float(v0)
    t, v = 0.0, float(v0)
    t_max = 10.0 * T
    while t < t_max:
        k1 = _vdot(v, p)
        # shrink the step so one stage moves v by <= 5 %: large v is stiff and
        # near 0 the v**gamma1 term is not Lipschitz
        h = min(dt, max(0.05 * v / -k1, 1e-6 * dt)) if k1 < 0 else dt
        k2 = _vdot(v + 0.5 * h * k1, p)
        k3 = _vdot(v + 0.5 * h * k2, p)
        k4 = _vdot(v + h * k3, p)
        v_next = v + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if v_next <= level:
            frac = (v - level) / (v - v_next)
            return t + frac * h, float(level)
        if not np.isfinite(v_next):
            raise ConvergenceError("comparison ODE diverged")
        t += h
        v = v_next
    raise ConvergenceError(
        f"no crossing of residual level {level:.6g} within {t_max:.6g} s (v = {v:.6g})"
    )

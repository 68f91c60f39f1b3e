"""Per-agent relaxed QP controller.

Each step solves

    min_{u, eps >= 0}  0.5 * ||u||^2 + 0.5 * eps^2
    s.t.  grad_u @ u + drift_term >= rhs_core - eps

with ``rhs_core = delta - rho(H)`` and ``rho(r) = alpha*sgn(r)|r|^g1 +
beta*sgn(r)|r|^g2`` (``sgn(0) = 0``). Without input bounds the optimum is
closed form. With box bounds the (tiny) active sets are enumerated and the
unique KKT point is returned.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from .barrier import BarrierSpec, _value_and_grad, DegeneratePointError
from .fxt import FxTParams

__all__ = [
    "QpInstance",
    "QpSolution",
    "SaturationError",
    "rho",
    "assemble",
    "solve",
    "kkt_residual",
    "Controller",
    "Telemetry",
    "control_step",
]

_FEAS_TOL = 1e-10


class SaturationError(RuntimeError):
    """No admissible control exists for the given input bounds."""

    def __init__(self, message, u_clamped):
        super().__init__(message)
        self.u_clamped = u_clamped


def rho(r: float, p: FxTParams) -> float:
    """Odd fixed-time gain ``alpha*sgn(r)|r|^g1 + beta*sgn(r)|r|^g2``."""
    if r == 0.0:
        return 0.0
    s = 1.0 if r > 0 else -1.0
    a = abs(r)
    return s * (p.alpha * a**p.gamma1 + p.beta * a**p.gamma2)


@dataclass(frozen=True)
class QpInstance:
    grad_u: np.ndarray
    drift_term: float
    rhs_core: float
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    H: float = float("nan")

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.grad_u, dtype=float))
        object.__setattr__(self, "grad_u", g)
        if not (np.all(np.isfinite(g)) and np.isfinite(self.drift_term) and np.isfinite(self.rhs_core)):
            raise ValueError("QP instance has non-finite entries")
        for name in ("lower", "upper"):
            b = getattr(self, name)
            if b is not None:
                b = np.broadcast_to(np.asarray(b, dtype=float), g.shape).copy()
                object.__setattr__(self, name, b)

    @property
    def m(self) -> int:
        return len(self.grad_u)

    @property
    def boxed(self) -> bool:
        return self.lower is not None or self.upper is not None

    def constraints(self):
        """Rows ``G z >= h`` over ``z = (u, eps)`` with their names."""
        m = self.m
        rows, rhs, names = [], [], []
        rows.append(np.append(self.grad_u, 1.0))
        rhs.append(self.rhs_core - self.drift_term)
        names.append("cbf")
        e = np.zeros(m + 1)
        e[m] = 1.0
        rows.append(e)
        rhs.append(0.0)
        names.append("eps>=0")
        for i in range(m):
            if self.lower is not None and np.isfinite(self.lower[i]):
                r = np.zeros(m + 1)
                r[i] = 1.0
                rows.append(r)
                rhs.append(self.lower[i])
                names.append(f"u{i}>=lo")
            if self.upper is not None and np.isfinite(self.upper[i]):
                r = np.zeros(m + 1)
                r[i] = -1.0
                rows.append(r)
                rhs.append(-self.upper[i])
                names.append(f"u{i}<=hi")
        return np.array(rows), np.array(rhs), names


@dataclass(frozen=True)
class QpSolution:
    u: np.ndarray
    eps: float
    active_set: tuple
    kkt_residual: float
    multipliers: np.ndarray = field(default=None, repr=False)

    @property
    def objective(self) -> float:
        return 0.5 * float(self.u @ self.u) + 0.5 * self.eps**2


def kkt_residual(inst: QpInstance, u, eps, lam) -> float:
    """Max violation of stationarity, feasibility and complementarity."""
    G, h, _ = inst.constraints()
    z = np.append(np.asarray(u, dtype=float), eps)
    slack = G @ z - h
    stat = np.abs(z - G.T @ lam)
    return float(
        max(
            stat.max(),
            max(0.0, -slack.min()),
            max(0.0, -np.min(lam)),
            np.max(np.abs(lam * slack)),
        )
    )


def _solution(inst, z, lam, names):
    act = tuple(n for n, l in zip(names, lam) if l > 0)
    u = z[:-1].copy()
    eps = float(max(z[-1], 0.0))
    res = kkt_residual(inst, u, eps, lam)
    return QpSolution(u, eps, act, res, lam)


def solve(inst: QpInstance) -> QpSolution:
    """Exact minimiser of the relaxed QP.

    Raises:
        SaturationError: the input bounds are contradictory (``lower > upper``).
    """
    G, h, names = inst.constraints()
    m = inst.m
    a = inst.grad_u
    r = inst.rhs_core - inst.drift_term
    if not inst.boxed:
        lam = np.zeros(len(h))
        if r <= 0:
            return _solution(inst, np.zeros(m + 1), lam, names)
        lam[0] = r / (a @ a + 1.0)
        z = lam[0] * np.append(a, 1.0)
        return _solution(inst, z, lam, names)

    lo = inst.lower if inst.lower is not None else np.full(m, -np.inf)
    hi = inst.upper if inst.upper is not None else np.full(m, np.inf)
    if np.any(lo > hi):
        raise SaturationError("input bounds are contradictory", np.clip(np.zeros(m), lo, hi))

    # which rows may be active together: at most one bound per input
    groups = {}
    for k, name in enumerate(names[2:], start=2):
        groups.setdefault(name[: name.index(">") if ">" in name else name.index("<")], []).append(k)
    choices = [[None] + ks for ks in groups.values()]
    best = None
    for c0, c1 in itertools.product((False, True), repeat=2):
        for pick in itertools.product(*choices):
            S = [k for k in pick if k is not None]
            if c0:
                S.append(0)
            if c1:
                S.append(1)
            S.sort()
            lam = np.zeros(len(h))
            if S:
                GS = G[S]
                lamS, *_ = np.linalg.lstsq(GS @ GS.T, h[S], rcond=None)
                z = GS.T @ lamS
                if np.max(np.abs(GS @ z - h[S])) > 1e-9 * (1 + np.max(np.abs(h[S]))):
                    continue
                if np.any(lamS < -1e-12):
                    continue
                lam[S] = np.maximum(lamS, 0.0)
            else:
                z = np.zeros(m + 1)
            if np.min(G @ z - h) < -_FEAS_TOL * (1 + np.max(np.abs(h))):
                continue
            sol = _solution(inst, z, lam, names)
            if best is None or sol.kkt_residual < best.kkt_residual:
                best = sol
            if sol.kkt_residual <= 1e-12:
                return sol
    if best is None:
        raise SaturationError("no KKT point found", np.clip(np.zeros(m), lo, hi))
    return best


def assemble(spec: BarrierSpec, model, x, t: float, params: FxTParams, delta: float,
             offset: int) -> QpInstance:
    """Build the QP instance of the agent whose state is ``x[offset:offset+n]``.

    ``model`` provides ``drift(xk, t)``, ``input_map(xk, t)``, ``n`` and
    optional ``lower``/``upper`` input bounds.
    """
    x = np.asarray(x, dtype=float)
    xbar = spec.project(x)
    H, G, Ht, _ = _value_and_grad(spec, xbar[None, :], t)
    if not np.all(np.isfinite(G)):
        raise DegeneratePointError(f"barrier gradient undefined at t = {t}")
    H, gbar, Ht = float(H[0]), G[0], float(Ht[0])
    grad_x = np.zeros(spec.dim)
    grad_x[spec.index_map] = gbar
    gk = grad_x[offset : offset + model.n]
    xk = x[offset : offset + model.n]
    grad_u = gk @ model.input_map(xk, t)
    drift = float(gk @ model.drift(xk, t)) + Ht
    rhs = delta - rho(H, params)
    return QpInstance(grad_u, drift, rhs, getattr(model, "lower", None), getattr(model, "upper", None), H)


@dataclass
class Telemetry:
    H: float
    delta: float
    eps: float
    active_set: tuple
    solve_time: float
    grad_norm: float
    delta_condition: bool


class Controller:
    """Fixed-time barrier controller of one agent.

    ``delta`` is used as given; when it is ``None`` it is estimated once as
    ``sup_gradient_norm * coupling_bound`` from ``delta_probe`` (a dict with
    ``domain``, ``times`` and optionally ``samples``).
    """

    def __init__(self, spec: BarrierSpec, model, params: FxTParams, offset: int,
                 coupling_bound: float = 0.0, delta: float | None = None, delta_probe=None):
        from .barrier import sup_gradient_norm

        self.spec = spec
        self.model = model
        self.offset = offset
        self.coupling_bound = float(coupling_bound)
        self.delta_estimate = None
        if delta_probe is not None:
            self.delta_estimate = sup_gradient_norm(
                spec, delta_probe["domain"], delta_probe["times"], delta_probe.get("samples", 4096)
            ) * self.coupling_bound
        if delta is None:
            if self.delta_estimate is None:
                raise ValueError("either delta or delta_probe is required")
            delta = self.delta_estimate
        self.delta = float(delta)
        self.params = params.with_delta(self.delta)

    def step(self, x, t: float):
        """Return ``(u, eps, telemetry)`` for the state snapshot ``x`` at ``t``."""
        t0 = time.perf_counter()
        inst = assemble(self.spec, self.model, x, t, self.params, self.delta, self.offset)
        sol = solve(inst)
        elapsed = time.perf_counter() - t0
        xbar = self.spec.project(np.asarray(x, dtype=float))
        _, G, _, _ = _value_and_grad(self.spec, xbar[None, :], t)
        gnorm = float(np.linalg.norm(G[0]))
        ok = self.delta >= self.coupling_bound * gnorm - sol.eps - 1e-12
        tele = Telemetry(inst.H, self.delta, sol.eps, sol.active_set, elapsed, gnorm, bool(ok))
        return sol.u, sol.eps, tele


def control_step(spec: BarrierSpec, model, x, t: float, params: FxTParams, offset: int = 0):
    """One-shot ``assemble`` + ``solve`` with ``delta = params.delta``."""
    return Controller(spec, model, params, offset, delta=params.delta).step(x, t)

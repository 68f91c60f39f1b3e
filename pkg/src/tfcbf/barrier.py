"""Time-varying barrier functions for STL fragment formulas.

Each temporal operator in the top-level conjunction becomes one member

    H_j(x, t) = h_j(x) - gamma_j(t)

where ``h_j`` is the smooth-min of the operator's predicates and
``gamma_j`` is a piecewise-linear, non-decreasing lower bound on ``h_j``
that settles at a positive margin ``gamma_inf`` by ``t_star``. Members are
conjoined with the log-sum-exp smooth-min

    H(x, t) = -(1/eta) * log(sum_j exp(-eta * H_j(x, t)))

over the members that are still active at ``t``. A member is dropped once
its interval ends (``t >= b_j``), except members reaching the latest
deadline, which stay active so the barrier is defined for all ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .stl import (
    Always,
    And,
    Eventually,
    FragmentError,
    Pred,
    Predicate,
    TrueF,
    Until,
    check_fragment,
    conjuncts,
    is_temporal,
)

__all__ = [
    "TimeProfile",
    "ProfileOptions",
    "MemberBarrier",
    "BarrierSpec",
    "AssumptionError",
    "DegeneratePointError",
    "softmin",
    "build_barrier",
    "eval_barrier",
    "eval_barrier_gradient",
    "next_switch",
    "sup_gradient_norm",
    "check_nonempty_interior",
]

GRADIENT_SAFETY = 1.1


class AssumptionError(ValueError):
    """Composed zero-superlevel set has empty interior at a probe time."""


class DegeneratePointError(ValueError):
    """Barrier gradient is undefined (evaluation at a ball center)."""


def softmin(values, eta: float):
    """Log-sum-exp smooth minimum along the last axis, with its weights.

    Computed with a max-shift so ``eta * spread`` up to ~700 is exact to
    rounding; the returned weights are the softmax of ``-eta * values``.
    """
    v = np.asarray(values, dtype=float)
    m = np.min(v, axis=-1, keepdims=True)
    e = np.exp(-eta * (v - m))
    s = np.sum(e, axis=-1, keepdims=True)
    # the minimum contributes exactly 1; log1p keeps tiny tails
    tail = np.sum(np.where(v > m, e, 0.0), axis=-1) + (np.sum(v == m, axis=-1) - 1)
    out = m[..., 0] - np.log1p(tail) / eta
    return out, e / s


@dataclass(frozen=True)
class TimeProfile:
    """``gamma(t)``: linear from ``gamma0`` at t=0 to ``gamma_inf`` at ``tstar``."""

    gamma0: float
    gamma_inf: float
    tstar: float

    def __call__(self, t: float) -> float:
        if self.tstar <= 0 or t >= self.tstar:
            return self.gamma_inf
        return self.gamma0 + (self.gamma_inf - self.gamma0) * max(t, 0.0) / self.tstar

    def rate(self, t: float) -> float:
        """Right derivative of ``gamma`` at ``t``."""
        if self.tstar <= 0 or t >= self.tstar:
            return 0.0
        return (self.gamma_inf - self.gamma0) / self.tstar


@dataclass(frozen=True)
class ProfileOptions:
    """How member time profiles are chosen.

    ``rho_margin`` times the predicate scale gives ``gamma_inf``. With
    ``adaptive`` and an initial state, ``gamma0 = min(gamma_inf, h0 - r0)``
    so every member starts at least ``r0`` inside its set; otherwise
    ``gamma0 = gamma_inf`` and the barrier starts wherever the state is.
    Eventually members settle at ``a + eventually_fraction * (b - a)``.
    """

    rho_margin: float = 0.05
    r0: float = 0.1
    eventually_fraction: float = 0.75
    adaptive: bool = True

    def __post_init__(self):
        if not self.rho_margin > 0:
            raise ValueError("rho_margin must be > 0")
        if not 0.0 <= self.eventually_fraction <= 1.0:
            raise ValueError("eventually_fraction must be in [0, 1]")


@dataclass(frozen=True, eq=False)
class MemberBarrier:
    kind: str
    a: float
    b: float
    predicates: tuple
    eta: float
    profile: TimeProfile
    source: str = ""

    def h(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        if len(self.predicates) == 1:
            return np.asarray(self.predicates[0](X), dtype=float)
        vals = np.stack([p(X) for p in self.predicates], axis=-1)
        return softmin(vals, self.eta)[0]

    def h_and_grad(self, X):
        X = np.atleast_2d(X)
        if len(self.predicates) == 1:
            p = self.predicates[0]
            return np.asarray(p(X), dtype=float), p.gradient(X)
        vals = np.stack([p(X) for p in self.predicates], axis=-1)
        grads = np.stack([p.gradient(X) for p in self.predicates], axis=1)
        v, w = softmin(vals, self.eta)
        return v, np.einsum("nk,nkd->nd", w, grads)

    @property
    def scale(self) -> float:
        return min(p.scale for p in self.predicates)

    def active(self, t: float, final: float, left: bool = False) -> bool:
        if self.b >= final:
            return True
        return t <= self.b if left else t < self.b


@dataclass(frozen=True, eq=False)
class BarrierSpec:
    """Composed barrier of one task.

    ``index_map`` lists the global state indices that make up the formula
    state ``xbar``; all member predicates are expressed over ``xbar``.
    """

    members: tuple
    eta: float
    switches: tuple
    index_map: np.ndarray
    dim: int
    probes: tuple = field(default=(), compare=False)

    @property
    def n_bar(self) -> int:
        return len(self.index_map)

    @property
    def final(self) -> float:
        return max(m.b for m in self.members)

    def project(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float)[..., self.index_map]

    def active_members(self, t: float, left: bool = False) -> list:
        fin = self.final
        return [m for m in self.members if m.active(t, fin, left)]


# ------------------------------------------------------------ construction


def _member_predicates(node) -> list:
    preds = []
    for c in conjuncts(node):
        if isinstance(c, Pred):
            preds.append(c.predicate)
        elif isinstance(c, TrueF):
            continue
        else:
            raise FragmentError(f"unexpected {type(c).__name__} inside a boolean formula")
    return preds


def _operators(phi) -> list:
    """(kind, a, b, psi) per temporal operator; until becomes always + eventually."""
    ops = []
    for item in conjuncts(phi):
        if isinstance(item, Always):
            ops.append(("always", item.a, item.b, item.child, str(item)))
        elif isinstance(item, Eventually):
            ops.append(("eventually", item.a, item.b, item.child, str(item)))
        elif isinstance(item, Until):
            # sufficient condition: left holds on [0, b] and right at some t' in [a, b]
            ops.append(("always", 0.0, item.b, item.left, str(item)))
            ops.append(("eventually", item.a, item.b, item.right, str(item)))
        elif not is_temporal(item):
            raise FragmentError(f"top-level conjunct {item} has no temporal operator")
    return ops


def build_barrier(
    phi,
    eta: float,
    margins: ProfileOptions | None = None,
    x0=None,
    index_map=None,
    eta_pred: float | None = None,
    check: bool = True,
    domain=None,
    seed: int = 0,
) -> BarrierSpec:
    """Build the composed barrier of a fragment formula.

    Args:
        phi: formula from :func:`tfcbf.stl.parse_formula`.
        eta: smooth-min sharpness used to conjoin members.
        margins: time-profile options.
        x0: initial *global* state; enables adaptive initial offsets.
        index_map: global indices forming the formula state. Defaults to
            every component some predicate depends on.
        eta_pred: sharpness for conjunctions inside one operator
            (defaults to ``eta``).
        check: probe the composed set for non-empty interior.
        domain: ``(lo, hi)`` box in formula-state coordinates for the probe.

    Raises:
        FragmentError: formula outside the fragment.
        AssumptionError: empty interior found at some probe time.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    margins = margins or ProfileOptions()
    eta_pred = eta if eta_pred is None else eta_pred
    check_fragment(phi)

    ops = []
    for kind, a, b, psi, src in _operators(phi):
        preds = _member_predicates(psi)
        if preds:
            ops.append((kind, a, b, preds, src))
    if not ops:
        raise FragmentError("formula is trivially true; nothing to enforce")

    dims = {p.dim for _, _, _, preds, _ in ops for p in preds}
    if len(dims) != 1:
        raise FragmentError(f"predicates disagree on state dimension: {sorted(dims)}")
    dim = dims.pop()
    if index_map is None:
        cols = set()
        for _, _, _, preds, _ in ops:
            for p in preds:
                cols.update(int(c) for c in p.columns())
        index_map = sorted(cols)
    index_map = np.asarray(index_map, dtype=int)
    if len(index_map) == 0:
        raise FragmentError("predicates do not depend on the state")

    xbar0 = None
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float)
        if x0.shape != (dim,):
            raise ValueError(f"x0 must be a global state of length {dim}")
        xbar0 = x0[index_map]

    members = []
    for kind, a, b, preds, src in ops:
        local = tuple(p.restrict(index_map) for p in preds)
        tstar = a if kind == "always" else a + margins.eventually_fraction * (b - a)
        ginf = margins.rho_margin * min(p.scale for p in local)
        proto = MemberBarrier(kind, a, b, local, eta_pred, TimeProfile(ginf, ginf, tstar), src)
        g0 = ginf
        if margins.adaptive and xbar0 is not None:
            g0 = min(ginf, float(proto.h(xbar0)[0]) - margins.r0)
        members.append(MemberBarrier(kind, a, b, local, eta_pred, TimeProfile(g0, ginf, tstar), src))

    switches = tuple(sorted({float(m.b) for m in members}))
    spec = BarrierSpec(tuple(members), float(eta), switches, index_map, dim)
    if check:
        probes = check_nonempty_interior(spec, domain=domain, x0=xbar0, seed=seed)
        spec = BarrierSpec(spec.members, spec.eta, spec.switches, spec.index_map, spec.dim, tuple(probes))
    return spec


# ------------------------------------------------------------- evaluation


def _values(spec: BarrierSpec, X, t: float, left: bool):
    act = spec.active_members(t, left)
    if not act:
        raise ValueError(f"no active barrier member at t = {t}")
    return act, np.stack([m.h(X) - m.profile(t) for m in act], axis=-1)


def eval_barrier(spec: BarrierSpec, xbar, t: float, left: bool = False):
    """Composed barrier value; ``left=True`` gives the limit from the left at a switch."""
    if t < 0:
        raise ValueError("t must be >= 0")
    X = np.asarray(xbar, dtype=float)
    _, V = _values(spec, np.atleast_2d(X), t, left)
    out = softmin(V, spec.eta)[0]
    return float(out[0]) if X.ndim == 1 else out


def _value_and_grad(spec: BarrierSpec, X, t: float, left: bool = False):
    act = spec.active_members(t, left)
    if not act:
        raise ValueError(f"no active barrier member at t = {t}")
    vals, grads = [], []
    for m in act:
        h, g = m.h_and_grad(X)
        vals.append(h - m.profile(t))
        grads.append(g)
    V = np.stack(vals, axis=-1)
    H, w = softmin(V, spec.eta)
    G = np.einsum("nk,knd->nd", w, np.stack(grads))
    rates = np.array([m.profile.rate(t) for m in act])
    Ht = -(w @ rates)
    return H, G, Ht, w


def eval_barrier_gradient(spec: BarrierSpec, xbar, t: float):
    """``(dH/dxbar, dH/dt)``; time derivative is the right derivative at kinks.

    Raises:
        DegeneratePointError: ``xbar`` sits at the center of a ball predicate.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    X = np.atleast_2d(np.asarray(xbar, dtype=float))
    _, G, Ht, _ = _value_and_grad(spec, X, t)
    if not np.all(np.isfinite(G)):
        raise DegeneratePointError(f"barrier gradient undefined at {np.asarray(xbar).tolist()}")
    return G[0], float(Ht[0])


def barrier_weights(spec: BarrierSpec, xbar, t: float) -> np.ndarray:
    """Softmin weights of the active members at ``(xbar, t)``."""
    X = np.atleast_2d(np.asarray(xbar, dtype=float))
    return _value_and_grad(spec, X, t)[3][0]


def next_switch(spec: BarrierSpec, t: float) -> float:
    """Earliest deactivation time strictly after ``t`` (``inf`` if none)."""
    later = [s for s in spec.switches if s - t > 0]
    return min(later) if later else math.inf


# ------------------------------------------------------------ diagnostics


def _check_box(lo, hi, n):
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (n,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (n,))
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(hi > lo)):
        raise ValueError("box must be bounded with hi > lo in every coordinate")
    return lo, hi


def sup_gradient_norm(spec: BarrierSpec, domain, tgrid, n_samples: int = 4096, seed: int = 0) -> float:
    """Sampled sup of ``||dH/dxbar||`` over ``domain x tgrid``, times 1.1."""
    lo, hi = _check_box(domain[0], domain[1], spec.n_bar)
    tgrid = list(tgrid)
    if not tgrid:
        raise ValueError("tgrid must not be empty")
    rng = np.random.default_rng(seed)
    X = rng.uniform(lo, hi, size=(n_samples, spec.n_bar))
    X = np.vstack([X, 0.5 * (lo + hi)])
    best = 0.0
    for t in tgrid:
        _, G, _, _ = _value_and_grad(spec, X, float(t))
        n = np.linalg.norm(G, axis=1)
        n = n[np.isfinite(n)]
        if n.size:
            best = max(best, float(n.max()))
    return GRADIENT_SAFETY * best


def probe_times(spec: BarrierSpec) -> list:
    """(t, left) pairs: start, both sides of each switch, and midpoints."""
    pts = sorted({0.0, *spec.switches})
    out = [(0.0, False)]
    for lo, hi in zip(pts[:-1], pts[1:]):
        out.append((0.5 * (lo + hi), False))
        out.append((hi, True))
        out.append((hi, False))
    return out


def _default_box(spec: BarrierSpec, x0):
    R = 1.0
    for m in spec.members:
        for p in m.predicates:
            if p.kind == "ball":
                R = max(R, float(np.max(np.abs(p.p), initial=0.0)) + p.eps)
            else:
                R = max(R, abs(p.d))
    center = np.zeros(spec.n_bar) if x0 is None else np.asarray(x0, dtype=float)
    half = 2.0 * R + 1.0 + (0.0 if x0 is None else float(np.max(np.abs(x0))))
    return center - half, center + half


def check_nonempty_interior(spec: BarrierSpec, domain=None, x0=None, restarts: int = 200,
                            iters: int = 300, seed: int = 0) -> list:
    """Maximise H at every probe time by projected gradient ascent.

    Returns ``[(t, left, best_value), ...]``; raises :class:`AssumptionError`
    when the best value found at some probe time is not positive.
    """
    lo, hi = _check_box(*(domain if domain is not None else _default_box(spec, x0)), spec.n_bar)
    rng = np.random.default_rng(seed)
    start = rng.uniform(lo, hi, size=(restarts, spec.n_bar))
    start[0] = 0.5 * (lo + hi)
    if x0 is not None and restarts > 1:
        start[1] = np.clip(x0, lo, hi)
    width = float(np.max(hi - lo))
    results = []
    for t, left in probe_times(spec):
        X = start.copy()
        best = -math.inf
        for k in range(iters):
            H, G, _, _ = _value_and_grad(spec, X, t, left)
            best = max(best, float(np.max(H)))
            if best > 0:
                break
            G = np.nan_to_num(G, nan=0.0)
            n = np.linalg.norm(G, axis=1, keepdims=True)
            step = 0.25 * width * 0.97**k
            X = np.clip(X + step * G / np.where(n > 0, n, 1.0), lo, hi)
        if not best > 0:
            side = "left limit " if left else ""
            raise AssumptionError(
                f"barrier set has empty interior at {side}t = {t:g} (best H = {best:.4g})"
            )
        results.append((t, left, best))
    return results

"""STL fragment: parser, AST and sampled quantitative semantics.

The fragment is

    psi ::= true | predicate | psi && psi
    phi ::= G[a,b] psi | F[a,b] psi | psi U[a,b] psi | phi && phi

with concave predicates only (affine half-spaces and norm balls). Concrete
syntax::

    G[15,90] (norm(p1 + [0.8,0] - p2) <= 2) && F[50,90] norm(p1 - [-1.2,1.2]) <= 2

Slice names such as ``p1`` resolve to index lists of the signal state
through a user-supplied mapping; without one, ``x`` is the whole state and
``x1 .. xn`` its single components.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "FormulaError",
    "FormulaSyntaxError",
    "FragmentError",
    "NonConcaveError",
    "HorizonError",
    "Predicate",
    "TrueF",
    "Pred",
    "And",
    "Always",
    "Eventually",
    "Until",
    "SampledSignal",
    "parse_formula",
    "default_slices",
    "robustness",
    "is_satisfied",
    "conjuncts",
    "check_fragment",
    "is_temporal",
    "horizon",
]

_TIME_TOL = 1e-9


class FormulaError(ValueError):
    """Base class for formula construction errors."""


class FormulaSyntaxError(FormulaError):
    def __init__(self, message: str, pos: int, text: str = ""):
        self.pos = pos
        self.text = text
        super().__init__(f"{message} at position {pos}")


class FragmentError(FormulaError):
    """Formula is well-formed but outside the supported fragment."""


class NonConcaveError(FragmentError):
    """Predicate function is not concave."""


class HorizonError(ValueError):
    """Signal does not cover the time window a formula needs."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Predicate:
    """Concave predicate ``h(x) >= 0``.

    ``kind == "affine"``: ``h(x) = c @ x + d``.
    ``kind == "ball"``: ``h(x) = eps - ||A @ x - p||``.
    """

    kind: str
    dim: int
    c: np.ndarray | None = None
    d: float = 0.0
    A: np.ndarray | None = None
    p: np.ndarray | None = None
    eps: float = 0.0
    label: str = ""

    def __post_init__(self):
        if self.kind == "affine":
            c = _frozen(self.c)
            if c.shape != (self.dim,):
                raise FormulaError(f"affine coefficient has shape {c.shape}, expected ({self.dim},)")
            object.__setattr__(self, "c", c)
            object.__setattr__(self, "d", float(self.d))
        elif self.kind == "ball":
            A = _frozen(np.atleast_2d(self.A))
            p = _frozen(np.atleast_1d(self.p))
            if A.shape[1] != self.dim:
                raise FormulaError(f"selection matrix has {A.shape[1]} columns, expected {self.dim}")
            if p.shape != (A.shape[0],):
                raise FormulaError("offset vector length does not match selection matrix rows")
            if not self.eps >= 0:
                raise FormulaError("ball radius must be >= 0")
            object.__setattr__(self, "A", A)
            object.__setattr__(self, "p", p)
            object.__setattr__(self, "eps", float(self.eps))
        else:
            raise FormulaError(f"unknown predicate kind {self.kind!r}")

    def __call__(self, x) -> np.ndarray | float:
        """Evaluate ``h`` on one state or on a stack of states (rows)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "affine":
            return x @ self.c + self.d
        r = x @ self.A.T - self.p
        return self.eps - np.linalg.norm(r, axis=-1)

    def gradient(self, x) -> np.ndarray:
        """Gradient of ``h``; rows of ``x`` at a ball center get NaN."""
        x = np.asarray(x, dtype=float)
        if self.kind == "affine":
            return np.broadcast_to(self.c, x.shape).copy()
        r = x @ self.A.T - self.p
        n = np.linalg.norm(r, axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            g = -(r / n) @ self.A
        return np.where(n > 0, g, np.nan)

    @property
    def scale(self) -> float:
        """Magnitude used to size barrier margins."""
        if self.kind == "ball" and self.eps > 0:
            return self.eps
        return 1.0

    def columns(self) -> np.ndarray:
        """Indices of state components the predicate depends on."""
        if self.kind == "affine":
            return np.flatnonzero(self.c != 0)
        return np.flatnonzero(np.any(self.A != 0, axis=0))

    def restrict(self, idx: Sequence[int]) -> "Predicate":
        """Same predicate expressed over the sub-state ``x[idx]``."""
        idx = np.asarray(idx, dtype=int)
        if self.kind == "affine":
            return Predicate("affine", len(idx), c=self.c[idx], d=self.d, label=self.label)
        return Predicate("ball", len(idx), A=self.A[:, idx], p=self.p, eps=self.eps, label=self.label)

    def __repr__(self):
        return f"Predicate({self.label or self.kind})"


# ---------------------------------------------------------------- AST nodes


@dataclass(frozen=True)
class TrueF:
    def __str__(self):
        return "true"


@dataclass(frozen=True)
class Pred:
    predicate: Predicate

    def __str__(self):
        return self.predicate.label or repr(self.predicate)


@dataclass(frozen=True)
class And:
    children: tuple

    def __str__(self):
        return " && ".join(_paren(c) for c in self.children)


@dataclass(frozen=True)
class Always:
    a: float
    b: float
    child: object

    def __str__(self):
        return f"G[{_num(self.a)},{_num(self.b)}] {_paren(self.child)}"


@dataclass(frozen=True)
class Eventually:
    a: float
    b: float
    child: object

    def __str__(self):
        return f"F[{_num(self.a)},{_num(self.b)}] {_paren(self.child)}"


@dataclass(frozen=True)
class Until:
    a: float
    b: float
    left: object
    right: object

    def __str__(self):
        return f"{_paren(self.left)} U[{_num(self.a)},{_num(self.b)}] {_paren(self.right)}"


def _num(v: float) -> str:
    return repr(int(v)) if float(v).is_integer() else repr(float(v))


def _paren(node) -> str:
    s = str(node)
    return f"({s})" if isinstance(node, (And, Until)) else s


_TEMPORAL = (Always, Eventually, Until)


def is_temporal(node) -> bool:
    return isinstance(node, _TEMPORAL)


def conjuncts(node) -> list:
    """Flatten nested conjunctions into a list of conjuncts."""
    if isinstance(node, And):
        out = []
        for c in node.children:
            out.extend(conjuncts(c))
        return out
    return [node]


def horizon(node) -> float:
    """Latest time offset the formula looks at."""
    if isinstance(node, (Always, Eventually, Until)):
        return node.b
    if isinstance(node, And):
        return max(horizon(c) for c in node.children)
    return 0.0


# ------------------------------------------------------------------- parser

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<op>&&|<=|>=|[()\[\],+\-*])"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*))"
)


@dataclass
class _Tok:
    kind: str
    value: str
    pos: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise FormulaSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        start = m.start(kind)
        toks.append(_Tok(kind, m.group(kind), start))
        pos = m.end()
    toks.append(_Tok("eof", "", len(text)))
    return toks


def default_slices(dim: int) -> dict[str, list[int]]:
    """``x`` for the whole state plus ``x1 .. xdim`` for single components."""
    out = {"x": list(range(dim))}
    for i in range(dim):
        out[f"x{i + 1}"] = [i]
    return out


@dataclass
class _Lin:
    """Vector-valued affine expression ``M @ x + v``."""

    M: np.ndarray
    v: np.ndarray

    @property
    def rows(self):
        return len(self.v)


class _Parser:
    def __init__(self, text: str, dim: int, slices: Mapping[str, Sequence[int]]):
        self.text = text
        self.dim = dim
        self.slices = slices
        self.toks = _tokenize(text)
        self.i = 0

    # token helpers
    def peek(self, k: int = 0) -> _Tok:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def next(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def error(self, msg: str, tok: _Tok | None = None):
        tok = tok or self.peek()
        return FormulaSyntaxError(msg, tok.pos, self.text)

    def expect(self, value: str) -> _Tok:
        t = self.peek()
        if t.value != value:
            raise self.error(f"expected {value!r}, found {t.value or 'end of input'!r}")
        return self.next()

    def at_temporal_op(self, k: int = 0) -> bool:
        t = self.peek(k)
        return t.kind == "name" and t.value in ("G", "F") and self.peek(k + 1).value == "["

    # grammar
    def parse(self):
        node = self.conj()
        if self.peek().kind != "eof":
            raise self.error(f"unexpected token {self.peek().value!r}")
        return node

    def conj(self):
        items = [self.temp()]
        while self.peek().value == "&&":
            self.next()
            items.append(self.temp())
        return items[0] if len(items) == 1 else And(tuple(items))

    def temp(self):
        if self.at_temporal_op():
            op = self.next().value
            a, b = self.interval()
            child = self.boolconj()
            return Always(a, b, child) if op == "G" else Eventually(a, b, child)
        left = self.boolconj()
        t = self.peek()
        if t.kind == "name" and t.value == "U":
            self.next()
            a, b = self.interval()
            right = self.boolconj()
            return Until(a, b, left, right)
        return left

    def interval(self):
        start = self.expect("[")
        a = self.signed_number()
        self.expect(",")
        b = self.signed_number()
        self.expect("]")
        if not (0 <= a <= b < math.inf):
            raise FormulaSyntaxError(f"invalid interval [{a}, {b}]", start.pos, self.text)
        return a, b

    def boolconj(self):
        items = [self.batom()]
        # '&&' followed by a temporal operator belongs to the outer conjunction
        while self.peek().value == "&&" and not self.at_temporal_op(1) and not self._temporal_group(1):
            self.next()
            items.append(self.batom())
        return items[0] if len(items) == 1 else And(tuple(items))

    def batom(self):
        t = self.peek()
        if self.at_temporal_op():
            # nested temporal operator: parsed here, rejected by the fragment check
            return self.temp()
        if t.value == "(" and self._paren_is_group():
            self.next()
            node = self.conj()
            self.expect(")")
            return node
        if t.kind == "name" and t.value == "true":
            self.next()
            return TrueF()
        return self.pred()

    def _temporal_group(self, k: int) -> bool:
        # does the parenthesised group starting at token i+k hold a temporal formula?
        j = self.i + k
        if self.toks[j].value != "(":
            return False
        depth = 0
        while self.toks[j].kind != "eof":
            t = self.toks[j]
            if t.value in ("(", "["):
                depth += 1
            elif t.value in (")", "]"):
                depth -= 1
                if depth == 0:
                    return False
            elif t.kind == "name" and (t.value == "U" or t.value in ("G", "F") and self.toks[j + 1].value == "["):
                return True
            j += 1
        return False

    def _paren_is_group(self) -> bool:
        # '(' opens a sub-formula unless it encloses a bare linear expression
        depth = 0
        j = self.i
        while True:
            t = self.toks[j]
            if t.kind == "eof":
                return True
            if t.value in ("(", "["):
                depth += 1
            elif t.value in (")", "]"):
                depth -= 1
                if depth == 0:
                    nxt = self.toks[j + 1]
                    return nxt.value not in ("<=", ">=", "+", "-", "*")
            elif depth == 1 and (t.value in ("<=", ">=", "&&", "true") or t.kind == "name" and t.value == "norm"):
                return True
            j += 1

    def pred(self):
        start = self.peek()
        if start.kind == "name" and start.value == "norm":
            self.next()
            self.expect("(")
            lin = self.linexpr()
            self.expect(")")
            op = self.next()
            if op.value == ">=":
                raise NonConcaveError(
                    f"norm(...) >= r is not concave (position {op.pos}); only norm(...) <= r is supported"
                )
            if op.value != "<=":
                raise self.error("expected '<=' after norm(...)", op)
            eps = self.signed_number()
            if eps < 0:
                raise FormulaSyntaxError("ball radius must be >= 0", op.pos, self.text)
            label = self.text[start.pos : self.toks[self.i - 1].pos + len(self.toks[self.i - 1].value)]
            return Pred(Predicate("ball", self.dim, A=lin.M, p=-lin.v, eps=eps, label=label.strip()))
        lin = self.linexpr()
        op = self.next()
        if op.value not in ("<=", ">="):
            raise self.error("expected '<=' or '>=' in predicate", op)
        rhs = self.signed_number()
        if lin.rows != 1:
            raise FormulaSyntaxError(
                f"half-space predicate needs a scalar expression, got dimension {lin.rows}",
                start.pos,
                self.text,
            )
        label = self.text[start.pos : self.toks[self.i - 1].pos + len(self.toks[self.i - 1].value)]
        if op.value == ">=":
            c, d = lin.M[0], lin.v[0] - rhs
        else:
            c, d = -lin.M[0], rhs - lin.v[0]
        return Pred(Predicate("affine", self.dim, c=c, d=d, label=label.strip()))

    def signed_number(self) -> float:
        sign = 1.0
        while self.peek().value in ("+", "-"):
            if self.next().value == "-":
                sign = -sign
        t = self.next()
        if t.kind != "num":
            raise self.error(f"expected a number, found {t.value or 'end of input'!r}", t)
        return sign * float(t.value)

    def linexpr(self) -> _Lin:
        sign = 1.0
        if self.peek().value in ("+", "-"):
            sign = -1.0 if self.next().value == "-" else 1.0
        acc = self.term(sign)
        while self.peek().value in ("+", "-"):
            sign = -1.0 if self.next().value == "-" else 1.0
            while self.peek().value in ("+", "-"):
                sign = -sign if self.next().value == "-" else sign
            tok = self.peek()
            t = self.term(sign)
            acc = self._add(acc, t, tok)
        return acc

    def _add(self, a: _Lin, b: _Lin, tok: _Tok) -> _Lin:
        if a.rows != b.rows:
            if a.rows == 1 and not a.M.any():
                a = _Lin(np.zeros((b.rows, self.dim)), np.full(b.rows, a.v[0]))
            elif b.rows == 1 and not b.M.any():
                b = _Lin(np.zeros((a.rows, self.dim)), np.full(a.rows, b.v[0]))
            else:
                raise self.error(f"dimension mismatch: {a.rows} vs {b.rows}", tok)
        return _Lin(a.M + b.M, a.v + b.v)

    def term(self, sign: float) -> _Lin:
        t = self.peek()
        coef = sign
        if t.kind == "num" and self.peek(1).value == "*":
            coef *= float(self.next().value)
            self.next()
            t = self.peek()
        if t.kind == "num":
            self.next()
            return _Lin(np.zeros((1, self.dim)), np.array([coef * float(t.value)]))
        if t.value == "[":
            self.next()
            vals = [self.signed_number()]
            while self.peek().value == ",":
                self.next()
                vals.append(self.signed_number())
            self.expect("]")
            v = coef * np.array(vals)
            return _Lin(np.zeros((len(v), self.dim)), v)
        if t.value == "(":
            self.next()
            inner = self.linexpr()
            self.expect(")")
            return _Lin(coef * inner.M, coef * inner.v)
        if t.kind == "name":
            if t.value not in self.slices:
                raise self.error(f"unknown signal slice {t.value!r}", t)
            idx = list(self.slices[t.value])
            if any(i < 0 or i >= self.dim for i in idx):
                raise self.error(f"slice {t.value!r} exceeds state dimension {self.dim}", t)
            self.next()
            M = np.zeros((len(idx), self.dim))
            M[np.arange(len(idx)), idx] = coef
            return _Lin(M, np.zeros(len(idx)))
        raise self.error(f"expected a term, found {t.value or 'end of input'!r}", t)


def check_fragment(node) -> None:
    for item in conjuncts(node):
        if isinstance(item, (Always, Eventually)):
            _check_boolean(item.child, item)
        elif isinstance(item, Until):
            _check_boolean(item.left, item)
            _check_boolean(item.right, item)
        else:
            _check_boolean(item, None)


def _check_boolean(node, parent) -> None:
    if is_temporal(node):
        where = f" under {type(parent).__name__}" if parent is not None else ""
        raise FragmentError(f"temporal operator {type(node).__name__}{where} is outside the fragment")
    if isinstance(node, And):
        for c in node.children:
            _check_boolean(c, parent)


def parse_formula(text: str, dim: int, slices: Mapping[str, Sequence[int]] | None = None):
    """Parse ``text`` into a formula over a ``dim``-dimensional signal.

    Raises:
        FormulaSyntaxError: malformed text (carries ``pos``).
        FragmentError: temporal operators nested under temporal operators.
        NonConcaveError: predicate of the form ``norm(...) >= r``.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    node = _Parser(text, dim, slices if slices is not None else default_slices(dim)).parse()
    check_fragment(node)
    return node


# --------------------------------------------------------------- semantics


@dataclass(frozen=True, eq=False)
class SampledSignal:
    """Signal samples ``values[i]`` taken at ``timestamps[i]``."""

    timestamps: np.ndarray
    values: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        ts = _frozen(self.timestamps)
        vals = np.array(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        vals.setflags(write=False)
        if ts.ndim != 1 or len(ts) == 0:
            raise ValueError("timestamps must be a non-empty 1-D array")
        if vals.ndim != 2 or vals.shape[0] != len(ts):
            raise ValueError("values must have one row per timestamp")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def index(self, t: float) -> int:
        i = int(np.searchsorted(self.timestamps, t - _TIME_TOL))
        if i >= len(self.timestamps) or abs(self.timestamps[i] - t) > _TIME_TOL:
            raise HorizonError(f"t = {t} is not a sample time of the signal")
        return i

    def window(self, lo: float, hi: float) -> slice:
        if hi > self.timestamps[-1] + _TIME_TOL:
            raise HorizonError(
                f"formula horizon {hi:g} s exceeds signal end {self.timestamps[-1]:g} s"
            )
        i0 = int(np.searchsorted(self.timestamps, lo - _TIME_TOL, side="left"))
        i1 = int(np.searchsorted(self.timestamps, hi + _TIME_TOL, side="right"))
        if i1 <= i0:
            raise HorizonError(f"no samples in window [{lo:g}, {hi:g}]")
        return slice(i0, i1)


def _series(node, sig: SampledSignal) -> np.ndarray:
    """Per-sample robustness of a non-temporal formula."""
    key = id(node)
    cached = sig._cache.get(key)
    if cached is not None and cached[0] is node:
        return cached[1]
    if isinstance(node, TrueF):
        out = np.full(len(sig.timestamps), np.inf)
    elif isinstance(node, Pred):
        if node.predicate.dim != sig.dim:
            raise ValueError(
                f"predicate dimension {node.predicate.dim} does not match signal dimension {sig.dim}"
            )
        out = np.asarray(node.predicate(sig.values), dtype=float)
    elif isinstance(node, And):
        out = np.min(np.stack([_series(c, sig) for c in node.children]), axis=0)
    else:
        raise FragmentError(f"{type(node).__name__} is not a boolean formula")
    sig._cache[key] = (node, out)
    return out


def robustness(phi, sig: SampledSignal, t: float = 0.0) -> float:
    """Robustness degree of ``phi`` on ``sig`` at time ``t``.

    Min/max semantics over the samples inside each window; no
    interpolation between samples.

    >>> sig = SampledSignal(np.arange(0, 10.5, 0.5), np.arange(0, 10.5, 0.5))
    >>> robustness(parse_formula("G[0,2] x >= 1", 1), sig, 0.0)
    -1.0
    """
    if isinstance(phi, And):
        return min(robustness(c, sig, t) for c in phi.children)
    if isinstance(phi, Always):
        w = sig.window(t + phi.a, t + phi.b)
        return float(np.min(_series(phi.child, sig)[w]))
    if isinstance(phi, Eventually):
        w = sig.window(t + phi.a, t + phi.b)
        return float(np.max(_series(phi.child, sig)[w]))
    if isinstance(phi, Until):
        w = sig.window(t + phi.a, t + phi.b)
        i0 = sig.index(t) if phi.a > 0 else w.start
        left = _series(phi.left, sig)
        right = _series(phi.right, sig)
        # running inf of the left operand from t up to each candidate t'
        run = np.minimum.accumulate(left[i0 : w.stop])
        cand = np.minimum(right[w], run[w.start - i0 :])
        return float(np.max(cand))
    return float(_series(phi, sig)[sig.index(t)])


def is_satisfied(phi, sig: SampledSignal, t: float = 0.0) -> bool:
    return robustness(phi, sig, t) >= 0.0

"""Constraint DSL: expression trees, parsing, evaluation and symbolic gradients.

Grammar (one statement per line, ``#`` starts a comment)::

    stmt     := [ "[" label "]" ] hardness ":" body
    hardness := "hard" | "soft" "(" weight ")"
    body     := bound | conserve | lininq | lineq | nonlin
    bound    := "y[" idx "]" ( "<=" real | ">=" real | "in" "[" real "," real "]" )
    conserve := "sum(" term ("+" term)* ")" "==" real "tol" real
    lininq   := term (("+" | "-") term)* "<=" real
    lineq    := term (("+" | "-") term)* "==" real
    term     := real "*" ("y[" idx "]" | "x[" idx "]")
    nonlin   := "g:" expr "<=" "0"

``expr`` is ordinary arithmetic over ``y[i]``, ``x[j]`` and reals with unary
minus, ``abs exp log sqrt square`` calls, ``^const`` powers and
``wsum([w1, ...], e1, ...)`` weighted sums.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConstraintError, DomainError, ParseError

# Satisfaction tolerance for hard constraints (projection tolerance).
FEAS_TOL = 1e-6

_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5
_FUNCS = ("abs", "exp", "log", "sqrt", "square")
_LABEL_RE = re.compile(r"^[A-Za-z0-9_.:\-]+$")
_LABEL_PREFIX_RE = re.compile(r"^\s*\[([^\]]*)\]\s*(?=hard\b|soft\b)")


def _fmt(v: float) -> str:
    return repr(float(v))


def _check(value: float, node: "Expr") -> float:
    if not math.isfinite(value):
        raise DomainError("non-finite value", node)
    return value


# ---------------------------------------------------------------------------
# Expression trees
# ---------------------------------------------------------------------------


class Expr:
    """Immutable expression node. Subclasses are frozen dataclasses."""

    precedence = _PREC_ATOM

    @property
    def children(self) -> tuple["Expr", ...]:
        return ()

    def value(self, y: np.ndarray, x: np.ndarray) -> float:
        raise NotImplementedError

    def value_grad(self, y: np.ndarray, x: np.ndarray) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def to_dsl(self) -> str:
        raise NotImplementedError

    def __str__(self) -> str:
        return self.to_dsl()

    def max_index(self) -> tuple[int, int]:
        """Largest referenced (y index, x index); -1 when unused."""
        my, mx = -1, -1
        for c in self.children:
            cy, cx = c.max_index()
            my, mx = max(my, cy), max(mx, cx)
        return my, mx

    def depth(self) -> int:
        return 1 + max((c.depth() for c in self.children), default=0)


@dataclass(frozen=True)
class Const(Expr):
    val: float

    def __post_init__(self):
        if not math.isfinite(self.val):
            raise ConstraintError("constants must be finite")
        object.__setattr__(self, "val", float(self.val))

    def value(self, y, x):
        return self.val

    def value_grad(self, y, x):
        return self.val, np.zeros(len(y))

    def to_dsl(self):
        return _fmt(self.val)


@dataclass(frozen=True)
class OutVar(Expr):
    index: int

    def value(self, y, x):
        return float(y[self.index])

    def value_grad(self, y, x):
        g = np.zeros(len(y))
        g[self.index] = 1.0
        return float(y[self.index]), g

    def to_dsl(self):
        return f"y[{self.index}]"

    def max_index(self):
        return self.index, -1


@dataclass(frozen=True)
class InVar(Expr):
    index: int

    def value(self, y, x):
        return float(x[self.index])

    def value_grad(self, y, x):
        return float(x[self.index]), np.zeros(len(y))

    def to_dsl(self):
        return f"x[{self.index}]"

    def max_index(self):
        return -1, self.index


@dataclass(frozen=True)
class Unary(Expr):
    op: str
    child: Expr

    def __post_init__(self):
        if self.op not in ("neg",) + _FUNCS:
            raise ConstraintError(f"unknown unary op {self.op!r}")

    @property
    def precedence(self):
        if self.op == "neg":
            return _PREC_NEG
        if self.op == "square":
            return _PREC_POW
        return _PREC_ATOM

    @property
    def children(self):
        return (self.child,)

    def _apply(self, u: float) -> tuple[float, float]:
        """Return (f(u), f'(u)) with domain checks."""
        op = self.op
        if op == "neg":
            return -u, -1.0
        if op == "abs":
            return abs(u), (1.0 if u > 0 else -1.0 if u < 0 else 0.0)
        if op == "square":
            return u * u, 2.0 * u
        if op == "exp":
            try:
                v = math.exp(u)
            except OverflowError:
                raise DomainError("exp overflow", self) from None
            return v, v
        if op == "log":
            if u <= 0.0:
                raise DomainError(f"log of nonpositive argument {u!r}", self)
            return math.log(u), 1.0 / u
        # sqrt
        if u < 0.0:
            raise DomainError(f"sqrt of negative argument {u!r}", self)
        r = math.sqrt(u)
        return r, (1.0 / (2.0 * r) if r > 0.0 else math.inf)

    def value(self, y, x):
        return _check(self._apply(self.child.value(y, x))[0], self)

    def value_grad(self, y, x):
        u, gu = self.child.value_grad(y, x)
        v, d = self._apply(u)
        _check(v, self)
        if not math.isfinite(d):
            raise DomainError("derivative undefined", self)
        g = d * gu
        if not np.all(np.isfinite(g)):
            raise DomainError("non-finite gradient", self)
        return v, g

    def to_dsl(self):
        c = self.child
        if self.op == "neg":
            if isinstance(c, Const) or c.precedence < _PREC_NEG:
                return f"-({c.to_dsl()})"
            return f"-{c.to_dsl()}"
        if self.op == "square":
            return f"{_wrap_base(c)}^2"
        return f"{self.op}({c.to_dsl()})"


def _wrap_base(c: Expr) -> str:
    if c.precedence < _PREC_ATOM or (isinstance(c, Const) and c.val < 0):
        return f"({c.to_dsl()})"
    return c.to_dsl()


_BIN_SYM = {"add": "+", "sub": "-", "mul": "*", "div": "/"}
_BIN_PREC = {"add": _PREC_ADD, "sub": _PREC_ADD, "mul": _PREC_MUL, "div": _PREC_MUL}


@dataclass(frozen=True)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr

    def __post_init__(self):
        if self.op not in _BIN_SYM:
            raise ConstraintError(f"unknown binary op {self.op!r}")

    @property
    def precedence(self):
        return _BIN_PREC[self.op]

    @property
    def children(self):
        return (self.left, self.right)

    def value(self, y, x):
        a, b = self.left.value(y, x), self.right.value(y, x)
        if self.op == "add":
            v = a + b
        elif self.op == "sub":
            v = a - b
        elif self.op == "mul":
            v = a * b
        else:
            if b == 0.0:
                raise DomainError("division by zero", self)
            v = a / b
        return _check(v, self)

    def value_grad(self, y, x):
        a, ga = self.left.value_grad(y, x)
        b, gb = self.right.value_grad(y, x)
        if self.op == "add":
            v, g = a + b, ga + gb
        elif self.op == "sub":
            v, g = a - b, ga - gb
        elif self.op == "mul":
            v, g = a * b, b * ga + a * gb
        else:
            if b == 0.0:
                raise DomainError("division by zero", self)
            v = a / b
            g = (ga * b - a * gb) / (b * b)
        _check(v, self)
        if not np.all(np.isfinite(g)):
            raise DomainError("non-finite gradient", self)
        return v, g

    def to_dsl(self):
        p = self.precedence
        ls = self.left.to_dsl()
        if self.left.precedence < p:
            ls = f"({ls})"
        rs = self.right.to_dsl()
        if self.right.precedence <= p:
            rs = f"({rs})"
        return f"{ls} {_BIN_SYM[self.op]} {rs}"


@dataclass(frozen=True)
class Pow(Expr):
    """``base ^ exponent`` for a constant exponent other than 2 (use square)."""

    base: Expr
    exponent: float
    precedence = _PREC_POW

    def __post_init__(self):
        e = float(self.exponent)
        if not math.isfinite(e):
            raise ConstraintError("exponent must be finite")
        if e == 2.0:
            raise ConstraintError("use Unary('square', ...) for exponent 2")
        object.__setattr__(self, "exponent", e)

    @property
    def children(self):
        return (self.base,)

    def _apply(self, u: float) -> tuple[float, float]:
        e = self.exponent
        if u < 0.0 and not e.is_integer():
            raise DomainError("non-integer power of negative base", self)
        if u == 0.0 and e < 0.0:
            raise DomainError("negative power of zero", self)
        try:
            v = u**e
            d = e * u ** (e - 1.0) if e != 0.0 else 0.0
        except (OverflowError, ZeroDivisionError):
            raise DomainError("power overflow", self) from None
        return v, d

    def value(self, y, x):
        return _check(self._apply(self.base.value(y, x))[0], self)

    def value_grad(self, y, x):
        u, gu = self.base.value_grad(y, x)
        v, d = self._apply(u)
        _check(v, self)
        if not math.isfinite(d):
            raise DomainError("derivative undefined", self)
        return v, d * gu

    def to_dsl(self):
        return f"{_wrap_base(self.base)}^{_fmt(self.exponent)}"


@dataclass(frozen=True)
class WeightedSum(Expr):
    weights: tuple[float, ...]
    terms: tuple[Expr, ...]

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        if len(w) != len(self.terms) or not w:
            raise ConstraintError("weighted sum needs one weight per term")
        if not all(math.isfinite(v) for v in w):
            raise ConstraintError("weights must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "terms", tuple(self.terms))

    @property
    def children(self):
        return self.terms

    def value(self, y, x):
        return _check(sum(w * t.value(y, x) for w, t in zip(self.weights, self.terms)), self)

    def value_grad(self, y, x):
        v, g = 0.0, np.zeros(len(y))
        for w, t in zip(self.weights, self.terms):
            tv, tg = t.value_grad(y, x)
            v += w * tv
            g += w * tg
        return _check(v, self), g

    def to_dsl(self):
        ws = ", ".join(_fmt(w) for w in self.weights)
        ts = ", ".join(t.to_dsl() for t in self.terms)
        return f"wsum([{ws}], {ts})"


def power(base: Expr, exponent: float) -> Expr:
    """Build ``base ^ exponent``, normalizing exponent 2 to a square node."""
    if float(exponent) == 2.0:
        return Unary("square", base)
    return Pow(base, exponent)


def evaluate(e: Expr, y, x=()) -> float:
    """Evaluate ``e`` at (y, x). Domain violations raise :class:`DomainError`."""
    return e.value(np.asarray(y, dtype=float), np.asarray(x, dtype=float))


def gradient(e: Expr, y, x=()) -> np.ndarray:
    """Exact gradient of ``e`` with respect to y (x held constant)."""
    return e.value_grad(np.asarray(y, dtype=float), np.asarray(x, dtype=float))[1]


# ---------------------------------------------------------------------------
# Constraints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearInequality:
    """``coef_y . y + coef_x . x <= bound``."""

    coef_y: tuple[float, ...]
    bound: float
    coef_x: tuple[float, ...] = ()

    def effective_bound(self, x) -> float:
        if not self.coef_x:
            return self.bound
        return self.bound - float(np.dot(self.coef_x, np.asarray(x, dtype=float)[: len(self.coef_x)]))


@dataclass(frozen=True)
class LinearEquality:
    """``coef_y . y + coef_x . x == value``."""

    coef_y: tuple[float, ...]
    value: float
    coef_x: tuple[float, ...] = ()

    def effective_value(self, x) -> float:
        if not self.coef_x:
            return self.value
        return self.value - float(np.dot(self.coef_x, np.asarray(x, dtype=float)[: len(self.coef_x)]))


@dataclass(frozen=True)
class Bounds:
    index: int
    lower: float | None = None
    upper: float | None = None

    def __post_init__(self):
        if self.lower is None and self.upper is None:
            raise ConstraintError("bounds need at least one side")
        if self.lower is not None and self.upper is not None and self.lower > self.upper:
            raise ConstraintError(f"lower {self.lower} > upper {self.upper}")


@dataclass(frozen=True)
class Conservation:
    """``sum_i alpha_i y[i] == value`` within ``tol``; terms sorted by index."""

    terms: tuple[tuple[int, float], ...]
    value: float
    tol: float

    def __post_init__(self):
        if not self.tol > 0:
            raise ConstraintError("conservation tolerance must be > 0")
        merged: dict[int, float] = {}
        for i, a in self.terms:
            merged[int(i)] = merged.get(int(i), 0.0) + float(a)
        object.__setattr__(self, "terms", tuple(sorted(merged.items())))

    def row(self, d_y: int) -> np.ndarray:
        a = np.zeros(d_y)
        for i, c in self.terms:
            a[i] = c
        return a


@dataclass(frozen=True)
class NonlinearInequality:
    """``expr(y, x) <= 0``."""

    expr: Expr


Body = LinearInequality | LinearEquality | Bounds | Conservation | NonlinearInequality

KIND_LABELS = {
    LinearInequality: "linear",
    LinearEquality: "linear",
    Bounds: "bounds",
    Conservation: "conservation",
    NonlinearInequality: "nonlinear",
}


@dataclass(frozen=True)
class Provenance:
    source: str = "manual"
    template_id: str | None = None
    match_id: str | None = None


@dataclass(frozen=True)
class Constraint:
    """A scientific rule over outputs ``y`` (dimension d_y) and inputs ``x``."""

    id: str
    body: Body
    d_y: int
    d_x: int = 0
    hard: bool = True
    weight: float | None = None
    score: float | None = None
    provenance: Provenance = field(default_factory=Provenance)

    def __post_init__(self):
        if not _LABEL_RE.match(self.id):
            raise ConstraintError(f"invalid constraint id {self.id!r}")
        if self.hard and self.weight is not None:
            raise ConstraintError("hard constraints carry no penalty weight")
        if not self.hard and (self.weight is None or self.weight < 0):
            raise ConstraintError("soft constraints need a nonnegative weight")
        if self.score is not None and not 0.0 <= self.score:
            raise ConstraintError("score must be nonnegative")
        _validate_body(self.body, self.d_y, self.d_x)

    @property
    def kind(self) -> str:
        return KIND_LABELS[type(self.body)]

    # -- evaluation ---------------------------------------------------------

    def functions(self, y, x=()) -> list[tuple[float, np.ndarray, bool]]:
        """Residual forms ``(value, grad_y, is_equality)``.

        Inequalities are expressed as ``value <= 0``; equalities as
        ``value == 0``. Conservation residuals are scaled by ``1/tol``.
        """
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        b = self.body
        if isinstance(b, LinearInequality):
            a = np.asarray(b.coef_y, dtype=float)
            return [(float(a @ y) - b.effective_bound(x), a, False)]
        if isinstance(b, LinearEquality):
            a = np.asarray(b.coef_y, dtype=float)
            return [(float(a @ y) - b.effective_value(x), a, True)]
        if isinstance(b, Bounds):
            out = []
            e = np.zeros(self.d_y)
            e[b.index] = 1.0
            if b.upper is not None:
                out.append((float(y[b.index]) - b.upper, e, False))
            if b.lower is not None:
                out.append((b.lower - float(y[b.index]), -e, False))
            return out
        if isinstance(b, Conservation):
            a = b.row(self.d_y)
            return [((float(a @ y) - b.value) / b.tol, a / b.tol, True)]
        v, g = b.expr.value_grad(y, x)
        return [(v, g, False)]

    def violation(self, y, x=()) -> float:
        """Nonnegative violation magnitude (0 when satisfied)."""
        b = self.body
        if isinstance(b, Conservation):
            a = b.row(self.d_y)
            return max(0.0, abs(float(a @ np.asarray(y, dtype=float)) - b.value) - b.tol)
        total = 0.0
        for v, _, eq in self.functions(y, x):
            total += abs(v) if eq else max(0.0, v)
        return total

    def satisfied(self, y, x=(), atol: float = FEAS_TOL) -> bool:
        return self.violation(y, x) <= atol

    def quantity(self, y, x=()) -> float:
        """The constrained scalar quantity (output, linear form, or g)."""
        y = np.asarray(y, dtype=float)
        b = self.body
        if isinstance(b, Bounds):
            return float(y[b.index])
        if isinstance(b, Conservation):
            return float(b.row(self.d_y) @ y)
        if isinstance(b, (LinearInequality, LinearEquality)):
            x = np.asarray(x, dtype=float)
            v = float(np.asarray(b.coef_y) @ y)
            if b.coef_x:
                v += float(np.dot(b.coef_x, x[: len(b.coef_x)]))
            return v
        return evaluate(b.expr, y, x)

    # -- printing -----------------------------------------------------------

    def to_dsl(self) -> str:
        head = "hard" if self.hard else f"soft({_fmt(self.weight)})"
        return f"[{self.id}] {head}: {body_to_dsl(self.body)}"

    def structurally_equal(self, other: "Constraint", tol: float = 0.0) -> bool:
        """Equal hardness, weight and rule parameters (ids and metadata ignored)."""
        if self.hard != other.hard:
            return False
        if not self.hard and abs(self.weight - other.weight) > tol:
            return False
        return same_rule(self, other, tol)


def _validate_body(b: Body, d_y: int, d_x: int) -> None:
    def chk_y(i):
        if not 0 <= i < d_y:
            raise ConstraintError(f"output index y[{i}] out of range for d_y={d_y}")

    def chk_x(j):
        if not 0 <= j < d_x:
            raise ConstraintError(f"feature index x[{j}] out of range for d_x={d_x}")

    if isinstance(b, (LinearInequality, LinearEquality)):
        if len(b.coef_y) != d_y:
            raise ConstraintError("linear row length must equal d_y")
        if len(b.coef_x) > d_x:
            raise ConstraintError("linear x-row longer than d_x")
    elif isinstance(b, Bounds):
        chk_y(b.index)
    elif isinstance(b, Conservation):
        for i, _ in b.terms:
            chk_y(i)
    else:
        my, mx = b.expr.max_index()
        if my >= 0:
            chk_y(my)
        if mx >= 0:
            chk_x(mx)


def _terms_dsl(coef_y: Sequence[float], coef_x: Sequence[float]) -> str:
    parts = [f"{_fmt(c)}*y[{i}]" for i, c in enumerate(coef_y) if c != 0.0]
    parts += [f"{_fmt(c)}*x[{j}]" for j, c in enumerate(coef_x) if c != 0.0]
    if not parts:
        parts = ["0.0*y[0]"]
    return " + ".join(parts)


def body_to_dsl(b: Body) -> str:
    if isinstance(b, Bounds):
        if b.lower is not None and b.upper is not None:
            return f"y[{b.index}] in [{_fmt(b.lower)}, {_fmt(b.upper)}]"
        if b.upper is not None:
            return f"y[{b.index}] <= {_fmt(b.upper)}"
        return f"y[{b.index}] >= {_fmt(b.lower)}"
    if isinstance(b, Conservation):
        terms = " + ".join(f"{_fmt(a)}*y[{i}]" for i, a in b.terms)
        return f"sum({terms}) == {_fmt(b.value)} tol {_fmt(b.tol)}"
    if isinstance(b, LinearInequality):
        return f"{_terms_dsl(b.coef_y, b.coef_x)} <= {_fmt(b.bound)}"
    if isinstance(b, LinearEquality):
        return f"{_terms_dsl(b.coef_y, b.coef_x)} == {_fmt(b.value)}"
    return f"g: {b.expr.to_dsl()} <= 0"


def same_rule(a: Constraint, b: Constraint, tol: float = 1e-9) -> bool:
    """Same constraint kind with parameters equal within ``tol``."""
    ba, bb = a.body, b.body
    if type(ba) is not type(bb):
        return False

    def close(u, v):
        if u is None or v is None:
            return u is v
        return abs(u - v) <= tol

    def rows_close(u, v):
        n = max(len(u), len(v))
        uu = np.zeros(n)
        vv = np.zeros(n)
        uu[: len(u)] = u
        vv[: len(v)] = v
        return bool(np.all(np.abs(uu - vv) <= tol))

    if isinstance(ba, Bounds):
        return ba.index == bb.index and close(ba.lower, bb.lower) and close(ba.upper, bb.upper)
    if isinstance(ba, Conservation):
        n = max(a.d_y, b.d_y)
        return rows_close(ba.row(n), bb.row(n)) and close(ba.value, bb.value) and close(ba.tol, bb.tol)
    if isinstance(ba, LinearInequality):
        return rows_close(ba.coef_y, bb.coef_y) and rows_close(ba.coef_x, bb.coef_x) and close(ba.bound, bb.bound)
    if isinstance(ba, LinearEquality):
        return rows_close(ba.coef_y, bb.coef_y) and rows_close(ba.coef_x, bb.coef_x) and close(ba.value, bb.value)
    return ba.expr == bb.expr


# ---------------------------------------------------------------------------
# Linearization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearizedConstraint:
    """``offset + gradient . (y - anchor) <= 0``."""

    gradient: np.ndarray
    offset: float
    anchor: np.ndarray
    source_id: str

    @property
    def row(self) -> np.ndarray:
        return self.gradient

    @property
    def bound(self) -> float:
        """Right-hand side of the equivalent halfspace ``row . y <= bound``."""
        return float(self.gradient @ self.anchor) - self.offset

    def value(self, y) -> float:
        return self.offset + float(self.gradient @ (np.asarray(y, dtype=float) - self.anchor))


def linearize(c: Constraint, anchor, x=()) -> LinearizedConstraint:
    """First-order Taylor expansion of a nonlinear inequality around ``anchor``."""
    if not isinstance(c.body, NonlinearInequality):
        raise ConstraintError(f"{c.id}: only nonlinear inequalities are linearized")
    anchor = np.asarray(anchor, dtype=float).copy()
    v, g = c.body.expr.value_grad(anchor, np.asarray(x, dtype=float))
    return LinearizedConstraint(gradient=g, offset=v, anchor=anchor, source_id=c.id)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op><=|>=|==|[\[\]\(\),+\-*/^:]))"
)


@dataclass
class _Tok:
    kind: str  # num | ident | op | end
    text: str
    col: int


def _tokenize(src: str, line: int) -> list[_Tok]:
    toks: list[_Tok] = []
    pos = 0
    n = len(src)
    while pos < n:
        if src[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(src, pos)
        if not m or m.end() == pos:
            raise ParseError(f"unexpected character {src[pos]!r}", line, pos + 1)
        kind = m.lastgroup
        start = m.start(kind)
        toks.append(_Tok(kind, m.group(kind), start + 1))
        pos = m.end()
    toks.append(_Tok("end", "", n + 1))
    return toks


class _Parser:
    def __init__(self, src: str, d_y: int, d_x: int, line: int):
        self.toks = _tokenize(src, line)
        self.i = 0
        self.d_y = d_y
        self.d_x = d_x
        self.line = line

    # token helpers
    def peek(self, k: int = 0) -> _Tok:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def error(self, msg: str, tok: _Tok | None = None):
        tok = tok or self.peek()
        raise ParseError(msg, self.line, tok.col)

    def accept(self, text: str) -> bool:
        t = self.peek()
        if t.kind in ("op", "ident") and t.text == text:
            self.i += 1
            return True
        return False

    def expect(self, text: str) -> _Tok:
        t = self.peek()
        if t.kind in ("op", "ident") and t.text == text:
            self.i += 1
            return t
        found = t.text or "end of line"
        self.error(f"expected {text!r}, found {found!r}")

    def number(self) -> float:
        neg = False
        while self.peek().text in ("-", "+") and self.peek().kind == "op":
            neg ^= self.peek().text == "-"
            self.i += 1
        t = self.peek()
        if t.kind != "num":
            self.error("expected a number")
        self.i += 1
        v = float(t.text)
        return -v if neg else v

    def index(self, name: str) -> int:
        self.expect("[")
        t = self.peek()
        if t.kind != "num" or not t.text.isdigit():
            self.error("expected a nonnegative integer index")
        self.i += 1
        idx = int(t.text)
        limit = self.d_y if name == "y" else self.d_x
        if idx >= limit:
            self.error(f"{name}[{idx}] out of range (dimension {limit})", t)
        self.expect("]")
        return idx

    # statements
    def statement(self, cid: str) -> Constraint:
        t = self.peek()
        if t.text == "hard":
            self.i += 1
            hard, weight = True, None
        elif t.text == "soft":
            self.i += 1
            self.expect("(")
            wtok = self.peek()
            weight = self.number()
            if weight < 0:
                self.error("soft weight must be nonnegative", wtok)
            self.expect(")")
            hard = False
        else:
            self.error("expected 'hard' or 'soft'")
        self.expect(":")
        body = self.body()
        if self.peek().kind != "end":
            self.error(f"unexpected trailing input {self.peek().text!r}")
        try:
            return Constraint(cid, body, self.d_y, self.d_x, hard=hard, weight=weight)
        except ConstraintError as exc:
            raise ParseError(str(exc), self.line, t.col) from None

    def body(self) -> Body:
        t0, t1 = self.peek(), self.peek(1)
        if t0.text == "g" and t1.text == ":":
            self.i += 2
            e = self.expr()
            self.expect("<=")
            ztok = self.peek()
            if self.number() != 0.0:
                self.error("nonlinear constraints must read `<= 0`", ztok)
            return NonlinearInequality(e)
        if t0.text == "sum" and t1.text == "(":
            self.i += 2
            cy, cx = self.terms()
            if any(cx):
                self.error("conservation sums range over outputs only")
            self.expect(")")
            self.expect("==")
            value = self.number()
            self.expect("tol")
            ttok = self.peek()
            tol = self.number()
            if not tol > 0:
                self.error("tolerance must be positive", ttok)
            return Conservation(tuple((i, c) for i, c in enumerate(cy) if c != 0.0), value, tol)
        if t0.text == "y" and t1.text == "[" and self.peek(4).text in ("<=", ">=", "in"):
            self.i += 1
            idx = self.index("y")
            op = self.peek()
            self.i += 1
            if op.text == "<=":
                return Bounds(idx, upper=self.number())
            if op.text == ">=":
                return Bounds(idx, lower=self.number())
            self.expect("[")
            lo = self.number()
            self.expect(",")
            hi = self.number()
            self.expect("]")
            if lo > hi:
                self.error(f"lower bound {lo!r} exceeds upper bound {hi!r}", op)
            return Bounds(idx, lower=lo, upper=hi)
        cy, cx = self.terms()
        op = self.peek()
        if op.text == "<=":
            self.i += 1
            return LinearInequality(tuple(cy), self.number(), _trim(cx))
        if op.text == "==":
            self.i += 1
            return LinearEquality(tuple(cy), self.number(), _trim(cx))
        self.error("expected '<=' or '==' after linear terms")

    def terms(self) -> tuple[list[float], list[float]]:
        cy = [0.0] * self.d_y
        cx = [0.0] * self.d_x
        sign = 1.0
        while True:
            coef = 1.0
            while self.peek().kind == "op" and self.peek().text in ("-", "+"):
                coef = -coef if self.peek().text == "-" else coef
                self.i += 1
            if self.peek().kind == "num":
                coef *= float(self.peek().text)
                self.i += 1
                self.expect("*")
            t = self.peek()
            if t.text not in ("y", "x"):
                self.error("expected y[i] or x[j] in linear term")
            self.i += 1
            idx = self.index(t.text)
            (cy if t.text == "y" else cx)[idx] += sign * coef
            if self.peek().text == "+":
                sign = 1.0
            elif self.peek().text == "-":
                sign = -1.0
            else:
                return cy, cx
            self.i += 1

    # expressions
    def expr(self) -> Expr:
        left = self.term()
        while self.peek().text in ("+", "-") and self.peek().kind == "op":
            op = "add" if self.peek().text == "+" else "sub"
            self.i += 1
            left = Binary(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.peek().text in ("*", "/"):
            op = "mul" if self.peek().text == "*" else "div"
            self.i += 1
            left = Binary(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self.peek().text == "-" and self.peek().kind == "op":
            nxt, after = self.peek(1), self.peek(2)
            if nxt.kind == "num" and after.text != "^":
                self.i += 2
                return Const(-float(nxt.text))
            self.i += 1
            return Unary("neg", self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.accept("^"):
            e = self.number()
            if self.peek().text == "^":
                self.error("chained powers need parentheses")
            return power(base, e)
        return base

    def atom(self) -> Expr:
        t = self.peek()
        if t.kind == "num":
            self.i += 1
            return Const(float(t.text))
        if t.text == "(":
            self.i += 1
            e = self.expr()
            self.expect(")")
            return e
        if t.kind == "ident":
            if t.text in ("y", "x") and self.peek(1).text == "[":
                self.i += 1
                idx = self.index(t.text)
                return OutVar(idx) if t.text == "y" else InVar(idx)
            if t.text in _FUNCS and self.peek(1).text == "(":
                self.i += 2
                e = self.expr()
                self.expect(")")
                return Unary(t.text, e)
            if t.text == "wsum" and self.peek(1).text == "(":
                self.i += 2
                self.expect("[")
                ws = [self.number()]
                while self.accept(","):
                    ws.append(self.number())
                self.expect("]")
                terms = []
                while self.accept(","):
                    terms.append(self.expr())
                self.expect(")")
                if len(terms) != len(ws):
                    self.error("wsum needs one weight per term", t)
                return WeightedSum(tuple(ws), tuple(terms))
        self.error(f"unexpected token {t.text or 'end of line'!r}")


def _trim(cx: list[float]) -> tuple[float, ...]:
    return tuple(cx) if any(cx) else ()


def _strip_comment(line: str) -> str:
    return line.split("#", 1)[0].strip()


def parse_constraint(source: str, d_y: int, d_x: int = 0, default_id: str = "c0", line: int = 1) -> Constraint:
    """Parse one DSL statement into a :class:`Constraint`."""
    text = _strip_comment(source)
    if not text:
        raise ParseError("empty statement", line, 1)
    cid = default_id
    m = _LABEL_PREFIX_RE.match(text)
    if m:
        cid = m.group(1)
        if not _LABEL_RE.match(cid):
            raise ParseError(f"invalid constraint label {cid!r}", line, 2)
        # blank out the label so token columns stay aligned with the source
        text = " " * m.end() + text[m.end():]
    return _Parser(text, d_y, d_x, line).statement(cid)


def parse_expression(source: str, d_y: int, d_x: int = 0) -> Expr:
    p = _Parser(source, d_y, d_x, 1)
    e = p.expr()
    if p.peek().kind != "end":
        p.error(f"unexpected trailing input {p.peek().text!r}")
    return e


def parse_constraints(text: str, d_y: int, d_x: int = 0) -> list[Constraint]:
    """Parse a multi-line DSL document; unlabeled statements get ids ``c<line>``."""
    out: list[Constraint] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not _strip_comment(raw):
            continue
        c = parse_constraint(raw, d_y, d_x, default_id=f"c{lineno}", line=lineno)
        if c.id in seen:
            raise ParseError(f"duplicate constraint id {c.id!r}", lineno, 1)
        seen.add(c.id)
        out.append(c)
    return out


def load_constraints(path: str | Path, d_y: int, d_x: int = 0) -> list[Constraint]:
    return parse_constraints(Path(path).read_text(encoding="utf-8"), d_y, d_x)


def dump_constraints(constraints: Iterable[Constraint]) -> str:
    lines = []
    for c in constraints:
        prov = c.provenance
        if prov.source != "manual":
            lines.append(f"# extracted: template={prov.template_id} match={prov.match_id}"
                         + (f" score={_fmt(c.score)}" if c.score is not None else ""))
        lines.append(c.to_dsl())
    return "\n".join(lines) + ("\n" if lines else "")

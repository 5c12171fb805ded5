"""Scalar expressions with exact first and second derivatives.

Coefficient functions are written in a small arithmetic language and parsed
into an immutable tree.  Evaluation propagates second-order jets (value,
gradient, Hessian) forward through the tree, so every derivative is analytic
up to rounding.  Evaluation is vectorised over a leading batch of points.

Grammar (whitespace is ignored)::

    expr    := term (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := ("+" | "-") unary | power
    power   := atom ("^" unary)?          # exponent must fold to a constant
    atom    := NUMBER | "r" | "x" INDEX | NAME | FUNC "(" expr ")" | "(" expr ")"
    FUNC    := "sqrt" | "exp" | "log"

``NAME`` is a bound constant (``pi`` and ``n`` are always bound).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "Jet2",
    "ScalarField",
    "Expression",
    "FunctionField",
    "ExprSyntaxError",
    "DomainError",
    "parse_scalar_field",
    "eval_jet",
    "constant",
    "radius_field",
    "coordinate",
]


class ExprSyntaxError(ValueError):
    """Parse failure with a character position into the source."""

    def __init__(self, message: str, position: int, source: str = ""):
        self.message = message
        self.position = position
        self.source = source
        super().__init__(f"{message} (at position {position})")


class DomainError(ArithmeticError):
    """Evaluation outside the domain of an expression (never a silent NaN)."""


# ---------------------------------------------------------------- jets


@dataclass(frozen=True)
class Jet2:
    """Second-order jet of a scalar function, batched over leading axes.

    ``value`` has shape ``B``, ``gradient`` ``B + (n,)`` and ``hessian``
    ``B + (n, n)``.  Every operation below keeps the Hessian exactly
    symmetric.
    """

    value: np.ndarray
    gradient: np.ndarray
    hessian: np.ndarray

    @property
    def n(self) -> int:
        return self.gradient.shape[-1]

    @property
    def laplacian(self) -> np.ndarray:
        return np.trace(self.hessian, axis1=-2, axis2=-1)

    @staticmethod
    def constant(c, shape, n: int) -> "Jet2":
        v = np.full(shape, float(c))
        return Jet2(v, np.zeros(shape + (n,)), np.zeros(shape + (n, n)))

    def __add__(self, other: "Jet2") -> "Jet2":
        return Jet2(self.value + other.value, self.gradient + other.gradient,
                    self.hessian + other.hessian)

    def __sub__(self, other: "Jet2") -> "Jet2":
        return Jet2(self.value - other.value, self.gradient - other.gradient,
                    self.hessian - other.hessian)

    def __neg__(self) -> "Jet2":
        return Jet2(-self.value, -self.gradient, -self.hessian)

    def __mul__(self, other: "Jet2") -> "Jet2":
        a, b = self, other
        av, bv = a.value[..., None], b.value[..., None]
        ga, gb = a.gradient, b.gradient
        cross = ga[..., :, None] * gb[..., None, :] + gb[..., :, None] * ga[..., None, :]
        hess = av[..., None] * b.hessian + bv[..., None] * a.hessian + cross
        return Jet2(a.value * b.value, av * gb + bv * ga, hess)

    def scale(self, c: float) -> "Jet2":
        return Jet2(c * self.value, c * self.gradient, c * self.hessian)

    def chain(self, f0, f1, f2) -> "Jet2":
        """Compose with a scalar function given its value and two derivatives."""
        g = self.gradient
        d1 = f1[..., None]
        hess = d1[..., None] * self.hessian + f2[..., None, None] * (g[..., :, None] * g[..., None, :])
        return Jet2(f0, d1 * g, hess)

    def reciprocal(self) -> "Jet2":
        v = self.value
        if np.any(v == 0.0):
            raise DomainError("division by zero")
        inv = 1.0 / v
        return self.chain(inv, -inv * inv, 2.0 * inv * inv * inv)

    def __truediv__(self, other: "Jet2") -> "Jet2":
        return self * other.reciprocal()

    def power(self, p: float) -> "Jet2":
        v = self.value
        p = float(p)
        if p == 0.0:
            return Jet2.constant(1.0, v.shape, self.n)
        integral = p.is_integer()
        if not integral and np.any(v < 0.0):
            raise DomainError(f"fractional power {p:g} of a negative base")
        if np.any(v == 0.0) and not (integral and p >= 2.0) and p != 1.0:
            raise DomainError(f"power {p:g} is singular at a zero base")
        if p == 1.0:
            return self
        if integral:
            k = int(p)
            f0 = v ** k
            f1 = k * v ** (k - 1)
            f2 = k * (k - 1) * v ** (k - 2) if k != 1 else np.zeros_like(v)
        else:
            f0 = v ** p
            f1 = p * v ** (p - 1.0)
            f2 = p * (p - 1.0) * v ** (p - 2.0)
        return self.chain(f0, f1, f2)

    def sqrt(self) -> "Jet2":
        v = self.value
        if np.any(v <= 0.0):
            raise DomainError("sqrt of a non-positive value")
        s = np.sqrt(v)
        return self.chain(s, 0.5 / s, -0.25 / (s * v))

    def exp(self) -> "Jet2":
        e = np.exp(self.value)
        return self.chain(e, e, e)

    def log(self) -> "Jet2":
        v = self.value
        if np.any(v <= 0.0):
            raise DomainError("log of a non-positive value")
        inv = 1.0 / v
        return self.chain(np.log(v), inv, -inv * inv)


def _radius_jet(x: np.ndarray) -> Jet2:
    r = np.sqrt(np.sum(x * x, axis=-1))
    if np.any(r == 0.0):
        raise DomainError("r = 0 is outside every expression domain")
    n = x.shape[-1]
    u = x / r[..., None]
    eye = np.eye(n)
    hess = (eye - u[..., :, None] * u[..., None, :]) / r[..., None, None]
    return Jet2(r, u, hess)


def _coord_jet(x: np.ndarray, i: int) -> Jet2:
    shape = x.shape[:-1]
    n = x.shape[-1]
    g = np.zeros(shape + (n,))
    g[..., i - 1] = 1.0
    return Jet2(x[..., i - 1].copy(), g, np.zeros(shape + (n, n)))


# ---------------------------------------------------------------- AST


class Node:
    __slots__ = ()


@dataclass(frozen=True)
class Const(Node):
    value: float


@dataclass(frozen=True)
class Coord(Node):
    index: int


@dataclass(frozen=True)
class Radius(Node):
    pass


@dataclass(frozen=True)
class Neg(Node):
    a: Node


@dataclass(frozen=True)
class BinOp(Node):
    op: str
    a: Node
    b: Node


@dataclass(frozen=True)
class Pow(Node):
    base: Node
    exponent: float


@dataclass(frozen=True)
class Call(Node):
    name: str
    arg: Node


@dataclass(frozen=True, eq=False)
class FieldLeaf(Node):
    """Opaque leaf wrapping an arbitrary ScalarField (not printable)."""

    field: "ScalarField"


_FUNCS = {"sqrt": math.sqrt, "exp": math.exp, "log": math.log}


def _fold_unary(name: str, v: float) -> float:
    if name == "log" and v <= 0:
        raise DomainError("log of a non-positive constant")
    if name == "sqrt" and v < 0:
        raise DomainError("sqrt of a negative constant")
    return _FUNCS[name](v)


def _fold_pow(b: float, p: float) -> float:
    if b < 0 and not float(p).is_integer():
        raise DomainError("fractional power of a negative constant")
    if b == 0 and p < 0:
        raise DomainError("negative power of zero")
    return float(b) ** float(p)


def _mk_binop(op: str, a: Node, b: Node) -> Node:
    if isinstance(a, Const) and isinstance(b, Const):
        x, y = a.value, b.value
        if op == "+":
            return Const(x + y)
        if op == "-":
            return Const(x - y)
        if op == "*":
            return Const(x * y)
        if y == 0.0:
            raise DomainError("division by zero in a constant subexpression")
        return Const(x / y)
    return BinOp(op, a, b)


def _mk_neg(a: Node) -> Node:
    if isinstance(a, Const):
        return Const(-a.value)
    return Neg(a)


def _mk_pow(a: Node, p: float) -> Node:
    if isinstance(a, Const):
        return Const(_fold_pow(a.value, p))
    return Pow(a, float(p))


def _mk_call(name: str, a: Node) -> Node:
    if isinstance(a, Const):
        return Const(_fold_unary(name, a.value))
    return Call(name, a)


def _fmt_const(v: float) -> str:
    s = repr(float(v))
    return f"({s})" if v < 0 or s.startswith("-") else s


def _to_source(node: Node) -> str:
    if isinstance(node, Const):
        return _fmt_const(node.value)
    if isinstance(node, Coord):
        return f"x{node.index}"
    if isinstance(node, Radius):
        return "r"
    if isinstance(node, Neg):
        return f"(-{_to_source(node.a)})"
    if isinstance(node, BinOp):
        return f"({_to_source(node.a)} {node.op} {_to_source(node.b)})"
    if isinstance(node, Pow):
        return f"{_to_source(node.base)}^{_fmt_const(node.exponent)}"
    if isinstance(node, Call):
        return f"{node.name}({_to_source(node.arg)})"
    raise ValueError("expression contains an opaque field and has no source form")


def _depth(node: Node) -> int:
    if isinstance(node, (Neg, Call)):
        return 1 + _depth(node.a if isinstance(node, Neg) else node.arg)
    if isinstance(node, BinOp):
        return 1 + max(_depth(node.a), _depth(node.b))
    if isinstance(node, Pow):
        return 1 + _depth(node.base)
    return 1


def _count(node: Node) -> int:
    if isinstance(node, Neg):
        return 1 + _count(node.a)
    if isinstance(node, Call):
        return 1 + _count(node.arg)
    if isinstance(node, BinOp):
        return 1 + _count(node.a) + _count(node.b)
    if isinstance(node, Pow):
        return 1 + _count(node.base)
    return 1


def _max_coord(node: Node) -> int:
    if isinstance(node, Coord):
        return node.index
    if isinstance(node, Neg):
        return _max_coord(node.a)
    if isinstance(node, Call):
        return _max_coord(node.arg)
    if isinstance(node, BinOp):
        return max(_max_coord(node.a), _max_coord(node.b))
    if isinstance(node, Pow):
        return _max_coord(node.base)
    return 0


# ---------------------------------------------------------------- fields


def _as_points(x, n: int) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.shape[-1:] != (n,):
        raise ValueError(f"points must have trailing dimension {n}, got shape {arr.shape}")
    return arr


class ScalarField:
    """A smooth function on the exterior region, queried through jets.

    Subclasses implement :meth:`jet`.  Arithmetic between fields builds an
    :class:`Expression` tree, so composites keep exact derivatives.
    """

    n: int

    def jet(self, x) -> Jet2:  # pragma: no cover - abstract
        raise NotImplementedError

    def value(self, x) -> np.ndarray:
        return self.jet(x).value

    def _node(self) -> Node:
        return FieldLeaf(self)

    @staticmethod
    def _coerce(other, n: int) -> Node:
        if isinstance(other, ScalarField):
            if other.n != n:
                raise ValueError("dimension mismatch between fields")
            return other._node()
        return Const(float(other))

    def _wrap(self, node: Node) -> "Expression":
        return Expression(node, self.n)

    def __add__(self, other):
        return self._wrap(_mk_binop("+", self._node(), self._coerce(other, self.n)))

    def __radd__(self, other):
        return self._wrap(_mk_binop("+", self._coerce(other, self.n), self._node()))

    def __sub__(self, other):
        return self._wrap(_mk_binop("-", self._node(), self._coerce(other, self.n)))

    def __rsub__(self, other):
        return self._wrap(_mk_binop("-", self._coerce(other, self.n), self._node()))

    def __mul__(self, other):
        return self._wrap(_mk_binop("*", self._node(), self._coerce(other, self.n)))

    def __rmul__(self, other):
        return self._wrap(_mk_binop("*", self._coerce(other, self.n), self._node()))

    def __truediv__(self, other):
        return self._wrap(_mk_binop("/", self._node(), self._coerce(other, self.n)))

    def __rtruediv__(self, other):
        return self._wrap(_mk_binop("/", self._coerce(other, self.n), self._node()))

    def __neg__(self):
        return self._wrap(_mk_neg(self._node()))

    def __pow__(self, p):
        if isinstance(p, ScalarField):
            raise TypeError("exponent must be a constant")
        return self._wrap(_mk_pow(self._node(), float(p)))


class Expression(ScalarField):
    """Immutable expression tree over coordinates ``x1..xn`` and ``r``."""

    __slots__ = ("root", "n")

    def __init__(self, root: Node, n: int):
        self.root = root
        self.n = int(n)

    def _node(self) -> Node:
        return self.root

    def __eq__(self, other) -> bool:
        return isinstance(other, Expression) and self.n == other.n and self.root == other.root

    def __hash__(self) -> int:
        return hash((self.n, self.root))

    def __repr__(self) -> str:
        try:
            return f"Expression({self.to_source()!r}, n={self.n})"
        except ValueError:
            return f"Expression(<composite>, n={self.n})"

    def __str__(self) -> str:
        return self.to_source()

    def to_source(self) -> str:
        return _to_source(self.root)

    @property
    def is_constant(self) -> bool:
        return isinstance(self.root, Const)

    @property
    def depth(self) -> int:
        """Number of nodes on the longest root-to-leaf path."""
        return _depth(self.root)

    @property
    def node_count(self) -> int:
        return _count(self.root)

    def jet(self, x) -> Jet2:
        return eval_jet(self, x)


class FunctionField(ScalarField):
    """Wrap a callable ``points -> Jet2`` as a field (cutoffs, interpolants)."""

    def __init__(self, n: int, fn: Callable[[np.ndarray], Jet2], label: str = "field"):
        self.n = int(n)
        self._fn = fn
        self.label = label

    def jet(self, x) -> Jet2:
        pts = _as_points(x, self.n)
        j = self._fn(pts)
        _check_finite(j)
        return j

    def __repr__(self) -> str:
        return f"FunctionField({self.label}, n={self.n})"


def constant(c: float, n: int) -> Expression:
    return Expression(Const(float(c)), n)


def radius_field(n: int) -> Expression:
    return Expression(Radius(), n)


def coordinate(i: int, n: int) -> Expression:
    if not 1 <= i <= n:
        raise ValueError(f"coordinate index {i} out of range for n={n}")
    return Expression(Coord(i), n)


# ---------------------------------------------------------------- evaluation


def _check_finite(j: Jet2) -> None:
    if not (np.all(np.isfinite(j.value)) and np.all(np.isfinite(j.gradient))
            and np.all(np.isfinite(j.hessian))):
        raise DomainError("evaluation produced a non-finite value")


def _eval(node: Node, x: np.ndarray, cache: dict) -> Jet2:
    key = id(node)
    hit = cache.get(key)
    if hit is not None:
        return hit[1]
    if isinstance(node, Const):
        out = Jet2.constant(node.value, x.shape[:-1], x.shape[-1])
    elif isinstance(node, Coord):
        out = _coord_jet(x, node.index)
    elif isinstance(node, Radius):
        out = _radius_jet(x)
    elif isinstance(node, Neg):
        out = -_eval(node.a, x, cache)
    elif isinstance(node, BinOp):
        a = _eval(node.a, x, cache)
        b = _eval(node.b, x, cache)
        if node.op == "+":
            out = a + b
        elif node.op == "-":
            out = a - b
        elif node.op == "*":
            out = a * b
        else:
            out = a / b
    elif isinstance(node, Pow):
        out = _eval(node.base, x, cache).power(node.exponent)
    elif isinstance(node, Call):
        a = _eval(node.arg, x, cache)
        out = getattr(a, node.name)()
    elif isinstance(node, FieldLeaf):
        out = node.field.jet(x)
    else:  # pragma: no cover
        raise TypeError(f"unknown node {node!r}")
    cache[key] = (node, out)
    return out


def eval_jet(e: ScalarField, x) -> Jet2:
    """Value, gradient and Hessian of ``e`` at a point or a batch of points."""
    if not isinstance(e, Expression):
        return e.jet(x)
    pts = _as_points(x, e.n)
    with np.errstate(all="ignore"):
        out = _eval(e.root, pts, {})
    _check_finite(out)
    return out


# ---------------------------------------------------------------- parser

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(src: str) -> list[_Tok]:
    toks: list[_Tok] = []
    i = 0
    while i < len(src):
        if src[i].isspace():
            i += 1
            continue
        m = _TOKEN.match(src, i)
        if m is None or m.end() == i:
            raise ExprSyntaxError(f"unexpected character {src[i]!r}", i, src)
        kind = m.lastgroup
        start = m.start(kind)
        toks.append(_Tok(kind, m.group(kind), start))
        i = m.end()
    toks.append(_Tok("end", "", len(src)))
    return toks


@dataclass
class _Parser:
    src: str
    n: int
    consts: Mapping[str, float]
    toks: list = field(default_factory=list)
    i: int = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> _Tok:
        t = self.peek()
        if t.text != text:
            got = "end of input" if t.kind == "end" else repr(t.text)
            raise ExprSyntaxError(f"expected {text!r}, got {got}", t.pos, self.src)
        return self.take()

    def fold(self, fn, pos):
        try:
            return fn()
        except DomainError as exc:
            raise ExprSyntaxError(str(exc), pos, self.src) from None

    def expr(self) -> Node:
        node = self.term()
        while self.peek().text in ("+", "-"):
            t = self.take()
            rhs = self.term()
            node = self.fold(lambda: _mk_binop(t.text, node, rhs), t.pos)
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek().text in ("*", "/"):
            t = self.take()
            rhs = self.unary()
            node = self.fold(lambda: _mk_binop(t.text, node, rhs), t.pos)
        return node

    def unary(self) -> Node:
        t = self.peek()
        if t.text == "-":
            self.take()
            return _mk_neg(self.unary())
        if t.text == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek().text == "^":
            t = self.take()
            start = self.peek().pos
            ex = self.unary()
            if not isinstance(ex, Const):
                raise ExprSyntaxError("exponent must be a constant expression", start, self.src)
            return self.fold(lambda: _mk_pow(base, ex.value), t.pos)
        return base

    def atom(self) -> Node:
        t = self.take()
        if t.kind == "num":
            return Const(float(t.text))
        if t.text == "(":
            node = self.expr()
            self.expect(")")
            return node
        if t.kind == "name":
            name = t.text
            if name in _FUNCS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return self.fold(lambda: _mk_call(name, arg), t.pos)
            if name == "r":
                return Radius()
            m = re.fullmatch(r"x(\d+)", name)
            if m:
                k = int(m.group(1))
                if not 1 <= k <= self.n:
                    raise ExprSyntaxError(
                        f"coordinate index out of range: {name} with n={self.n}", t.pos, self.src)
                return Coord(k)
            if name in self.consts:
                return Const(float(self.consts[name]))
            raise ExprSyntaxError(f"unknown identifier {name!r}", t.pos, self.src)
        if t.kind == "end":
            raise ExprSyntaxError("unexpected end of input", t.pos, self.src)
        raise ExprSyntaxError(f"unexpected token {t.text!r}", t.pos, self.src)


def parse_scalar_field(source: str, n: int, constants: Mapping[str, float] | None = None) -> Expression:
    """Parse ``source`` into an :class:`Expression` over dimension ``n``.

    ``constants`` binds extra names (e.g. ``{"m": 1.0}``); ``pi`` and ``n``
    are bound by default.  Raises :class:`ExprSyntaxError` on any failure.
    """
    if not isinstance(source, str):
        raise ExprSyntaxError("source must be a string", 0, "")
    if int(n) < 3:
        raise ValueError("dimension n must be at least 3")
    if not source.strip():
        raise ExprSyntaxError("empty expression", 0, source)
    consts = {"pi": math.pi, "n": float(n)}
    for k, v in (constants or {}).items():
        if k in _FUNCS or k == "r" or re.fullmatch(r"x\d+", k):
            raise ValueError(f"cannot bind reserved name {k!r}")
        consts[k] = float(v)
    p = _Parser(source, int(n), consts)
    try:
        p.toks = _tokenize(source)
        root = p.expr()
        t = p.peek()
        if t.kind != "end":
            raise ExprSyntaxError(f"unexpected token {t.text!r}", t.pos, source)
    except RecursionError:
        raise ExprSyntaxError("expression nested too deeply", 0, source) from None
    except OverflowError:
        raise ExprSyntaxError("numeric overflow while folding constants", 0, source) from None
    return Expression(root, int(n))

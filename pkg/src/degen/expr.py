"""Scalar expressions over spatial variables x1..xd.

Expressions are immutable trees built through smart constructors that fold
constants and apply a handful of local simplifications (0*e -> 0, e+0 -> e,
e^1 -> e and their obvious mirrors).  Nothing deeper is attempted, so the
output of :func:`diff` stays predictable.

Evaluation follows IEEE-754 semantics via numpy: ``pow(0, q)`` is ``inf``
for ``q < 0`` and ``exp(-inf)`` is ``0``; non-finite values propagate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Expression", "Const", "Var", "Neg", "Add", "Sub", "Mul", "Div", "Pow", "Call",
    "ExprError", "ExprSyntaxError", "parse", "to_source", "evaluate", "diff",
    "const", "var", "neg", "add", "sub", "mul", "div", "power", "call",
    "is_zero", "FUNCTIONS",
]


class ExprError(ValueError):
    """Raised for malformed or inconsistent expression input."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


class ExprSyntaxError(ExprError):
    pass


# name -> (arity, numpy implementation)
FUNCTIONS: dict[str, tuple[int, Callable]] = {
    "exp": (1, np.exp),
    "log": (1, np.log),
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "sqrt": (1, np.sqrt),
    "abs": (1, np.abs),
    "sign": (1, np.sign),
    "pow": (2, np.power),
    "min": (2, np.minimum),
    "max": (2, np.maximum),
}

_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


class Expression:
    """Base class of all expression nodes."""

    __slots__ = ()
    precedence = _PREC_ATOM

    def children(self) -> tuple["Expression", ...]:
        return ()

    @cached_property
    def _compiled(self) -> Callable:
        return _compile(self)

    def __call__(self, *coords):
        """Evaluate with one argument (scalar or array) per variable."""
        with np.errstate(all="ignore"):
            return self._compiled(coords)

    def __str__(self) -> str:
        return to_source(self)

    def max_var(self) -> int:
        return max((c.max_var() for c in self.children()), default=0)

    # arithmetic sugar, routed through the simplifying constructors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, other):
        return power(self, _lift(other))


@dataclass(frozen=True, eq=True)
class Const(Expression):
    value: float
    precedence = _PREC_ATOM

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))


@dataclass(frozen=True, eq=True)
class Var(Expression):
    index: int  # 1-based
    precedence = _PREC_ATOM

    def max_var(self) -> int:
        return self.index


@dataclass(frozen=True, eq=True)
class Neg(Expression):
    arg: Expression
    precedence = _PREC_NEG

    def children(self):
        return (self.arg,)


@dataclass(frozen=True, eq=True)
class _Binary(Expression):
    left: Expression
    right: Expression

    def children(self):
        return (self.left, self.right)


@dataclass(frozen=True, eq=True)
class Add(_Binary):
    precedence = _PREC_ADD
    symbol = "+"


@dataclass(frozen=True, eq=True)
class Sub(_Binary):
    precedence = _PREC_ADD
    symbol = "-"


@dataclass(frozen=True, eq=True)
class Mul(_Binary):
    precedence = _PREC_MUL
    symbol = "*"


@dataclass(frozen=True, eq=True)
class Div(_Binary):
    precedence = _PREC_MUL
    symbol = "/"


@dataclass(frozen=True, eq=True)
class Pow(_Binary):
    precedence = _PREC_POW
    symbol = "^"


@dataclass(frozen=True, eq=True)
class Call(Expression):
    name: str
    args: tuple[Expression, ...]
    precedence = _PREC_ATOM

    def children(self):
        return self.args


# ---------------------------------------------------------------------------
# smart constructors

def _lift(x) -> Expression:
    if isinstance(x, Expression):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Const(float(x))
    raise TypeError(f"cannot use {type(x).__name__} in an expression")


def _fold(fn, *values) -> float | None:
    with np.errstate(all="ignore"):
        out = float(fn(*(np.float64(v) for v in values)))
    # non-finite results are kept symbolic so every AST stays printable
    return out if math.isfinite(out) else None


def is_zero(e: Expression) -> bool:
    return isinstance(e, Const) and e.value == 0.0


def _is_one(e: Expression) -> bool:
    return isinstance(e, Const) and e.value == 1.0


def const(v: float) -> Const:
    return Const(float(v))


def var(i: int) -> Var:
    if i < 1:
        raise ExprError(f"variable index must be >= 1, got {i}")
    return Var(i)


def neg(a: Expression) -> Expression:
    if isinstance(a, Const):
        return Const(-a.value)
    return Neg(a)


def add(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Const) and isinstance(b, Const):
        v = _fold(np.add, a.value, b.value)
        if v is not None:
            return Const(v)
    if is_zero(b):
        return a
    if is_zero(a):
        return b
    return Add(a, b)


def sub(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Const) and isinstance(b, Const):
        v = _fold(np.subtract, a.value, b.value)
        if v is not None:
            return Const(v)
    if is_zero(b):
        return a
    if is_zero(a):
        return neg(b)
    return Sub(a, b)


def mul(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Const) and isinstance(b, Const):
        v = _fold(np.multiply, a.value, b.value)
        if v is not None:
            return Const(v)
    if is_zero(a) or is_zero(b):
        return Const(0.0)
    if _is_one(a):
        return b
    if _is_one(b):
        return a
    return Mul(a, b)


def div(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Const) and isinstance(b, Const):
        v = _fold(np.divide, a.value, b.value)
        if v is not None:
            return Const(v)
    if is_zero(a) and not is_zero(b):
        return Const(0.0)
    if _is_one(b):
        return a
    return Div(a, b)


def power(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Const) and isinstance(b, Const):
        v = _fold(np.power, a.value, b.value)
        if v is not None:
            return Const(v)
    if _is_one(b):
        return a
    return Pow(a, b)


def call(name: str, *args: Expression) -> Expression:
    if name not in FUNCTIONS:
        raise ExprError(f"unknown function {name!r}")
    arity, fn = FUNCTIONS[name]
    if len(args) != arity:
        raise ExprError(f"{name} expects {arity} argument(s), got {len(args)}")
    if name == "pow":
        return power(*args)
    if all(isinstance(a, Const) for a in args):
        v = _fold(fn, *(a.value for a in args))
        if v is not None:
            return Const(v)
    return Call(name, tuple(args))


# ---------------------------------------------------------------------------
# parsing

_ALIASES = {"x": 1, "y": 2, "z": 3}


class _Parser:
    def __init__(self, source: str, d: int):
        self.src = source
        self.d = d
        self.tokens = list(self._tokenize())
        self.pos = 0

    def _tokenize(self):
        src, i, n = self.src, 0, len(self.src)
        while i < n:
            ch = src[i]
            if ch.isspace():
                i += 1
            elif ch.isdigit() or (ch == "." and i + 1 < n and src[i + 1].isdigit()):
                j = i
                while j < n and src[j].isdigit():
                    j += 1
                if j < n and src[j] == ".":
                    j += 1
                    while j < n and src[j].isdigit():
                        j += 1
                if j < n and src[j] in "eE":
                    k = j + 1
                    if k < n and src[k] in "+-":
                        k += 1
                    if k < n and src[k].isdigit():
                        while k < n and src[k].isdigit():
                            k += 1
                        j = k
                yield ("num", src[i:j], i)
                i = j
            elif ch.isalpha() or ch == "_":
                j = i
                while j < n and (src[j].isalnum() or src[j] == "_"):
                    j += 1
                yield ("ident", src[i:j], i)
                i = j
            elif ch in "+-*/^(),":
                yield (ch, ch, i)
                i += 1
            else:
                raise ExprSyntaxError(f"unexpected character {ch!r}", _byte_offset(src, i))
        yield ("end", "", n)

    def peek(self):
        return self.tokens[self.pos]

    def take(self, kind=None):
        tok = self.tokens[self.pos]
        if kind is not None and tok[0] != kind:
            self.fail(f"expected {kind!r}")
        self.pos += 1
        return tok

    def fail(self, message):
        kind, text, at = self.peek()
        found = "end of input" if kind == "end" else repr(text)
        raise ExprSyntaxError(f"{message}, found {found}", _byte_offset(self.src, at))

    def parse(self) -> Expression:
        e = self.expr()
        if self.peek()[0] != "end":
            self.fail("unexpected token")
        return e

    def expr(self):
        e = self.term()
        while self.peek()[0] in ("+", "-"):
            op = self.take()[0]
            rhs = self.term()
            e = add(e, rhs) if op == "+" else sub(e, rhs)
        return e

    def term(self):
        e = self.factor()
        while self.peek()[0] in ("*", "/"):
            op = self.take()[0]
            rhs = self.factor()
            e = mul(e, rhs) if op == "*" else div(e, rhs)
        return e

    def factor(self):
        if self.peek()[0] == "-":
            self.take()
            return neg(self.factor())
        base = self.atom()
        if self.peek()[0] == "^":
            self.take()
            return power(base, self.factor())
        return base

    def atom(self):
        kind, text, at = self.peek()
        if kind == "num":
            self.take()
            value = float(text)
            if not math.isfinite(value):
                raise ExprSyntaxError(f"numeric literal {text!r} overflows", _byte_offset(self.src, at))
            return Const(value)
        if kind == "(":
            self.take()
            e = self.expr()
            self.take(")")
            return e
        if kind == "ident":
            self.take()
            if self.peek()[0] == "(":
                return self._call(text, at)
            return self._variable(text, at)
        self.fail("expected a number, identifier or '('")

    def _call(self, name, at):
        if name not in FUNCTIONS:
            raise ExprError(f"unknown function {name!r}", _byte_offset(self.src, at))
        self.take("(")
        args = [self.expr()]
        while self.peek()[0] == ",":
            self.take()
            args.append(self.expr())
        self.take(")")
        arity = FUNCTIONS[name][0]
        if len(args) != arity:
            raise ExprError(
                f"{name} expects {arity} argument(s), got {len(args)}",
                _byte_offset(self.src, at),
            )
        return call(name, *args)

    def _variable(self, name, at):
        offset = _byte_offset(self.src, at)
        if name in _ALIASES and self.d <= 3:
            index = _ALIASES[name]
        elif name.startswith("x") and name[1:].isdigit() and not name[1:].startswith("0"):
            index = int(name[1:])
        else:
            raise ExprError(f"unknown identifier {name!r}", offset)
        if index > self.d:
            raise ExprError(f"variable {name!r} has index {index} > dimension {self.d}", offset)
        return Var(index)


def _byte_offset(src: str, char_index: int) -> int:
    return len(src[:char_index].encode("utf-8"))


def parse(source: str, d: int) -> Expression:
    """Parse ``source`` into an expression over ``d`` variables.

    >>> str(parse("x^2 + exp(-y)", 2))
    'x1^2 + exp(-x2)'
    """
    if d < 1:
        raise ExprError(f"dimension must be >= 1, got {d}")
    return _Parser(source, d).parse()


# ---------------------------------------------------------------------------
# printing

def _fmt_number(v: float) -> str:
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def to_source(e: Expression) -> str:
    """Render ``e`` so that ``parse(to_source(e), d)`` rebuilds the same tree."""
    if isinstance(e, Const):
        return _fmt_number(e.value)
    if isinstance(e, Var):
        return f"x{e.index}"
    if isinstance(e, Call):
        return f"{e.name}({', '.join(to_source(a) for a in e.args)})"
    if isinstance(e, Neg):
        inner = to_source(e.arg)
        # '-' binds looser than '^' but tighter than '*'
        if e.arg.precedence < _PREC_POW or _negative_const(e.arg):
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(e, Pow):
        left = to_source(e.left)
        if e.left.precedence <= _PREC_POW or _negative_const(e.left):
            left = f"({left})"
        right = to_source(e.right)
        if e.right.precedence < _PREC_POW or _negative_const(e.right):
            right = f"({right})"
        return f"{left}^{right}"
    if isinstance(e, _Binary):
        left = to_source(e.left)
        if e.left.precedence < e.precedence:
            left = f"({left})"
        right = to_source(e.right)
        if e.right.precedence <= e.precedence and not isinstance(e.right, Neg):
            right = f"({right})"
        elif isinstance(e.right, Neg) or _negative_const(e.right):
            right = f"({right})"
        sep = f" {e.symbol} " if e.precedence == _PREC_ADD else e.symbol
        return f"{left}{sep}{right}"
    raise TypeError(f"unknown node {e!r}")


def _negative_const(e: Expression) -> bool:
    return isinstance(e, Const) and (e.value < 0 or math.copysign(1.0, e.value) < 0)


# ---------------------------------------------------------------------------
# evaluation

_BINOPS = {Add: np.add, Sub: np.subtract, Mul: np.multiply, Div: np.divide, Pow: np.power}


def _compile(e: Expression) -> Callable:
    if isinstance(e, Const):
        v = np.float64(e.value)
        return lambda xs: v
    if isinstance(e, Var):
        i = e.index - 1
        return lambda xs: xs[i]
    if isinstance(e, Neg):
        f = e.arg._compiled
        return lambda xs: np.negative(f(xs))
    if isinstance(e, _Binary):
        op = _BINOPS[type(e)]
        fl, fr = e.left._compiled, e.right._compiled
        return lambda xs: op(fl(xs), fr(xs))
    if isinstance(e, Call):
        fn = FUNCTIONS[e.name][1]
        if len(e.args) == 1:
            fa = e.args[0]._compiled
            return lambda xs: fn(fa(xs))
        fs = [a._compiled for a in e.args]
        return lambda xs: fn(*(g(xs) for g in fs))
    raise TypeError(f"unknown node {e!r}")


def evaluate(e: Expression, point: Sequence[float]) -> float:
    """Evaluate ``e`` at a single point (length-d sequence of floats)."""
    coords = [np.float64(p) for p in point]
    if e.max_var() > len(coords):
        raise ExprError(f"point has {len(coords)} coordinates, expression needs {e.max_var()}")
    return float(e(*coords))


def evaluate_batch(e: Expression, points: np.ndarray) -> np.ndarray:
    """Evaluate at many points; ``points`` has shape (P, d). Returns shape (P,)."""
    points = np.asarray(points, dtype=np.float64)
    out = e(*points.T)
    return np.broadcast_to(np.asarray(out, dtype=np.float64), points.shape[:1]).copy()


# ---------------------------------------------------------------------------
# differentiation

def diff(e: Expression, i: int) -> Expression:
    """Exact symbolic partial derivative of ``e`` with respect to x_i."""
    if isinstance(e, Const):
        return Const(0.0)
    if isinstance(e, Var):
        return Const(1.0 if e.index == i else 0.0)
    if isinstance(e, Neg):
        return neg(diff(e.arg, i))
    if isinstance(e, Add):
        return add(diff(e.left, i), diff(e.right, i))
    if isinstance(e, Sub):
        return sub(diff(e.left, i), diff(e.right, i))
    if isinstance(e, Mul):
        a, b = e.left, e.right
        return add(mul(diff(a, i), b), mul(a, diff(b, i)))
    if isinstance(e, Div):
        a, b = e.left, e.right
        da, db = diff(a, i), diff(b, i)
        if is_zero(db):
            return div(da, b)
        return div(sub(mul(da, b), mul(a, db)), power(b, Const(2.0)))
    if isinstance(e, Pow):
        a, b = e.left, e.right
        da, db = diff(a, i), diff(b, i)
        if is_zero(db):
            if isinstance(b, Const):
                lowered = power(a, Const(b.value - 1.0))
            else:
                lowered = power(a, sub(b, Const(1.0)))
            return mul(mul(b, lowered), da)
        # d(a^b) = a^b * (b' log a + b a'/a)
        return mul(e, add(mul(db, call("log", a)), div(mul(b, da), a)))
    if isinstance(e, Call):
        return _diff_call(e, i)
    raise TypeError(f"unknown node {e!r}")


def _diff_call(e: Call, i: int) -> Expression:
    name = e.name
    if name in ("min", "max"):
        # min/max(a, b) = (a + b)/2 -/+ |a - b|/2
        a, b = e.args
        da, db = diff(a, i), diff(b, i)
        mean = div(add(da, db), Const(2.0))
        spread = div(mul(call("sign", sub(a, b)), sub(da, db)), Const(2.0))
        return sub(mean, spread) if name == "min" else add(mean, spread)
    (a,) = e.args
    da = diff(a, i)
    if is_zero(da) or name == "sign":
        return Const(0.0)
    if name == "exp":
        outer = e
    elif name == "log":
        return div(da, a)
    elif name == "sin":
        outer = call("cos", a)
    elif name == "cos":
        outer = neg(call("sin", a))
    elif name == "sqrt":
        return div(da, mul(Const(2.0), e))
    elif name == "abs":
        outer = call("sign", a)  # sign(0) = 0
    else:
        raise TypeError(f"no derivative rule for {name}")
    return mul(outer, da)

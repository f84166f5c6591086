"""Tiny closed-form expression language for coefficient and potential entries.

Grammar: numbers, components ``q1 .. qn``, the constant ``pi``, the unary
functions ``sin``, ``cos``, ``exp``, the binary operators ``+ - * /`` and
parentheses.  A leading ``-`` is accepted as sugar for ``0 - x``.  Every
expression in this family is smooth, so coefficient fields built from it are
smooth by construction.

Validation screens (both raise :class:`ExpressionError`):

* division nodes whose denominator interval over ``[0, 1]^n`` contains zero
  are rejected outright;
* on torus domains, ``q_i`` may appear only inside ``sin``/``cos`` whose
  argument is affine in ``q`` with every slope an integer multiple of ``2*pi``
  (this makes the entry 1-periodic in each component by construction).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "Expr",
    "ExpressionError",
    "parse_expr",
    "eval_expr",
    "compile_expr",
    "diff_expr",
    "max_q_index",
    "screen_division",
    "screen_torus_periodicity",
    "validate_expr",
]


class ExpressionError(ValueError):
    """Raised for syntax errors (with position) and failed validation screens."""

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at offset {position})"
        super().__init__(message)
        self.position = position


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # zero-based component of q


@dataclass(frozen=True)
class Call:
    func: str  # sin | cos | exp
    arg: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str  # + - * /
    left: "Expr"
    right: "Expr"


Expr = Union[Num, Var, Call, BinOp]

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/()]))"
)

_FUNCS = ("sin", "cos", "exp")


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            if text[pos:].strip() == "":
                break
            raise ExpressionError(f"unexpected character {text[pos]!r}", pos)
        if match.group("num") is not None:
            tokens.append(("num", float(match.group(0)), match.start()))
        elif match.group("name") is not None:
            tokens.append(("name", match.group("name"), match.start("name")))
        else:
            tokens.append(("op", match.group("op"), match.start("op")))
        pos = match.end()
    tokens.append(("end", None, len(text)))
    return tokens


class _Parser:
    """Recursive descent over sum -> term -> factor -> atom."""

    def __init__(self, tokens):
        self.tokens = tokens
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op):
        kind, value, pos = self.next()
        if kind != "op" or value != op:
            raise ExpressionError(f"expected {op!r}", pos)

    def parse(self):
        expr = self.sum()
        kind, _, pos = self.peek()
        if kind != "end":
            raise ExpressionError("trailing input", pos)
        return expr

    def sum(self):
        expr = self.term()
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value in "+-":
                self.next()
                expr = BinOp(value, expr, self.term())
            else:
                return expr

    def term(self):
        expr = self.factor()
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value in "*/":
                self.next()
                expr = BinOp(value, expr, self.factor())
            else:
                return expr

    def factor(self):
        kind, value, _ = self.peek()
        if kind == "op" and value == "-":
            self.next()
            return BinOp("-", Num(0.0), self.factor())
        if kind == "op" and value == "+":
            self.next()
            return self.factor()
        return self.atom()

    def atom(self):
        kind, value, pos = self.next()
        if kind == "num":
            return Num(value)
        if kind == "name":
            if value == "pi":
                return Num(math.pi)
            if value in _FUNCS:
                self.expect_op("(")
                arg = self.sum()
                self.expect_op(")")
                return Call(value, arg)
            qmatch = re.fullmatch(r"q(\d+)", value)
            if qmatch is not None:
                index = int(qmatch.group(1))
                if index < 1:
                    raise ExpressionError("q components are numbered from 1", pos)
                return Var(index - 1)
            raise ExpressionError(f"unknown name {value!r}", pos)
        if kind == "op" and value == "(":
            expr = self.sum()
            self.expect_op(")")
            return expr
        raise ExpressionError("expected a number, name or '('", pos)


def parse_expr(text):
    """Parse ``text`` into an :class:`Expr` tree. Raises ExpressionError."""
    if not isinstance(text, str):
        raise ExpressionError(f"expected an expression string, got {type(text).__name__}")
    return _Parser(_tokenize(text)).parse()


_UFUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}


def eval_expr(expr, q):
    """Evaluate ``expr`` at ``q``.

    ``q`` is an ``(n,)`` point or an ``(R, n)`` batch; the result is a scalar
    or an ``(R,)`` array, broadcast with numpy ufuncs.
    """
    q = np.asarray(q, dtype=float)
    if isinstance(expr, Num):
        if q.ndim == 2:
            return np.full(q.shape[0], expr.value)
        return np.float64(expr.value)  # IEEE semantics, also for division
    if isinstance(expr, Var):
        return q[..., expr.index]
    if isinstance(expr, Call):
        return _UFUNCS[expr.func](eval_expr(expr.arg, q))
    left = eval_expr(expr.left, q)
    right = eval_expr(expr.right, q)
    if expr.op == "+":
        return left + right
    if expr.op == "-":
        return left - right
    if expr.op == "*":
        return left * right
    with np.errstate(divide="ignore", invalid="ignore"):
        return left / right


def _codegen(expr):
    if isinstance(expr, Num):
        return repr(expr.value)
    if isinstance(expr, Var):
        return f"q[..., {expr.index}]"
    if isinstance(expr, Call):
        return f"np.{expr.func}({_codegen(expr.arg)})"
    return f"({_codegen(expr.left)} {expr.op} {_codegen(expr.right)})"


def compile_expr(expr):
    """Compile an expression tree into a fast vectorized callable.

    The generated source only references numpy ufuncs and q components, so
    this is a plain constant fold of the tree; eval_expr stays the
    tree-walking reference.  Constant expressions broadcast to the batch.
    """
    src = _codegen(expr)
    raw = eval(f"lambda q: {src}", {"np": np, "__builtins__": {}})
    if max_q_index(expr) < 0:
        value = float(raw(np.zeros((1, 1))))
        return lambda q: np.full(q.shape[:-1], value) if q.ndim > 1 else value
    return raw


def diff_expr(expr, index):
    """Symbolic partial derivative with respect to ``q_{index+1}``.

    Stays inside the closed family (chain/product/quotient rules on
    sin, cos, exp), so derivatives can be screened and evaluated the same way.
    """
    if isinstance(expr, Num):
        return Num(0.0)
    if isinstance(expr, Var):
        return Num(1.0 if expr.index == index else 0.0)
    if isinstance(expr, Call):
        inner = diff_expr(expr.arg, index)
        if expr.func == "sin":
            outer = Call("cos", expr.arg)
        elif expr.func == "cos":
            outer = BinOp("-", Num(0.0), Call("sin", expr.arg))
        else:
            outer = Call("exp", expr.arg)
        return BinOp("*", outer, inner)
    dl = diff_expr(expr.left, index)
    dr = diff_expr(expr.right, index)
    if expr.op in "+-":
        return BinOp(expr.op, dl, dr)
    if expr.op == "*":
        return BinOp("+", BinOp("*", dl, expr.right), BinOp("*", expr.left, dr))
    # quotient rule: (l'r - l r') / r^2
    numerator = BinOp("-", BinOp("*", dl, expr.right), BinOp("*", expr.left, dr))
    return BinOp("/", numerator, BinOp("*", expr.right, expr.right))


def max_q_index(expr):
    """Largest zero-based q component used, or -1 for constant expressions."""
    if isinstance(expr, Num):
        return -1
    if isinstance(expr, Var):
        return expr.index
    if isinstance(expr, Call):
        return max_q_index(expr.arg)
    return max(max_q_index(expr.left), max_q_index(expr.right))


def _interval(expr, n):
    """Coarse interval envelope of ``expr`` over q in [0, 1]^n."""
    if isinstance(expr, Num):
        return (expr.value, expr.value)
    if isinstance(expr, Var):
        return (0.0, 1.0)
    if isinstance(expr, Call):
        lo, hi = _interval(expr.arg, n)
        if expr.func == "exp":
            return (math.exp(lo), math.exp(hi))
        # envelope for sin/cos unless the argument interval is a point
        if lo == hi:
            value = math.sin(lo) if expr.func == "sin" else math.cos(lo)
            return (value, value)
        return (-1.0, 1.0)
    llo, lhi = _interval(expr.left, n)
    rlo, rhi = _interval(expr.right, n)
    if expr.op == "+":
        return (llo + rlo, lhi + rhi)
    if expr.op == "-":
        return (llo - rhi, lhi - rlo)
    if expr.op == "*":
        corners = (llo * rlo, llo * rhi, lhi * rlo, lhi * rhi)
        return (min(corners), max(corners))
    if rlo <= 0.0 <= rhi:
        raise ExpressionError("denominator interval over [0,1]^n contains zero")
    corners = (llo / rlo, llo / rhi, lhi / rlo, lhi / rhi)
    return (min(corners), max(corners))


def screen_division(expr, n):
    """Reject expressions whose denominators can vanish on [0, 1]^n."""
    _interval(expr, n)


def _affine(expr):
    """Return (slopes dict, intercept) if expr is affine in q, else None."""
    if isinstance(expr, Num):
        return ({}, expr.value)
    if isinstance(expr, Var):
        return ({expr.index: 1.0}, 0.0)
    if isinstance(expr, Call):
        return None
    left = _affine(expr.left)
    right = _affine(expr.right)
    if left is None or right is None:
        return None
    lslopes, lconst = left
    rslopes, rconst = right
    if expr.op in "+-":
        sign = 1.0 if expr.op == "+" else -1.0
        slopes = dict(lslopes)
        for idx, slope in rslopes.items():
            slopes[idx] = slopes.get(idx, 0.0) + sign * slope
        return (slopes, lconst + sign * rconst)
    if expr.op == "*":
        if lslopes and rslopes:
            return None  # quadratic
        if lslopes:
            return ({i: s * rconst for i, s in lslopes.items()}, lconst * rconst)
        return ({i: s * lconst for i, s in rslopes.items()}, lconst * rconst)
    # division by a constant keeps affineness; anything else does not
    if rslopes:
        return None
    if rconst == 0.0:
        return None
    return ({i: s / rconst for i, s in lslopes.items()}, lconst / rconst)


def _torus_safe(expr, tol):
    if isinstance(expr, Num):
        return True
    if isinstance(expr, Var):
        return False  # bare q_i outside sin/cos
    if isinstance(expr, Call):
        if max_q_index(expr.arg) < 0:
            return True
        if expr.func == "exp":
            return _torus_safe(expr.arg, tol)  # exp of q is never periodic
        affine = _affine(expr.arg)
        if affine is None:
            return False
        slopes, _ = affine
        for slope in slopes.values():
            cycles = slope / (2.0 * math.pi)
            if abs(cycles - round(cycles)) > tol:
                return False
        return True
    return _torus_safe(expr.left, tol) and _torus_safe(expr.right, tol)


def screen_torus_periodicity(expr, tol=1e-9):
    """Reject entries that are not 1-periodic by construction.

    q components must occur only inside sin/cos whose argument is affine in q
    with slopes in 2*pi*Z.
    """
    if not _torus_safe(expr, tol):
        raise ExpressionError(
            "on a torus, q components may appear only inside sin/cos of "
            "integer multiples of 2*pi*q_i"
        )


def validate_expr(expr, n, torus):
    """Run all validation screens for an entry used on an n-dimensional domain."""
    top = max_q_index(expr)
    if top >= n:
        raise ExpressionError(f"expression uses q{top + 1} but the domain has dim {n}")
    screen_division(expr, n)
    if torus:
        screen_torus_periodicity(expr)

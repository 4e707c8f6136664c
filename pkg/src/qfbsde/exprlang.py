"""Tiny arithmetic expression language for coefficient definitions.

Expressions are parsed with a Pratt parser into immutable trees.  Two
evaluators are provided: :func:`eval_expr` works on Python floats, and
:func:`compile_numpy` turns a tree into a vectorised callable over numpy
arrays, which is what the solvers use.

Grammar summary::

    literals   3, 2.5, 1e-3, .5
    variables  t, x1..xd, y1..yn, z{i}_{j}, p1..pd, a1..ak
    operators  + - * / ^  (^ binds tightest and is right-associative)
    unary      -
    functions  sin cos exp log tanh sqrt abs (1 arg), min max (2), clamp (3)
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Mapping, Union

import numpy as np

__all__ = [
    "Num",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "Expr",
    "ExprError",
    "LexError",
    "ParseError",
    "ArityError",
    "EvalError",
    "UnboundVariableError",
    "DomainError",
    "parse_expr",
    "eval_expr",
    "free_vars",
    "to_source",
    "compile_numpy",
    "FUNCTION_ARITY",
]


class ExprError(ValueError):
    """Base class for all expression errors."""


class LexError(ExprError):
    def __init__(self, position: int, char: str):
        super().__init__(f"unexpected character {char!r} at position {position}")
        self.position = position
        self.char = char


class ParseError(ExprError):
    def __init__(self, position: int, expected: tuple[str, ...], found: str):
        exp = ", ".join(expected)
        super().__init__(f"syntax error at position {position}: expected one of [{exp}], found {found!r}")
        self.position = position
        self.expected = expected
        self.found = found


class ArityError(ExprError):
    def __init__(self, name: str, expected: int, got: int, position: int):
        super().__init__(f"{name}() takes {expected} argument(s), got {got} (position {position})")
        self.name = name
        self.expected = expected
        self.got = got
        self.position = position


class EvalError(ExprError):
    """Raised when evaluation fails."""


class UnboundVariableError(EvalError):
    def __init__(self, name: str):
        super().__init__(f"unbound variable {name!r}")
        self.name = name


class DomainError(EvalError):
    def __init__(self, subexpr: "Expr", reason: str):
        super().__init__(f"domain error in {to_source(subexpr)}: {reason}")
        self.subexpr = subexpr
        self.reason = reason


# ---------------------------------------------------------------------------
# Tree


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple["Expr", ...]


Expr = Union[Num, Var, Neg, BinOp, Call]

FUNCTION_ARITY = {
    "sin": 1,
    "cos": 1,
    "exp": 1,
    "log": 1,
    "tanh": 1,
    "sqrt": 1,
    "abs": 1,
    "min": 2,
    "max": 2,
    "clamp": 3,
}

VARIABLE_RE = re.compile(r"^(t|[xypa][1-9][0-9]*|z[1-9][0-9]*_[1-9][0-9]*)$")

# binding powers
_BP = {"+": 10, "-": 10, "*": 20, "/": 20, "^": 40}
_UNARY_BP = 30

# ---------------------------------------------------------------------------
# Lexer

_NUMBER = re.compile(r"(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)(?:[eE][+-]?[0-9]+)?")
_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


@dataclass(frozen=True)
class _Token:
    kind: str  # "num" | "name" | "op" | "end"
    text: str
    pos: int


def _tokenize(source: str) -> list[_Token]:
    tokens: list[_Token] = []
    i = 0
    n = len(source)
    while i < n:
        c = source[i]
        if c.isspace():
            i += 1
            continue
        m = _NUMBER.match(source, i)
        if m:
            tokens.append(_Token("num", m.group(), i))
            i = m.end()
            continue
        m = _NAME.match(source, i)
        if m:
            tokens.append(_Token("name", m.group(), i))
            i = m.end()
            continue
        if c in "+-*/^(),":
            tokens.append(_Token("op", c, i))
            i += 1
            continue
        raise LexError(i, c)
    tokens.append(_Token("end", "", n))
    return tokens


class _Parser:
    def __init__(self, source: str):
        self.tokens = _tokenize(source)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> None:
        if self.tok.text != text or self.tok.kind != "op":
            raise ParseError(self.tok.pos, (repr(text),), self.tok.text or "<end>")
        self.advance()

    def lbp(self, t: _Token) -> int:
        if t.kind == "op":
            return _BP.get(t.text, 0)
        return 0

    def expression(self, rbp: int = 0) -> Expr:
        left = self.nud(self.advance())
        while True:
            t = self.tok
            if t.kind not in ("op", "end"):
                # no implicit multiplication
                raise ParseError(t.pos, ("operator", "')'", "','", "<end>"), t.text)
            if rbp >= self.lbp(t):
                break
            self.advance()
            left = self.led(t, left)
        return left

    def nud(self, t: _Token) -> Expr:
        if t.kind == "num":
            v = float(t.text)
            if not math.isfinite(v):
                raise ParseError(t.pos, ("finite number",), t.text)
            return Num(v)
        if t.kind == "name":
            if self.tok.kind == "op" and self.tok.text == "(":
                return self.call(t)
            if t.text in FUNCTION_ARITY:
                raise ParseError(self.tok.pos, ("'('",), self.tok.text or "<end>")
            if not VARIABLE_RE.match(t.text):
                raise ParseError(t.pos, ("variable", "function"), t.text)
            return Var(t.text)
        if t.kind == "op" and t.text == "-":
            return Neg(self.expression(_UNARY_BP))
        if t.kind == "op" and t.text == "(":
            inner = self.expression(0)
            self.expect(")")
            return inner
        raise ParseError(t.pos, ("number", "variable", "function", "'('", "'-'"), t.text or "<end>")

    def led(self, t: _Token, left: Expr) -> Expr:
        if t.text == "^":
            # right-associative
            return BinOp("^", left, self.expression(_BP["^"] - 1))
        return BinOp(t.text, left, self.expression(_BP[t.text]))

    def call(self, name_tok: _Token) -> Expr:
        name = name_tok.text
        if name not in FUNCTION_ARITY:
            raise ParseError(name_tok.pos, tuple(sorted(FUNCTION_ARITY)), name)
        self.expect("(")
        args: list[Expr] = []
        if not (self.tok.kind == "op" and self.tok.text == ")"):
            args.append(self.expression(0))
            while self.tok.kind == "op" and self.tok.text == ",":
                self.advance()
                args.append(self.expression(0))
        self.expect(")")
        if len(args) != FUNCTION_ARITY[name]:
            raise ArityError(name, FUNCTION_ARITY[name], len(args), name_tok.pos)
        return Call(name, tuple(args))


def parse_expr(source: str) -> Expr:
    """Parse ``source`` into an expression tree."""
    p = _Parser(source)
    tree = p.expression(0)
    if p.tok.kind != "end":
        raise ParseError(p.tok.pos, ("operator", "<end>"), p.tok.text)
    return tree


# ---------------------------------------------------------------------------
# Printing


def _fmt_num(v: float) -> str:
    s = repr(float(v))
    if s in ("inf", "-inf", "nan"):
        raise ExprError(f"cannot print non-finite literal {s}")
    return s


def to_source(e: Expr) -> str:
    """Fully parenthesised source text; ``parse_expr(to_source(e)) == e``."""
    if isinstance(e, Num):
        return _fmt_num(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"(-{to_source(e.operand)})"
    if isinstance(e, BinOp):
        return f"({to_source(e.left)} {e.op} {to_source(e.right)})"
    if isinstance(e, Call):
        return f"{e.name}({', '.join(to_source(a) for a in e.args)})"
    raise TypeError(f"not an expression: {e!r}")


def free_vars(e: Expr) -> frozenset[str]:
    if isinstance(e, Num):
        return frozenset()
    if isinstance(e, Var):
        return frozenset((e.name,))
    if isinstance(e, Neg):
        return free_vars(e.operand)
    if isinstance(e, BinOp):
        return free_vars(e.left) | free_vars(e.right)
    return frozenset().union(*(free_vars(a) for a in e.args))


# ---------------------------------------------------------------------------
# Scalar evaluation


def _scalar_call(e: Call, args: list[float]) -> float:
    name = e.name
    try:
        if name == "log":
            if args[0] <= 0.0:
                raise DomainError(e, "log of non-positive value")
            return math.log(args[0])
        if name == "sqrt":
            if args[0] < 0.0:
                raise DomainError(e, "sqrt of negative value")
            return math.sqrt(args[0])
        if name == "exp":
            return math.exp(args[0])
        if name == "sin":
            return math.sin(args[0])
        if name == "cos":
            return math.cos(args[0])
        if name == "tanh":
            return math.tanh(args[0])
        if name == "abs":
            return abs(args[0])
        if name == "min":
            return min(args[0], args[1])
        if name == "max":
            return max(args[0], args[1])
        # clamp(v, lo, hi)
        return min(max(args[0], args[1]), args[2])
    except OverflowError:
        raise DomainError(e, "overflow") from None


def eval_expr(e: Expr, bindings: Mapping[str, float]) -> float:
    """Evaluate ``e`` in double precision, operands left to right."""
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        try:
            return float(bindings[e.name])
        except KeyError:
            raise UnboundVariableError(e.name) from None
    if isinstance(e, Neg):
        return -eval_expr(e.operand, bindings)
    if isinstance(e, BinOp):
        a = eval_expr(e.left, bindings)
        b = eval_expr(e.right, bindings)
        op = e.op
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            if b == 0.0:
                raise DomainError(e, "division by zero")
            return a / b
        try:
            return math.pow(a, b)
        except (ValueError, ZeroDivisionError):
            raise DomainError(e, "invalid power") from None
        except OverflowError:
            raise DomainError(e, "overflow") from None
    return _scalar_call(e, [eval_expr(a, bindings) for a in e.args])


# ---------------------------------------------------------------------------
# Vectorised evaluation

_NP_UNARY: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "tanh": np.tanh,
    "sqrt": np.sqrt,
    "abs": np.abs,
}


def _np_eval(e: Expr, env: Mapping[str, np.ndarray]) -> np.ndarray:
    if isinstance(e, Num):
        return np.float64(e.value)
    if isinstance(e, Var):
        try:
            return env[e.name]
        except KeyError:
            raise UnboundVariableError(e.name) from None
    if isinstance(e, Neg):
        return -_np_eval(e.operand, env)
    if isinstance(e, BinOp):
        a = _np_eval(e.left, env)
        b = _np_eval(e.right, env)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if e.op == "/":
            if np.any(b == 0.0):
                raise DomainError(e, "division by zero")
            return a / b
        out = np.power(a, b)
        if not np.all(np.isfinite(out)) and np.all(np.isfinite(a)) and np.all(np.isfinite(b)):
            raise DomainError(e, "invalid power")
        return out
    args = [_np_eval(a, env) for a in e.args]
    if e.name == "log" and np.any(args[0] <= 0.0):
        raise DomainError(e, "log of non-positive value")
    if e.name == "sqrt" and np.any(args[0] < 0.0):
        raise DomainError(e, "sqrt of negative value")
    if e.name in _NP_UNARY:
        return _NP_UNARY[e.name](args[0])
    if e.name == "min":
        return np.minimum(args[0], args[1])
    if e.name == "max":
        return np.maximum(args[0], args[1])
    return np.minimum(np.maximum(args[0], args[1]), args[2])


def compile_numpy(e: Expr) -> Callable[[Mapping[str, np.ndarray]], np.ndarray]:
    """Return ``fn(env) -> array`` evaluating ``e`` elementwise over arrays."""

    def fn(env: Mapping[str, np.ndarray]) -> np.ndarray:
        with np.errstate(all="ignore"):
            return _np_eval(e, env)

    return fn

"""Scalar expression language for vector fields, costs, manifolds and jumps.

Expressions are immutable trees over named variables with the usual
arithmetic (+, -, *, /, ^ with ^ binding tighter than unary minus), a small
set of unary functions (sin, cos, exp, log, sqrt, abs, step) and a ternary
saturation sat(e, lo, hi). ``step`` is the right-continuous Heaviside
function; it exists so that differentiation stays closed over the language:
the derivative of abs and sat at a kink is the one-sided right derivative,
expressed through step(0) = 1.

The module provides parsing with positioned errors, evaluation with domain
checking (division by zero or log of a nonpositive value raise instead of
producing NaN), exact symbolic differentiation with conservative constant
folding, substitution, printing that round-trips through the parser, and
compilation to the flat bytecode consumed by the numeric kernels.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .kernels import programs as bp


class ExprError(ValueError):
    """Base class for expression language failures."""


class ParseError(ExprError):
    def __init__(self, message: str, source: str, position: int):
        super().__init__(f"{message} at position {position}: {source!r}")
        self.position = position
        self.source = source


class UnboundVariableError(ExprError):
    pass


class EvalDomainError(ExprError, ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Expr:
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __pow__(self, other):
        return pow_(self, _coerce(other))

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"<Expr {to_source(self)}>"


@dataclass(frozen=True, repr=False)
class Const(Expr):
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))


@dataclass(frozen=True, repr=False)
class Var(Expr):
    name: str


@dataclass(frozen=True, repr=False)
class Un(Expr):
    op: str  # neg sin cos exp log sqrt abs step
    arg: Expr


@dataclass(frozen=True, repr=False)
class Bin(Expr):
    op: str  # + - * / ^
    lhs: Expr
    rhs: Expr


@dataclass(frozen=True, repr=False)
class Sat(Expr):
    arg: Expr
    lo: Expr
    hi: Expr


ZERO = Const(0.0)
ONE = Const(1.0)


def _coerce(v) -> Expr:
    if isinstance(v, Expr):
        return v
    if isinstance(v, (int, float)):
        return Const(float(v))
    raise TypeError(f"cannot use {type(v).__name__} as an expression")


def _is_const(e: Expr, value=None) -> bool:
    if not isinstance(e, Const):
        return False
    return value is None or e.value == value


# ---------------------------------------------------------------------------
# Folding constructors. Folding is conservative: only identities that hold
# for every argument value are applied (0*e, e+0, 1*e, e/1, e^1, e^0 and
# literal arithmetic on finite constants).


def add(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Bin("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    return Bin("-", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return Bin("*", a, b)


def div(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const) and b.value != 0.0:
        return Const(a.value / b.value)
    if _is_const(b, 1.0):
        return a
    if _is_const(a, 0.0) and not _is_const(b, 0.0):
        return ZERO
    return Bin("/", a, b)


def pow_(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        try:
            v = a.value**b.value
        except (OverflowError, ValueError, ZeroDivisionError):
            return Bin("^", a, b)
        if isinstance(v, float) and math.isfinite(v):
            return Const(v)
        return Bin("^", a, b)
    if _is_const(b, 1.0):
        return a
    if _is_const(b, 0.0):
        return ONE
    return Bin("^", a, b)


def neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Un) and a.op == "neg":
        return a.arg
    return Un("neg", a)


def un(op: str, a: Expr) -> Expr:
    if op == "neg":
        return neg(a)
    return Un(op, a)


def sat(e: Expr, lo: Expr, hi: Expr) -> Expr:
    return Sat(_coerce(e), _coerce(lo), _coerce(hi))


def step(e: Expr) -> Expr:
    if isinstance(e, Const):
        return ONE if e.value >= 0.0 else ZERO
    return Un("step", e)


# ---------------------------------------------------------------------------
# Parsing

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)

UNARY_FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt", "abs", "step")


def _tokenize(src: str):
    pos = 0
    out = []
    n = len(src)
    while pos < n:
        m = _TOKEN_RE.match(src, pos)
        if m is None or m.end() == pos:
            tail = src[pos:].lstrip()
            if not tail:
                break
            raise ParseError(f"unexpected character {tail[0]!r}", src, pos + (len(src[pos:]) - len(tail)))
        kind = m.lastgroup
        out.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    out.append(("eof", "", n))
    return out


class _Parser:
    def __init__(self, src: str, variables):
        self.src = src
        self.tokens = _tokenize(src)
        self.i = 0
        self.variables = None if variables is None else frozenset(variables)

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str):
        kind, value, pos = self.peek()
        if kind != "op" or value != text:
            raise ParseError(f"expected {text!r}, found {value or 'end of input'!r}", self.src, pos)
        return self.advance()

    def parse(self) -> Expr:
        e = self.additive()
        kind, value, pos = self.peek()
        if kind != "eof":
            raise ParseError(f"unexpected trailing {value!r}", self.src, pos)
        return e

    def additive(self) -> Expr:
        e = self.multiplicative()
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value in "+-":
                self.advance()
                rhs = self.multiplicative()
                e = Bin(value, e, rhs)
            else:
                return e

    def multiplicative(self) -> Expr:
        e = self.unary()
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value in "*/":
                self.advance()
                rhs = self.unary()
                e = Bin(value, e, rhs)
            else:
                return e

    def unary(self) -> Expr:
        kind, value, _ = self.peek()
        if kind == "op" and value == "-":
            self.advance()
            return Un("neg", self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        kind, value, _ = self.peek()
        if kind == "op" and value == "^":
            self.advance()
            # Right associative; the exponent may carry its own sign.
            return Bin("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        kind, value, pos = self.advance()
        if kind == "num":
            return Const(float(value))
        if kind == "name":
            nk, nv, _ = self.peek()
            if nk == "op" and nv == "(":
                return self.call(value, pos)
            if self.variables is not None and value not in self.variables:
                raise UnboundVariableError(
                    f"unknown variable {value!r} at position {pos} (declared: {', '.join(sorted(self.variables)) or 'none'})"
                )
            return Var(value)
        if kind == "op" and value == "(":
            e = self.additive()
            self.expect(")")
            return e
        raise ParseError(f"expected a value, found {value or 'end of input'!r}", self.src, pos)

    def call(self, name: str, pos: int) -> Expr:
        self.expect("(")
        args = [self.additive()]
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value == ",":
                self.advance()
                args.append(self.additive())
            else:
                break
        self.expect(")")
        if name == "sat":
            if len(args) != 3:
                raise ParseError(f"sat expects 3 arguments, got {len(args)}", self.src, pos)
            return Sat(args[0], args[1], args[2])
        if name in UNARY_FUNCTIONS:
            if len(args) != 1:
                raise ParseError(f"{name} expects 1 argument, got {len(args)}", self.src, pos)
            return Un(name, args[0])
        raise ParseError(f"unknown function {name!r}", self.src, pos)


def parse(source: str, variables: Iterable[str] | None = None) -> Expr:
    """Parse ``source`` into an Expr.

    When ``variables`` is given, any name outside the set raises
    UnboundVariableError; otherwise names are accepted freely.
    """
    return _Parser(source, variables).parse()


# ---------------------------------------------------------------------------
# Printing

_PREC_ATOM = 5
_PREC_POW = 4
_PREC_NEG = 3
_PREC_MUL = 2
_PREC_ADD = 1

_BIN_PREC = {"+": _PREC_ADD, "-": _PREC_ADD, "*": _PREC_MUL, "/": _PREC_MUL, "^": _PREC_POW}


def _fmt_number(v: float) -> str:
    if v != v or v in (math.inf, -math.inf):
        return repr(v)
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def _prec(e: Expr) -> int:
    if isinstance(e, Bin):
        return _BIN_PREC[e.op]
    if isinstance(e, Un) and e.op == "neg":
        return _PREC_NEG
    if isinstance(e, Const) and (e.value < 0 or (e.value == 0 and math.copysign(1.0, e.value) < 0)):
        return _PREC_NEG  # prints with a leading minus
    return _PREC_ATOM


def _wrap(e: Expr, parent_prec: int, strict: bool) -> str:
    text = to_source(e)
    p = _prec(e)
    if p < parent_prec or (strict and p == parent_prec):
        return f"({text})"
    return text


def to_source(e: Expr) -> str:
    """Render an expression; ``parse(to_source(e))`` rebuilds an equal tree."""
    if isinstance(e, Const):
        return _fmt_number(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Un):
        if e.op == "neg":
            return "-" + _wrap(e.arg, _PREC_NEG, False)
        return f"{e.op}({to_source(e.arg)})"
    if isinstance(e, Sat):
        return f"sat({to_source(e.arg)}, {to_source(e.lo)}, {to_source(e.hi)})"
    if isinstance(e, Bin):
        p = _BIN_PREC[e.op]
        if e.op == "^":
            # Right associative; a negative or compound exponent keeps its
            # own tighter binding, the base never re-binds a ^ or -.
            return f"{_wrap(e.lhs, _PREC_POW, True)}^{_wrap(e.rhs, _PREC_POW, False)}"
        left = _wrap(e.lhs, p, False)
        right = _wrap(e.rhs, p, e.op in ("-", "/"))
        return f"{left} {e.op} {right}"
    raise TypeError(f"not an expression: {e!r}")


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(e: Expr, env: Mapping[str, float]) -> float:
    """Evaluate with strict domain checking."""
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        try:
            return float(env[e.name])
        except KeyError:
            raise UnboundVariableError(f"variable {e.name!r} has no value") from None
    if isinstance(e, Un):
        v = evaluate(e.arg, env)
        if e.op == "neg":
            return -v
        if e.op == "sin":
            return math.sin(v)
        if e.op == "cos":
            return math.cos(v)
        if e.op == "exp":
            try:
                return math.exp(v)
            except OverflowError:
                raise EvalDomainError(f"exp overflow at {v!r}") from None
        if e.op == "log":
            if v <= 0.0:
                raise EvalDomainError(f"log of nonpositive value {v!r}")
            return math.log(v)
        if e.op == "sqrt":
            if v < 0.0:
                raise EvalDomainError(f"sqrt of negative value {v!r}")
            return math.sqrt(v)
        if e.op == "abs":
            return abs(v)
        if e.op == "step":
            return 1.0 if v >= 0.0 else 0.0
        raise TypeError(f"unknown unary op {e.op!r}")
    if isinstance(e, Sat):
        v = evaluate(e.arg, env)
        lo = evaluate(e.lo, env)
        hi = evaluate(e.hi, env)
        return min(max(v, lo), hi)
    if isinstance(e, Bin):
        a = evaluate(e.lhs, env)
        b = evaluate(e.rhs, env)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if e.op == "/":
            if b == 0.0:
                raise EvalDomainError("division by zero")
            return a / b
        if e.op == "^":
            try:
                v = a**b
            except (OverflowError, ZeroDivisionError, ValueError):
                raise EvalDomainError(f"power domain error: {a!r}^{b!r}") from None
            if isinstance(v, complex) or not math.isfinite(v):
                raise EvalDomainError(f"power domain error: {a!r}^{b!r}")
            return v
    raise TypeError(f"not an expression: {e!r}")


def free_vars(e: Expr) -> frozenset[str]:
    out: set[str] = set()
    stack = [e]
    while stack:
        node = stack.pop()
        if isinstance(node, Var):
            out.add(node.name)
        elif isinstance(node, Un):
            stack.append(node.arg)
        elif isinstance(node, Bin):
            stack.append(node.lhs)
            stack.append(node.rhs)
        elif isinstance(node, Sat):
            stack.extend((node.arg, node.lo, node.hi))
    return frozenset(out)


def substitute(e: Expr, mapping: Mapping[str, Expr]) -> Expr:
    """Replace variables by expressions, refolding constants on the way up."""
    if isinstance(e, Const):
        return e
    if isinstance(e, Var):
        repl = mapping.get(e.name)
        return e if repl is None else _coerce(repl)
    if isinstance(e, Un):
        arg = substitute(e.arg, mapping)
        if e.op == "neg":
            return neg(arg)
        if e.op == "step":
            return step(arg)
        if isinstance(arg, Const):
            try:
                return Const(evaluate(Un(e.op, arg), {}))
            except EvalDomainError:
                pass
        return Un(e.op, arg)
    if isinstance(e, Bin):
        lhs = substitute(e.lhs, mapping)
        rhs = substitute(e.rhs, mapping)
        return {"+": add, "-": sub, "*": mul, "/": div, "^": pow_}[e.op](lhs, rhs)
    if isinstance(e, Sat):
        return Sat(substitute(e.arg, mapping), substitute(e.lo, mapping), substitute(e.hi, mapping))
    raise TypeError(f"not an expression: {e!r}")


# ---------------------------------------------------------------------------
# Differentiation


def differentiate(e: Expr, var: str) -> Expr:
    """Exact partial derivative with respect to ``var``.

    At the kinks of abs and sat the one-sided right derivative is used,
    via the right-continuous step function: d|e| = (2 step(e) - 1) de, and
    the sat gate is step(e - lo) * (1 - step(e - hi)) so the lower kink
    belongs to the interior and the upper kink to the saturated branch.
    """
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.name == var else ZERO
    if isinstance(e, Un):
        d = differentiate(e.arg, var)
        a = e.arg
        if e.op == "neg":
            return neg(d)
        if e.op == "sin":
            return mul(un("cos", a), d)
        if e.op == "cos":
            return neg(mul(un("sin", a), d))
        if e.op == "exp":
            return mul(un("exp", a), d)
        if e.op == "log":
            return div(d, a)
        if e.op == "sqrt":
            return div(d, mul(Const(2.0), un("sqrt", a)))
        if e.op == "abs":
            return mul(sub(mul(Const(2.0), step(a)), ONE), d)
        if e.op == "step":
            return ZERO
        raise TypeError(f"unknown unary op {e.op!r}")
    if isinstance(e, Bin):
        da = differentiate(e.lhs, var)
        db = differentiate(e.rhs, var)
        a, b = e.lhs, e.rhs
        if e.op == "+":
            return add(da, db)
        if e.op == "-":
            return sub(da, db)
        if e.op == "*":
            return add(mul(da, b), mul(a, db))
        if e.op == "/":
            return sub(div(da, b), div(mul(a, db), mul(b, b)))
        if e.op == "^":
            if isinstance(b, Const):
                return mul(mul(b, pow_(a, Const(b.value - 1.0))), da)
            if isinstance(a, Const):
                return mul(mul(pow_(a, b), Const(math.log(a.value))), db) if a.value > 0 else mul(
                    pow_(a, b), mul(un("log", a), db)
                )
            # a^b = exp(b log a)
            return mul(pow_(a, b), add(mul(db, un("log", a)), div(mul(b, da), a)))
    if isinstance(e, Sat):
        d = differentiate(e.arg, var)
        dlo = differentiate(e.lo, var)
        dhi = differentiate(e.hi, var)
        gate = mul(step(sub(e.arg, e.lo)), sub(ONE, step(sub(e.arg, e.hi))))
        out = mul(gate, d)
        if not _is_const(dlo, 0.0):
            out = add(out, mul(sub(ONE, step(sub(e.arg, e.lo))), dlo))
        if not _is_const(dhi, 0.0):
            out = add(out, mul(step(sub(e.arg, e.hi)), dhi))
        return out
    raise TypeError(f"not an expression: {e!r}")


def gradient(e: Expr, variables: Iterable[str]) -> list[Expr]:
    return [differentiate(e, v) for v in variables]


# ---------------------------------------------------------------------------
# Compilation to kernel bytecode

_UN_OPS = {
    "neg": bp.OP_NEG,
    "sin": bp.OP_SIN,
    "cos": bp.OP_COS,
    "exp": bp.OP_EXP,
    "log": bp.OP_LOG,
    "sqrt": bp.OP_SQRT,
    "abs": bp.OP_ABS,
    "step": bp.OP_STEP,
}
_BIN_OPS = {"+": bp.OP_ADD, "-": bp.OP_SUB, "*": bp.OP_MUL, "/": bp.OP_DIV, "^": bp.OP_POW}


def compile_expr(e: Expr, var_order: Iterable[str]) -> bp.Program:
    """Flatten to postfix bytecode against a fixed variable ordering."""
    index = {name: i for i, name in enumerate(var_order)}
    code: list[tuple[int, int]] = []
    consts: list[float] = []

    def emit(node: Expr) -> int:
        if isinstance(node, Const):
            consts.append(node.value)
            code.append((bp.OP_CONST, len(consts) - 1))
            return 1
        if isinstance(node, Var):
            try:
                code.append((bp.OP_VAR, index[node.name]))
            except KeyError:
                raise UnboundVariableError(
                    f"variable {node.name!r} is not in the compile ordering {sorted(index)}"
                ) from None
            return 1
        if isinstance(node, Un):
            depth = emit(node.arg)
            code.append((_UN_OPS[node.op], 0))
            return depth
        if isinstance(node, Bin):
            dl = emit(node.lhs)
            dr = emit(node.rhs)
            code.append((_BIN_OPS[node.op], 0))
            return max(dl, dr + 1)
        if isinstance(node, Sat):
            d0 = emit(node.arg)
            d1 = emit(node.lo)
            d2 = emit(node.hi)
            code.append((bp.OP_SAT, 0))
            return max(d0, d1 + 1, d2 + 2)
        raise TypeError(f"not an expression: {node!r}")

    depth = emit(e)
    return bp.Program(
        np.asarray(code, dtype=np.int32).reshape(-1, 2),
        np.asarray(consts, dtype=np.float64),
        depth,
    )


def constant_value(e: Expr) -> float | None:
    """The value of a constant expression, or None if it is not a Const."""
    return e.value if isinstance(e, Const) else None

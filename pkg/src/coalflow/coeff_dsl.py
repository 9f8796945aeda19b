"""A tiny expression language for the coefficient fields ``a(t, x)`` and ``b(t, x)``.

Grammar::

    expr  := term (('+' | '-') term)*
    term  := unary (('*' | '/') unary)*
    unary := ('-' | '+') unary | atom
    atom  := NUMBER | 't' | 'x' | 'pi' | FUNC '(' expr [',' expr] ')' | '(' expr ')'

with ``FUNC`` one of ``sin cos exp abs min max``. The language is closed
under ``d/dx`` (except for ``abs``/``min``/``max`` of x-dependent arguments),
which keeps the derivative ``a'`` exact.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Tuple, Union

import numpy as np

__all__ = [
    "ExpressionSyntaxError",
    "UnknownIdentifier",
    "DivisionByZero",
    "NotDifferentiable",
    "FieldValidationError",
    "NotPeriodic",
    "NonPositiveDiffusivity",
    "NotFinite",
    "Num",
    "Var",
    "Const",
    "Neg",
    "BinOp",
    "Call",
    "parse_expression",
    "to_text",
    "evaluate_expr",
    "compile_expr",
    "differentiate_x",
    "depends_on",
    "substitute",
    "CoefficientField",
    "validate_field",
    "make_field",
]


class ExpressionSyntaxError(SyntaxError):
    def __init__(self, message, position):
        super().__init__(f"{message} at position {position}")
        self.position = position


class UnknownIdentifier(ValueError):
    pass


class DivisionByZero(ZeroDivisionError):
    pass


class NotDifferentiable(ValueError):
    pass


class FieldValidationError(ValueError):
    pass


class NotPeriodic(FieldValidationError):
    pass


class NonPositiveDiffusivity(FieldValidationError):
    pass


class NotFinite(FieldValidationError):
    pass


# -- AST -------------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Const:
    name: str = "pi"


@dataclass(frozen=True)
class Neg:
    arg: "Expression"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expression"
    right: "Expression"


@dataclass(frozen=True)
class Call:
    func: str
    args: Tuple["Expression", ...]


Expression = Union[Num, Var, Const, Neg, BinOp, Call]

VARIABLES = ("t", "x")
FUNCTIONS = {"sin": 1, "cos": 1, "exp": 1, "abs": 1, "min": 2, "max": 2}
_NONSMOOTH = ("abs", "min", "max")

# -- parsing -----------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/(),]))"
)


def _tokenize(text):
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        while pos < n and text[pos].isspace():
            pos += 1
        if pos == n:
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ExpressionSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, text):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, pos = self.take()
        if text != value or kind == "end":
            found = "end of input" if kind == "end" else repr(text)
            raise ExpressionSyntaxError(f"expected {value!r}, found {found}", pos)

    def parse(self):
        e = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ExpressionSyntaxError(f"unexpected {text!r}", pos)
        return e

    def expr(self):
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            e = BinOp(op, e, self.term())
        return e

    def term(self):
        e = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            e = BinOp(op, e, self.unary())
        return e

    def unary(self):
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.take()
            arg = self.unary()
            if isinstance(arg, Num):
                return Num(-arg.value)
            return Neg(arg)
        if kind == "op" and text == "+":
            self.take()
            return self.unary()
        return self.atom()

    def atom(self):
        kind, text, pos = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if text in VARIABLES:
                return Var(text)
            if text == "pi":
                return Const("pi")
            if text in FUNCTIONS:
                self.expect("(")
                args = [self.expr()]
                while self.peek()[1] == "," and self.peek()[0] == "op":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != FUNCTIONS[text]:
                    raise ExpressionSyntaxError(
                        f"{text} takes {FUNCTIONS[text]} argument(s), got {len(args)}", pos
                    )
                return Call(text, tuple(args))
            raise UnknownIdentifier(f"unknown identifier {text!r} at position {pos}")
        if kind == "op" and text == "(":
            e = self.expr()
            self.expect(")")
            return e
        found = "end of input" if kind == "end" else repr(text)
        raise ExpressionSyntaxError(f"unexpected {found}", pos)


def parse_expression(text: str) -> Expression:
    if not text or not text.strip():
        raise ExpressionSyntaxError("empty expression", 0)
    return _Parser(text).parse()


def to_text(e: Expression) -> str:
    """Canonical, fully parenthesised text; ``parse_expression`` inverts it."""
    if isinstance(e, Num):
        s = repr(float(e.value))
        return f"({s})" if e.value < 0 or s.startswith("-") else s
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Const):
        return e.name
    if isinstance(e, Neg):
        return f"(-{to_text(e.arg)})"
    if isinstance(e, BinOp):
        return f"({to_text(e.left)} {e.op} {to_text(e.right)})"
    if isinstance(e, Call):
        return f"{e.func}({', '.join(to_text(a) for a in e.args)})"
    raise TypeError(f"not an expression: {e!r}")


# -- evaluation -----------------------------------------------------------------------

_UNARY = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "abs": np.abs}
_BINARY = {"min": np.minimum, "max": np.maximum}


def _divide(num, den):
    if np.any(np.asarray(den) == 0):
        raise DivisionByZero("division by zero")
    return num / den


def compile_expr(e: Expression) -> Callable:
    """Turn an AST into a function ``f(t, x)`` that broadcasts over arrays."""
    if isinstance(e, Num):
        v = e.value
        return lambda t, x: v
    if isinstance(e, Const):
        return lambda t, x: math.pi
    if isinstance(e, Var):
        if e.name == "t":
            return lambda t, x: t
        return lambda t, x: x
    if isinstance(e, Neg):
        f = compile_expr(e.arg)
        return lambda t, x: -f(t, x)
    if isinstance(e, BinOp):
        f, g = compile_expr(e.left), compile_expr(e.right)
        if e.op == "+":
            return lambda t, x: f(t, x) + g(t, x)
        if e.op == "-":
            return lambda t, x: f(t, x) - g(t, x)
        if e.op == "*":
            return lambda t, x: f(t, x) * g(t, x)
        return lambda t, x: _divide(f(t, x), g(t, x))
    if isinstance(e, Call):
        fs = [compile_expr(a) for a in e.args]
        if e.func in _UNARY:
            fn = _UNARY[e.func]
            f = fs[0]
            return lambda t, x: fn(f(t, x))
        fn = _BINARY[e.func]
        f, g = fs
        return lambda t, x: fn(f(t, x), g(t, x))
    raise TypeError(f"not an expression: {e!r}")


def evaluate_expr(e: Expression, t, x):
    with np.errstate(over="ignore", invalid="ignore"):
        out = compile_expr(e)(t, x)
    if np.ndim(out) == 0 and np.ndim(t) == 0 and np.ndim(x) == 0:
        return float(out)
    return np.broadcast_to(np.asarray(out, dtype=float), np.broadcast(t, x).shape)


# -- symbolic differentiation ------------------------------------------------------------


def depends_on(e: Expression, name: str) -> bool:
    if isinstance(e, Var):
        return e.name == name
    if isinstance(e, Neg):
        return depends_on(e.arg, name)
    if isinstance(e, BinOp):
        return depends_on(e.left, name) or depends_on(e.right, name)
    if isinstance(e, Call):
        return any(depends_on(a, name) for a in e.args)
    return False


def _is(e, v):
    return isinstance(e, Num) and e.value == v


def _neg(a):
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _add(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value + b.value)
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    return BinOp("+", a, b)


def _sub(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value - b.value)
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return _neg(b)
    return BinOp("-", a, b)


def _mul(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value * b.value)
    if _is(a, 0.0) or _is(b, 0.0):
        return Num(0.0)
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    return BinOp("*", a, b)


def _div(a, b):
    if isinstance(a, Num) and isinstance(b, Num) and b.value != 0.0:
        return Num(a.value / b.value)
    if _is(a, 0.0):
        return Num(0.0)
    if _is(b, 1.0):
        return a
    return BinOp("/", a, b)


def differentiate_x(e: Expression) -> Expression:
    """Symbolic partial derivative in ``x`` with constant folding."""
    if not depends_on(e, "x"):
        return Num(0.0)
    if isinstance(e, Var):
        return Num(1.0)
    if isinstance(e, Neg):
        return _neg(differentiate_x(e.arg))
    if isinstance(e, BinOp):
        u, v = e.left, e.right
        du, dv = differentiate_x(u), differentiate_x(v)
        if e.op == "+":
            return _add(du, dv)
        if e.op == "-":
            return _sub(du, dv)
        if e.op == "*":
            return _add(_mul(du, v), _mul(u, dv))
        # quotient rule
        return _div(_sub(_mul(du, v), _mul(u, dv)), _mul(v, v))
    if isinstance(e, Call):
        if e.func in _NONSMOOTH:
            raise NotDifferentiable(f"{e.func}(...) of an x-dependent argument is not differentiable")
        (u,) = e.args
        du = differentiate_x(u)
        if e.func == "sin":
            return _mul(Call("cos", (u,)), du)
        if e.func == "cos":
            return _mul(_neg(Call("sin", (u,))), du)
        if e.func == "exp":
            return _mul(Call("exp", (u,)), du)
    raise TypeError(f"not an expression: {e!r}")


def substitute(e: Expression, name: str, repl: Expression) -> Expression:
    if isinstance(e, Var) and e.name == name:
        return repl
    if isinstance(e, Neg):
        return Neg(substitute(e.arg, name, repl))
    if isinstance(e, BinOp):
        return BinOp(e.op, substitute(e.left, name, repl), substitute(e.right, name, repl))
    if isinstance(e, Call):
        return Call(e.func, tuple(substitute(a, name, repl) for a in e.args))
    return e


# -- coefficient fields -------------------------------------------------------------------


class CoefficientField:
    """Validated drift ``b(t, x)`` and diffusivity ``a(t, x)``, 1-periodic in ``x``.

    The callables ``a``, ``b`` and ``a_prime`` broadcast over numpy arrays.
    Bounds are grid extrema over the validation window, not certified values.
    """

    def __init__(self, a, b, a_prime, *, lipschitz_estimate, a_star, a_upper, b_upper, window, grid_n):
        self.a_expr = a
        self.b_expr = b
        self.a_prime_expr = a_prime
        self.lipschitz_estimate = float(lipschitz_estimate)
        self.a_star = float(a_star)
        self.a_upper = float(a_upper)
        self.b_upper = float(b_upper)
        self.window = (float(window[0]), float(window[1]))
        self.grid_n = int(grid_n)
        self._a = compile_expr(a)
        self._b = compile_expr(b)
        self._ap = compile_expr(a_prime)

    # compiled closures do not pickle; worker processes recompile from the trees
    def __getstate__(self):
        state = self.__dict__.copy()
        for k in ("_a", "_b", "_ap"):
            state.pop(k)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._a = compile_expr(self.a_expr)
        self._b = compile_expr(self.b_expr)
        self._ap = compile_expr(self.a_prime_expr)

    @property
    def bounds(self):
        return self.a_star, self.a_upper, self.b_upper

    def a(self, t, x):
        return _broadcast(self._a(t, x), t, x)

    def b(self, t, x):
        return _broadcast(self._b(t, x), t, x)

    def a_prime(self, t, x):
        return _broadcast(self._ap(t, x), t, x)

    def reversed_drift(self, t, x):
        """Drift of the time-reversed flow at reversed time ``t``: ``-b + a'/2`` at ``-t``."""
        return -self.b(-t, x) + 0.5 * self.a_prime(-t, x)

    def reversed(self):
        """The field ``(a(-t, x), -b(-t, x) + a'(-t, x)/2)`` on the negated window."""
        minus_t = Neg(Var("t"))
        a_rev = substitute(self.a_expr, "t", minus_t)
        b_rev = BinOp(
            "+",
            Neg(substitute(self.b_expr, "t", minus_t)),
            BinOp("*", Num(0.5), substitute(self.a_prime_expr, "t", minus_t)),
        )
        return validate_field(a_rev, b_rev, (-self.window[1], -self.window[0]), self.grid_n)

    def to_json(self):
        return {
            "a": to_text(self.a_expr),
            "b": to_text(self.b_expr),
            "a_prime": to_text(self.a_prime_expr),
            "a_star": self.a_star,
            "a_upper": self.a_upper,
            "b_upper": self.b_upper,
            "lipschitz_estimate": self.lipschitz_estimate,
            "window": list(self.window),
            "grid_n": self.grid_n,
        }

    def __repr__(self):
        return f"CoefficientField(a={to_text(self.a_expr)!r}, b={to_text(self.b_expr)!r})"


def _broadcast(v, t, x):
    if np.ndim(v) == 0 and np.ndim(t) == 0 and np.ndim(x) == 0:
        return float(v)
    return np.broadcast_to(np.asarray(v, dtype=float), np.broadcast(t, x).shape)


def _as_expr(e):
    return parse_expression(e) if isinstance(e, str) else e


def validate_field(a, b, window=(0.0, 1.0), grid_n=64) -> CoefficientField:
    """Check periodicity, finiteness and positivity on a ``grid_n x grid_n`` grid."""
    if grid_n < 16:
        raise ValueError("grid_n must be at least 16")
    a, b = _as_expr(a), _as_expr(b)
    a_prime = differentiate_x(a)
    t0, t1 = float(window[0]), float(window[1])
    ts = np.linspace(t0, t1, grid_n)[:, None]
    xs = (np.arange(grid_n) / grid_n)[None, :]
    values = {}
    for name, e in (("a", a), ("b", b), ("a'", a_prime)):
        f = compile_expr(e)
        try:
            with np.errstate(all="ignore"):
                v0 = _broadcast(f(ts, xs), ts, xs)
                v1 = _broadcast(f(ts, xs + 1.0), ts, xs)
        except DivisionByZero as exc:
            raise NotFinite(f"{name} divides by zero on the validation grid") from exc
        if not (np.all(np.isfinite(v0)) and np.all(np.isfinite(v1))):
            raise NotFinite(f"{name} is not finite on the validation grid")
        if np.max(np.abs(v1 - v0)) > 1e-9:
            raise NotPeriodic(f"{name} is not 1-periodic in x")
        values[name] = v0
    av = values["a"]
    if np.min(av) <= 0.0:
        raise NonPositiveDiffusivity(f"a attains {np.min(av):.6g} <= 0 on the validation grid")
    lip = 0.0
    for v in values.values():
        dq = np.abs(np.diff(np.concatenate((v, v[:, :1]), axis=1), axis=1)) * grid_n
        lip = max(lip, float(np.max(dq)))
    return CoefficientField(
        a,
        b,
        a_prime,
        lipschitz_estimate=lip,
        a_star=float(np.min(av)),
        a_upper=float(np.max(av)),
        b_upper=float(np.max(np.abs(values["b"]))),
        window=(t0, t1),
        grid_n=grid_n,
    )


def make_field(a: str, b: str, window=(0.0, 1.0), grid_n=64) -> CoefficientField:
    """Parse and validate in one step."""
    return validate_field(parse_expression(a), parse_expression(b), window, grid_n)

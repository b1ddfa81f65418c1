"""Concrete vector fields: expression trees, interval semantics, benchmarks.

A field f : R^n -> R^n is either one expression tree per output dimension
or a feed-forward network (for neural-ODE concrete models).  Both support
exact evaluation and sound interval enclosure; the benchmark registry
ships the standard non-Lipschitz examples plus the bundled neural-ODE
fixture.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from typing import Optional, Sequence, Union

import numpy as np

from . import intervals as iv
from .intervals import DomainError, IntervalBox
from .network import Network, load_weights


class ParseError(ValueError):
    """Syntax error in a field expression, with position information."""

    def __init__(self, message: str, text: str, pos: int):
        super().__init__(f"{message} at position {pos}: {text[:pos]}<HERE>{text[pos:]}")
        self.pos = pos


# ---------------------------------------------------------------------------
# expression trees

_UNARY_OPS = ("neg", "sqrt", "cbrt", "cbrtsq", "square", "exp", "tanh", "sigmoid")
_BINARY_OPS = ("add", "sub", "mul", "div")

_FUNCTIONS = ("sqrt", "cbrt", "exp", "tanh", "sigmoid")


@dataclass(frozen=True)
class Expr:
    pass


@dataclass(frozen=True)
class Var(Expr):
    index: int


@dataclass(frozen=True)
class Const(Expr):
    value: float


@dataclass(frozen=True)
class Unary(Expr):
    op: str
    arg: Expr


@dataclass(frozen=True)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    exponent: int


def eval_expr(e: Expr, x: np.ndarray) -> np.ndarray:
    """Exact evaluation at a batch of points x with shape (m, n)."""
    if isinstance(e, Var):
        return x[:, e.index]
    if isinstance(e, Const):
        return np.full(x.shape[0], e.value)
    if isinstance(e, Unary):
        a = eval_expr(e.arg, x)
        if e.op == "neg":
            return -a
        if e.op == "sqrt":
            if np.any(a < -iv._SQRT_SLACK):
                raise DomainError(f"sqrt of negative value (min arg {a.min():g})")
            return np.sqrt(np.maximum(a, 0.0))
        if e.op == "cbrt":
            return np.cbrt(a)
        if e.op == "cbrtsq":
            return np.cbrt(a * a)
        if e.op == "square":
            return a * a
        if e.op == "exp":
            return np.exp(a)
        if e.op == "tanh":
            return np.tanh(a)
        if e.op == "sigmoid":
            return iv._sigmoid(a)
    if isinstance(e, Binary):
        a, b = eval_expr(e.left, x), eval_expr(e.right, x)
        if e.op == "add":
            return a + b
        if e.op == "sub":
            return a - b
        if e.op == "mul":
            return a * b
        if e.op == "div":
            if np.any(b == 0.0):
                raise DomainError("division by zero")
            return a / b
    if isinstance(e, Pow):
        return eval_expr(e.base, x) ** e.exponent
    raise TypeError(f"unknown expression node {e!r}")


def eval_expr_interval(e: Expr, lo: np.ndarray, hi: np.ndarray):
    """Sound enclosure over a batch of boxes with shape (m, n)."""
    if isinstance(e, Var):
        return lo[:, e.index], hi[:, e.index]
    if isinstance(e, Const):
        c = np.full(lo.shape[0], e.value)
        return c, c.copy()
    if isinstance(e, Unary):
        alo, ahi = eval_expr_interval(e.arg, lo, hi)
        fn = {
            "neg": iv.ineg,
            "sqrt": iv.isqrt,
            "cbrt": iv.icbrt,
            "cbrtsq": iv.icbrt_sq,
            "square": iv.isquare,
            "exp": iv.iexp,
            "tanh": iv.itanh,
            "sigmoid": iv.isigmoid,
        }[e.op]
        return fn(alo, ahi)
    if isinstance(e, Binary):
        alo, ahi = eval_expr_interval(e.left, lo, hi)
        blo, bhi = eval_expr_interval(e.right, lo, hi)
        fn = {"add": iv.iadd, "sub": iv.isub, "mul": iv.imul, "div": iv.idiv}[e.op]
        return fn(alo, ahi, blo, bhi)
    if isinstance(e, Pow):
        alo, ahi = eval_expr_interval(e.base, lo, hi)
        return iv.ipow_nat(alo, ahi, e.exponent)
    raise TypeError(f"unknown expression node {e!r}")


def _max_var(e: Expr) -> int:
    if isinstance(e, Var):
        return e.index
    if isinstance(e, Unary):
        return _max_var(e.arg)
    if isinstance(e, Binary):
        return max(_max_var(e.left), _max_var(e.right))
    if isinstance(e, Pow):
        return _max_var(e.base)
    return -1


def print_expr(e: Expr) -> str:
    """Render an expression so that parsing it back gives an identical tree
    (modulo the cbrt(x^2) fusion, which re-fuses on parse)."""

    def prec(node: Expr) -> int:
        if isinstance(node, Binary):
            return 1 if node.op in ("add", "sub") else 2
        if isinstance(node, Unary) and node.op == "neg":
            return 3
        return 9

    def render(node: Expr) -> str:
        if isinstance(node, Var):
            return f"x{node.index}"
        if isinstance(node, Const):
            return repr(node.value) if node.value >= 0 else f"({node.value!r})"
        if isinstance(node, Unary):
            if node.op == "neg":
                inner = render(node.arg)
                if prec(node.arg) < 9:
                    inner = f"({inner})"
                return f"-{inner}"
            if node.op == "cbrtsq":
                return f"cbrt({render(node.arg)}^2)"
            if node.op == "square":
                inner = render(node.arg)
                if prec(node.arg) < 9:
                    inner = f"({inner})"
                return f"{inner}^2"
            return f"{node.op}({render(node.arg)})"
        if isinstance(node, Pow):
            inner = render(node.base)
            if prec(node.base) < 9:
                inner = f"({inner})"
            return f"{inner}^{node.exponent}"
        assert isinstance(node, Binary)
        sym = {"add": "+", "sub": "-", "mul": "*", "div": "/"}[node.op]
        left = render(node.left)
        right = render(node.right)
        if prec(node.left) < prec(node):
            left = f"({left})"
        # -, / are left-associative: parenthesize a right operand of equal precedence
        if prec(node.right) < prec(node) or (
            prec(node.right) == prec(node) and node.op in ("sub", "div")
        ):
            right = f"({right})"
        return f"{left} {sym} {right}"

    return render(e)


# ---------------------------------------------------------------------------
# parser: expr := term (('+'|'-') term)* ; term := unary (('*'|'/') unary)* ;
# unary := '-'* power ; power := atom ('^' nat)? ;
# atom := number | x<i> | func '(' expr ')' | '(' expr ')'

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[()+\-*/^]))"
)


class _Parser:
    def __init__(self, text: str, n: int):
        self.text = text
        self.n = n
        self.tokens = []
        pos = 0
        while pos < len(text):
            m = _TOKEN_RE.match(text, pos)
            if m is None or m.end() == pos:
                if text[pos:].strip():
                    raise ParseError("unexpected character", text, pos)
                break
            kind = m.lastgroup
            # the number regex alone drops the exponent group; recover full lexeme
            self.tokens.append((kind, m.group(0).strip(), m.start()))
            pos = m.end()
        self.i = 0

    def _peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, "", len(self.text))

    def _next(self):
        tok = self._peek()
        self.i += 1
        return tok

    def _expect(self, value: str):
        kind, text, pos = self._next()
        if text != value:
            raise ParseError(f"expected {value!r}", self.text, pos)

    def parse(self) -> Expr:
        e = self._expr()
        kind, text, pos = self._peek()
        if kind is not None:
            raise ParseError(f"unexpected token {text!r}", self.text, pos)
        return e

    def _expr(self) -> Expr:
        e = self._term()
        while True:
            kind, text, _ = self._peek()
            if text in ("+", "-"):
                self._next()
                rhs = self._term()
                e = Binary("add" if text == "+" else "sub", e, rhs)
            else:
                return e

    def _term(self) -> Expr:
        e = self._unary()
        while True:
            kind, text, _ = self._peek()
            if text in ("*", "/"):
                self._next()
                rhs = self._unary()
                e = Binary("mul" if text == "*" else "div", e, rhs)
            else:
                return e

    def _unary(self) -> Expr:
        kind, text, _ = self._peek()
        if text == "-":
            self._next()
            return Unary("neg", self._unary())
        return self._power()

    def _power(self) -> Expr:
        e = self._atom()
        kind, text, pos = self._peek()
        if text == "^":
            self._next()
            kind, text, pos = self._next()
            if kind != "num" or not text.isdigit():
                raise ParseError("exponent must be a natural number", self.text, pos)
            exponent = int(text)
            if isinstance(e, Unary) and e.op == "cbrt" and exponent == 2:
                # keep cbrt(...)^2 un-fused; fusion targets cbrt(x^2) only
                return Pow(e, 2)
            e = Pow(e, exponent)
        return e

    def _atom(self) -> Expr:
        kind, text, pos = self._next()
        if kind == "num":
            return Const(float(text))
        if kind == "name":
            if re.fullmatch(r"x\d+", text):
                index = int(text[1:])
                if index >= self.n:
                    raise ParseError(
                        f"variable x{index} out of range for dimension {self.n}", self.text, pos
                    )
                return Var(index)
            if text in _FUNCTIONS:
                self._expect("(")
                arg = self._expr()
                self._expect(")")
                if text == "cbrt":
                    if isinstance(arg, Pow) and arg.exponent == 2:
                        return Unary("cbrtsq", arg.base)
                    if isinstance(arg, Unary) and arg.op == "square":
                        return Unary("cbrtsq", arg.arg)
                return Unary(text, arg)
            raise ParseError(f"unknown function or variable {text!r}", self.text, pos)
        if text == "(":
            e = self._expr()
            self._expect(")")
            return e
        raise ParseError("expected a value", self.text, pos)


def parse_expr(text: str, n: int) -> Expr:
    return _Parser(text, n).parse()


# ---------------------------------------------------------------------------
# vector fields

@dataclass(frozen=True)
class VectorField:
    """f : R^n -> R^n, expression-tree or network backed, with disturbance
    radius delta >= 0."""

    dim: int
    exprs: Optional[tuple] = None
    net: Optional[Network] = None
    delta: float = 0.0

    def __post_init__(self):
        if (self.exprs is None) == (self.net is None):
            raise ValueError("exactly one of exprs/net must be given")
        if self.delta < 0.0:
            raise ValueError("disturbance radius must be nonnegative")
        if self.exprs is not None:
            exprs = tuple(self.exprs)
            if len(exprs) != self.dim:
                raise ValueError(f"{len(exprs)} expressions for dimension {self.dim}")
            for e in exprs:
                if _max_var(e) >= self.dim:
                    raise ValueError("expression references a variable beyond the dimension")
            object.__setattr__(self, "exprs", exprs)
        else:
            if self.net.dim != self.dim:
                raise ValueError("network dimension mismatch")

    def eval(self, x: np.ndarray) -> np.ndarray:
        """Exact f(x); x may be a single point (n,) or a batch (m, n)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        pts = x[None, :] if single else x
        if pts.shape[1] != self.dim:
            raise ValueError(f"point dimension {pts.shape[1]} != {self.dim}")
        if self.net is not None:
            out = self.net.forward(pts)
        else:
            out = np.stack([eval_expr(e, pts) for e in self.exprs], axis=1)
        return out[0] if single else out

    def eval_interval(self, box_lo, box_hi=None):
        """Sound componentwise enclosure of {f(x) : x in box}.

        Accepts an IntervalBox or a batch of boxes as (m, n) lo/hi arrays;
        returns (lo, hi) with matching shape.
        """
        if isinstance(box_lo, IntervalBox):
            lo, hi = box_lo.lo[None, :], box_lo.hi[None, :]
            single = True
        else:
            lo, hi = np.asarray(box_lo, dtype=np.float64), np.asarray(box_hi, dtype=np.float64)
            single = lo.ndim == 1
            if single:
                lo, hi = lo[None, :], hi[None, :]
        if self.net is not None:
            out_lo, out_hi = self.net.forward_interval(lo, hi)
        else:
            parts = [eval_expr_interval(e, lo, hi) for e in self.exprs]
            out_lo = np.stack([p[0] for p in parts], axis=1)
            out_hi = np.stack([p[1] for p in parts], axis=1)
        if single:
            return out_lo[0], out_hi[0]
        return out_lo, out_hi

    def print_field(self) -> str:
        if self.exprs is None:
            raise ValueError("network-backed fields have no printable expressions")
        return " ; ".join(print_expr(e) for e in self.exprs)


def parse_field(
    text: Union[str, Sequence[str]], n: int, delta: float = 0.0
) -> VectorField:
    """Parse n expression strings (or one ';'-separated string) into a field."""
    if isinstance(text, str):
        parts = [p for p in text.split(";")]
    else:
        parts = list(text)
    if len(parts) != n:
        raise ValueError(f"expected {n} expressions, got {len(parts)}")
    exprs = tuple(parse_expr(p, n) for p in parts)
    return VectorField(dim=n, exprs=exprs, delta=delta)


# ---------------------------------------------------------------------------
# benchmark registry

@dataclass(frozen=True)
class BenchmarkSpec:
    name: str
    field: VectorField
    domain: IntervalBox
    init: IntervalBox
    bad: Optional[IntervalBox]
    horizon: float

    def __post_init__(self):
        if not self.domain.contains_box(self.init):
            raise ValueError("initial set must lie inside the domain")
        if self.bad is not None and not self.domain.contains_box(self.bad):
            raise ValueError("bad set must lie inside the domain")
        if self.horizon <= 0.0:
            raise ValueError("horizon must be positive")
        # reject fields whose partial domain (sqrt) is not covered by the box
        self.field.eval_interval(self.domain)


BENCHMARK_NAMES = ("watertank", "nl1", "nl2", "watertank4d", "watertank6d", "node1")


def _box(*bounds) -> IntervalBox:
    return IntervalBox.from_bounds(list(bounds))


def _node1_network() -> Network:
    ref = resources.files("absynth").joinpath("data/node1.wt")
    with resources.as_file(ref) as path:
        return load_weights(path)


def benchmark(name: str) -> BenchmarkSpec:
    """Benchmark registry; horizon defaults to the 1 s used throughout."""
    if name == "watertank":
        return BenchmarkSpec(
            name=name,
            field=parse_field("1.5 - sqrt(x0)", 1),
            domain=_box((0, 2)),
            init=_box((0, 0.01)),
            bad=None,
            horizon=1.0,
        )
    if name == "nl1":
        return BenchmarkSpec(
            name=name,
            field=parse_field("x1 ; sqrt(x0)", 2),
            domain=_box((0, 1), (-1, 1)),
            init=_box((0, 0.01), (0, 0.01)),
            bad=None,
            horizon=1.0,
        )
    if name == "nl2":
        return BenchmarkSpec(
            name=name,
            field=parse_field("x0^2 + x1 ; cbrt(x0^2) - x0", 2),
            domain=_box((-1, 1), (-1, 1)),
            init=_box((-0.005, 0.005), (-0.5, -0.49)),
            bad=None,
            horizon=1.0,
        )
    if name == "watertank4d":
        return BenchmarkSpec(
            name=name,
            field=parse_field(
                "0.2 - sqrt(x0) ; -x1 ; -x2 ; -0.25*(x0 + x1 + x2 + x3)", 4
            ),
            domain=_box((0, 1), (0, 1), (0, 1), (0, 1)),
            init=_box((0, 0.01), (0.8, 0.81), (0.8, 0.81), (0.8, 0.81)),
            bad=None,
            horizon=1.0,
        )
    if name == "watertank6d":
        return BenchmarkSpec(
            name=name,
            field=parse_field(
                "0.2 - sqrt(x0) ; -x1 ; -x2 ; -x3 ; -x4 ;"
                " -(x0 + x1 + x2 + x3 + x4 + x5)/6",
                6,
            ),
            domain=_box(*([(0, 1)] * 6)),
            init=_box(
                (0, 0.01), (0.8, 0.81), (0.8, 0.81), (0.8, 0.81), (0.7, 0.71), (0.65, 0.66)
            ),
            bad=None,
            horizon=1.0,
        )
    if name == "node1":
        return BenchmarkSpec(
            name=name,
            field=VectorField(dim=2, net=_node1_network()),
            domain=_box((-1, 1), (-1, 1)),
            init=_box((0.2, 0.21), (0.2, 0.21)),
            bad=None,
            horizon=1.0,
        )
    raise KeyError(f"unknown benchmark {name!r}; known: {', '.join(BENCHMARK_NAMES)}")


# ---------------------------------------------------------------------------
# problem files: plain-text key = value, boxes as ';'-separated "lo,hi" pairs

def _parse_box(value: str, n: int, key: str) -> IntervalBox:
    parts = [p.strip() for p in value.split(";") if p.strip()]
    if len(parts) != n:
        raise ValueError(f"{key}: expected {n} 'lo,hi' pairs, got {len(parts)}")
    bounds = []
    for p in parts:
        pieces = p.split(",")
        if len(pieces) != 2:
            raise ValueError(f"{key}: malformed interval {p!r}")
        bounds.append((float(pieces[0]), float(pieces[1])))
    return IntervalBox.from_bounds(bounds)


def load_problem(path) -> BenchmarkSpec:
    """Load a benchmark description from a key = value text file."""
    entries = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    if "dim" not in entries:
        raise ValueError(f"{path}: missing 'dim'")
    n = int(entries["dim"])
    delta = float(entries.get("delta", "0"))
    if "weights" in entries:
        net = load_weights(entries["weights"])
        field = VectorField(dim=n, net=net, delta=delta)
    else:
        exprs = []
        for i in range(n):
            key = f"f{i}"
            if key not in entries:
                raise ValueError(f"{path}: missing '{key}'")
            exprs.append(entries[key])
        field = parse_field(exprs, n, delta=delta)
    if "domain" not in entries or "init" not in entries:
        raise ValueError(f"{path}: missing 'domain' or 'init'")
    return BenchmarkSpec(
        name=entries.get("name", "problem"),
        field=field,
        domain=_parse_box(entries["domain"], n, "domain"),
        init=_parse_box(entries["init"], n, "init"),
        bad=_parse_box(entries["bad"], n, "bad") if "bad" in entries else None,
        horizon=float(entries.get("horizon", "1.0")),
    )

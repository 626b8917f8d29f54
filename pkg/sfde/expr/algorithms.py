"""
Nonlinearities f(x_t) = g(x(t - d1), ..., x(t - dk)) written as expressions.

Grammar (standard precedence, left associative):

    expr    := term (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := "-" unary | primary
    primary := NUMBER | VAR | FUNC "(" expr ")" | "(" expr ")"

VAR is x<i>@<d>: component i of the state at lag d (d >= 0).
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

try:
    from ..errors import (
        EvaluationError,
        ExprSyntaxError,
        LipschitzWarning,
        PreconditionError,
        RangeError,
        ShapeError,
        UnknownNameError,
    )
    from ..measure.algorithms import GRID_TOL, Segment, grid_index
except ImportError:
    from sfde.errors import (
        EvaluationError,
        ExprSyntaxError,
        LipschitzWarning,
        PreconditionError,
        RangeError,
        ShapeError,
        UnknownNameError,
    )
    from sfde.measure.algorithms import GRID_TOL, Segment, grid_index

try:
    from ...utils.string_matching import closest_name
except ImportError:
    from utils.string_matching import closest_name


# Only globally Lipschitz primitives.
FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "atan": np.arctan,
    "abs": np.abs,
}

_NUMBER = r"(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?"
_TOKEN = re.compile(
    rf"\s*(?:(?P<var>x(?P<index>\d+)@(?P<lag>{_NUMBER}))"
    rf"|(?P<number>{_NUMBER})"
    rf"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*(?:@{_NUMBER})?)"
    r"|(?P<op>[-+*/()]))"
)


# --- AST ---


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int
    lag: float


@dataclass(frozen=True)
class Time:
    """The node location t of a segment profile."""


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    name: str
    arg: "Node"


Node = Union[Num, Var, Time, Neg, BinOp, Call]


@dataclass(frozen=True, eq=False)
class NonlinearitySpec:
    dim: int
    tau: float
    delays: tuple[float, ...]
    expressions: tuple[str, ...]
    lipschitz: float
    ast: tuple[Node, ...]
    has_division: bool = False


# --- Tokenizer and parser ---


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    position: int
    index: int = 0
    lag: float = 0.0


def _tokenize(src: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(src):
        if src[pos:].strip() == "":
            break
        match = _TOKEN.match(src, pos)
        if match is None or match.end() == pos:
            start = pos + (len(src[pos:]) - len(src[pos:].lstrip()))
            raise ExprSyntaxError(f"unexpected character {src[start]!r}", start)
        for kind in ("var", "number", "ident", "op"):
            if match.group(kind) is not None:
                start = match.start(kind)
                if kind == "var":
                    tokens.append(
                        _Token(kind, match.group(kind), start, int(match.group("index")), float(match.group("lag")))
                    )
                else:
                    tokens.append(_Token(kind, match.group(kind), start))
                break
        pos = match.end()
    tokens.append(_Token("eof", "", len(src)))
    return tokens


class _Parser:
    def __init__(self, src: str, n: int, tau: float, allow_time: bool = False):
        self.tokens = _tokenize(src)
        self.allow_time = allow_time
        self.pos = 0
        self.n = n
        self.tau = tau
        self.lags: set[float] = set()
        self.has_division = False

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def take(self) -> _Token:
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def expect(self, text: str) -> None:
        token = self.take()
        if token.text != text:
            found = "end of input" if token.kind == "eof" else repr(token.text)
            raise ExprSyntaxError(f"expected {text!r} but found {found}", token.position)

    def parse(self) -> Node:
        node = self.expr()
        token = self.peek()
        if token.kind != "eof":
            raise ExprSyntaxError(f"unexpected {token.text!r}", token.position)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek().text in ("+", "-"):
            op = self.take().text
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek().text in ("*", "/"):
            op = self.take().text
            if op == "/":
                self.has_division = True
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.peek().text == "-":
            self.take()
            return Neg(self.unary())
        return self.primary()

    def primary(self) -> Node:
        token = self.take()
        if token.kind == "number":
            return Num(float(token.text))
        if token.kind == "var":
            return self.variable(token)
        if token.kind == "ident":
            if token.text == "t" and self.allow_time and self.peek().text != "(":
                return Time()
            if self.peek().text == "(":
                if token.text not in FUNCTIONS:
                    raise UnknownNameError(
                        f"unknown function {token.text!r} at position {token.position}",
                        closest_name(token.text, list(FUNCTIONS)),
                    )
                self.take()
                arg = self.expr()
                self.expect(")")
                return Call(token.text, arg)
            name, _, lag = token.text.partition("@")
            guess = closest_name(name, [f"x{i}" for i in range(self.n)], max_distance=1)
            raise UnknownNameError(
                f"unknown variable {token.text!r} at position {token.position}",
                f"{guess}@{lag or '<lag>'}" if guess else None,
            )
        if token.text == "(":
            node = self.expr()
            self.expect(")")
            return node
        if token.kind == "eof":
            raise ExprSyntaxError("unexpected end of input", token.position)
        raise ExprSyntaxError(f"unexpected {token.text!r}", token.position)

    def variable(self, token: _Token) -> Var:
        if token.index >= self.n:
            raise UnknownNameError(
                f"unknown variable {token.text!r}: state has components x0..x{self.n - 1}",
                f"x{self.n - 1}@{token.lag!r}" if self.n else None,
            )
        if token.lag > self.tau + GRID_TOL * max(1.0, self.tau):
            raise RangeError(f"lag {token.lag!r} in {token.text!r} exceeds tau={self.tau!r}")
        self.lags.add(token.lag)
        return Var(token.index, token.lag)


def parse(src: str | list[str], n: int, tau: float, lipschitz: float = 0.0) -> NonlinearitySpec:
    """
    Parses one expression per state component. A single string may hold
    several components separated by ';'.
    """
    if isinstance(src, str):
        sources = [part.strip() for part in src.split(";")] if ";" in src else [src]
    else:
        sources = list(src)
    if len(sources) != n:
        raise ShapeError(f"got {len(sources)} expressions for a {n}-dimensional state")
    if lipschitz < 0:
        raise PreconditionError(f"declared Lipschitz constant must be nonnegative, got {lipschitz!r}")

    trees, lags, division = [], set(), False
    for text in sources:
        parser = _Parser(text, n, tau)
        trees.append(parser.parse())
        lags |= parser.lags
        division = division or parser.has_division

    if division:
        warnings.warn(
            "nonlinearity uses '/': a global Lipschitz bound is not guaranteed",
            LipschitzWarning,
            stacklevel=2,
        )
    return NonlinearitySpec(
        dim=n,
        tau=float(tau),
        delays=tuple(sorted(lags)),
        expressions=tuple(sources),
        lipschitz=float(lipschitz),
        ast=tuple(trees),
        has_division=division,
    )


# --- Evaluation ---


def evaluate_node(node: Node, lookup: Callable[[int, float], np.ndarray], time=None):
    """Evaluates one tree; lookup(i, lag) supplies x_i(t - lag) (scalar or array)."""
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return lookup(node.index, node.lag)
    if isinstance(node, Time):
        return time
    if isinstance(node, Neg):
        return -evaluate_node(node.operand, lookup, time)
    if isinstance(node, Call):
        return FUNCTIONS[node.name](evaluate_node(node.arg, lookup, time))
    left = evaluate_node(node.left, lookup, time)
    right = evaluate_node(node.right, lookup, time)
    if node.op == "+":
        return left + right
    if node.op == "-":
        return left - right
    if node.op == "*":
        return left * right
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.divide(left, right)


def evaluate_lagged(spec: NonlinearitySpec, lookup: Callable[[int, float], np.ndarray], shape: tuple) -> np.ndarray:
    """Evaluates every component; returns shape (n,) + shape."""
    out = np.empty((spec.dim,) + shape)
    for i, tree in enumerate(spec.ast):
        out[i] = evaluate_node(tree, lookup)
    return out


def lag_offsets(spec: NonlinearitySpec, h: float) -> dict[float, int]:
    """Grid offset (in steps, <= 0) of every lag."""
    return {lag: -grid_index(lag, h, "nonlinearity lag") for lag in spec.delays}


def evaluate(spec: NonlinearitySpec, seg: Segment) -> np.ndarray:
    """f(seg) as a vector of length n."""
    if seg.dim != spec.dim:
        raise ShapeError(f"segment dimension {seg.dim} does not match n={spec.dim}")
    last = seg.values.shape[0] - 1
    offsets = lag_offsets(spec, seg.h)

    def lookup(i: int, lag: float) -> float:
        return seg.values[last + offsets[lag], i]

    value = evaluate_lagged(spec, lookup, ())
    if not np.all(np.isfinite(value)):
        raise EvaluationError(f"nonlinearity evaluated to a non-finite value {value!r}")
    return value


def to_source(node: Node) -> str:
    """Fully parenthesized source text; parsing it gives back the same tree."""
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return f"x{node.index}@{node.lag!r}"
    if isinstance(node, Time):
        return "t"
    if isinstance(node, Neg):
        return f"(-{to_source(node.operand)})"
    if isinstance(node, Call):
        return f"{node.name}({to_source(node.arg)})"
    return f"({to_source(node.left)} {node.op} {to_source(node.right)})"


# --- Segment profiles ---


def _no_state(i: int, lag: float):
    raise EvaluationError("a segment profile cannot refer to the state")


def segment_from_profile(src: str | list[str], tau: float, h: float, dim: int = 1) -> Segment:
    """
    Samples an initial segment given as expressions in t, one per component,
    e.g. "sin(t)" or "2*cos(t)".
    """
    if isinstance(src, str):
        sources = [part.strip() for part in src.split(";")]
    else:
        sources = list(src)
    if len(sources) != dim:
        raise ShapeError(f"got {len(sources)} profile expressions for a {dim}-dimensional state")

    nodes = -tau + h * np.arange(grid_index(tau, h, "delay horizon") + 1)
    values = np.empty((len(nodes), dim))
    for i, text in enumerate(sources):
        tree = _Parser(text, 0, tau, allow_time=True).parse()
        values[:, i] = evaluate_node(tree, _no_state, nodes)
    if not np.all(np.isfinite(values)):
        raise EvaluationError(f"segment profile {sources!r} is not finite on [-{tau}, 0]")
    return Segment(tau, h, values)

"""Coefficient expression language.

Problems are fully data-driven: Ψ, f, g, h, the obstacles and the
separability witness are arithmetic expressions over the variables
``t, x, y, z1``.

Grammar (standard precedence, left associativity, whitespace ignored)::

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := '-' factor | number | ident | ident '(' args ')' | '(' expr ')'

The canonical printer (:func:`to_source`) fully parenthesises every operator
node and prints literals with ``repr``; its output is stable across versions.
"""
import math
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, FrozenSet, List, Mapping, Optional, Tuple, Union

import numpy as np

from app.utils.exceptions import ArityError, EvalError, ParseError, UnknownIdentifier

VARIABLES: Tuple[str, ...] = ("t", "x", "y", "z1")


def _clamp(v, lo, hi):
    return np.minimum(np.maximum(v, lo), hi)


def _pos(v):
    return np.maximum(v, 0.0)


def _neg(v):
    return np.maximum(-v, 0.0)


# name -> (arity, vectorised implementation)
FUNCTIONS: Dict[str, Tuple[int, Callable[..., np.ndarray]]] = {
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "exp": (1, np.exp),
    "abs": (1, np.abs),
    "sqrt": (1, np.sqrt),
    "min": (2, np.minimum),
    "max": (2, np.maximum),
    "clamp": (3, _clamp),
    "pos": (1, _pos),
    "neg": (1, _neg),
}


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
    args: Tuple["Expr", ...]


Expr = Union[Num, Var, Neg, BinOp, Call]


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/(),])
    """,
    re.VERBOSE,
)

_END = "end of input"
_FACTOR_START = frozenset({"-", "number", "identifier", "("})


@dataclass(frozen=True)
class _Token:
    kind: str  # number | ident | op | end
    text: str
    offset: int


def _tokenize(src: str) -> List[_Token]:
    tokens: List[_Token] = []
    pos = 0
    while pos < len(src):
        match = _TOKEN_RE.match(src, pos)
        if match is None:
            raise ParseError(pos, _FACTOR_START | {"+", "*", "/", ")", ","}, src[pos])
        kind = match.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind, match.group(), pos))
        pos = match.end()
    tokens.append(_Token("end", "", len(src)))
    return tokens


class _Parser:
    def __init__(self, src: str):
        self.tokens = _tokenize(src)
        self.pos = 0

    @property
    def current(self) -> _Token:
        return self.tokens[self.pos]

    def _advance(self) -> _Token:
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def _is_op(self, *ops: str) -> bool:
        return self.current.kind == "op" and self.current.text in ops

    def _fail(self, expected: FrozenSet[str]) -> ParseError:
        token = self.current
        return ParseError(token.offset, expected, token.text or _END)

    def parse(self) -> Expr:
        expr = self._expr()
        if self.current.kind != "end":
            raise self._fail(frozenset({"+", "-", "*", "/", _END}))
        return expr

    def _expr(self) -> Expr:
        node = self._term()
        while self._is_op("+", "-"):
            op = self._advance().text
            node = BinOp(op, node, self._term())
        return node

    def _term(self) -> Expr:
        node = self._factor()
        while self._is_op("*", "/"):
            op = self._advance().text
            node = BinOp(op, node, self._factor())
        return node

    def _factor(self) -> Expr:
        token = self.current
        if self._is_op("-"):
            self._advance()
            return Neg(self._factor())
        if token.kind == "number":
            value = float(token.text)
            if not math.isfinite(value):
                raise ParseError(token.offset, frozenset({"finite number"}), token.text)
            self._advance()
            return Num(value)
        if self._is_op("("):
            self._advance()
            node = self._expr()
            if not self._is_op(")"):
                raise self._fail(frozenset({")", "+", "-", "*", "/"}))
            self._advance()
            return node
        if token.kind == "ident":
            return self._identifier()
        raise self._fail(_FACTOR_START)

    def _identifier(self) -> Expr:
        token = self._advance()
        name = token.text
        if self._is_op("("):
            if name not in FUNCTIONS:
                raise UnknownIdentifier(token.offset, name)
            self._advance()
            args = self._args()
            arity = FUNCTIONS[name][0]
            if len(args) != arity:
                raise ArityError(token.offset, name, arity, len(args))
            return Call(name, tuple(args))
        if name in VARIABLES:
            return Var(name)
        if name in FUNCTIONS:
            raise ParseError(self.current.offset, frozenset({"("}), self.current.text or _END)
        raise UnknownIdentifier(token.offset, name)

    def _args(self) -> List[Expr]:
        args: List[Expr] = []
        if self._is_op(")"):
            self._advance()
            return args
        while True:
            args.append(self._expr())
            if self._is_op(","):
                self._advance()
                continue
            if self._is_op(")"):
                self._advance()
                return args
            raise self._fail(frozenset({",", ")", "+", "-", "*", "/"}))


@lru_cache(maxsize=1024)
def parse(src: str) -> Expr:
    """Parse expression source into an immutable AST."""
    return _Parser(src).parse()


def to_source(e: Expr) -> str:
    """Canonical printer; ``parse(to_source(parse(s))) == parse(s)``."""
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"(-{to_source(e.operand)})"
    if isinstance(e, BinOp):
        return f"({to_source(e.left)} {e.op} {to_source(e.right)})"
    return f"{e.name}({', '.join(to_source(a) for a in e.args)})"


def variables(e: Expr) -> FrozenSet[str]:
    """Variable names occurring in `e`."""
    if isinstance(e, Var):
        return frozenset({e.name})
    if isinstance(e, Num):
        return frozenset()
    if isinstance(e, Neg):
        return variables(e.operand)
    if isinstance(e, BinOp):
        return variables(e.left) | variables(e.right)
    out: FrozenSet[str] = frozenset()
    for arg in e.args:
        out = out | variables(arg)
    return out


ZERO = Num(0.0)


def _fold_constant(e: Expr) -> Expr:
    try:
        return Num(evaluate(e, {}))
    except EvalError:
        return e


def fold(e: Expr) -> Expr:
    """Constant-fold `e`. A product with a literal zero factor folds to 0."""
    if isinstance(e, (Num, Var)):
        return e
    if isinstance(e, Neg):
        inner = fold(e.operand)
        return Num(-inner.value) if isinstance(inner, Num) else Neg(inner)
    if isinstance(e, BinOp):
        left, right = fold(e.left), fold(e.right)
        if e.op == "*" and ZERO in (left, right):
            return ZERO
        if e.op == "+" and left == ZERO:
            return right
        if e.op in ("+", "-") and right == ZERO:
            return left
        node = BinOp(e.op, left, right)
        if isinstance(left, Num) and isinstance(right, Num):
            return _fold_constant(node)
        return node
    call = Call(e.name, tuple(fold(a) for a in e.args))
    if all(isinstance(a, Num) for a in call.args):
        return _fold_constant(call)
    return call


def is_zero(e: Expr) -> bool:
    """True when `e` folds to the constant 0."""
    return fold(e) == ZERO


def _first_index(mask: np.ndarray) -> Optional[int]:
    if mask.ndim == 0:
        return None
    return int(np.flatnonzero(mask)[0])


def _checked(value: np.ndarray, what: str) -> np.ndarray:
    bad = ~np.isfinite(value)
    if bad.any():
        raise EvalError(f"non-finite result in {what}", node=_first_index(bad))
    return value


def _evaluate(e: Expr, env: Mapping[str, np.ndarray]) -> np.ndarray:
    if isinstance(e, Num):
        return np.float64(e.value)
    if isinstance(e, Var):
        if e.name not in env:
            raise EvalError(f"variable {e.name!r} not supplied")
        return _checked(env[e.name], e.name)
    if isinstance(e, Neg):
        return np.negative(_evaluate(e.operand, env))
    if isinstance(e, BinOp):
        left = _evaluate(e.left, env)
        right = _evaluate(e.right, env)
        if e.op == "+":
            return _checked(np.add(left, right), "+")
        if e.op == "-":
            return _checked(np.subtract(left, right), "-")
        if e.op == "*":
            return _checked(np.multiply(left, right), "*")
        zero = np.asarray(right == 0.0)
        if zero.any():
            raise EvalError("division by zero", node=_first_index(np.broadcast_to(zero, np.broadcast(left, right).shape)))
        return _checked(np.divide(left, right), "/")
    args = [_evaluate(a, env) for a in e.args]
    if e.name == "sqrt":
        negative = np.asarray(args[0] < 0.0)
        if negative.any():
            raise EvalError("sqrt of negative value", node=_first_index(negative))
    return _checked(FUNCTIONS[e.name][1](*args), e.name)


def evaluate(e: Expr, env: Mapping[str, float]) -> float:
    """Evaluate `e` at one point of (t, x, y, z1)."""
    arrays = {name: np.array([float(v)], dtype=np.float64) for name, v in env.items()}
    with np.errstate(all="ignore"):
        try:
            out = _evaluate(e, arrays)
        except EvalError as exc:
            raise EvalError(exc.detail) from None
    return float(np.broadcast_to(out, (1,))[0])


def eval_slice(
    e: Expr,
    t: float,
    xs: np.ndarray,
    ys: Optional[np.ndarray] = None,
    zs: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Evaluate `e` at every node of a slice; pointwise identical to :func:`evaluate`."""
    xs = np.asarray(xs, dtype=np.float64)
    env = {"t": np.full(xs.shape, float(t)), "x": xs}
    if ys is not None:
        env["y"] = np.ascontiguousarray(np.broadcast_to(np.asarray(ys, dtype=np.float64), xs.shape))
    if zs is not None:
        env["z1"] = np.ascontiguousarray(np.broadcast_to(np.asarray(zs, dtype=np.float64), xs.shape))
    with np.errstate(all="ignore"):
        out = _evaluate(e, env)
    return np.array(np.broadcast_to(out, xs.shape), dtype=np.float64)


def eval_points(e: Expr, ts: np.ndarray, xs: np.ndarray, ys: np.ndarray, zs: np.ndarray) -> np.ndarray:
    """Evaluate `e` at scattered points (t_i, x_i, y_i, z1_i)."""
    env = {
        name: np.ascontiguousarray(np.asarray(values, dtype=np.float64))
        for name, values in (("t", ts), ("x", xs), ("y", ys), ("z1", zs))
    }
    shape = env["x"].shape
    with np.errstate(all="ignore"):
        out = _evaluate(e, env)
    return np.array(np.broadcast_to(out, shape), dtype=np.float64)

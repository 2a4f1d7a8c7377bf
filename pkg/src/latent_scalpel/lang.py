"""The closed expression language the toy model writes programs in.

Grammar (``*`` binds tighter than ``+``/``-``, everything left-associative)::

    expr   := term (("+" | "-") term)*
    term   := factor ("*" factor)*
    factor := "x" | DIGIT | "(" expr ")"
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

DIGITS = tuple(str(d) for d in range(10))
OPERATORS = ("+", "-", "*")
LEXEMES = frozenset(("x", "(", ")") + DIGITS + OPERATORS)


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class Var:
    pass


@dataclass(frozen=True)
class Num:
    value: int


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


Expr = Union[Var, Num, BinOp]


class _Parser:
    def __init__(self, lexemes: Sequence[str]):
        self.toks = list(lexemes)
        self.pos = 0

    def peek(self) -> str | None:
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def take(self) -> str:
        tok = self.peek()
        if tok is None:
            raise ParseError("unexpected end of input")
        self.pos += 1
        return tok

    def expr(self) -> Expr:
        node = self.term()
        while self.peek() in ("+", "-"):
            op = self.take()
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.factor()
        while self.peek() == "*":
            self.take()
            node = BinOp("*", node, self.factor())
        return node

    def factor(self) -> Expr:
        tok = self.take()
        if tok == "x":
            return Var()
        if tok in DIGITS:
            return Num(int(tok))
        if tok == "(":
            node = self.expr()
            if self.take() != ")":
                raise ParseError(f"expected ')' at position {self.pos - 1}")
            return node
        raise ParseError(f"unexpected token {tok!r} at position {self.pos - 1}")


def parse(lexemes: Sequence[str]) -> Expr:
    """Parse a full lexeme sequence; trailing input is an error."""
    for tok in lexemes:
        if tok not in LEXEMES:
            raise ParseError(f"not an expression token: {tok!r}")
    p = _Parser(lexemes)
    node = p.expr()
    if p.peek() is not None:
        raise ParseError(f"trailing input at position {p.pos}")
    return node


def evaluate(node: Expr, x: int) -> int:
    if isinstance(node, Var):
        return x
    if isinstance(node, Num):
        return node.value
    a, b = evaluate(node.left, x), evaluate(node.right, x)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    return a * b


def _prec(node: Expr) -> int:
    if isinstance(node, BinOp):
        return 1 if node.op in "+-" else 2
    return 3


def render(node: Expr) -> list[str]:
    """Lexemes for ``node`` with the minimum parentheses that preserve its value."""
    if isinstance(node, Var):
        return ["x"]
    if isinstance(node, Num):
        return [str(node.value)]
    p = _prec(node)
    left = render(node.left)
    right = render(node.right)
    if _prec(node.left) < p:
        left = ["("] + left + [")"]
    # right operand needs grouping at equal precedence unless the op is associative
    if _prec(node.right) < p or (_prec(node.right) == p and node.op == "-"):
        right = ["("] + right + [")"]
    return left + [node.op] + right


def n_ops(node: Expr) -> int:
    if isinstance(node, BinOp):
        return 1 + n_ops(node.left) + n_ops(node.right)
    return 0

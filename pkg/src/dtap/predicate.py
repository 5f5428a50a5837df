"""Stateless boolean predicates over trigger-data fields.

Grammar (keywords are uppercase, ``contains`` is an operator):

    expr    := term (OR term)*
    term    := factor (AND factor)*
    factor  := NOT factor | '(' expr ')' | TRUE | atom
    atom    := field op literal
    op      := == | != | < | <= | > | >= | contains
    literal := "double-quoted string" | bare number

Evaluation is strict: both operands of AND/OR are always evaluated, so a
reference to a missing field is an error regardless of where it sits in the
tree. Equality and ``contains`` compare the raw field string against the
literal's text; relational operators require both sides to parse as finite
decimal numbers.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation

from .errors import FieldMissingError, PredicateSyntaxError, PredicateTypeError

OPS = ("==", "!=", "<", "<=", ">", ">=", "contains")
_RELATIONAL = frozenset(("<", "<=", ">", ">="))

Literal = str | int | Decimal


@dataclass(frozen=True)
class Atom:
    field: str
    op: str
    literal: Literal


@dataclass(frozen=True)
class And:
    left: "Predicate"
    right: "Predicate"


@dataclass(frozen=True)
class Or:
    left: "Predicate"
    right: "Predicate"


@dataclass(frozen=True)
class Not:
    inner: "Predicate"


@dataclass(frozen=True)
class TruePredicate:
    """The trivially-true predicate attached when a recipe has no condition."""


Predicate = Atom | And | Or | Not | TruePredicate

TRUE = TruePredicate()

_KEYWORDS = {"AND", "OR", "NOT", "TRUE"}

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<number>-?\d+(?:\.\d+)?)
  | (?P<op>==|!=|<=|>=|<|>)
  | (?P<lparen>\()
  | (?P<rparen>\))
  | (?P<quote>")
    """,
    re.VERBOSE,
)

_STRING_BODY_RE = re.compile(r'"(?:[^"\\]|\\.)*"')


def _tokenize(text: str) -> list[tuple[str, object, int]]:
    tokens: list[tuple[str, object, int]] = []
    pos = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            raise PredicateSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = match.lastgroup
        if kind == "ws":
            pos = match.end()
            continue
        if kind == "quote":
            string_match = _STRING_BODY_RE.match(text, pos)
            if string_match is None:
                raise PredicateSyntaxError("unterminated string literal", pos)
            try:
                value = json.loads(string_match.group(0))
            except json.JSONDecodeError:
                raise PredicateSyntaxError("invalid string escape", pos) from None
            tokens.append(("string", value, pos))
            pos = string_match.end()
            continue
        value = match.group(0)
        if kind == "word":
            if value in _KEYWORDS:
                tokens.append((value, value, pos))
            elif value == "contains":
                tokens.append(("op", value, pos))
            else:
                tokens.append(("ident", value, pos))
        elif kind == "number":
            parsed: Literal = Decimal(value) if "." in value else int(value)
            tokens.append(("number", parsed, pos))
        else:
            tokens.append((kind, value, pos))
        pos = match.end()
    tokens.append(("eof", None, len(text)))
    return tokens


class _Parser:
    def __init__(self, tokens: list[tuple[str, object, int]]):
        self.tokens = tokens
        self.index = 0

    def peek(self) -> tuple[str, object, int]:
        return self.tokens[self.index]

    def take(self, kind: str | None = None) -> tuple[str, object, int]:
        token = self.tokens[self.index]
        if kind is not None and token[0] != kind:
            raise PredicateSyntaxError(f"expected {kind}, found {token[0]}", token[2])
        self.index += 1
        return token

    def parse_expr(self) -> Predicate:
        node = self.parse_term()
        while self.peek()[0] == "OR":
            self.take()
            node = Or(node, self.parse_term())
        return node

    def parse_term(self) -> Predicate:
        node = self.parse_factor()
        while self.peek()[0] == "AND":
            self.take()
            node = And(node, self.parse_factor())
        return node

    def parse_factor(self) -> Predicate:
        kind, _, pos = self.peek()
        if kind == "NOT":
            self.take()
            return Not(self.parse_factor())
        if kind == "lparen":
            self.take()
            node = self.parse_expr()
            self.take("rparen")
            return node
        if kind == "TRUE":
            self.take()
            return TRUE
        if kind == "ident":
            return self.parse_atom()
        raise PredicateSyntaxError(f"expected predicate, found {kind}", pos)

    def parse_atom(self) -> Atom:
        _, fieldname, _ = self.take("ident")
        kind, op, pos = self.take()
        if kind != "op":
            raise PredicateSyntaxError(f"expected comparison operator, found {kind}", pos)
        kind, literal, pos = self.take()
        if kind not in ("string", "number"):
            raise PredicateSyntaxError(f"expected literal, found {kind}", pos)
        return Atom(field=str(fieldname), op=str(op), literal=literal)


def parse_predicate(text: str) -> Predicate:
    """Parse predicate text; raises PredicateSyntaxError with a position."""
    tokens = _tokenize(text)
    if tokens[0][0] == "eof":
        raise PredicateSyntaxError("empty predicate", 0)
    parser = _Parser(tokens)
    node = parser.parse_expr()
    trailing = parser.peek()
    if trailing[0] != "eof":
        raise PredicateSyntaxError(f"unexpected trailing {trailing[0]}", trailing[2])
    return node


def _literal_to_text(literal: Literal) -> str:
    if isinstance(literal, str):
        return json.dumps(literal)
    if isinstance(literal, Decimal):
        rendered = str(literal)
        return rendered if "." in rendered or "E" in rendered else rendered + ".0"
    return str(literal)


def predicate_to_text(node: Predicate) -> str:
    """Render a tree so that parsing the output reproduces the tree."""
    if isinstance(node, TruePredicate):
        return "TRUE"
    if isinstance(node, Atom):
        return f"{node.field} {node.op} {_literal_to_text(node.literal)}"
    if isinstance(node, Not):
        return f"NOT ({predicate_to_text(node.inner)})"
    if isinstance(node, And):
        return f"({predicate_to_text(node.left)} AND {predicate_to_text(node.right)})"
    if isinstance(node, Or):
        return f"({predicate_to_text(node.left)} OR {predicate_to_text(node.right)})"
    raise TypeError(f"not a predicate node: {node!r}")


def _as_number(text: str) -> Decimal:
    try:
        value = Decimal(text)
    except InvalidOperation as exc:
        raise PredicateTypeError(f"operand {text!r} is not numeric") from exc
    if not value.is_finite():
        raise PredicateTypeError(f"operand {text!r} is not a finite number")
    return value


def _eval_atom(atom: Atom, data: dict[str, str]) -> bool:
    if atom.field not in data:
        raise FieldMissingError(f"trigger data has no field {atom.field!r}")
    value = data[atom.field]
    literal = atom.literal
    if atom.op in _RELATIONAL:
        left = _as_number(value)
        right = literal if isinstance(literal, (int, Decimal)) else _as_number(literal)
        if atom.op == "<":
            return left < right
        if atom.op == "<=":
            return left <= right
        if atom.op == ">":
            return left > right
        return left >= right
    literal_text = literal if isinstance(literal, str) else str(literal)
    if atom.op == "==":
        return value == literal_text
    if atom.op == "!=":
        return value != literal_text
    if atom.op == "contains":
        return literal_text in value
    raise PredicateTypeError(f"unknown operator {atom.op!r}")


def eval_predicate(node: Predicate, data: dict[str, str]) -> bool:
    """Evaluate against one trigger-data map; reads nothing else."""
    if isinstance(node, TruePredicate):
        return True
    if isinstance(node, Atom):
        return _eval_atom(node, data)
    if isinstance(node, Not):
        return not eval_predicate(node.inner, data)
    if isinstance(node, And):
        left = eval_predicate(node.left, data)
        right = eval_predicate(node.right, data)
        return left and right
    if isinstance(node, Or):
        left = eval_predicate(node.left, data)
        right = eval_predicate(node.right, data)
        return left or right
    raise TypeError(f"not a predicate node: {node!r}")

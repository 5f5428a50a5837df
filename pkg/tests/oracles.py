"""Independent reference implementations used as test oracles.

These are deliberately written with different machinery than the package
(struct/BytesIO instead of bytearray appends, a dispatch-table interpreter
instead of isinstance chains) so a shared bug is unlikely. They must stay
import-free of everything in ``dtap`` except the AST node classes.
"""

from __future__ import annotations

import io
import operator
import random
import struct
from decimal import Decimal, InvalidOperation

from dtap.predicate import And, Atom, Not, Or, TruePredicate

# ---------------------------------------------------------------------------
# Reference canonical encoder
# ---------------------------------------------------------------------------


def _write_str(out: io.BytesIO, text: str) -> None:
    raw = text.encode("utf-8")
    out.write(struct.pack(">I", len(raw)))
    out.write(raw)


def reference_encode_blob(
    time_ms: int, ttl_s: int, scope: str, data: dict[str, str]
) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack(">Q", time_ms))
    out.write(struct.pack(">I", ttl_s))
    _write_str(out, scope)
    pairs = sorted(data.items(), key=lambda kv: kv[0].encode("utf-8"))
    out.write(struct.pack(">I", len(pairs)))
    for key, value in pairs:
        _write_str(out, key)
        _write_str(out, value)
    return out.getvalue()


def reference_encode_scope_map(
    service_id: str,
    functions: list[tuple[str, str, list[tuple[str, str]]]],
    issued_at: int,
) -> bytes:
    out = io.BytesIO()
    _write_str(out, service_id)
    out.write(struct.pack(">I", len(functions)))
    for name, kind, params in functions:
        _write_str(out, name)
        _write_str(out, kind)
        out.write(struct.pack(">I", len(params)))
        for param_name, param_type in params:
            _write_str(out, param_name)
            _write_str(out, param_type)
    out.write(struct.pack(">Q", issued_at))
    return out.getvalue()


# ---------------------------------------------------------------------------
# Reference predicate interpreter
# ---------------------------------------------------------------------------

OK = "ok"
FIELD_MISSING = "field_missing"
TYPE_ERROR = "type_error"

_REL_TABLE = {
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}


class _RefFieldMissing(Exception):
    pass


class _RefTypeError(Exception):
    pass


def _ref_number(text: str) -> Decimal:
    try:
        number = Decimal(text)
    except InvalidOperation:
        raise _RefTypeError(text) from None
    if not number.is_finite():
        raise _RefTypeError(text)
    return number


def _ref_atom(node: Atom, data: dict[str, str]) -> bool:
    try:
        value = data[node.field]
    except KeyError:
        raise _RefFieldMissing(node.field) from None
    if node.op in _REL_TABLE:
        lit = node.literal
        rhs = lit if isinstance(lit, (int, Decimal)) else _ref_number(lit)
        return _REL_TABLE[node.op](_ref_number(value), rhs)
    lit_text = node.literal if isinstance(node.literal, str) else str(node.literal)
    return {
        "==": lambda: value == lit_text,
        "!=": lambda: value != lit_text,
        "contains": lambda: lit_text in value,
    }[node.op]()


_NODE_TABLE = {
    TruePredicate: lambda node, data: True,
    Atom: _ref_atom,
    Not: lambda node, data: not _ref_eval(node.inner, data),
    And: lambda node, data: all([_ref_eval(node.left, data), _ref_eval(node.right, data)]),
    Or: lambda node, data: any([_ref_eval(node.left, data), _ref_eval(node.right, data)]),
}


def _ref_eval(node, data: dict[str, str]) -> bool:
    return _NODE_TABLE[type(node)](node, data)


def reference_eval(node, data: dict[str, str]) -> tuple:
    """Evaluate, folding errors into comparable outcome tuples."""
    try:
        return (OK, _ref_eval(node, data))
    except _RefFieldMissing:
        return (FIELD_MISSING,)
    except _RefTypeError:
        return (TYPE_ERROR,)


# ---------------------------------------------------------------------------
# Random structure generators for oracle comparisons
# ---------------------------------------------------------------------------

_WORDS = ["buy soap", "buy milk", "auto", "manual", "on", "off", "", "soap", "Ünïcode"]
_NUMERIC_STRINGS = ["83", "70", "-2", "80.5", "0", "100", "79.999"]
_FIELDS = ["f1", "f2", "f3"]


def random_trigger_data(rng: random.Random, max_fields: int = 4) -> dict[str, str]:
    data = {}
    for name in rng.sample(_FIELDS, rng.randint(0, len(_FIELDS))):
        data[name] = rng.choice(_WORDS + _NUMERIC_STRINGS)
    for _ in range(rng.randint(0, max_fields - len(_FIELDS))):
        data["extra_" + str(rng.randint(0, 9))] = rng.choice(_WORDS)
    return data


def random_blob_fields(rng: random.Random) -> tuple[int, int, str, dict[str, str]]:
    return (
        rng.randint(0, 2**63),
        rng.randint(0, 2**31),
        rng.choice(["OnNewItem", "OnItemRemoved", "x", "Ünïcode", ""]),
        random_trigger_data(rng),
    )


def random_literal(rng: random.Random):
    roll = rng.random()
    if roll < 0.4:
        return rng.choice(_WORDS + _NUMERIC_STRINGS)
    if roll < 0.8:
        return rng.randint(-5, 100)
    return Decimal(rng.choice(["80.5", "0.25", "-3.0", "99.999"]))


def random_predicate(rng: random.Random, depth: int = 4):
    if depth <= 0 or rng.random() < 0.35:
        if rng.random() < 0.05:
            return TruePredicate()
        field = rng.choice(_FIELDS + ["missing_field"])
        op = rng.choice(["==", "!=", "<", "<=", ">", ">=", "contains"])
        return Atom(field=field, op=op, literal=random_literal(rng))
    kind = rng.choice(["and", "or", "not"])
    if kind == "not":
        return Not(random_predicate(rng, depth - 1))
    left = random_predicate(rng, depth - 1)
    right = random_predicate(rng, depth - 1)
    return And(left, right) if kind == "and" else Or(left, right)

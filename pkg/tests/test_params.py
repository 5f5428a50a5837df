"""Parameter binding resolution from verified trigger data."""

import pytest

from dtap.errors import ParamResolutionError, ValidationError
from dtap.protocol import ParamBinding, resolve_params


def test_paper_recipe_bindings():
    bindings = [
        ParamBinding("to", literal="x@y.com"),
        ParamBinding("body", trigger_field="new_item"),
    ]
    resolved = resolve_params(bindings, {"new_item": "buy soap"})
    assert resolved == [("to", "x@y.com"), ("body", "buy soap")]


def test_all_literals_pass_through_with_empty_data():
    bindings = [ParamBinding("a", literal="1"), ParamBinding("b", literal="2")]
    assert resolve_params(bindings, {}) == [("a", "1"), ("b", "2")]


def test_missing_trigger_field_aborts():
    with pytest.raises(ParamResolutionError):
        resolve_params([ParamBinding("p", trigger_field="missing")], {})


def test_output_order_follows_binding_order():
    bindings = [
        ParamBinding("z", literal="3"),
        ParamBinding("a", trigger_field="f"),
        ParamBinding("m", literal="1"),
    ]
    resolved = resolve_params(bindings, {"f": "x"})
    assert [name for name, _ in resolved] == ["z", "a", "m"]


def test_binding_requires_exactly_one_source():
    with pytest.raises(ValidationError):
        ParamBinding("p")
    with pytest.raises(ValidationError):
        ParamBinding("p", literal="x", trigger_field="f")


def test_binding_wire_roundtrip():
    lit = ParamBinding("to", literal="x@y.com")
    fld = ParamBinding("body", trigger_field="new_item")
    assert ParamBinding.from_wire(lit.to_wire()) == lit
    assert ParamBinding.from_wire(fld.to_wire()) == fld

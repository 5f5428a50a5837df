"""Core protocol types, the canonical signing encoding, and token primitives.

Everything in this module is pure or read-only over its inputs, so values can
be shared freely across concurrent request handlers. Mutable per-service
bookkeeping (replay watermarks, revocation flags) lives in the services.

Canonical encoding layout, fixed for interoperability:

* strings: 4-byte big-endian length prefix, then UTF-8 bytes
* ``time`` timestamps: 8-byte big-endian unsigned
* ``ttl`` and counts: 4-byte big-endian unsigned
* maps: 4-byte entry count, then (key, value) pairs sorted ascending by the
  key's UTF-8 bytes

Length prefixes make the encoding injective over structurally distinct
values, which is what makes the signatures non-forgeable by splicing.
"""

from __future__ import annotations

import base64
import secrets
from dataclasses import dataclass, field

from .errors import EncodingError, ParamResolutionError, ValidationError

FUNCTION_KINDS = ("trigger", "action")
PARAM_TYPES = ("string", "integer", "decimal", "boolean")

TOKEN_BYTES = 32

_U32_MAX = 2**32 - 1
_U64_MAX = 2**64 - 1


# ---------------------------------------------------------------------------
# Wire codecs for opaque byte values
# ---------------------------------------------------------------------------


def b64u_encode(raw: bytes) -> str:
    """URL-safe base64 without padding."""
    return base64.urlsafe_b64encode(raw).rstrip(b"=").decode("ascii")


def b64u_decode(text: str) -> bytes:
    pad = -len(text) % 4
    try:
        return base64.urlsafe_b64decode(text + "=" * pad)
    except (ValueError, TypeError) as exc:
        raise EncodingError(f"invalid base64url value: {text!r}") from exc


def new_token() -> str:
    """Draw a fresh 256-bit opaque token, returned in its wire encoding."""
    return b64u_encode(secrets.token_bytes(TOKEN_BYTES))


def token_bytes(wire: str) -> bytes:
    """Decode a wire token back to its 32 raw bytes."""
    raw = b64u_decode(wire)
    if len(raw) != TOKEN_BYTES:
        raise EncodingError(f"token must decode to {TOKEN_BYTES} bytes, got {len(raw)}")
    return raw


# ---------------------------------------------------------------------------
# Canonical encoding primitives
# ---------------------------------------------------------------------------


def _u32(value: int) -> bytes:
    if not isinstance(value, int) or isinstance(value, bool) or not 0 <= value <= _U32_MAX:
        raise EncodingError(f"value out of u32 range: {value!r}")
    return value.to_bytes(4, "big")


def _u64(value: int) -> bytes:
    if not isinstance(value, int) or isinstance(value, bool) or not 0 <= value <= _U64_MAX:
        raise EncodingError(f"value out of u64 range: {value!r}")
    return value.to_bytes(8, "big")


def _lp_str(value: str) -> bytes:
    if not isinstance(value, str):
        raise EncodingError(f"expected str, got {type(value).__name__}")
    try:
        raw = value.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise EncodingError(f"string is not valid UTF-8: {value!r}") from exc
    return _u32(len(raw)) + raw


def _lp_map(data: dict[str, str]) -> bytes:
    try:
        items = sorted(
            ((k.encode("utf-8"), v) for k, v in data.items()),
            key=lambda kv: kv[0],
        )
    except (AttributeError, UnicodeEncodeError) as exc:
        raise EncodingError("trigger_data keys and values must be UTF-8 strings") from exc
    out = bytearray(_u32(len(items)))
    for key_raw, value in items:
        out += _u32(len(key_raw)) + key_raw
        out += _lp_str(value)
    return bytes(out)


def encode_trigger_blob_body(
    time_ms: int, ttl_s: int, trigger_scope: str, trigger_data: dict[str, str]
) -> bytes:
    """Bytes that a trigger service signs: (time, ttl, scope, data)."""
    return _u64(time_ms) + _u32(ttl_s) + _lp_str(trigger_scope) + _lp_map(trigger_data)


def encode_scope_map_body(
    service_id: str, functions: tuple["FunctionSpec", ...], issued_at: int
) -> bytes:
    """Bytes that a service signs over its scope-to-function catalog."""
    out = bytearray(_lp_str(service_id))
    out += _u32(len(functions))
    for spec in functions:
        out += _lp_str(spec.name) + _lp_str(spec.kind)
        out += _u32(len(spec.params))
        for param_name, param_type in spec.params:
            out += _lp_str(param_name) + _lp_str(param_type)
    out += _u64(issued_at)
    return bytes(out)


def canonical_encode(structure: "ScopeMap | TriggerBlob") -> bytes:
    """Encode the signed portion of a ScopeMap or TriggerBlob."""
    if isinstance(structure, TriggerBlob):
        return encode_trigger_blob_body(
            structure.time, structure.ttl, structure.trigger_scope, structure.trigger_data
        )
    if isinstance(structure, ScopeMap):
        return encode_scope_map_body(
            structure.service_id, structure.functions, structure.issued_at
        )
    raise EncodingError(f"no canonical encoding for {type(structure).__name__}")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FunctionSpec:
    """One callable unit of a service's API surface; its name is the scope."""

    name: str
    kind: str
    params: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not self.name:
            raise ValidationError("function name must be non-empty")
        if self.kind not in FUNCTION_KINDS:
            raise ValidationError(f"unknown function kind: {self.kind!r}")
        seen = set()
        for param_name, param_type in self.params:
            if param_type not in PARAM_TYPES:
                raise ValidationError(f"unknown param type: {param_type!r}")
            if param_name in seen:
                raise ValidationError(f"duplicate param name: {param_name!r}")
            seen.add(param_name)

    def to_wire(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "params": [[n, t] for n, t in self.params],
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "FunctionSpec":
        return cls(
            name=obj["name"],
            kind=obj["kind"],
            params=tuple((n, t) for n, t in obj.get("params", [])),
        )


@dataclass(frozen=True)
class ServiceIdentity:
    """A service's pinned identity: id, raw verification key, self-signed cert."""

    service_id: str
    verification_key: bytes
    certificate: bytes

    def to_wire(self) -> dict:
        return {
            "service_id": self.service_id,
            "verification_key": b64u_encode(self.verification_key),
            "certificate": b64u_encode(self.certificate),
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "ServiceIdentity":
        try:
            return cls(
                service_id=obj["service_id"],
                verification_key=b64u_decode(obj["verification_key"]),
                certificate=b64u_decode(obj["certificate"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed service identity: {exc}") from exc


@dataclass(frozen=True)
class ScopeMap:
    """Signed scope-to-function catalog hosted at a well-known location."""

    service_id: str
    functions: tuple[FunctionSpec, ...]
    issued_at: int
    signature: bytes

    def __post_init__(self):
        if not self.functions:
            raise ValidationError("scope map must list at least one function")
        names = [f.name for f in self.functions]
        if len(set(names)) != len(names):
            raise ValidationError("function names must be unique in a scope map")

    def body_bytes(self) -> bytes:
        return encode_scope_map_body(self.service_id, self.functions, self.issued_at)

    def function(self, name: str) -> FunctionSpec | None:
        for spec in self.functions:
            if spec.name == name:
                return spec
        return None

    @property
    def function_names(self) -> frozenset[str]:
        return frozenset(f.name for f in self.functions)

    def to_wire(self) -> dict:
        return {
            "service_id": self.service_id,
            "functions": [f.to_wire() for f in self.functions],
            "issued_at": self.issued_at,
            "signature": b64u_encode(self.signature),
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "ScopeMap":
        try:
            return cls(
                service_id=obj["service_id"],
                functions=tuple(FunctionSpec.from_wire(f) for f in obj["functions"]),
                issued_at=int(obj["issued_at"]),
                signature=b64u_decode(obj["signature"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed scope map: {exc}") from exc


@dataclass(frozen=True)
class XToken:
    """Coarse transfer token; held only by the trusted client, never the cloud."""

    value: str
    service_id: str
    user_id: str
    permitted_functions: frozenset[str]
    issued_at: int

    def to_wire(self) -> dict:
        return {
            "value": self.value,
            "service_id": self.service_id,
            "user_id": self.user_id,
            "permitted_functions": sorted(self.permitted_functions),
            "issued_at": self.issued_at,
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "XToken":
        return cls(
            value=obj["value"],
            service_id=obj["service_id"],
            user_id=obj["user_id"],
            permitted_functions=frozenset(obj["permitted_functions"]),
            issued_at=int(obj["issued_at"]),
        )


@dataclass
class RecipeTriggerGrant:
    """Trigger-side recipe token: exactly one trigger function, one recipe."""

    token: str
    user_id: str
    function: str
    callback_url: str | None = None
    revoked: bool = False


@dataclass(frozen=True)
class ParamBinding:
    """How one action parameter gets its value: a literal or a trigger field."""

    param_name: str
    literal: str | None = None
    trigger_field: str | None = None

    def __post_init__(self):
        if (self.literal is None) == (self.trigger_field is None):
            raise ValidationError(
                f"binding for {self.param_name!r} must set exactly one of literal/field"
            )

    @property
    def is_literal(self) -> bool:
        return self.literal is not None

    def to_wire(self) -> dict:
        if self.is_literal:
            return {"param": self.param_name, "literal": self.literal}
        return {"param": self.param_name, "field": self.trigger_field}

    @classmethod
    def from_wire(cls, obj: dict) -> "ParamBinding":
        try:
            if "literal" in obj:
                return cls(param_name=obj["param"], literal=obj["literal"])
            return cls(param_name=obj["param"], trigger_field=obj["field"])
        except KeyError as exc:
            raise ValidationError(f"malformed param binding: {obj!r}") from exc


@dataclass
class RecipeActionGrant:
    """Action-side recipe token plus everything the verifier needs.

    ``last_accepted_time`` is the replay watermark; it only ever moves
    forward, including when the handler itself fails after acceptance.
    """

    token: str
    user_id: str
    action_function: str
    bindings: tuple[ParamBinding, ...]
    trigger_function: str
    trigger_service: ServiceIdentity
    predicate_text: str | None = None
    last_accepted_time: int = 0
    revoked: bool = False


@dataclass(frozen=True)
class TriggerBlob:
    """Signed, time-limited proof that a trigger fired with specific data."""

    time: int
    ttl: int
    trigger_scope: str
    trigger_data: dict[str, str] = field(default_factory=dict)
    sig: bytes = b""

    def body_bytes(self) -> bytes:
        return encode_trigger_blob_body(
            self.time, self.ttl, self.trigger_scope, self.trigger_data
        )

    def to_wire(self) -> dict:
        return {
            "time": self.time,
            "ttl": self.ttl,
            "trigger_scope": self.trigger_scope,
            "trigger_data": dict(self.trigger_data),
            "sig": b64u_encode(self.sig),
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "TriggerBlob":
        try:
            time_ms = obj["time"]
            ttl_s = obj["ttl"]
            scope = obj["trigger_scope"]
            data = obj["trigger_data"]
            sig = b64u_decode(obj["sig"])
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed trigger blob: {exc}") from exc
        if not isinstance(time_ms, int) or not isinstance(ttl_s, int):
            raise ValidationError("blob time and ttl must be integers")
        if not isinstance(scope, str) or not isinstance(data, dict):
            raise ValidationError("blob scope/data have wrong types")
        for k, v in data.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ValidationError("trigger_data must map strings to strings")
        return cls(time=time_ms, ttl=ttl_s, trigger_scope=scope, trigger_data=data, sig=sig)


# ---------------------------------------------------------------------------
# Parameter resolution
# ---------------------------------------------------------------------------


def resolve_params(
    bindings: tuple[ParamBinding, ...] | list[ParamBinding],
    trigger_data: dict[str, str],
) -> list[tuple[str, str]]:
    """Materialize action-call arguments from bindings and verified trigger data.

    Reads nothing but the bindings and the given map; a missing trigger field
    aborts resolution rather than substituting a default.
    """
    resolved: list[tuple[str, str]] = []
    for binding in bindings:
        if binding.is_literal:
            resolved.append((binding.param_name, binding.literal))
        else:
            if binding.trigger_field not in trigger_data:
                raise ParamResolutionError(
                    f"trigger data has no field {binding.trigger_field!r} "
                    f"for param {binding.param_name!r}"
                )
            resolved.append((binding.param_name, trigger_data[binding.trigger_field]))
    return resolved

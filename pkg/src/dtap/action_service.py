"""Reference action-side online service.

Action functions are registered once and are reachable only through the
verified execute path. Verification runs a fixed sequence of checks; the
first failure wins and nothing observable happens. Acceptance (advancing
the per-grant replay watermark) is atomic with the checks, so concurrent
submissions of one blob admit exactly one winner.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Callable

from . import crypto, httpkit
from .errors import (
    AuthError,
    ConfigurationError,
    DtapError,
    FieldMissingError,
    NotFoundError,
    ParamResolutionError,
    PredicateTypeError,
    ScopeError,
    ValidationError,
)
from .predicate import TRUE, Predicate, eval_predicate, parse_predicate
from .protocol import (
    FunctionSpec,
    ParamBinding,
    RecipeActionGrant,
    ServiceIdentity,
    TriggerBlob,
    new_token,
    resolve_params,
)
from .service_base import OnlineService

logger = logging.getLogger(__name__)

ERR_UNKNOWN_TOKEN = "ERR_UNKNOWN_TOKEN"
ERR_BAD_SIGNATURE = "ERR_BAD_SIGNATURE"
ERR_TIMESTAMP_NOT_INCREASED = "ERR_TIMESTAMP_NOT_INCREASED"
ERR_EXPIRED_BLOB = "ERR_EXPIRED_BLOB"
ERR_SCOPE_MISMATCH = "ERR_SCOPE_MISMATCH"
ERR_FUNCTION_MISMATCH = "ERR_FUNCTION_MISMATCH"
ERR_PARAM_MISMATCH = "ERR_PARAM_MISMATCH"
ERR_PREDICATE_FALSE = "ERR_PREDICATE_FALSE"
ERR_PARAM_RESOLUTION = "ERR_PARAM_RESOLUTION"
ERR_HANDLER_FAILURE = "ERR_HANDLER_FAILURE"

DEFAULT_CLOCK_SKEW_MS = 30_000

Handler = Callable[[list[tuple[str, str]]], dict]


@dataclass
class ExecutionOutcome:
    status: str  # "executed" | "rejected"
    error_code: str | None = None
    handler_result: dict | None = None

    @property
    def executed(self) -> bool:
        return self.status == "executed"


def _rejected(code: str) -> ExecutionOutcome:
    return ExecutionOutcome(status="rejected", error_code=code)


@dataclass
class _ProtectedFunction:
    spec: FunctionSpec
    handler: Handler


class _GrantRecord:
    """A grant plus cached verifier state and its replay-linearization lock."""

    __slots__ = ("grant", "predicate", "verify_key", "lock")

    def __init__(self, grant: RecipeActionGrant, predicate: Predicate, verify_key):
        self.grant = grant
        self.predicate = predicate
        self.verify_key = verify_key
        self.lock = threading.Lock()


class ActionService(OnlineService):
    def __init__(
        self,
        service_id: str,
        *,
        clock_skew_ms: int = DEFAULT_CLOCK_SKEW_MS,
        verification_enabled: bool = True,
        **kwargs,
    ):
        super().__init__(service_id, **kwargs)
        self.clock_skew_ms = clock_skew_ms
        # verification_enabled=False is the measurement baseline: bearer-token
        # lookup only, no signature/freshness/binding checks.
        self.verification_enabled = verification_enabled
        self._protected: dict[str, _ProtectedFunction] = {}
        self._grants: dict[str, _GrantRecord] = {}
        self.executed_count = 0
        self._count_lock = threading.Lock()

        self.add_route("POST", "/dtap/action-grants", self._h_issue_grant)
        self.add_route("POST", "/dtap/execute/{function}", self._h_execute)
        self.add_route("DELETE", "/dtap/action-grants/{token}", self._h_revoke)

    # -- registration ----------------------------------------------------------

    def register_action(self, spec: FunctionSpec, handler: Handler) -> None:
        """One call protects a function: catalogs it and gates it behind execute."""
        if spec.kind != "action":
            raise ValidationError(f"{spec.name!r} is not an action function")
        self._register_function(spec)
        self._protected[spec.name] = _ProtectedFunction(spec, handler)

    # -- grant issuance -----------------------------------------------------------

    def issue_action_grant(
        self,
        xtoken_value: str,
        trigger_certificate: ServiceIdentity,
        trigger_function: str,
        action_function: str,
        bindings: list[ParamBinding] | tuple[ParamBinding, ...],
        predicate_text: str | None = None,
    ) -> RecipeActionGrant:
        """Bind an opaque token to one action call shape and one trigger identity."""
        xtoken = self._xtoken_for(xtoken_value)
        if action_function not in xtoken.permitted_functions:
            raise ScopeError(f"{action_function!r} is outside this XToken's scope")
        protected = self._protected.get(action_function)
        if protected is None:
            raise ScopeError(f"{action_function!r} is not an action function here")
        if not crypto.verify_identity(trigger_certificate):
            raise ValidationError("trigger service certificate does not verify")
        if not trigger_function:
            raise ValidationError("trigger_function must be non-empty")

        schema_names = [name for name, _ in protected.spec.params]
        bound_names = [b.param_name for b in bindings]
        if sorted(bound_names) != sorted(schema_names):
            raise ValidationError(
                f"bindings must cover exactly {schema_names}, got {bound_names}"
            )
        by_name = {b.param_name: b for b in bindings}
        ordered = tuple(by_name[name] for name in schema_names)

        predicate = TRUE if not predicate_text else parse_predicate(predicate_text)
        try:
            verify_key = crypto.load_verification_key(
                trigger_certificate.verification_key
            )
        except ConfigurationError as exc:
            raise ValidationError(str(exc)) from exc

        grant = RecipeActionGrant(
            token=new_token(),
            user_id=xtoken.user_id,
            action_function=action_function,
            bindings=ordered,
            trigger_function=trigger_function,
            trigger_service=trigger_certificate,
            predicate_text=predicate_text,
        )
        with self._lock:
            self._grants[grant.token] = _GrantRecord(grant, predicate, verify_key)
        return grant

    def revoke_grant(self, token: str) -> None:
        record = self._grants.get(token)
        if record is None:
            raise NotFoundError("no such action grant")
        record.grant.revoked = True

    def get_grant(self, token: str) -> RecipeActionGrant | None:
        record = self._grants.get(token)
        return record.grant if record else None

    # -- the verified execute path ---------------------------------------------

    def execute(
        self,
        route_function: str,
        token: str,
        blob_wire: dict,
        caller_params: dict[str, str] | None = None,
    ) -> ExecutionOutcome:
        """Run the verification sequence, then (only then) the handler.

        Check order is fixed; the first failing check determines the error
        code and no side effect occurs. On success the replay watermark
        advances atomically with the acceptance decision, before the handler
        runs, so a blob can never be spent twice even if the handler fails.
        """
        caller_params = caller_params or {}

        # 1. the passed recipe-specific token must exist (revoked == gone)
        record = self._grants.get(token)
        if record is None or record.grant.revoked:
            return _rejected(ERR_UNKNOWN_TOKEN)
        grant = record.grant

        if not self.verification_enabled:
            return self._execute_unverified(route_function, record, blob_wire, caller_params)

        # 2. signature over the canonical encoding, under the key pinned at setup
        try:
            blob = TriggerBlob.from_wire(blob_wire)
            body = blob.body_bytes()
        except DtapError:
            return _rejected(ERR_BAD_SIGNATURE)
        if not crypto.verify(record.verify_key, body, blob.sig):
            return _rejected(ERR_BAD_SIGNATURE)

        with record.lock:
            # 3. timestamp must have increased past the last accepted blob
            if blob.time <= grant.last_accepted_time:
                return _rejected(ERR_TIMESTAMP_NOT_INCREASED)
            # 4. TTL window must be current (allowing bounded clock skew)
            if self.clock.now_ms() > blob.time + blob.ttl * 1000 + self.clock_skew_ms:
                return _rejected(ERR_EXPIRED_BLOB)
            # 5. trigger scope inside the blob must match the setup-time binding
            if blob.trigger_scope != grant.trigger_function:
                return _rejected(ERR_SCOPE_MISMATCH)
            # 6. the function being called must be the one fixed at setup
            if route_function != grant.action_function:
                return _rejected(ERR_FUNCTION_MISMATCH)
            # 7. parameters must match setup: literals byte-for-byte from the
            #    caller, trigger fields resolved from the verified blob
            literal_names = {
                b.param_name for b in grant.bindings if b.is_literal
            }
            if set(caller_params) != literal_names:
                return _rejected(ERR_PARAM_MISMATCH)
            for binding in grant.bindings:
                if binding.is_literal and caller_params[binding.param_name] != binding.literal:
                    return _rejected(ERR_PARAM_MISMATCH)
            try:
                resolved = resolve_params(grant.bindings, blob.trigger_data)
            except ParamResolutionError:
                return _rejected(ERR_PARAM_RESOLUTION)
            # 8. the predicate over trigger data must hold (errors reject too)
            try:
                if not eval_predicate(record.predicate, blob.trigger_data):
                    return _rejected(ERR_PREDICATE_FALSE)
            except (FieldMissingError, PredicateTypeError):
                return _rejected(ERR_PREDICATE_FALSE)
            # accepted: advance the watermark atomically with the decision
            grant.last_accepted_time = blob.time

        return self._invoke(record, resolved)

    def _execute_unverified(
        self, route_function, record, blob_wire, caller_params
    ) -> ExecutionOutcome:
        grant = record.grant
        trigger_data = blob_wire.get("trigger_data", {}) if blob_wire else {}
        resolved = []
        for binding in grant.bindings:
            if binding.is_literal:
                resolved.append(
                    (binding.param_name, caller_params.get(binding.param_name, binding.literal))
                )
            else:
                if binding.trigger_field not in trigger_data:
                    return _rejected(ERR_PARAM_RESOLUTION)
                resolved.append((binding.param_name, trigger_data[binding.trigger_field]))
        return self._invoke(record, resolved)

    def _invoke(self, record: _GrantRecord, resolved) -> ExecutionOutcome:
        handler = self._protected[record.grant.action_function].handler
        try:
            result = handler(resolved)
        except Exception:
            logger.exception(
                "handler for %s failed after acceptance", record.grant.action_function
            )
            return _rejected(ERR_HANDLER_FAILURE)
        with self._count_lock:
            self.executed_count += 1
        return ExecutionOutcome(status="executed", handler_result=result)

    # -- wire handlers --------------------------------------------------------------

    def _h_issue_grant(self, headers, body):
        xtoken_value = httpkit.bearer_token(headers)
        body = body or {}
        try:
            certificate = ServiceIdentity.from_wire(body["trigger_certificate"])
            bindings = [ParamBinding.from_wire(b) for b in body.get("bindings", [])]
            grant = self.issue_action_grant(
                xtoken_value,
                certificate,
                body.get("trigger_function", ""),
                body.get("action_function", ""),
                bindings,
                body.get("predicate") or None,
            )
        except KeyError as exc:
            raise ValidationError(f"missing field {exc}") from exc
        return 200, {"token": grant.token}

    def _h_execute(self, headers, body, function):
        body = body or {}
        outcome = self.execute(
            function,
            body.get("token", ""),
            body.get("blob") or {},
            body.get("params") or {},
        )
        if outcome.executed:
            return 200, {"status": "executed", "handler_result": outcome.handler_result}
        if outcome.error_code == ERR_UNKNOWN_TOKEN:
            return 401, {"error_code": outcome.error_code}
        if outcome.error_code == ERR_HANDLER_FAILURE:
            return 500, {"error_code": outcome.error_code}
        return 403, {"error_code": outcome.error_code}

    def _h_revoke(self, headers, body, token):
        self.revoke_grant(token)
        return 200, {"ok": True}

    # -- storage accounting -----------------------------------------------------------

    def grant_state_bytes(self) -> int:
        with self._lock:
            rows = []
            for record in self._grants.values():
                grant = record.grant
                rows.append(
                    {
                        "token": grant.token,
                        "user_id": grant.user_id,
                        "action_function": grant.action_function,
                        "bindings": [b.to_wire() for b in grant.bindings],
                        "trigger_function": grant.trigger_function,
                        "trigger_service": grant.trigger_service.to_wire(),
                        "predicate": grant.predicate_text,
                        "last_accepted_time": grant.last_accepted_time,
                        "revoked": grant.revoked,
                    }
                )
        return len(httpkit.json_dumps(rows))

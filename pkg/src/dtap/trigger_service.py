"""Reference trigger-side online service.

Mints recipe-specific trigger grants from XTokens, emits signed trigger
blobs on events (callback push) or on poll, and revokes grants on recipe
deletion. Blob timestamps are strictly increasing per grant, so a verifier
that tracks the last accepted time can never be replayed.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Callable

from . import crypto, httpkit
from .errors import AuthError, NotFoundError, ScopeError, ValidationError
from .protocol import (
    FunctionSpec,
    RecipeTriggerGrant,
    ServiceIdentity,
    b64u_encode,
    encode_trigger_blob_body,
    new_token,
)
from .service_base import OnlineService

logger = logging.getLogger(__name__)

DEFAULT_BLOB_TTL_S = 300

StateProvider = Callable[[str], dict | None]


@dataclass
class Delivery:
    """Outcome of pushing one blob to one grant's callback."""

    grant_token: str
    callback_url: str
    blob: dict
    status: int | None = None
    error: str | None = None

    @property
    def accepted(self) -> bool:
        return self.status is not None and 200 <= self.status < 300


class TriggerService(OnlineService):
    def __init__(
        self,
        service_id: str,
        *,
        blob_ttl_s: int = DEFAULT_BLOB_TTL_S,
        signing_enabled: bool = True,
        **kwargs,
    ):
        super().__init__(service_id, **kwargs)
        self.blob_ttl_s = blob_ttl_s
        # signing_enabled=False is the measurement baseline: blobs carry no
        # time/ttl/signature, mirroring a platform without these protections.
        self.signing_enabled = signing_enabled
        self._providers: dict[str, StateProvider] = {}
        self._grants: dict[str, RecipeTriggerGrant] = {}
        self._grant_locks: dict[str, threading.Lock] = {}
        self._last_blob_time: dict[str, int] = {}

        self.add_route("POST", "/dtap/trigger-grants", self._h_issue_grant)
        self.add_route(
            "POST", "/dtap/trigger-grants/{token}/callback", self._h_register_callback
        )
        self.add_route("GET", "/dtap/trigger-grants/{token}/poll", self._h_poll)
        self.add_route("DELETE", "/dtap/trigger-grants/{token}", self._h_revoke)

    # -- catalog -------------------------------------------------------------

    def register_trigger(
        self, spec: FunctionSpec, state_provider: StateProvider | None = None
    ) -> None:
        if spec.kind != "trigger":
            raise ValidationError(f"{spec.name!r} is not a trigger function")
        self._register_function(spec)
        if state_provider is not None:
            self._providers[spec.name] = state_provider

    # -- grants ----------------------------------------------------------------

    def issue_trigger_grant(
        self, xtoken_value: str, function_name: str
    ) -> tuple[RecipeTriggerGrant, ServiceIdentity]:
        """Exchange an XToken for a token scoped to exactly one trigger function."""
        xtoken = self._xtoken_for(xtoken_value)
        if function_name not in xtoken.permitted_functions:
            raise ScopeError(f"{function_name!r} is outside this XToken's scope")
        spec = self.function_spec(function_name)
        if spec is None or spec.kind != "trigger":
            raise ScopeError(f"{function_name!r} is not a trigger function here")
        grant = RecipeTriggerGrant(
            token=new_token(), user_id=xtoken.user_id, function=function_name
        )
        with self._lock:
            self._grants[grant.token] = grant
            self._grant_locks[grant.token] = threading.Lock()
            self._last_blob_time[grant.token] = 0
        return grant, self.identity

    def _live_grant(self, token: str) -> RecipeTriggerGrant:
        grant = self._grants.get(token)
        if grant is None or grant.revoked:
            raise AuthError("unknown or revoked trigger token")
        return grant

    def register_callback(self, token: str, callback_url: str) -> None:
        grant = self._live_grant(token)
        if not callback_url:
            raise ValidationError("callback_url must be non-empty")
        grant.callback_url = callback_url

    def revoke_grant(self, token: str) -> None:
        """Idempotent for known tokens; unknown tokens are a not-found."""
        grant = self._grants.get(token)
        if grant is None:
            raise NotFoundError("no such trigger grant")
        grant.revoked = True

    # -- blob generation ---------------------------------------------------------

    def _mint_blob(self, grant: RecipeTriggerGrant, data: dict[str, str]) -> dict:
        """Build the wire blob; time is strictly increasing per grant."""
        if not self.signing_enabled:
            return {"trigger_scope": grant.function, "trigger_data": dict(data)}
        with self._grant_locks[grant.token]:
            time_ms = max(self.clock.now_ms(), self._last_blob_time[grant.token] + 1)
            self._last_blob_time[grant.token] = time_ms
        body = encode_trigger_blob_body(time_ms, self.blob_ttl_s, grant.function, data)
        return {
            "time": time_ms,
            "ttl": self.blob_ttl_s,
            "trigger_scope": grant.function,
            "trigger_data": dict(data),
            "sig": b64u_encode(crypto.sign(self._signing_key, body)),
        }

    def fire_event(
        self,
        function_name: str,
        event_data: dict[str, str],
        user_id: str | None = None,
    ) -> list[Delivery]:
        """Push a signed blob to every live registered grant on this function.

        ``user_id`` narrows delivery to one user's recipes (the usual case:
        events are per-account). Unreachable callbacks are recorded in the
        returned report and do not block other deliveries.
        """
        spec = self.function_spec(function_name)
        if spec is None or spec.kind != "trigger":
            raise ValidationError(f"{function_name!r} is not a trigger function here")
        for key, value in event_data.items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise ValidationError("event data must map strings to strings")
        with self._lock:
            targets = [
                g
                for g in self._grants.values()
                if g.function == function_name
                and not g.revoked
                and g.callback_url
                and (user_id is None or g.user_id == user_id)
            ]
        deliveries = []
        for grant in targets:
            blob = self._mint_blob(grant, event_data)
            delivery = Delivery(
                grant_token=grant.token, callback_url=grant.callback_url, blob=blob
            )
            # at-most-once per event, with a single retry on transport failure
            for attempt in (0, 1):
                try:
                    status, _ = httpkit.request(
                        "POST",
                        grant.callback_url,
                        {"blob": blob},
                        source=f"trigger:{self.service_id}",
                    )
                    delivery.status = status
                    break
                except httpkit.TransportError as exc:
                    delivery.error = str(exc)
                    if attempt == 1:
                        logger.warning(
                            "callback delivery failed for %s: %s", grant.token[:8], exc
                        )
            deliveries.append(delivery)
        return deliveries

    def poll(self, token: str) -> dict | None:
        """Freshly signed blob reflecting current state, or None for no event."""
        grant = self._live_grant(token)
        provider = self._providers.get(grant.function)
        if provider is None:
            return None
        data = provider(grant.user_id)
        if data is None:
            return None
        return self._mint_blob(grant, data)

    # -- wire handlers -----------------------------------------------------------

    def _h_issue_grant(self, headers, body):
        xtoken_value = httpkit.bearer_token(headers)
        body = body or {}
        grant, identity = self.issue_trigger_grant(xtoken_value, body.get("function", ""))
        return 200, {"token": grant.token, "identity": identity.to_wire()}

    def _h_register_callback(self, headers, body, token):
        self.register_callback(token, (body or {}).get("callback_url", ""))
        return 200, {"ok": True}

    def _h_poll(self, headers, body, token):
        return 200, {"blob": self.poll(token)}

    def _h_revoke(self, headers, body, token):
        self.revoke_grant(token)
        return 200, {"ok": True}

    # -- storage accounting --------------------------------------------------------

    def grant_state_bytes(self) -> int:
        with self._lock:
            rows = [
                {
                    "token": g.token,
                    "user_id": g.user_id,
                    "function": g.function,
                    "callback_url": g.callback_url,
                    "revoked": g.revoked,
                    "last_blob_time": self._last_blob_time.get(g.token, 0),
                }
                for g in self._grants.values()
            ]
        return len(httpkit.json_dumps(rows))

"""Machinery shared by trigger and action services.

Covers user accounts, the authorization-code flow that ends in an XToken,
and hosting of the signed scope-to-function map. Credentials are verified
against salted hashes and never stored or logged in the clear.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import secrets
import threading
from dataclasses import dataclass, field

from . import crypto
from .errors import AuthError, ConfigurationError, InvalidGrantError, ScopeError
from .httpkit import JsonApp, SystemClock, bearer_token, json_dumps
from .protocol import (
    FunctionSpec,
    ScopeMap,
    ServiceIdentity,
    XToken,
    encode_scope_map_body,
    new_token,
)

AUTH_CODE_TTL_S = 60


@dataclass
class _UserAccount:
    user_id: str
    salt: bytes
    password_hash: bytes
    connected: dict[str, XToken] = field(default_factory=dict)


@dataclass
class _AuthCode:
    code: str
    user_id: str
    permitted_functions: frozenset[str]
    expires_at: int
    consumed: bool = False


class OnlineService(JsonApp):
    """Base online service: identity, scope map, OAuth code flow, XTokens."""

    def __init__(
        self,
        service_id: str,
        *,
        signing_key=None,
        clock=None,
        pbkdf2_iterations: int = 100_000,
    ):
        super().__init__()
        self.app_name = service_id
        self.service_id = service_id
        self.clock = clock or SystemClock()
        self._signing_key = signing_key or crypto.generate_signing_key()
        self.identity: ServiceIdentity = crypto.make_identity(service_id, self._signing_key)
        self._pbkdf2_iterations = pbkdf2_iterations
        self._functions: dict[str, FunctionSpec] = {}
        self._scope_map: ScopeMap | None = None
        self._users: dict[str, _UserAccount] = {}
        self._codes: dict[str, _AuthCode] = {}
        self._xtokens: dict[str, XToken] = {}
        self._lock = threading.RLock()

        self.add_route("GET", "/.well-known/dtap/scope-map", self._h_scope_map)
        self.add_route("POST", "/oauth/authorize", self._h_authorize)
        self.add_route("POST", "/oauth/token", self._h_token)

    # -- function catalog --------------------------------------------------

    def _register_function(self, spec: FunctionSpec) -> None:
        with self._lock:
            if spec.name in self._functions:
                raise ConfigurationError(f"function {spec.name!r} already registered")
            self._functions[spec.name] = spec
            self._scope_map = None

    def function_spec(self, name: str) -> FunctionSpec | None:
        return self._functions.get(name)

    def scope_map(self) -> ScopeMap:
        """Signed catalog; cached so repeat fetches are byte-identical."""
        with self._lock:
            if self._scope_map is None:
                functions = tuple(self._functions.values())
                issued_at = self.clock.now_ms()
                body = encode_scope_map_body(self.service_id, functions, issued_at)
                self._scope_map = ScopeMap(
                    service_id=self.service_id,
                    functions=functions,
                    issued_at=issued_at,
                    signature=crypto.sign(self._signing_key, body),
                )
            return self._scope_map

    # -- accounts and the code flow ----------------------------------------

    def add_user(self, user_id: str, password: str) -> None:
        salt = os.urandom(16)
        digest = hashlib.pbkdf2_hmac(
            "sha256", password.encode("utf-8"), salt, self._pbkdf2_iterations
        )
        with self._lock:
            self._users[user_id] = _UserAccount(user_id, salt, digest)

    def _check_password(self, user_id: str, password: str) -> _UserAccount:
        account = self._users.get(user_id)
        if account is None:
            # burn a hash anyway so unknown users are not cheaper to probe
            hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), b"\x00" * 16, 1000)
            raise AuthError("unknown user or bad password")
        candidate = hashlib.pbkdf2_hmac(
            "sha256", password.encode("utf-8"), account.salt, self._pbkdf2_iterations
        )
        if not hmac.compare_digest(candidate, account.password_hash):
            raise AuthError("unknown user or bad password")
        return account

    def authorize(
        self, user_id: str, password: str, requested_functions: set[str] | None = None
    ) -> str:
        """Validate credentials and mint a short-lived single-use code."""
        account = self._check_password(user_id, password)
        known = self.scope_map().function_names
        functions = frozenset(requested_functions) if requested_functions else known
        unknown = functions - known
        if unknown:
            raise ScopeError(f"unknown functions requested: {sorted(unknown)}")
        code = _AuthCode(
            code=new_token(),
            user_id=account.user_id,
            permitted_functions=functions,
            expires_at=self.clock.now_ms() + AUTH_CODE_TTL_S * 1000,
        )
        with self._lock:
            self._codes[code.code] = code
        return code.code

    def exchange_code(self, code_value: str) -> XToken:
        """Single-use exchange of a live code for an XToken."""
        with self._lock:
            record = self._codes.get(code_value)
            if record is None or record.consumed:
                raise InvalidGrantError("code unknown or already used")
            if self.clock.now_ms() >= record.expires_at:
                raise InvalidGrantError("code expired")
            record.consumed = True
            xtoken = XToken(
                value=new_token(),
                service_id=self.service_id,
                user_id=record.user_id,
                permitted_functions=record.permitted_functions,
                issued_at=self.clock.now_ms(),
            )
            self._xtokens[xtoken.value] = xtoken
            self._users[record.user_id].connected[xtoken.value] = xtoken
        return xtoken

    def _xtoken_for(self, value: str) -> XToken:
        xtoken = self._xtokens.get(value)
        if xtoken is None:
            raise AuthError("unknown XToken")
        return xtoken

    # -- wire handlers -------------------------------------------------------

    def _h_scope_map(self, headers, body):
        return 200, {
            "identity": self.identity.to_wire(),
            "scope_map": self.scope_map().to_wire(),
        }

    def _h_authorize(self, headers, body):
        body = body or {}
        requested = body.get("functions")
        code = self.authorize(
            body.get("user_id", ""),
            body.get("password", ""),
            set(requested) if requested else None,
        )
        return 200, {"code": code, "expires_in": AUTH_CODE_TTL_S}

    def _h_token(self, headers, body):
        body = body or {}
        xtoken = self.exchange_code(body.get("code", ""))
        return 200, {"xtoken": xtoken.to_wire()}

    # -- introspection for storage accounting --------------------------------

    def xtoken_state_bytes(self) -> int:
        with self._lock:
            return len(json_dumps([t.to_wire() for t in self._xtokens.values()]))

    def _require_bearer_xtoken(self, headers) -> XToken:
        return self._xtoken_for(bearer_token(headers))

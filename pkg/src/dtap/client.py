"""The trusted client.

Holds the only highly-privileged state in the system: XTokens and pinned
service identities, sealed in the vault. Recipe creation exchanges XTokens
for the two recipe-specific grants and uploads only those grants to the
cloud; the cloud never sees an XToken. Deletion revokes the grants at the
services first, so a cloud that keeps the recipe description anyway is left
holding dead tokens.
"""

from __future__ import annotations

import getpass
import logging
from typing import Callable

from . import httpkit
from .crypto import verify, verify_identity
from .errors import AuthError, NotFoundError, ValidationError
from .predicate import parse_predicate
from .protocol import ParamBinding, ScopeMap, ServiceIdentity, XToken
from .vault import TokenVault

logger = logging.getLogger(__name__)

SOURCE = "dclient"


class DtapClient:
    def __init__(
        self,
        vault_path,
        passphrase: str,
        *,
        cloud_url: str | None = None,
        scrypt_n: int = 2**14,
        password_prompt: Callable[[str], str] | None = None,
    ):
        self.vault = TokenVault(vault_path, passphrase, scrypt_n=scrypt_n)
        self.cloud_url = cloud_url
        self._password_prompt = password_prompt or (
            lambda user_id: getpass.getpass(f"password for {user_id}: ")
        )
        self.credential_prompts = 0

    # -- vault helpers ---------------------------------------------------------

    def _data(self) -> dict:
        return self.vault.load()

    def _channel(self, data: dict, key: str) -> tuple[str, dict]:
        """Find a channel by service_id or by service URL."""
        channels = data["channels"]
        if key in channels:
            return key, channels[key]
        for service_id, entry in channels.items():
            if entry["service_url"] == key:
                return service_id, entry
        raise NotFoundError(f"channel {key!r} not signed up")

    # -- channel signup -----------------------------------------------------------

    def signup_channel(self, service_url: str, trust_new_key: bool = False) -> ScopeMap:
        """Fetch and verify the signed scope map; pin the service identity.

        Nothing is stored unless every check passes. A key change on
        re-signup is refused unless explicitly trusted.
        """
        status, body = httpkit.request(
            "GET", service_url + "/.well-known/dtap/scope-map", source=SOURCE
        )
        if status != 200 or body is None:
            raise ValidationError(f"scope map fetch failed ({status})")
        identity = ServiceIdentity.from_wire(body["identity"])
        scope_map = ScopeMap.from_wire(body["scope_map"])
        if not verify_identity(identity):
            raise ValidationError("service certificate does not verify")
        if scope_map.service_id != identity.service_id:
            raise ValidationError("scope map is for a different service id")
        if not verify(identity.verification_key, scope_map.body_bytes(), scope_map.signature):
            raise ValidationError("scope map signature does not verify")

        data = self._data()
        existing = data["channels"].get(identity.service_id)
        if existing is not None:
            pinned = ServiceIdentity.from_wire(existing["identity"])
            if pinned.verification_key != identity.verification_key and not trust_new_key:
                raise ValidationError(
                    f"service {identity.service_id!r} presented a different key than "
                    "the pinned one; re-run with trust_new_key to accept the rotation"
                )
        entry = existing or {}
        entry.update(
            {
                "service_url": service_url,
                "identity": identity.to_wire(),
                "scope_map": scope_map.to_wire(),
            }
        )
        entry.setdefault("xtoken", None)
        data["channels"][identity.service_id] = entry
        self.vault.save(data)
        return scope_map

    # -- channel connection ----------------------------------------------------------

    def connect_channel(
        self,
        service: str,
        user_id: str,
        password: str | None = None,
        functions: set[str] | None = None,
    ) -> XToken:
        """Run the code flow and seal the resulting XToken into the vault."""
        data = self._data()
        service_id, entry = self._channel(data, service)
        if password is None:
            password = self._password_prompt(user_id)
            self.credential_prompts += 1
        base = entry["service_url"]
        payload: dict = {"user_id": user_id, "password": password}
        if functions is not None:
            payload["functions"] = sorted(functions)
        status, body = httpkit.request(
            "POST", base + "/oauth/authorize", payload, source=SOURCE
        )
        if status != 200:
            raise AuthError(f"authorization failed ({status}): {body}")
        status, body = httpkit.request(
            "POST", base + "/oauth/token", {"code": body["code"]}, source=SOURCE
        )
        if status != 200:
            raise AuthError(f"code exchange failed ({status}): {body}")
        xtoken = XToken.from_wire(body["xtoken"])
        entry["xtoken"] = xtoken.to_wire()
        data["channels"][service_id] = entry
        self.vault.save(data)
        return xtoken

    # -- recipe lifecycle ----------------------------------------------------------------

    def _revoke_quietly(self, url: str) -> bool:
        for _ in (0, 1):
            try:
                status, _ = httpkit.request("DELETE", url, source=SOURCE)
                return status == 200
            except httpkit.TransportError:
                continue
        logger.warning("rollback revocation failed for %s", url)
        return False

    def create_recipe(
        self,
        trigger_service: str,
        trigger_function: str,
        action_service: str,
        action_function: str,
        bindings: list[ParamBinding],
        predicate_text: str | None = None,
        cloud_url: str | None = None,
        mode: str = "callback",
        poll_interval_s: int = 900,
        description: str | None = None,
    ) -> str:
        """Mint both recipe-specific grants and upload the recipe to the cloud.

        Any failure after the trigger grant is issued rolls back whatever was
        already minted, so a failed creation leaves no live grants behind.
        """
        cloud = cloud_url or self.cloud_url
        if not cloud:
            raise ValidationError("no cloud URL configured")
        data = self._data()
        trig_id, trig = self._channel(data, trigger_service)
        act_id, act = self._channel(data, action_service)
        for entry, name in ((trig, trigger_function), (act, action_function)):
            if entry["xtoken"] is None:
                raise ValidationError("channel not connected (no XToken)")
            if name not in entry["xtoken"]["permitted_functions"]:
                raise ValidationError(f"{name!r} is outside the connected XToken scope")

        action_map = ScopeMap.from_wire(act["scope_map"])
        spec = action_map.function(action_function)
        if spec is None or spec.kind != "action":
            raise ValidationError(f"{action_function!r} is not an action function")
        schema_names = [n for n, _ in spec.params]
        if sorted(b.param_name for b in bindings) != sorted(schema_names):
            raise ValidationError(f"bindings must cover exactly {schema_names}")
        trigger_map = ScopeMap.from_wire(trig["scope_map"])
        tspec = trigger_map.function(trigger_function)
        if tspec is None or tspec.kind != "trigger":
            raise ValidationError(f"{trigger_function!r} is not a trigger function")
        if predicate_text:
            parse_predicate(predicate_text)

        pinned = ServiceIdentity.from_wire(trig["identity"])
        trig_base, act_base = trig["service_url"], act["service_url"]

        # trigger setup: XToken -> recipe-specific trigger token + certificate
        status, body = httpkit.request(
            "POST",
            trig_base + "/dtap/trigger-grants",
            {"function": trigger_function},
            headers={"Authorization": "Bearer " + trig["xtoken"]["value"]},
            source=SOURCE,
        )
        if status != 200:
            raise ValidationError(f"trigger grant refused ({status}): {body}")
        trigger_token = body["token"]
        returned = ServiceIdentity.from_wire(body["identity"])
        if returned.verification_key != pinned.verification_key:
            self._revoke_quietly(
                f"{trig_base}/dtap/trigger-grants/{trigger_token}"
            )
            raise ValidationError("trigger service key does not match the pinned identity")

        # action setup: XToken + trigger certificate + call shape + predicate
        status, body = httpkit.request(
            "POST",
            act_base + "/dtap/action-grants",
            {
                "trigger_certificate": pinned.to_wire(),
                "trigger_function": trigger_function,
                "action_function": action_function,
                "bindings": [b.to_wire() for b in bindings],
                "predicate": predicate_text,
            },
            headers={"Authorization": "Bearer " + act["xtoken"]["value"]},
            source=SOURCE,
        )
        if status != 200:
            self._revoke_quietly(f"{trig_base}/dtap/trigger-grants/{trigger_token}")
            raise ValidationError(f"action grant refused ({status}): {body}")
        action_token = body["token"]

        literal_params = {b.param_name: b.literal for b in bindings if b.is_literal}
        recipe_body = {
            "description": description
            or f"IF {trigger_function} on {trig_id} THEN {action_function} on {act_id}",
            "trigger": {
                "service_url": trig_base,
                "token": trigger_token,
                "function": trigger_function,
                "mode": mode,
                "poll_interval_s": poll_interval_s,
            },
            "action": {
                "service_url": act_base,
                "token": action_token,
                "function": action_function,
                "literal_params": literal_params,
            },
        }
        try:
            status, body = httpkit.request(
                "POST", cloud + "/recipes", recipe_body, source=SOURCE
            )
        except httpkit.TransportError as exc:
            status, body = None, {"error": str(exc)}
        if status != 200:
            self._revoke_quietly(f"{trig_base}/dtap/trigger-grants/{trigger_token}")
            self._revoke_quietly(f"{act_base}/dtap/action-grants/{action_token}")
            raise ValidationError(f"cloud upload failed ({status}): {body}")
        recipe_id = body["recipe_id"]

        data["recipes"][recipe_id] = {
            "description": recipe_body["description"],
            "cloud_url": cloud,
            "trigger": {
                "service_id": trig_id,
                "service_url": trig_base,
                "token": trigger_token,
                "function": trigger_function,
                "mode": mode,
            },
            "action": {
                "service_id": act_id,
                "service_url": act_base,
                "token": action_token,
                "function": action_function,
            },
        }
        self.vault.save(data)
        return recipe_id

    def delete_recipe(self, recipe_id: str) -> dict:
        """Revoke both grants at their services, then drop the cloud record."""
        data = self._data()
        entry = data["recipes"].get(recipe_id)
        if entry is None:
            raise NotFoundError(f"unknown recipe {recipe_id}")
        report = {
            "trigger_revoked": self._revoke_quietly(
                f"{entry['trigger']['service_url']}/dtap/trigger-grants/"
                f"{entry['trigger']['token']}"
            ),
            "action_revoked": self._revoke_quietly(
                f"{entry['action']['service_url']}/dtap/action-grants/"
                f"{entry['action']['token']}"
            ),
        }
        try:
            status, _ = httpkit.request(
                "DELETE", f"{entry['cloud_url']}/recipes/{recipe_id}", source=SOURCE
            )
            report["cloud_deleted"] = status == 200
        except httpkit.TransportError as exc:
            report["cloud_deleted"] = False
            report["cloud_error"] = str(exc)
        if report["trigger_revoked"] and report["action_revoked"]:
            del data["recipes"][recipe_id]
            self.vault.save(data)
        return report

    def list_recipes(self) -> list[dict]:
        data = self._data()
        return [
            {"recipe_id": rid, "description": entry["description"]}
            for rid, entry in sorted(data["recipes"].items())
        ]

    # -- portability -----------------------------------------------------------------------

    def export_vault(self, dest) -> None:
        self.vault.export_to(dest)

    def import_vault(self, source) -> None:
        self.vault.import_from(source)

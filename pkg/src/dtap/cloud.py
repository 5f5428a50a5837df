"""The untrusted recipe-execution cloud.

Stores recipes and their two recipe-specific tokens, receives trigger blobs
on callbacks or by polling, and forwards blob plus action token to the
action service. It never sees an XToken or a signing key; its entire
authority is its recipe table.

Adversarial modes script the behaviors of a compromised cloud for the
attack suite: tampering with trigger data, replaying blobs, spraying action
calls without real blobs, and swapping blobs across recipes.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field

from . import httpkit
from .errors import NotFoundError, ValidationError
from .httpkit import JsonApp, json_dumps
from .protocol import b64u_encode, new_token

logger = logging.getLogger(__name__)

ADVERSARIAL_MODES = ("honest", "tamper", "replay", "spray", "cross_recipe")

DEFAULT_POLL_INTERVAL_S = 900


@dataclass
class RecipeTriggerLeg:
    service_url: str
    token: str
    function: str
    mode: str = "callback"  # callback | poll
    poll_interval_s: int = DEFAULT_POLL_INTERVAL_S


@dataclass
class RecipeActionLeg:
    service_url: str
    token: str
    function: str
    literal_params: dict[str, str] = field(default_factory=dict)


@dataclass
class Recipe:
    recipe_id: str
    description: str
    trigger: RecipeTriggerLeg
    action: RecipeActionLeg
    degraded: bool = False
    degraded_reason: str | None = None
    executions: int = 0
    rejections: int = 0
    last_outcome: dict | None = None
    last_blob: dict | None = None
    next_poll_at: float = 0.0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def status_wire(self) -> dict:
        return {
            "recipe_id": self.recipe_id,
            "description": self.description,
            "degraded": self.degraded,
            "degraded_reason": self.degraded_reason,
            "executions": self.executions,
            "rejections": self.rejections,
            "last_outcome": self.last_outcome,
        }


def _parse_recipe_wire(body: dict, recipe_id: str) -> Recipe:
    try:
        trig = body["trigger"]
        act = body["action"]
        trigger = RecipeTriggerLeg(
            service_url=trig["service_url"],
            token=trig["token"],
            function=trig["function"],
            mode=trig.get("mode", "callback"),
            poll_interval_s=int(trig.get("poll_interval_s", DEFAULT_POLL_INTERVAL_S)),
        )
        action = RecipeActionLeg(
            service_url=act["service_url"],
            token=act["token"],
            function=act["function"],
            literal_params=dict(act.get("literal_params", {})),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed recipe: {exc}") from exc
    if trigger.mode not in ("callback", "poll"):
        raise ValidationError(f"unknown trigger mode {trigger.mode!r}")
    if not trigger.token or not action.token:
        raise ValidationError("recipe must carry both recipe-specific tokens")
    return Recipe(
        recipe_id=recipe_id,
        description=body.get("description", ""),
        trigger=trigger,
        action=action,
    )


class CloudService(JsonApp):
    app_name = "dcloud"

    def __init__(self, poll_tick_s: float = 0.2):
        super().__init__()
        self.base_url: str | None = None  # set once hosted
        self._recipes: dict[str, Recipe] = {}
        self._deleted: set[str] = set()
        self._lock = threading.Lock()
        self.adversarial_mode = "honest"
        self._poll_tick_s = poll_tick_s
        self._poller: threading.Thread | None = None
        self._poller_stop = threading.Event()

        self.add_route("POST", "/recipes", self._h_create)
        self.add_route("GET", "/recipes", self._h_list)
        self.add_route("DELETE", "/recipes/{recipe_id}", self._h_delete)
        self.add_route("GET", "/recipes/{recipe_id}/status", self._h_status)
        self.add_route("POST", "/callbacks/{recipe_id}", self._h_callback)

    # -- recipe management -----------------------------------------------------

    def create_recipe(self, body: dict) -> Recipe:
        recipe_id = "r-" + new_token()[:16]
        recipe = _parse_recipe_wire(body, recipe_id)
        with self._lock:
            self._recipes[recipe_id] = recipe
        if recipe.trigger.mode == "callback":
            if self.base_url is None:
                recipe.degraded = True
                recipe.degraded_reason = "cloud has no external URL for callbacks"
            else:
                callback_url = f"{self.base_url}/callbacks/{recipe_id}"
                url = (
                    f"{recipe.trigger.service_url}/dtap/trigger-grants/"
                    f"{recipe.trigger.token}/callback"
                )
                try:
                    status, _ = httpkit.request(
                        "POST", url, {"callback_url": callback_url}, source="cloud"
                    )
                    if status != 200:
                        recipe.degraded = True
                        recipe.degraded_reason = f"callback registration failed ({status})"
                except httpkit.TransportError as exc:
                    recipe.degraded = True
                    recipe.degraded_reason = f"callback registration unreachable: {exc}"
        else:
            recipe.next_poll_at = time.monotonic() + recipe.trigger.poll_interval_s
        return recipe

    def get_recipe(self, recipe_id: str) -> Recipe:
        recipe = self._recipes.get(recipe_id)
        if recipe is None:
            raise NotFoundError(f"no recipe {recipe_id}")
        return recipe

    def delete_recipe(self, recipe_id: str) -> bool:
        """Remove the local record only; token invalidation is the client's job."""
        with self._lock:
            existed = self._recipes.pop(recipe_id, None) is not None
            if existed:
                self._deleted.add(recipe_id)
            elif recipe_id not in self._deleted:
                raise NotFoundError(f"no recipe {recipe_id}")
        return existed

    def set_adversarial_mode(self, mode: str) -> None:
        if mode not in ADVERSARIAL_MODES:
            raise ValidationError(f"unknown adversarial mode {mode!r}")
        self.adversarial_mode = mode

    # -- execution ------------------------------------------------------------------

    def receive_trigger(self, recipe_id: str, blob: dict) -> dict:
        """Forward blob + action token to the action service; FIFO per recipe."""
        recipe = self.get_recipe(recipe_id)
        with recipe.lock:
            recipe.last_blob = blob
            mode = self.adversarial_mode
            if mode == "tamper":
                blob = self._tampered(blob)
            elif mode == "spray":
                blob = self._fabricated(recipe)
            elif mode == "cross_recipe":
                foreign = self._foreign_blob(recipe_id)
                if foreign is not None:
                    blob = foreign
            outcome = self._forward(recipe, blob)
            if mode == "replay":
                outcome = self._forward(recipe, blob)
            return outcome

    def poll_cycle(self, recipe_id: str) -> dict:
        """One poll of the trigger service; forwards any blob it returns."""
        recipe = self.get_recipe(recipe_id)
        if recipe.trigger.mode != "poll":
            raise ValidationError(f"recipe {recipe_id} is not in poll mode")
        url = f"{recipe.trigger.service_url}/dtap/trigger-grants/{recipe.trigger.token}/poll"
        try:
            status, body = httpkit.request("GET", url, source="cloud")
        except httpkit.TransportError as exc:
            recipe.degraded = True
            recipe.degraded_reason = f"poll unreachable: {exc}"
            return {"forwarded": False, "error": str(exc)}
        if status != 200:
            recipe.degraded = True
            recipe.degraded_reason = f"poll rejected ({status})"
            return {"forwarded": False, "error": f"poll rejected ({status})"}
        blob = (body or {}).get("blob")
        if blob is None:
            return {"forwarded": False, "no_event": True}
        return self.receive_trigger(recipe_id, blob)

    def _forward(self, recipe: Recipe, blob: dict) -> dict:
        url = f"{recipe.action.service_url}/dtap/execute/{recipe.action.function}"
        payload = {
            "token": recipe.action.token,
            "blob": blob,
            "params": recipe.action.literal_params,
        }
        outcome: dict | None = None
        for attempt in (0, 1):
            try:
                status, body = httpkit.request("POST", url, payload, source="cloud")
                outcome = {"forwarded": True, "status": status, "body": body}
                break
            except httpkit.TransportError as exc:
                outcome = {"forwarded": False, "error": str(exc)}
                if attempt == 1:
                    logger.warning("action forward failed for %s: %s", recipe.recipe_id, exc)
        if outcome.get("forwarded") and outcome.get("status") == 200:
            recipe.executions += 1
        else:
            recipe.rejections += 1
        recipe.last_outcome = outcome
        return outcome

    # -- adversarial blob construction ---------------------------------------------

    def _tampered(self, blob: dict) -> dict:
        mutated = dict(blob)
        data = dict(mutated.get("trigger_data", {}))
        for key in data:
            data[key] = "malware-" + data[key]
        mutated["trigger_data"] = data
        return mutated

    def _fabricated(self, recipe: Recipe) -> dict:
        return {
            "time": int(time.time() * 1000),
            "ttl": 300,
            "trigger_scope": recipe.trigger.function,
            "trigger_data": {},
            "sig": b64u_encode(b"\x00" * 64),
        }

    def _foreign_blob(self, recipe_id: str) -> dict | None:
        with self._lock:
            for other_id, other in self._recipes.items():
                if other_id != recipe_id and other.last_blob is not None:
                    return other.last_blob
        return None

    # -- polling scheduler (single timer wheel) ---------------------------------------

    def start_poller(self) -> None:
        if self._poller is not None:
            return
        self._poller_stop.clear()
        self._poller = threading.Thread(target=self._poll_loop, daemon=True)
        self._poller.start()

    def stop_poller(self) -> None:
        if self._poller is None:
            return
        self._poller_stop.set()
        self._poller.join(timeout=5)
        self._poller = None

    def _poll_loop(self) -> None:
        while not self._poller_stop.wait(self._poll_tick_s):
            now = time.monotonic()
            with self._lock:
                due = [
                    r
                    for r in self._recipes.values()
                    if r.trigger.mode == "poll" and r.next_poll_at <= now
                ]
            for recipe in due:
                recipe.next_poll_at = time.monotonic() + recipe.trigger.poll_interval_s
                try:
                    self.poll_cycle(recipe.recipe_id)
                except NotFoundError:
                    pass
                except Exception:
                    logger.exception("poll cycle failed for %s", recipe.recipe_id)

    # -- wire handlers ------------------------------------------------------------------

    def _h_create(self, headers, body):
        recipe = self.create_recipe(body or {})
        return 200, {
            "recipe_id": recipe.recipe_id,
            "degraded": recipe.degraded,
            "degraded_reason": recipe.degraded_reason,
        }

    def _h_list(self, headers, body):
        with self._lock:
            rows = [r.status_wire() for r in self._recipes.values()]
        return 200, {"recipes": rows}

    def _h_delete(self, headers, body, recipe_id):
        existed = self.delete_recipe(recipe_id)
        return 200, {"ok": True, "existed": existed}

    def _h_status(self, headers, body, recipe_id):
        return 200, self.get_recipe(recipe_id).status_wire()

    def _h_callback(self, headers, body, recipe_id):
        blob = (body or {}).get("blob")
        if blob is None:
            raise ValidationError("callback body must carry a blob")
        outcome = self.receive_trigger(recipe_id, blob)
        return 200, {"received": True, "outcome": outcome}

    # -- introspection ---------------------------------------------------------------------

    def recipe_state_bytes(self) -> int:
        with self._lock:
            rows = []
            for r in self._recipes.values():
                rows.append(
                    {
                        "recipe_id": r.recipe_id,
                        "description": r.description,
                        "trigger": vars(r.trigger),
                        "action": {
                            "service_url": r.action.service_url,
                            "token": r.action.token,
                            "function": r.action.function,
                            "literal_params": r.action.literal_params,
                        },
                    }
                )
        return len(json_dumps(rows))

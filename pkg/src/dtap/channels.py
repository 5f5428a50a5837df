"""Concrete example channels: a shopping/ToDo list and an email service.

Together they exercise the whole protocol: adding a list item fires the
OnNewItem trigger; the email action appends a record to an outbox file.
Email "delivery" is a file append so test runs are deterministic.

The email service also registers wide variants (send_email_1 .. send_email_10)
whose parameter counts support the transmission and latency measurements.
"""

from __future__ import annotations

import json
import threading
import time
from pathlib import Path

from .action_service import ActionService
from .protocol import FunctionSpec
from .trigger_service import TriggerService

ON_NEW_ITEM = FunctionSpec("OnNewItem", "trigger", (("new_item", "string"),))
ON_ITEM_REMOVED = FunctionSpec("OnItemRemoved", "trigger", (("removed_item", "string"),))
SEND_EMAIL = FunctionSpec("send_email", "action", (("to", "string"), ("body", "string")))


class ShoppingListService(TriggerService):
    """Per-user ordered item lists; appending an item fires exactly one event."""

    def __init__(self, service_id: str = "shoppinglist", **kwargs):
        super().__init__(service_id, **kwargs)
        self._items: dict[str, list[str]] = {}
        self._removed: dict[str, str] = {}
        self._items_lock = threading.Lock()
        self.register_trigger(ON_NEW_ITEM, self._current_head)
        self.register_trigger(ON_ITEM_REMOVED, self._last_removed)
        self.add_route("POST", "/list/items", self._h_add_item)

    def add_item(self, user_id: str, text: str):
        with self._items_lock:
            self._items.setdefault(user_id, []).append(text)
        return self.fire_event("OnNewItem", {"new_item": text}, user_id=user_id)

    def remove_item(self, user_id: str, text: str):
        with self._items_lock:
            items = self._items.get(user_id, [])
            if text in items:
                items.remove(text)
            self._removed[user_id] = text
        return self.fire_event("OnItemRemoved", {"removed_item": text}, user_id=user_id)

    def items(self, user_id: str) -> list[str]:
        with self._items_lock:
            return list(self._items.get(user_id, []))

    def _current_head(self, user_id: str) -> dict | None:
        with self._items_lock:
            items = self._items.get(user_id, [])
            if not items:
                return None
            return {"new_item": items[-1]}

    def _last_removed(self, user_id: str) -> dict | None:
        with self._items_lock:
            text = self._removed.get(user_id)
            return None if text is None else {"removed_item": text}

    def _h_add_item(self, headers, body):
        body = body or {}
        deliveries = self.add_item(body.get("user_id", ""), body.get("text", ""))
        return 200, {
            "ok": True,
            "delivered": len(deliveries),
            "accepted": sum(1 for d in deliveries if d.accepted),
        }


def bench_action_spec(param_count: int) -> FunctionSpec:
    params = tuple((f"p{i}", "string") for i in range(1, param_count + 1))
    return FunctionSpec(f"send_email_{param_count}", "action", params)


class EmailService(ActionService):
    """Email action service; sends are appends to a JSON-lines outbox file."""

    def __init__(self, outbox_path: str | Path, service_id: str = "email", **kwargs):
        super().__init__(service_id, **kwargs)
        self.outbox_path = Path(outbox_path)
        self.outbox_path.parent.mkdir(parents=True, exist_ok=True)
        self.outbox_path.touch(exist_ok=True)
        self._outbox_lock = threading.Lock()
        self.register_action(SEND_EMAIL, self._send_email)
        for n in range(1, 11):
            self.register_action(bench_action_spec(n), self._send_wide)

    def _append(self, record: dict) -> dict:
        record["sent_at"] = time.time()
        line = json.dumps(record, sort_keys=True) + "\n"
        with self._outbox_lock:
            with self.outbox_path.open("a", encoding="utf-8") as fh:
                fh.write(line)
        return record

    def _send_email(self, params: list[tuple[str, str]]) -> dict:
        fields = dict(params)
        return self._append({"to": fields["to"], "body": fields["body"]})

    def _send_wide(self, params: list[tuple[str, str]]) -> dict:
        return self._append({"values": [value for _, value in params]})

    def outbox(self) -> list[dict]:
        with self._outbox_lock:
            text = self.outbox_path.read_text(encoding="utf-8")
        return [json.loads(line) for line in text.splitlines() if line]

    def outbox_len(self) -> int:
        return len(self.outbox())

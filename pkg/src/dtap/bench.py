"""Adversary scenarios and performance measurement.

``Topology`` deploys the whole system locally over real HTTP: a shopping
list trigger service, an email action service, the untrusted cloud, and a
trusted client with an encrypted vault. The attack suite drives a
compromised cloud (scripted modes plus direct calls with the tokens and
blobs a compromised cloud would hold) and asserts that every scenario is
rejected with the exact expected error while honest executions keep
working.

The benchmarks compare the protected system against a baseline deployment
of the same code with signing and verification disabled, using identical
topology and payloads; transmission is counted by the wire-log middleware
on every hop.
"""

from __future__ import annotations

import re
import statistics
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import httpkit
from .action_service import (
    ERR_BAD_SIGNATURE,
    ERR_EXPIRED_BLOB,
    ERR_FUNCTION_MISMATCH,
    ERR_PARAM_MISMATCH,
    ERR_PREDICATE_FALSE,
    ERR_SCOPE_MISMATCH,
    ERR_TIMESTAMP_NOT_INCREASED,
    ERR_UNKNOWN_TOKEN,
)
from .channels import EmailService, ShoppingListService
from .client import DtapClient
from .cloud import CloudService
from .httpkit import WIRE_LOG, ServiceHost, VirtualClock, WireRecord
from .protocol import ParamBinding

PAPER_PREDICATE = 'new_item == "buy soap"'
PAPER_EMAIL = "x@y.com"

_BENCH_PBKDF2_ITERATIONS = 1_500
_BENCH_SCRYPT_N = 2**8

# Hops that make up one recipe execution, for transmission accounting.
_EXECUTION_PATHS = ("/list/items", "/callbacks/", "/dtap/execute/")

# Every XToken any bench topology ever minted, for confinement audits that
# span multiple deployments (parallels the process-wide wire log).
XTOKEN_REGISTRY: set[str] = set()


@dataclass
class RecipeHandle:
    recipe_id: str
    user_id: str
    trigger_token: str
    action_token: str
    action_function: str


class Topology:
    """A full local deployment driven over real HTTP."""

    def __init__(
        self,
        workdir: str | Path,
        *,
        protected: bool = True,
        clock=None,
        users: tuple[str, ...] = ("alice",),
        with_second_trigger: bool = False,
        label: str = "dtap",
    ):
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.protected = protected
        self.label = label
        self.clock = clock

        self.trigger = ShoppingListService(
            signing_enabled=protected,
            clock=clock,
            pbkdf2_iterations=_BENCH_PBKDF2_ITERATIONS,
        )
        self.action = EmailService(
            self.workdir / f"outbox-{label}.jsonl",
            verification_enabled=protected,
            clock=clock,
            pbkdf2_iterations=_BENCH_PBKDF2_ITERATIONS,
        )
        self.cloud = CloudService()
        self.hosts = [ServiceHost(self.trigger).start(), ServiceHost(self.action).start()]
        self.cloud_host = ServiceHost(self.cloud).start()
        self.hosts.append(self.cloud_host)
        self.cloud.base_url = self.cloud_host.base_url

        self.second_trigger: ShoppingListService | None = None
        if with_second_trigger:
            self.second_trigger = ShoppingListService(
                service_id="todolist2",
                signing_enabled=protected,
                clock=clock,
                pbkdf2_iterations=_BENCH_PBKDF2_ITERATIONS,
            )
            self.hosts.append(ServiceHost(self.second_trigger).start())

        # one trusted client per user, each with its own vault
        self.clients: dict[str, DtapClient] = {}
        for user in users:
            self.connect_user(user)
        self.client = self.clients[users[0]]

    def url_of(self, service) -> str:
        for host in self.hosts:
            if host.app is service:
                return host.base_url
        raise KeyError(service.service_id)

    def connect_user(self, user_id: str) -> None:
        password = "pw-" + user_id
        client = DtapClient(
            self.workdir / f"vault-{self.label}-{user_id}.bin",
            "bench-passphrase",
            cloud_url=self.cloud.base_url,
            scrypt_n=_BENCH_SCRYPT_N,
        )
        for service in filter(None, (self.trigger, self.action, self.second_trigger)):
            service.add_user(user_id, password)
            client.signup_channel(self.url_of(service))
            client.connect_channel(service.service_id, user_id, password)
        self.clients[user_id] = client
        XTOKEN_REGISTRY.update(self.xtoken_values())

    def make_recipe(
        self,
        user_id: str,
        *,
        trigger_function: str = "OnNewItem",
        action_function: str = "send_email",
        bindings: list[ParamBinding] | None = None,
        predicate: str | None = None,
        mode: str = "callback",
        poll_interval_s: int = 900,
        trigger_service: str | None = None,
    ) -> RecipeHandle:
        if bindings is None:
            bindings = [
                ParamBinding("to", literal=PAPER_EMAIL),
                ParamBinding("body", trigger_field="new_item"),
            ]
        recipe_id = self.clients[user_id].create_recipe(
            trigger_service or self.trigger.service_id,
            trigger_function,
            self.action.service_id,
            action_function,
            bindings,
            predicate_text=predicate,
            mode=mode,
            poll_interval_s=poll_interval_s,
        )
        # the cloud's knowledge of this recipe, as a compromised cloud would hold it
        recipe = self.cloud.get_recipe(recipe_id)
        return RecipeHandle(
            recipe_id=recipe_id,
            user_id=user_id,
            trigger_token=recipe.trigger.token,
            action_token=recipe.action.token,
            action_function=recipe.action.function,
        )

    # -- drivers ------------------------------------------------------------

    def add_item(self, user_id: str, text: str) -> tuple[int, dict]:
        return httpkit.request(
            "POST",
            self.url_of(self.trigger) + "/list/items",
            {"user_id": user_id, "text": text},
            source="user",
        )

    def poll_blob(self, handle: RecipeHandle) -> dict | None:
        status, body = httpkit.request(
            "GET",
            f"{self.url_of(self.trigger)}/dtap/trigger-grants/{handle.trigger_token}/poll",
            source="cloud",
        )
        return (body or {}).get("blob") if status == 200 else None

    def execute_directly(
        self,
        handle: RecipeHandle,
        blob: dict,
        params: dict[str, str] | None = None,
        route_function: str | None = None,
    ) -> tuple[int, dict]:
        """What a compromised cloud can always do: call execute itself."""
        return httpkit.request(
            "POST",
            f"{self.url_of(self.action)}/dtap/execute/{route_function or handle.action_function}",
            {
                "token": handle.action_token,
                "blob": blob,
                "params": params if params is not None else {"to": PAPER_EMAIL},
            },
            source="adversary",
        )

    def outbox_len(self) -> int:
        return self.action.outbox_len()

    def xtoken_values(self) -> set[str]:
        values: set[str] = set()
        for service in filter(None, (self.trigger, self.action, self.second_trigger)):
            values.update(service._xtokens.keys())
        return values

    def close(self) -> None:
        self.cloud.stop_poller()
        for host in self.hosts:
            host.stop()


# ---------------------------------------------------------------------------
# XToken confinement audit
# ---------------------------------------------------------------------------

_TOKEN_RUN_RE = re.compile(r"(?<![A-Za-z0-9_-])[A-Za-z0-9_-]{43}(?![A-Za-z0-9_-])")

XTOKEN_EXCHANGE_PATHS = ("/oauth/token", "/dtap/trigger-grants", "/dtap/action-grants")


def audit_xtoken_confinement(
    records: list[WireRecord], xtoken_values: set[str]
) -> list[dict]:
    """Return a violation per record that carries an XToken outside issuance."""
    violations = []
    for record in records:
        text = record.request_text + "\n" + record.response_text
        candidates = set(_TOKEN_RUN_RE.findall(text))
        leaked = candidates & xtoken_values
        if leaked and record.path not in XTOKEN_EXCHANGE_PATHS:
            violations.append(
                {
                    "path": record.path,
                    "url": record.url,
                    "source": record.source,
                    "tokens": sorted(leaked),
                }
            )
    return violations


# ---------------------------------------------------------------------------
# Attack suite
# ---------------------------------------------------------------------------


@dataclass
class ScenarioResult:
    scenario_id: str
    description: str
    expected: str
    actual: str | None
    outbox_delta: int
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.actual == self.expected and self.outbox_delta == 0

    def to_wire(self) -> dict:
        return {
            "scenario": self.scenario_id,
            "description": self.description,
            "expected": self.expected,
            "actual": self.actual,
            "outbox_delta": self.outbox_delta,
            "passed": self.passed,
        }


def _last_error(topology: Topology, recipe_id: str) -> str | None:
    outcome = topology.cloud.get_recipe(recipe_id).last_outcome or {}
    body = outcome.get("body") or {}
    return body.get("error_code")


def run_attack_suite(workdir: str | Path) -> dict:
    """Drive every compromised-cloud scenario against a live deployment."""
    started = time.perf_counter()
    clock = VirtualClock()
    mark = WIRE_LOG.mark()
    topology = Topology(
        Path(workdir),
        clock=clock,
        users=("alice",),
        with_second_trigger=True,
        label="attack",
    )
    try:
        report = _run_attack_scenarios(topology, clock)
        report["xtoken_violations"] = audit_xtoken_confinement(
            WIRE_LOG.since(mark), topology.xtoken_values()
        )
        report["passed"] = report["passed"] and not report["xtoken_violations"]
        report["elapsed_s"] = round(time.perf_counter() - started, 3)
        return report
    finally:
        topology.close()


def _run_attack_scenarios(topology: Topology, clock: VirtualClock) -> dict:
    results: list[ScenarioResult] = []
    controls: list[dict] = []

    r1 = topology.make_recipe("alice", predicate=PAPER_PREDICATE)
    r2 = topology.make_recipe(
        "alice",
        trigger_function="OnItemRemoved",
        action_function="send_email_1",
        bindings=[ParamBinding("p1", trigger_field="removed_item")],
    )
    r3 = topology.make_recipe(
        "alice",
        trigger_service="todolist2",
        action_function="send_email_2",
        bindings=[
            ParamBinding("p1", trigger_field="new_item"),
            ParamBinding("p2", literal="x"),
        ],
    )

    def control(label: str) -> None:
        before = topology.outbox_len()
        status, _ = topology.add_item("alice", "buy soap")
        controls.append(
            {
                "label": label,
                "executed": topology.outbox_len() - before,
                "status": status,
            }
        )

    def scenario(scenario_id, description, expected, run) -> None:
        before = topology.outbox_len()
        actual = run()
        results.append(
            ScenarioResult(
                scenario_id=scenario_id,
                description=description,
                expected=expected,
                actual=actual,
                outbox_delta=topology.outbox_len() - before,
            )
        )

    # honest execution before any attack; also primes r1's replay watermark
    control("pre")
    accepted_blob = topology.cloud.get_recipe(r1.recipe_id).last_blob

    def attack_replay():
        status, body = topology.execute_directly(r1, accepted_blob)
        return (body or {}).get("error_code")

    scenario(
        "A2",
        "replay of an already-accepted blob",
        ERR_TIMESTAMP_NOT_INCREASED,
        attack_replay,
    )

    def attack_spray():
        topology.cloud.set_adversarial_mode("spray")
        try:
            topology.add_item("alice", "buy soap")
        finally:
            topology.cloud.set_adversarial_mode("honest")
        return _last_error(topology, r1.recipe_id)

    scenario(
        "A1",
        "action call without a trigger (fabricated blob)",
        ERR_BAD_SIGNATURE,
        attack_spray,
    )

    def attack_stale():
        blob = topology.poll_blob(r1)
        clock.advance_ms(blob["ttl"] * 1000 + 31_000)
        status, body = topology.execute_directly(r1, blob)
        return (body or {}).get("error_code")

    scenario("A3", "stale blob past its TTL window", ERR_EXPIRED_BLOB, attack_stale)

    # outbox_delta for A4 counts only the adversarial submission, so run the
    # honest r2 priming before the measured window
    before_a4 = topology.outbox_len()
    topology.trigger.remove_item("alice", "warmup-item")
    controls.append(
        {"label": "r2-honest", "executed": topology.outbox_len() - before_a4, "status": 200}
    )
    foreign_blob = topology.cloud.get_recipe(r2.recipe_id).last_blob

    def attack_cross_function_direct():
        status, body = topology.execute_directly(r1, foreign_blob)
        return (body or {}).get("error_code")

    scenario(
        "A4",
        "blob of a different trigger function, same service",
        ERR_SCOPE_MISMATCH,
        attack_cross_function_direct,
    )

    before_a5 = topology.outbox_len()
    status, _ = httpkit.request(
        "POST",
        topology.url_of(topology.second_trigger) + "/list/items",
        {"user_id": "alice", "text": "buy soap"},
        source="user",
    )
    controls.append(
        {"label": "r3-honest", "executed": topology.outbox_len() - before_a5, "status": status}
    )
    cross_service_blob = topology.cloud.get_recipe(r3.recipe_id).last_blob

    def attack_cross_service():
        status, body = topology.execute_directly(r1, cross_service_blob)
        return (body or {}).get("error_code")

    scenario(
        "A5",
        "blob from a different trigger service",
        ERR_BAD_SIGNATURE,
        attack_cross_service,
    )

    def attack_tamper():
        topology.cloud.set_adversarial_mode("tamper")
        try:
            topology.add_item("alice", "buy soap")
        finally:
            topology.cloud.set_adversarial_mode("honest")
        return _last_error(topology, r1.recipe_id)

    scenario(
        "A6",
        "trigger data tampered in transit",
        ERR_BAD_SIGNATURE,
        attack_tamper,
    )

    def attack_params():
        blob = topology.poll_blob(r1)
        status, body = topology.execute_directly(
            r1, blob, params={"to": "mallory@evil.example"}
        )
        return (body or {}).get("error_code")

    scenario(
        "A7",
        "literal parameters altered at call time",
        ERR_PARAM_MISMATCH,
        attack_params,
    )

    def attack_route():
        blob = topology.poll_blob(r1)
        status, body = topology.execute_directly(
            r1, blob, params={"to": PAPER_EMAIL}, route_function="send_email_1"
        )
        return (body or {}).get("error_code")

    scenario(
        "A8",
        "call routed to a different action function",
        ERR_FUNCTION_MISMATCH,
        attack_route,
    )

    control("mid")

    def attack_predicate():
        topology.add_item("alice", "buy milk")
        return _last_error(topology, r1.recipe_id)

    scenario(
        "A9",
        "forwarding a blob whose predicate is false",
        ERR_PREDICATE_FALSE,
        attack_predicate,
    )

    retained_blob = topology.poll_blob(r1)
    topology.client.delete_recipe(r1.recipe_id)

    def attack_after_deletion():
        status, body = topology.execute_directly(r1, retained_blob)
        return (body or {}).get("error_code")

    scenario(
        "A10",
        "retained tokens used after recipe deletion",
        ERR_UNKNOWN_TOKEN,
        attack_after_deletion,
    )

    before_end = topology.outbox_len()
    topology.trigger.remove_item("alice", "final-check")
    controls.append(
        {"label": "end", "executed": topology.outbox_len() - before_end, "status": 200}
    )

    results.sort(key=lambda r: int(r.scenario_id[1:]))
    all_rejected = all(r.passed for r in results)
    controls_ok = all(c["executed"] == 1 for c in controls)
    return {
        "scenarios": [r.to_wire() for r in results],
        "controls": controls,
        "passed": all_rejected and controls_ok,
    }


# ---------------------------------------------------------------------------
# Microbenchmarks: storage and transmission
# ---------------------------------------------------------------------------


def _wide_bindings(param_count: int) -> list[ParamBinding]:
    bindings = [ParamBinding("p1", trigger_field="new_item")]
    for i in range(2, param_count + 1):
        bindings.append(ParamBinding(f"p{i}", literal=f"value-{i}"))
    return bindings


def _transmission_bytes_per_execution(
    topology: Topology, user_id: str, repeats: int
) -> float:
    totals = []
    for rep in range(repeats):
        mark = WIRE_LOG.mark()
        status, _ = topology.add_item(user_id, "buy soap")
        assert status == 200
        records = [
            r
            for r in WIRE_LOG.since(mark)
            if any(r.path.startswith(p) or r.path == p for p in _EXECUTION_PATHS)
        ]
        totals.append(sum(r.total_bytes for r in records))
    return statistics.mean(totals)


def run_microbench(workdir: str | Path, repeats: int = 5) -> dict:
    """Per-recipe storage overhead and per-execution transmission size."""
    workdir = Path(workdir)
    param_counts = list(range(1, 11))
    users = tuple(f"user{n}" for n in param_counts) + ("alice",)

    report: dict = {"storage": {}, "transmission": []}
    sizes: dict[str, dict[int, float]] = {"dtap": {}, "baseline": {}}

    for label, protected in (("dtap", True), ("baseline", False)):
        topology = Topology(
            workdir / label, protected=protected, users=users, label=label
        )
        try:
            if protected:
                trigger_before = topology.trigger.grant_state_bytes()
                action_before = topology.action.grant_state_bytes()
                topology.make_recipe("alice", predicate=PAPER_PREDICATE)
                trigger_delta = topology.trigger.grant_state_bytes() - trigger_before
                action_delta = topology.action.grant_state_bytes() - action_before
                report["storage"] = {
                    "trigger_grant_bytes": trigger_delta,
                    "action_grant_bytes": action_delta,
                    "per_recipe_bytes": trigger_delta + action_delta,
                    "xtoken_store_bytes": topology.trigger.xtoken_state_bytes()
                    + topology.action.xtoken_state_bytes(),
                }
            for n in param_counts:
                handle = topology.make_recipe(
                    f"user{n}",
                    action_function=f"send_email_{n}",
                    bindings=_wide_bindings(n),
                )
                topology.add_item(handle.user_id, "warmup")
                sizes[label][n] = _transmission_bytes_per_execution(
                    topology, handle.user_id, repeats
                )
        finally:
            topology.close()

    for n in param_counts:
        dtap_bytes = sizes["dtap"][n]
        base_bytes = sizes["baseline"][n]
        report["transmission"].append(
            {
                "params": n,
                "dtap_bytes": round(dtap_bytes, 1),
                "baseline_bytes": round(base_bytes, 1),
                "overhead_bytes": round(dtap_bytes - base_bytes, 1),
                "overhead_ratio": round((dtap_bytes - base_bytes) / base_bytes, 4),
            }
        )
    return report


# ---------------------------------------------------------------------------
# Macrobenchmarks: latency and throughput
# ---------------------------------------------------------------------------


def _latency_samples(topology: Topology, param_counts, reps: int) -> dict[int, list[float]]:
    samples: dict[int, list[float]] = {}
    for n in param_counts:
        user = f"lat{n}"
        handle = topology.make_recipe(
            user, action_function=f"send_email_{n}", bindings=_wide_bindings(n)
        )
        topology.add_item(user, "warmup")
        timings = []
        for rep in range(reps):
            start = time.perf_counter()
            status, _ = topology.add_item(user, f"item-{rep}")
            timings.append((time.perf_counter() - start) * 1000)
            assert status == 200
        samples[n] = timings
    return samples


def _throughput_run(topology: Topology, concurrency: int, total_events: int) -> dict:
    handles = [
        topology.make_recipe(
            f"load{i}",
            bindings=[
                ParamBinding("to", literal=PAPER_EMAIL),
                ParamBinding("body", trigger_field="new_item"),
            ],
        )
        for i in range(concurrency)
    ]
    per_lane = total_events // concurrency
    executed_before = topology.action.executed_count
    barrier = threading.Barrier(concurrency + 1)
    failures: list[str] = []

    def lane(handle: RecipeHandle) -> None:
        barrier.wait()
        for k in range(per_lane):
            status, _ = topology.add_item(handle.user_id, f"item-{k}")
            if status != 200:
                failures.append(f"{handle.user_id}: status {status}")

    threads = [
        threading.Thread(target=lane, args=(handle,), daemon=True) for handle in handles
    ]
    for thread in threads:
        thread.start()
    barrier.wait()
    start = time.perf_counter()
    for thread in threads:
        thread.join()
    elapsed = time.perf_counter() - start
    executed = topology.action.executed_count - executed_before
    return {
        "events": per_lane * concurrency,
        "executed": executed,
        "elapsed_s": round(elapsed, 3),
        "throughput_rps": round(per_lane * concurrency / elapsed, 2),
        "failures": failures,
    }


def run_macrobench(
    workdir: str | Path,
    *,
    concurrency: int = 200,
    total_events: int = 10_000,
    latency_reps: int = 25,
    param_counts=range(1, 11),
) -> dict:
    """End-to-end latency per parameter count, plus loaded throughput."""
    workdir = Path(workdir)
    param_counts = list(param_counts)
    latency: dict[str, dict[int, list[float]]] = {}
    throughput: dict[str, dict] = {}

    for label, protected in (("dtap", True), ("baseline", False)):
        lat_users = tuple(f"lat{n}" for n in param_counts)
        topology = Topology(
            workdir / f"lat-{label}", protected=protected, users=lat_users, label=label
        )
        try:
            latency[label] = _latency_samples(topology, param_counts, latency_reps)
        finally:
            topology.close()

    for label, protected in (("dtap", True), ("baseline", False)):
        load_users = tuple(f"load{i}" for i in range(concurrency))
        topology = Topology(
            workdir / f"tp-{label}", protected=protected, users=load_users, label=label
        )
        try:
            throughput[label] = _throughput_run(topology, concurrency, total_events)
        finally:
            topology.close()

    latency_rows = []
    for n in param_counts:
        dtap_median = statistics.median(latency["dtap"][n])
        base_median = statistics.median(latency["baseline"][n])
        latency_rows.append(
            {
                "params": n,
                "dtap_median_ms": round(dtap_median, 3),
                "baseline_median_ms": round(base_median, 3),
                "overhead_ms": round(dtap_median - base_median, 3),
            }
        )
    ratio = (
        throughput["dtap"]["throughput_rps"] / throughput["baseline"]["throughput_rps"]
    )
    return {
        "latency": latency_rows,
        "latency_executions_per_system": len(param_counts) * latency_reps,
        "throughput": {
            "concurrency": concurrency,
            "dtap": throughput["dtap"],
            "baseline": throughput["baseline"],
            "ratio": round(ratio, 4),
        },
    }

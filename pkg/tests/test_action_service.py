"""Action service: grant issuance, the eight-step verification, revocation."""

import threading

import pytest

from conftest import connect
from dtap.action_service import (
    ERR_BAD_SIGNATURE,
    ERR_EXPIRED_BLOB,
    ERR_FUNCTION_MISMATCH,
    ERR_HANDLER_FAILURE,
    ERR_PARAM_MISMATCH,
    ERR_PARAM_RESOLUTION,
    ERR_PREDICATE_FALSE,
    ERR_SCOPE_MISMATCH,
    ERR_TIMESTAMP_NOT_INCREASED,
    ERR_UNKNOWN_TOKEN,
    ActionService,
    ExecutionOutcome,
)
from dtap.channels import ShoppingListService
from dtap.crypto import generate_signing_key, make_identity
from dtap.errors import ScopeError, ValidationError, ConfigurationError
from dtap.httpkit import ServiceHost, request
from dtap.protocol import FunctionSpec, ParamBinding, ServiceIdentity

PAPER_BINDINGS = [
    ParamBinding("to", literal="x@y.com"),
    ParamBinding("body", trigger_field="new_item"),
]


@pytest.fixture
def trigger(clock):
    service = ShoppingListService(clock=clock, pbkdf2_iterations=1000)
    service.add_user("alice", "pw")
    return service


@pytest.fixture
def trigger_grant(trigger):
    xtoken = connect(trigger, functions={"OnNewItem"})
    grant, identity = trigger.issue_trigger_grant(xtoken.value, "OnNewItem")
    return grant


def fresh_blob(trigger, grant, text="buy soap"):
    trigger.add_item("alice", text)
    return trigger.poll(grant.token)


def issue(email, trigger, predicate=None, bindings=None, action_function="send_email"):
    xtoken = connect(email)
    return email.issue_action_grant(
        xtoken.value,
        trigger.identity,
        "OnNewItem",
        action_function,
        bindings if bindings is not None else PAPER_BINDINGS,
        predicate,
    )


class TestGrantIssuance:
    def test_paper_recipe_setup(self, email, trigger):
        grant = issue(email, trigger, predicate='new_item == "buy soap"')
        assert grant.action_function == "send_email"
        assert grant.trigger_function == "OnNewItem"
        assert grant.last_accepted_time == 0
        assert grant.trigger_service == trigger.identity

    def test_bindings_must_cover_schema(self, email, trigger):
        with pytest.raises(ValidationError):
            issue(email, trigger, bindings=[ParamBinding("to", literal="x@y.com")])

    def test_extra_binding_rejected(self, email, trigger):
        with pytest.raises(ValidationError):
            issue(
                email,
                trigger,
                bindings=PAPER_BINDINGS + [ParamBinding("cc", literal="z")],
            )

    def test_bindings_reordered_to_schema(self, email, trigger):
        grant = issue(email, trigger, bindings=list(reversed(PAPER_BINDINGS)))
        assert [b.param_name for b in grant.bindings] == ["to", "body"]

    def test_function_outside_xtoken_scope(self, email, trigger):
        xtoken = connect(email, functions={"send_email_1"})
        with pytest.raises(ScopeError):
            email.issue_action_grant(
                xtoken.value, trigger.identity, "OnNewItem", "send_email", PAPER_BINDINGS
            )

    def test_unknown_action_function(self, email, trigger):
        xtoken = connect(email)
        with pytest.raises(ScopeError):
            email.issue_action_grant(
                xtoken.value, trigger.identity, "OnNewItem", "format_disk", []
            )

    def test_forged_certificate_rejected(self, email, trigger):
        forged = ServiceIdentity(
            service_id="shoppinglist",
            verification_key=trigger.identity.verification_key,
            certificate=b"\x00" * 64,
        )
        xtoken = connect(email)
        with pytest.raises(ValidationError):
            email.issue_action_grant(
                xtoken.value, forged, "OnNewItem", "send_email", PAPER_BINDINGS
            )

    def test_bad_predicate_text_rejected(self, email, trigger):
        from dtap.errors import PredicateSyntaxError

        with pytest.raises(PredicateSyntaxError):
            issue(email, trigger, predicate="this is not (valid")


class TestExecutePipeline:
    """Each verification step, in the fixed order, first failure wins."""

    def test_happy_path_appends_email(self, email, trigger, trigger_grant):
        grant = issue(email, trigger)
        blob = fresh_blob(trigger, trigger_grant)
        outcome = email.execute("send_email", grant.token, blob, {"to": "x@y.com"})
        assert outcome.executed
        assert email.outbox()[-1]["body"] == "buy soap"
        assert grant.last_accepted_time == blob["time"]

    def test_1_unknown_token(self, email, trigger, trigger_grant):
        issue(email, trigger)
        blob = fresh_blob(trigger, trigger_grant)
        outcome = email.execute("send_email", "bogus", blob, {"to": "x@y.com"})
        assert outcome.error_code == ERR_UNKNOWN_TOKEN

    def test_1_revoked_token_reports_unknown(self, email, trigger, trigger_grant):
        grant = issue(email, trigger)
        email.revoke_grant(grant.token)
        blob = fresh_blob(trigger, trigger_grant)
        outcome = email.execute("send_email", grant.token, blob, {"to": "x@y.com"})
        assert outcome.error_code == ERR_UNKNOWN_TOKEN

    def test_2_tampered_data(self, email, trigger, trigger_grant):
        grant = issue(email, trigger)
        blob = fresh_blob(trigger, trigger_grant)
        blob["trigger_data"] = {"new_item": "malware"}
        outcome = email.execute("send_email", grant.token, blob, {"to": "x@y.com"})
        assert outcome.error_code == ERR_BAD_SIGNATURE

    def test_2_wrong_service_key(self, email, trigger_grant, clock):
        rogue = ShoppingListService(
            service_id="rogue", clock=clock, pbkdf2_iterations=1000
        )
        rogue.add_user("alice", "pw")
        grant = issue(email, rogue)  # grant pinned to rogue's key
        # blob genuinely signed by the first service
        blob_service = trigger_grant
        outcome = email.execute(
            "send_email",
            grant.token,
            {
                "time": clock.now_ms(),
                "ttl": 300,
                "trigger_scope": "OnNewItem",
                "trigger_data": {"new_item": "x"},
                "sig": "AA" * 32,
            },
            {"to": "x@y.com"},
        )
        assert outcome.error_code == ERR_BAD_SIGNATURE

    def test_2_malformed_blob(self, email, trigger):
        grant = issue(email, trigger)
        outcome = email.execute("send_email", grant.token, {"nope": 1}, {"to": "x@y.com"})
        assert outcome.error_code == ERR_BAD_SIGNATURE

    def test_3_replay_rejected(self, email, trigger, trigger_grant):
        grant = issue(email, trigger)
        blob = fresh_blob(trigger, trigger_grant)
        first = email.execute("send_email", grant.token, blob, {"to": "x@y.com"})
        second = email.execute("send_email", grant.token, blob, {"to": "x@y.com"})
        assert first.executed
        assert second.error_code == ERR_TIMESTAMP_NOT_INCREASED

    def test_3_older_blob_rejected(self, email, trigger, trigger_grant):
        grant = issue(email, trigger)
        old = fresh_blob(trigger, trigger_grant)
        new = fresh_blob(trigger, trigger_grant, "newer")
        assert email.execute("send_email", grant.token, new, {"to": "x@y.com"}).executed
        outcome = email.execute("send_email", grant.token, old, {"to": "x@y.com"})
        assert outcome.error_code == ERR_TIMESTAMP_NOT_INCREASED

    def test_4_expired_blob(self, email, trigger, trigger_grant, clock):
        grant = issue(email, trigger)
        blob = fresh_blob(trigger, trigger_grant)
        clock.advance_ms(blob["ttl"] * 1000 + email.clock_skew_ms + 1)
        outcome = email.execute("send_email", grant.token, blob, {"to": "x@y.com"})
        assert outcome.error_code == ERR_EXPIRED_BLOB

    def test_4_skew_window_tolerated(self, email, trigger, trigger_grant, clock):
        grant = issue(email, trigger)
        blob = fresh_blob(trigger, trigger_grant)
        clock.advance_ms(blob["ttl"] * 1000 + email.clock_skew_ms - 1000)
        outcome = email.execute("send_email", grant.token, blob, {"to": "x@y.com"})
        assert outcome.executed

    def test_5_scope_mismatch(self, email, trigger, clock):
        grant = issue(email, trigger)
        xtoken = connect(trigger, functions={"OnItemRemoved"})
        other_grant, _ = trigger.issue_trigger_grant(xtoken.value, "OnItemRemoved")
        trigger.remove_item("alice", "soap")
        blob = trigger.poll(other_grant.token)
        outcome = email.execute("send_email", grant.token, blob, {"to": "x@y.com"})
        assert outcome.error_code == ERR_SCOPE_MISMATCH

    def test_6_function_mismatch(self, email, trigger, trigger_grant):
        grant = issue(email, trigger)
        blob = fresh_blob(trigger, trigger_grant)
        outcome = email.execute("send_email_1", grant.token, blob, {"to": "x@y.com"})
        assert outcome.error_code == ERR_FUNCTION_MISMATCH

    def test_7_literal_param_altered(self, email, trigger, trigger_grant):
        grant = issue(email, trigger)
        blob = fresh_blob(trigger, trigger_grant)
        outcome = email.execute(
            "send_email", grant.token, blob, {"to": "mallory@evil.example"}
        )
        assert outcome.error_code == ERR_PARAM_MISMATCH

    def test_7_missing_and_extra_caller_params(self, email, trigger, trigger_grant):
        grant = issue(email, trigger)
        blob = fresh_blob(trigger, trigger_grant)
        assert (
            email.execute("send_email", grant.token, blob, {}).error_code
            == ERR_PARAM_MISMATCH
        )
        blob = fresh_blob(trigger, trigger_grant)
        outcome = email.execute(
            "send_email", grant.token, blob, {"to": "x@y.com", "bcc": "evil"}
        )
        assert outcome.error_code == ERR_PARAM_MISMATCH

    def test_7_literal_equality_is_byte_exact(self, email, trigger, trigger_grant):
        # NFC vs NFD spellings of the same text are different bytes
        composed = "café@y.com"
        decomposed = "café@y.com"
        grant = issue(
            email,
            trigger,
            bindings=[
                ParamBinding("to", literal=composed),
                ParamBinding("body", trigger_field="new_item"),
            ],
        )
        blob = fresh_blob(trigger, trigger_grant)
        outcome = email.execute("send_email", grant.token, blob, {"to": decomposed})
        assert outcome.error_code == ERR_PARAM_MISMATCH

    def test_7_trigger_field_missing_is_resolution_error(self, email, trigger, trigger_grant):
        grant = issue(
            email,
            trigger,
            bindings=[
                ParamBinding("to", literal="x@y.com"),
                ParamBinding("body", trigger_field="not_a_field"),
            ],
        )
        blob = fresh_blob(trigger, trigger_grant)
        outcome = email.execute("send_email", grant.token, blob, {"to": "x@y.com"})
        assert outcome.error_code == ERR_PARAM_RESOLUTION

    def test_8_predicate_false(self, email, trigger, trigger_grant):
        grant = issue(email, trigger, predicate='new_item == "buy soap"')
        blob = fresh_blob(trigger, trigger_grant, "buy milk")
        outcome = email.execute("send_email", grant.token, blob, {"to": "x@y.com"})
        assert outcome.error_code == ERR_PREDICATE_FALSE

    def test_8_predicate_error_rejects(self, email, trigger, trigger_grant):
        grant = issue(email, trigger, predicate="missing_field > 10")
        blob = fresh_blob(trigger, trigger_grant)
        outcome = email.execute("send_email", grant.token, blob, {"to": "x@y.com"})
        assert outcome.error_code == ERR_PREDICATE_FALSE

    def test_check_order_signature_before_timestamp(self, email, trigger, trigger_grant):
        # a blob that is both tampered and replayed reports the signature first
        grant = issue(email, trigger)
        blob = fresh_blob(trigger, trigger_grant)
        assert email.execute("send_email", grant.token, blob, {"to": "x@y.com"}).executed
        tampered = dict(blob)
        tampered["trigger_data"] = {"new_item": "malware"}
        outcome = email.execute("send_email", grant.token, tampered, {"to": "x@y.com"})
        assert outcome.error_code == ERR_BAD_SIGNATURE

    def test_check_order_function_before_params(self, email, trigger, trigger_grant):
        grant = issue(email, trigger)
        blob = fresh_blob(trigger, trigger_grant)
        outcome = email.execute("send_email_1", grant.token, blob, {"to": "wrong"})
        assert outcome.error_code == ERR_FUNCTION_MISMATCH


class TestSideEffectGating:
    def test_handler_invoked_iff_executed(self, clock, trigger, trigger_grant, tmp_path):
        calls = []
        service = ActionService("counter", clock=clock, pbkdf2_iterations=1000)
        service.register_action(
            FunctionSpec("record", "action", (("v", "string"),)),
            lambda params: calls.append(params) or {"ok": True},
        )
        service.add_user("alice", "pw")
        xtoken = connect(service)
        grant = service.issue_action_grant(
            xtoken.value,
            trigger.identity,
            "OnNewItem",
            "record",
            [ParamBinding("v", trigger_field="new_item")],
        )
        blob = fresh_blob(trigger, trigger_grant)
        assert service.execute("record", grant.token, blob, {}).executed
        assert len(calls) == 1
        # replay rejected, handler not invoked again
        assert (
            service.execute("record", grant.token, blob, {}).error_code
            == ERR_TIMESTAMP_NOT_INCREASED
        )
        assert len(calls) == 1

    def test_handler_failure_still_advances_watermark(
        self, clock, trigger, trigger_grant
    ):
        service = ActionService("fragile", clock=clock, pbkdf2_iterations=1000)
        service.register_action(
            FunctionSpec("explode", "action", ()), lambda params: 1 / 0
        )
        service.add_user("alice", "pw")
        xtoken = connect(service)
        grant = service.issue_action_grant(
            xtoken.value, trigger.identity, "OnNewItem", "explode", []
        )
        blob = fresh_blob(trigger, trigger_grant)
        outcome = service.execute("explode", grant.token, blob, {})
        assert outcome.error_code == ERR_HANDLER_FAILURE
        assert not outcome.executed
        assert grant.last_accepted_time == blob["time"]
        # the failed blob cannot be spent again
        retry = service.execute("explode", grant.token, blob, {})
        assert retry.error_code == ERR_TIMESTAMP_NOT_INCREASED


class TestReplayLinearization:
    def test_concurrent_submissions_single_winner(self, email, trigger, trigger_grant):
        grant = issue(email, trigger)
        blob = fresh_blob(trigger, trigger_grant)
        outcomes: list[ExecutionOutcome] = []
        lock = threading.Lock()

        def submit():
            outcome = email.execute("send_email", grant.token, blob, {"to": "x@y.com"})
            with lock:
                outcomes.append(outcome)

        threads = [threading.Thread(target=submit) for _ in range(20)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        executed = [o for o in outcomes if o.executed]
        rejected = [o for o in outcomes if o.error_code == ERR_TIMESTAMP_NOT_INCREASED]
        assert len(executed) == 1
        assert len(rejected) == 19


class TestRevocation:
    def test_revoke_then_execute_unknown(self, email, trigger, trigger_grant):
        grant = issue(email, trigger)
        email.revoke_grant(grant.token)
        blob = fresh_blob(trigger, trigger_grant)
        outcome = email.execute("send_email", grant.token, blob, {"to": "x@y.com"})
        assert outcome.error_code == ERR_UNKNOWN_TOKEN

    def test_double_revoke_idempotent(self, email, trigger):
        grant = issue(email, trigger)
        email.revoke_grant(grant.token)
        email.revoke_grant(grant.token)

    def test_sibling_grants_unaffected(self, email, trigger, trigger_grant):
        xtoken = connect(email)
        g1 = email.issue_action_grant(
            xtoken.value, trigger.identity, "OnNewItem", "send_email", PAPER_BINDINGS
        )
        g2 = email.issue_action_grant(
            xtoken.value, trigger.identity, "OnNewItem", "send_email", PAPER_BINDINGS
        )
        email.revoke_grant(g1.token)
        blob = fresh_blob(trigger, trigger_grant)
        assert email.execute("send_email", g2.token, blob, {"to": "x@y.com"}).executed


class TestRegistration:
    def test_registered_function_appears_in_scope_map(self, email):
        assert "send_email" in email.scope_map().function_names

    def test_duplicate_registration_rejected(self, email):
        with pytest.raises(ConfigurationError):
            email.register_action(
                FunctionSpec("send_email", "action", ()), lambda p: {}
            )

    def test_no_unauthenticated_invocation_route(self, email):
        # the only POST routes are grant issuance and the verified execute path
        post_routes = [p for (m, p) in email.route_surface() if m == "POST"]
        assert sorted(post_routes) == [
            "^/dtap/action-grants$",
            "^/dtap/execute/(?P<function>[^/]+)$",
            "^/oauth/authorize$",
            "^/oauth/token$",
        ]

    def test_direct_function_route_is_404(self, email):
        host = ServiceHost(email).start()
        try:
            status, _ = request(
                "POST", host.base_url + "/send_email", {"to": "x", "body": "y"}
            )
            assert status == 404
            status, _ = request(
                "POST", host.base_url + "/dtap/send_email", {"to": "x", "body": "y"}
            )
            assert status == 404
        finally:
            host.stop()


class TestWireSurface:
    def test_execute_status_codes(self, email, trigger, trigger_grant):
        host = ServiceHost(email).start()
        try:
            grant = issue(email, trigger, predicate='new_item == "buy soap"')
            blob = fresh_blob(trigger, trigger_grant)
            status, body = request(
                "POST",
                f"{host.base_url}/dtap/execute/send_email",
                {"token": grant.token, "blob": blob, "params": {"to": "x@y.com"}},
            )
            assert status == 200 and body["status"] == "executed"
            status, body = request(
                "POST",
                f"{host.base_url}/dtap/execute/send_email",
                {"token": grant.token, "blob": blob, "params": {"to": "x@y.com"}},
            )
            assert status == 403
            assert body["error_code"] == ERR_TIMESTAMP_NOT_INCREASED
            status, body = request(
                "POST",
                f"{host.base_url}/dtap/execute/send_email",
                {"token": "bogus", "blob": blob, "params": {}},
            )
            assert status == 401 and body["error_code"] == ERR_UNKNOWN_TOKEN
        finally:
            host.stop()

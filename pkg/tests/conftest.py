"""Shared fixtures: fast-KDF services and virtual clocks."""

import pytest

from dtap.channels import EmailService, ShoppingListService
from dtap.httpkit import VirtualClock

FAST_ITERS = 1_000


@pytest.fixture
def clock():
    return VirtualClock()


@pytest.fixture
def shopping(clock):
    service = ShoppingListService(clock=clock, pbkdf2_iterations=FAST_ITERS)
    service.add_user("alice", "pw")
    return service


@pytest.fixture
def email(clock, tmp_path):
    service = EmailService(
        tmp_path / "outbox.jsonl", clock=clock, pbkdf2_iterations=FAST_ITERS
    )
    service.add_user("alice", "pw")
    return service


def connect(service, user="alice", password="pw", functions=None):
    """Run the code flow directly against a service object."""
    code = service.authorize(user, password, functions)
    return service.exchange_code(code)

import pytest

from govsim.admission import KeyPair, sign_transaction
from govsim.ledger import TOKEN, Chain, ProtocolRules, Transaction


def keypair(name: str, seed: int = 0) -> KeyPair:
    return KeyPair.derive(name, seed)


def signed(kp: KeyPair, nonce: int, payload) -> Transaction:
    return sign_transaction(Transaction(kp.owner, nonce, payload), kp)


@pytest.fixture
def alice():
    return keypair("alice")


@pytest.fixture
def bob():
    return keypair("bob")


@pytest.fixture
def validator():
    return keypair("validator").owner


@pytest.fixture
def chain(alice, bob):
    return Chain({alice.owner: 100 * TOKEN, bob.owner: 0}, ProtocolRules())


ACCEPTANCE_VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

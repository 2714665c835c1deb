"""Restriction mechanisms: token locks, the scam list with taint, freezing."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable

from . import errors
from .ledger import (
    TOKEN,
    Account,
    ApplyContext,
    Chain,
    Payload,
    Transaction,
    WorldState,
    addr_field,
    int_field,
    payload_handler,
)

PURPOSES = ("masternode", "vote-deposit", "penalty")
MASTERNODE_THRESHOLD = 1000 * TOKEN

TAINT_FACTOR = Fraction(1, 2)
TAINT_FLOOR = Fraction(1, 100)


# ---------------------------------------------------------------------------
# token locker
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LockRecord:
    id: int
    owner: bytes
    amount: int
    purpose: str
    locked_at: int
    unlock_at: int | None  # None means never
    status: str = "active"  # active | released | burned


def lock_tokens(state: WorldState, owner: bytes, amount: int, purpose: str,
                unlock_at: int | None, at: int | None = None) -> LockRecord:
    """Move ``amount`` from spendable to locked; mutates ``state``."""
    if amount <= 0:
        raise errors.ZeroAmount("lock amount must be positive")
    if purpose not in PURPOSES:
        raise errors.MalformedPayload(f"unknown lock purpose {purpose!r}")
    if purpose == "penalty":
        unlock_at = None
    acct = state.account(owner)
    if acct.spendable < amount:
        raise errors.InsufficientSpendable(f"spendable {acct.spendable} < {amount}")
    record = LockRecord(state.next_lock_id, owner, amount, purpose,
                        state.height if at is None else at, unlock_at)
    state.put(Account(owner, acct.spendable - amount, acct.locked + amount, acct.nonce))
    state.locks[record.id] = record
    state.next_lock_id += 1
    return record


def release_or_burn(state: WorldState, record: LockRecord | int, action: str, at: int,
                    fraud: bool = False) -> WorldState:
    """Resolve a lock: ``release`` returns it to spendable, ``burn`` destroys it.

    Mutates and returns ``state``. Non-penalty deposits may only be burned on
    a fraud finding.
    """
    lock_id = record if isinstance(record, int) else record.id
    live = state.locks.get(lock_id)
    if live is None:
        raise errors.UnknownLock(str(lock_id))
    if live.status != "active":
        raise errors.AlreadyResolved(f"lock {lock_id} is {live.status}")
    acct = state.account(live.owner)
    if action == "release":
        if live.purpose == "penalty" or live.unlock_at is None:
            raise errors.NotYetUnlockable(f"lock {lock_id} never unlocks")
        if at < live.unlock_at:
            raise errors.NotYetUnlockable(f"lock {lock_id} unlocks at {live.unlock_at}")
        state.put(Account(live.owner, acct.spendable + live.amount,
                          acct.locked - live.amount, acct.nonce))
        state.locks[lock_id] = replace(live, status="released")
    elif action == "burn":
        if live.purpose != "penalty" and not fraud:
            raise errors.BurnNotAuthorized(f"lock {lock_id} is a {live.purpose} deposit")
        state.put(Account(live.owner, acct.spendable, acct.locked - live.amount, acct.nonce))
        state.burned += live.amount
        state.locks[lock_id] = replace(live, status="burned")
    else:
        raise errors.MalformedPayload(f"unknown lock action {action!r}")
    return state


def active_locks(state: WorldState, owner: bytes, purpose: str | None = None) -> list[LockRecord]:
    return [
        r for r in state.locks.values()
        if r.owner == owner and r.status == "active" and (purpose is None or r.purpose == purpose)
    ]


def masternode_eligible(state: WorldState, owner: bytes,
                        threshold: int = MASTERNODE_THRESHOLD) -> bool:
    return sum(r.amount for r in active_locks(state, owner, "masternode")) >= threshold


@payload_handler("lock", required=("amount", "purpose"), optional=("unlock_at", "owner"))
def _lock(state: WorldState, tx: Transaction, ctx: ApplyContext) -> None:
    purpose = tx.payload.get("purpose")
    owner = addr_field(tx.payload, "owner") if tx.payload.get("owner") else tx.sender
    if owner != tx.sender and purpose != "penalty":
        raise errors.NotPrivileged("only penalty locks may target another owner")
    unlock_at = tx.payload.get("unlock_at")
    if unlock_at is not None:
        unlock_at = int_field(tx.payload, "unlock_at")
    amount = tx.payload.get("amount")
    if isinstance(amount, bool) or not isinstance(amount, int):
        raise errors.MalformedPayload("amount must be an integer")
    rec = lock_tokens(state, owner, amount, purpose, unlock_at)
    ctx.emit("Lock", lock_id=rec.id, owner=owner, amount=rec.amount, purpose=purpose,
             unlock_at=rec.unlock_at)


@payload_handler("resolve", required=("lock_id", "action"), optional=("fraud",))
def _resolve(state: WorldState, tx: Transaction, ctx: ApplyContext) -> None:
    lock_id = int_field(tx.payload, "lock_id", minimum=1)
    action = tx.payload.get("action")
    live = state.locks.get(lock_id)
    if live is None:
        raise errors.UnknownLock(str(lock_id))
    if action == "release" and live.owner != tx.sender:
        raise errors.NotPrivileged("only the owner releases a lock")
    release_or_burn(state, lock_id, action, state.height, bool(tx.payload.get("fraud")))
    kind = "Release" if action == "release" else "LockBurn"
    ctx.emit(kind, lock_id=lock_id, owner=live.owner, amount=live.amount)


def lock_payload(amount: int, purpose: str, unlock_at: int | None = None,
                 owner: bytes | None = None) -> Payload:
    values = {"amount": amount, "purpose": purpose}
    if unlock_at is not None:
        values["unlock_at"] = unlock_at
    if owner is not None:
        values["owner"] = owner
    return Payload.of("lock", **values)


def resolve_payload(lock_id: int, action: str, fraud: bool = False) -> Payload:
    if fraud:
        return Payload.of("resolve", lock_id=lock_id, action=action, fraud=True)
    return Payload.of("resolve", lock_id=lock_id, action=action)


# ---------------------------------------------------------------------------
# scam list
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScamEntry:
    address: bytes
    label: str
    listed_at: int
    source: str  # on-chain-contract | off-chain-post
    delisted: bool = False

    def to_json(self) -> dict:
        doc = {"address": self.address.hex(), "label": self.label,
               "listed_at": self.listed_at, "source": self.source}
        if self.delisted:
            doc["delisted"] = True
        return doc


class ScamList:
    """Append-only log of listings and delistings."""

    SOURCES = ("on-chain-contract", "off-chain-post")

    def __init__(self):
        self.entries: list[ScamEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def listed(self) -> set[bytes]:
        state: dict[bytes, bool] = {}
        for entry in self.entries:
            state[entry.address] = not entry.delisted
        return {a for a, on in state.items() if on}

    def is_listed(self, address: bytes) -> bool:
        return address in self.listed()

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_json(), sort_keys=True) + "\n" for e in self.entries)


def flag_scam(scams: ScamList, address: bytes, label: str,
              source: str = "on-chain-contract", at: int = 0) -> ScamEntry:
    if source not in ScamList.SOURCES:
        raise ValueError(f"unknown listing source {source!r}")
    entry = ScamEntry(address, label, at, source)
    scams.entries.append(entry)
    return entry


def delist_scam(scams: ScamList, address: bytes, label: str, at: int = 0,
                source: str = "on-chain-contract") -> ScamEntry:
    entry = ScamEntry(address, label, at, source, delisted=True)
    scams.entries.append(entry)
    return entry


def transfer_edges(chains: Iterable[Chain]) -> list[tuple[bytes, bytes]]:
    """Sender-to-recipient edges of every value transfer on ``chains``."""
    edges = []
    for chain in chains:
        for events in chain.events:
            for ev in events:
                if ev.kind in ("Transfer", "CrossShardDebit"):
                    edges.append((bytes.fromhex(ev.attribute("sender")),
                                  bytes.fromhex(ev.attribute("to"))))
    return edges


def taint_scores(scams: ScamList, edges: Iterable[tuple[bytes, bytes]]) -> dict[bytes, Fraction]:
    """Best-path taint: listed addresses score 1, halving per outgoing hop.

    Scores under the floor are dropped, so propagation stops there.
    """
    out: dict[bytes, list[bytes]] = {}
    for src, dst in edges:
        out.setdefault(src, []).append(dst)
    scores: dict[bytes, Fraction] = {a: Fraction(1) for a in scams.listed()}
    queue = deque(sorted(scores))
    while queue:
        node = queue.popleft()
        nxt = scores[node] * TAINT_FACTOR
        if nxt < TAINT_FLOOR:
            continue
        for dst in out.get(node, ()):
            if dst not in scores:
                scores[dst] = nxt
                queue.append(dst)
    return scores


def taint_of(address: bytes, scams: ScamList,
             edges: Iterable[tuple[bytes, bytes]]) -> Fraction:
    return taint_scores(scams, edges).get(address, Fraction(0))


def flagged_transactions(chain: Chain, scams: ScamList) -> list[bytes]:
    """Ids of sealed transactions whose sender or recipient is listed."""
    listed = scams.listed()
    listed_hex = {a.hex() for a in listed}
    touched = []
    for block in chain.blocks:
        for tx in block.txs:
            if tx.sender in listed or tx.payload.get("to") in listed_hex:
                touched.append(tx.id)
    return touched


# ---------------------------------------------------------------------------
# network freezer
# ---------------------------------------------------------------------------

@dataclass
class FreezeState:
    """Emergency-stop flags consulted by every chain sharing this object."""

    privileged: frozenset[bytes] = frozenset()
    network_frozen: bool = False
    frozen_contracts: set[bytes] = field(default_factory=set)
    frozen_shards: set[int] = field(default_factory=set)
    frozen_by: bytes | None = None
    frozen_at: int | None = None


def set_freeze(fs: FreezeState, scope: str | tuple, on: bool, by: bytes,
               at: int = 0) -> FreezeState:
    """Toggle a freeze. ``scope`` is ``"network"``, ``("contract", addr)`` or
    ``("shard", index)``. Mutates and returns ``fs``."""
    if by not in fs.privileged:
        raise errors.NotPrivileged(f"{by.hex()[:12]} may not freeze")
    if scope == "network":
        fs.network_frozen = on
    elif isinstance(scope, tuple) and scope[0] == "contract":
        (fs.frozen_contracts.add if on else fs.frozen_contracts.discard)(scope[1])
    elif isinstance(scope, tuple) and scope[0] == "shard":
        (fs.frozen_shards.add if on else fs.frozen_shards.discard)(scope[1])
    else:
        raise ValueError(f"unknown freeze scope {scope!r}")
    fs.frozen_by = by if on else fs.frozen_by
    fs.frozen_at = at if on else fs.frozen_at
    return fs

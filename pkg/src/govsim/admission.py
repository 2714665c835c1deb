"""Signing, the transaction filter and the node's transaction pool.

Signature schemes sit behind a small registry. The default ``sim-mac``
scheme is transparent (public key equals private key, signature is
``sha256(private_key || tx.id)``); ``ed25519`` is a real asymmetric scheme
behind the same interface.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from . import errors
from .ledger import (
    PAYLOADS,
    ApplyContext,
    Block,
    Chain,
    Signature,
    Transaction,
    _apply_in_place,
    seal_block,
    sha256,
)

log = logging.getLogger(__name__)

DEFAULT_SCHEME = "sim-mac"
DEFAULT_POOL_CAPACITY = 10_000


class SimMacScheme:
    scheme_id = "sim-mac"

    def public_key(self, private_key: bytes) -> bytes:
        return private_key

    def sign(self, private_key: bytes, message: bytes) -> bytes:
        return sha256(private_key, message)

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        return sha256(public_key, message) == signature


class Ed25519Scheme:
    scheme_id = "ed25519"

    def public_key(self, private_key: bytes) -> bytes:
        key = Ed25519PrivateKey.from_private_bytes(private_key)
        return key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )

    def sign(self, private_key: bytes, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(private_key).sign(message)

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        except (InvalidSignature, ValueError):
            return False
        return True


SCHEMES: dict[str, Any] = {}


def register_scheme(scheme: Any) -> None:
    SCHEMES[scheme.scheme_id] = scheme


register_scheme(SimMacScheme())
register_scheme(Ed25519Scheme())


def _scheme(scheme_id: str):
    try:
        return SCHEMES[scheme_id]
    except KeyError:
        raise errors.UnknownScheme(scheme_id) from None


@dataclass(frozen=True)
class KeyPair:
    private_key: bytes = field(repr=False)
    public_key: bytes
    owner: bytes
    scheme_id: str = DEFAULT_SCHEME

    @classmethod
    def from_private(cls, private_key: bytes, scheme_id: str = DEFAULT_SCHEME) -> "KeyPair":
        public = _scheme(scheme_id).public_key(private_key)
        return cls(private_key, public, sha256(public), scheme_id)

    @classmethod
    def derive(cls, label: str, seed: int = 0, scheme_id: str = DEFAULT_SCHEME) -> "KeyPair":
        """Deterministic key pair for a named scenario identity."""
        secret = sha256(b"govsim:key:", seed.to_bytes(8, "big"), label.encode())
        return cls.from_private(secret, scheme_id)


def sign_transaction(draft: Transaction, keypair: KeyPair) -> Transaction:
    if draft.sender != keypair.owner:
        raise errors.SenderKeyMismatch(
            f"draft sender {draft.sender.hex()[:12]} is not key owner {keypair.owner.hex()[:12]}"
        )
    scheme = _scheme(keypair.scheme_id)
    value = scheme.sign(keypair.private_key, draft.id)
    return draft.with_signature(Signature(keypair.scheme_id, value))


def verify_transaction(tx: Transaction, public_key: bytes) -> bool:
    if tx.signature is None:
        return False
    scheme = _scheme(tx.signature.scheme_id)
    if sha256(public_key) != tx.sender:
        return False
    return scheme.verify(public_key, tx.id, tx.signature.value)


# ---------------------------------------------------------------------------
# filter policy
# ---------------------------------------------------------------------------

_OPS = {
    "max": lambda v, arg: isinstance(v, int) and v <= arg,
    "min": lambda v, arg: isinstance(v, int) and v >= arg,
    "in": lambda v, arg: v in arg,
    "not_in": lambda v, arg: v not in arg,
    "equals": lambda v, arg: v == arg,
    "max_len": lambda v, arg: len(str(v)) <= arg,
    "not_contains": lambda v, arg: arg not in str(v),
}


@dataclass(frozen=True)
class ContentRule:
    """Predicate on one payload field; absent fields pass."""

    id: str
    field: str
    op: str
    value: Any
    kinds: tuple[str, ...] = ()

    def __post_init__(self):
        if self.op not in _OPS:
            raise ValueError(f"unknown content operator {self.op!r}")

    def passes(self, tx: Transaction) -> bool:
        if self.kinds and tx.kind not in self.kinds:
            return True
        fields = tx.payload.as_dict()
        if self.field not in fields:
            return True
        value = self.value
        if self.op in ("in", "not_in") and isinstance(value, list):
            value = tuple(value)
        return bool(_OPS[self.op](fields[self.field], value))


@dataclass(frozen=True)
class KindSchema:
    required: tuple[str, ...]
    optional: tuple[str, ...] = ()


def default_schema() -> dict[str, KindSchema]:
    return {k: KindSchema(s.required, s.optional) for k, s in sorted(PAYLOADS.items())}


@dataclass(frozen=True)
class FilterPolicy:
    """Format and content checks a transaction must pass to enter a pool.

    ``restricted`` maps a payload kind to the only senders allowed to use it.
    """

    schema: Mapping[str, KindSchema]
    content_rules: tuple[ContentRule, ...] = ()
    require_signature: bool = True
    restricted: Mapping[str, frozenset[bytes]] = field(default_factory=dict)

    @classmethod
    def default(cls, **overrides: Any) -> "FilterPolicy":
        return cls(default_schema(), **overrides)

    @classmethod
    def from_json(cls, doc: Mapping[str, Any],
                  resolve: Any = bytes.fromhex) -> "FilterPolicy":
        schema = default_schema()
        if "schema" in doc:
            schema = {}
            for kind, spec in doc["schema"].items():
                if isinstance(spec, Mapping):
                    schema[kind] = KindSchema(tuple(spec.get("required", ())),
                                              tuple(spec.get("optional", ())))
                else:
                    schema[kind] = KindSchema(tuple(spec))
        rules = tuple(
            ContentRule(r["id"], r["field"], r["op"], r["value"], tuple(r.get("kinds", ())))
            for r in doc.get("content_rules", ())
        )
        restricted = {
            kind: frozenset(resolve(s) for s in senders)
            for kind, senders in doc.get("restricted", {}).items()
        }
        return cls(schema, rules, bool(doc.get("require_signature", True)), restricted)

    def to_json(self) -> dict[str, Any]:
        return {
            "schema": {k: {"required": list(s.required), "optional": list(s.optional)}
                       for k, s in sorted(self.schema.items())},
            "content_rules": [
                {"id": r.id, "field": r.field, "op": r.op, "value": r.value,
                 **({"kinds": list(r.kinds)} if r.kinds else {})}
                for r in self.content_rules
            ],
            "require_signature": self.require_signature,
            "restricted": {k: sorted(a.hex() for a in v) for k, v in sorted(self.restricted.items())},
        }

    def restrict(self, kind: str, senders: Iterable[bytes]) -> "FilterPolicy":
        restricted = dict(self.restricted)
        restricted[kind] = frozenset(senders)
        return FilterPolicy(self.schema, self.content_rules, self.require_signature, restricted)


def check_transaction(tx: Transaction, policy: FilterPolicy,
                      public_key: bytes | None) -> str | None:
    """Id of the first failing check in policy order, or ``None`` if clean."""
    if tx.signature is None:
        if policy.require_signature:
            return "Unsigned"
    else:
        if tx.signature.scheme_id not in SCHEMES:
            return "UnknownScheme"
        if public_key is None:
            return "UnknownSender"
        if not verify_transaction(tx, public_key):
            return "BadSignature"
    kind_schema = policy.schema.get(tx.kind)
    if kind_schema is None:
        return "UnknownKind"
    allowed = policy.restricted.get(tx.kind)
    if allowed is not None and tx.sender not in allowed:
        return "Unauthorized"
    names = set(tx.payload.names())
    if names - set(kind_schema.required) - set(kind_schema.optional):
        return "Unauthorized"
    if set(kind_schema.required) - names:
        return "MissingField"
    for rule in policy.content_rules:
        if not rule.passes(tx):
            return rule.id
    return None


@dataclass(frozen=True)
class Admission:
    admitted: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.admitted

    def __str__(self) -> str:
        return "admitted" if self.admitted else f"rejected({self.reason})"


class TransactionPool:
    """FIFO buffer of admitted transactions for one node.

    ``keys`` is the node's view of the key infrastructure (address to public
    key). ``admitted_ids`` remembers every id ever admitted.
    """

    def __init__(self, capacity: int = DEFAULT_POOL_CAPACITY,
                 keys: Mapping[bytes, bytes] | None = None, freeze: Any = None):
        self.capacity = capacity
        self.keys: dict[bytes, bytes] = dict(keys or {})
        self.freeze = freeze
        self.pending: OrderedDict[bytes, Transaction] = OrderedDict()
        self.admitted_ids: set[bytes] = set()

    def __len__(self) -> int:
        return len(self.pending)

    def __contains__(self, tx_id: bytes) -> bool:
        return tx_id in self.pending

    def register_key(self, address: bytes, public_key: bytes) -> None:
        self.keys[address] = public_key

    def peek(self, n: int) -> list[Transaction]:
        out = []
        for tx in self.pending.values():
            if len(out) >= n:
                break
            out.append(tx)
        return out

    def remove(self, tx_ids: Iterable[bytes]) -> None:
        for tx_id in tx_ids:
            self.pending.pop(tx_id, None)

    def snapshot(self) -> tuple[bytes, ...]:
        return tuple(self.pending)


def filter_and_admit(pool: TransactionPool, tx: Transaction,
                     policy: FilterPolicy) -> Admission:
    if pool.freeze is not None and pool.freeze.network_frozen:
        return Admission(False, "Frozen")
    if tx.id in pool.pending:
        return Admission(False, "Duplicate")
    reason = check_transaction(tx, policy, pool.keys.get(tx.sender))
    if reason is not None:
        log.debug("rejected %s: %s", tx.id.hex()[:12], reason)
        return Admission(False, reason)
    if len(pool.pending) >= pool.capacity:
        raise errors.PoolFull(f"pool holds {pool.capacity} transactions")
    pool.pending[tx.id] = tx
    pool.admitted_ids.add(tx.id)
    return Admission(True)


@dataclass
class DrainResult:
    block: Block
    dropped: list[tuple[Transaction, str]]


def seal_pending(chain: Chain, pool: TransactionPool, validator: bytes,
                 limit: int | None = None) -> DrainResult:
    """Seal the oldest pending transactions that still apply cleanly.

    Transactions that fail against the current state are dropped from the
    pool with their error code. A frozen chain raises before the pool is
    touched.
    """
    if chain.frozen:
        raise errors.Frozen("all on-chain business is suspended")
    rules = chain.rules_for(chain.height + 1)
    window = pool.peek(min(limit or rules.max_block_txs, rules.max_block_txs))
    work = chain.state.copy()
    work.height = chain.height + 1
    accepted: list[Transaction] = []
    dropped: list[tuple[Transaction, str]] = []
    for index, tx in enumerate(window):
        probe = Block(work.height, chain.tip.hash, (tx,), validator, chain.shard)
        violation = rules.structural_violation(probe)
        if violation:
            dropped.append((tx, violation))
            continue
        trial = work.copy()
        try:
            _apply_in_place(trial, tx, ApplyContext(tx, len(accepted), chain.freeze, []))
        except errors.GovSimError as exc:
            dropped.append((tx, exc.code))
            continue
        work = trial
        accepted.append(tx)
    block = seal_block(chain, accepted, validator)
    pool.remove(tx.id for tx in accepted)
    pool.remove(tx.id for tx, _ in dropped)
    return DrainResult(block, dropped)

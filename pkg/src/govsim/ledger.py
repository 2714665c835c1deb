"""Ledger state machine: amounts, transactions, blocks, rule sets and chains.

Token amounts are plain ``int`` base units (``TOKEN`` base units per whole
token). Every state mutation happens on a private copy of a
:class:`WorldState`, so callers always see either the old state or the fully
advanced one.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field, fields as dc_fields, is_dataclass
from decimal import Decimal, InvalidOperation
from enum import Enum
from functools import cached_property
from typing import Any, Callable, Iterable, Mapping, Sequence

from . import errors
from .observability import Event

log = logging.getLogger(__name__)

TOKEN = 1000
MAX_AMOUNT = 2**64 - 1
ZERO_HASH = bytes(32)


# ---------------------------------------------------------------------------
# amounts
# ---------------------------------------------------------------------------

def tokens(value: int | str | Decimal) -> int:
    """Convert a whole-or-decimal token quantity to base units, exactly.

    >>> tokens("72002454.768")
    72002454768
    """
    if isinstance(value, bool):
        raise ValueError("boolean is not a token amount")
    if isinstance(value, int):
        units = value * TOKEN
    else:
        try:
            dec = Decimal(str(value))
        except InvalidOperation as exc:
            raise ValueError(f"not a token amount: {value!r}") from exc
        scaled = dec * TOKEN
        if scaled != scaled.to_integral_value():
            raise ValueError(f"more than 3 fractional digits: {value!r}")
        units = int(scaled)
    if units < 0:
        raise ValueError(f"negative amount: {value!r}")
    return check_amount(units)


def format_amount(units: int) -> str:
    """Render base units as a decimal token string without trailing zeros."""
    whole, frac = divmod(units, TOKEN)
    if not frac:
        return str(whole)
    return f"{whole}.{frac:03d}".rstrip("0")


def check_amount(units: int) -> int:
    if units < 0:
        raise errors.InsufficientSpendable(f"negative amount {units}")
    if units > MAX_AMOUNT:
        raise errors.Overflow(f"{units} exceeds {MAX_AMOUNT}")
    return units


def checked_add(a: int, b: int) -> int:
    return check_amount(a + b)


# ---------------------------------------------------------------------------
# hashing and canonical encoding
# ---------------------------------------------------------------------------

def sha256(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        h.update(part)
    return h.digest()


def system_address(label: str) -> bytes:
    """Deterministic address for engine-owned accounts (escrow, pools)."""
    return sha256(b"govsim:system:", label.encode())


ESCROW = system_address("cross-shard-escrow")


def home_shard(address: bytes, shard_count: int) -> int:
    """Static home shard of an address: hash(address) mod k."""
    return int.from_bytes(sha256(address)[:8], "big") % shard_count


def to_jsonable(obj: Any) -> Any:
    """Reduce engine values to JSON-compatible data (bytes become hex)."""
    if isinstance(obj, (bytes, bytearray)):
        return bytes(obj).hex()
    if isinstance(obj, Enum):
        return obj.value
    if is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dc_fields(obj)}
    if isinstance(obj, Mapping):
        return {
            (k.hex() if isinstance(k, bytes) else str(k)): to_jsonable(v)
            for k, v in obj.items()
        }
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(to_jsonable(v) for v in obj)
    return obj


def canonical_json(obj: Any) -> bytes:
    return json.dumps(
        to_jsonable(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=True
    ).encode()


def _reject_float(text: str):
    raise errors.MalformedTransaction(f"float not allowed in payload: {text}")


# ---------------------------------------------------------------------------
# transactions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Payload:
    """A typed state-change request: ``kind`` plus sorted named fields."""

    kind: str
    fields: tuple[tuple[str, Any], ...] = ()

    @classmethod
    def of(cls, kind: str, **values: Any) -> "Payload":
        return cls(kind, tuple(sorted((k, _freeze_value(v)) for k, v in values.items())))

    def get(self, name: str, default: Any = None) -> Any:
        for key, value in self.fields:
            if key == name:
                return value
        return default

    def names(self) -> list[str]:
        return [k for k, _ in self.fields]

    def as_dict(self) -> dict[str, Any]:
        return {k: _thaw_value(v) for k, v in self.fields}

    def encode(self) -> bytes:
        return canonical_json({"kind": self.kind, "fields": self.as_dict()})

    @classmethod
    def decode(cls, raw: bytes) -> "Payload":
        doc = json.loads(raw.decode("ascii"), parse_float=_reject_float)
        if not isinstance(doc, dict) or set(doc) != {"kind", "fields"}:
            raise errors.MalformedTransaction("payload must carry kind and fields")
        if not isinstance(doc["kind"], str) or not isinstance(doc["fields"], dict):
            raise errors.MalformedTransaction("bad payload structure")
        return cls.of(doc["kind"], **doc["fields"])


def _freeze_value(value: Any) -> Any:
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, dict):
        return tuple(sorted((str(k), _freeze_value(v)) for k, v in value.items()))
    if isinstance(value, (list, tuple)):
        return ("__list__",) + tuple(_freeze_value(v) for v in value)
    return value


def _thaw_value(value: Any) -> Any:
    if isinstance(value, tuple):
        if value and value[0] == "__list__":
            return [_thaw_value(v) for v in value[1:]]
        return {k: _thaw_value(v) for k, v in value}
    return value


def addr_field(payload: Payload, name: str) -> bytes:
    raw = payload.get(name)
    try:
        out = bytes.fromhex(raw)
    except (TypeError, ValueError) as exc:
        raise errors.MalformedPayload(f"{name} is not a hex address") from exc
    if len(out) != 32 or raw != out.hex():
        raise errors.MalformedPayload(f"{name} must be 32 lowercase-hex bytes")
    return out


def int_field(payload: Payload, name: str, *, minimum: int = 0) -> int:
    value = payload.get(name)
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise errors.MalformedPayload(f"{name} must be an integer >= {minimum}")
    return value


@dataclass(frozen=True)
class Signature:
    scheme_id: str
    value: bytes


@dataclass(frozen=True)
class Transaction:
    sender: bytes
    nonce: int
    payload: Payload
    signature: Signature | None = None

    @cached_property
    def signing_bytes(self) -> bytes:
        return canonical_json(
            {"sender": self.sender, "nonce": self.nonce, "payload": self.payload.encode().decode()}
        )

    @cached_property
    def id(self) -> bytes:
        return sha256(b"govsim:tx:", self.signing_bytes)

    @property
    def kind(self) -> str:
        return self.payload.kind

    def with_signature(self, signature: Signature | None) -> "Transaction":
        return Transaction(self.sender, self.nonce, self.payload, signature)

    # Wire format: magic | sender | nonce u64 | len u32 | payload | len u8 |
    # scheme | len u16 | signature. from_bytes accepts canonical input only.
    _MAGIC = b"GTX1"

    def to_bytes(self) -> bytes:
        payload = self.payload.encode()
        scheme = self.signature.scheme_id.encode() if self.signature else b""
        sig = self.signature.value if self.signature else b""
        return b"".join(
            [
                self._MAGIC,
                self.sender,
                struct.pack(">QI", self.nonce, len(payload)),
                payload,
                struct.pack(">B", len(scheme)),
                scheme,
                struct.pack(">H", len(sig)),
                sig,
            ]
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Transaction":
        try:
            if raw[:4] != cls._MAGIC:
                raise errors.MalformedTransaction("bad magic")
            sender = raw[4:36]
            nonce, plen = struct.unpack(">QI", raw[36:48])
            pos = 48
            payload = Payload.decode(raw[pos:pos + plen])
            pos += plen
            (slen,) = struct.unpack(">B", raw[pos:pos + 1])
            scheme = raw[pos + 1:pos + 1 + slen].decode("ascii")
            pos += 1 + slen
            (siglen,) = struct.unpack(">H", raw[pos:pos + 2])
            sig = raw[pos + 2:pos + 2 + siglen]
            if len(sender) != 32 or len(sig) != siglen:
                raise errors.MalformedTransaction("truncated")
        except errors.MalformedTransaction:
            raise
        except (struct.error, UnicodeDecodeError, ValueError, TypeError) as exc:
            raise errors.MalformedTransaction(str(exc)) from exc
        signature = Signature(scheme, sig) if (slen or siglen) else None
        tx = cls(sender, nonce, payload, signature)
        if tx.to_bytes() != raw:
            raise errors.MalformedTransaction("non-canonical encoding")
        return tx


def transfer(to: bytes, amount: int, shard: int | None = None) -> Payload:
    if shard is None:
        return Payload.of("transfer", to=to, amount=amount)
    return Payload.of("transfer", to=to, amount=amount, shard=shard)


def burn(amount: int) -> Payload:
    return Payload.of("burn", amount=amount)


def call(contract: bytes, method: str, args: dict | None = None,
         emit: dict | None = None) -> Payload:
    values: dict[str, Any] = {"contract": contract, "method": method}
    if args:
        values["args"] = args
    if emit:
        values["emit"] = emit
    return Payload.of("call", **values)


# ---------------------------------------------------------------------------
# world state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Account:
    address: bytes
    spendable: int = 0
    locked: int = 0
    nonce: int = 0

    @property
    def holding(self) -> int:
        return self.spendable + self.locked


@dataclass(frozen=True)
class CrossShardRecord:
    xid: str
    sender: bytes
    to: bytes
    amount: int
    source: int
    target: int
    status: str  # escrowed | credited | receipted | refunded


@dataclass
class WorldState:
    """Everything a replay from genesis must reproduce.

    Values stored in the maps are immutable records; :meth:`copy` only
    duplicates the containers.
    """

    accounts: dict[bytes, Account] = field(default_factory=dict)
    height: int = 0
    shard: int = 0
    shard_count: int = 1
    genesis_supply: int = 0
    burned: int = 0
    minted: int = 0
    exported: int = 0
    locks: dict[int, Any] = field(default_factory=dict)
    next_lock_id: int = 1
    proposals: dict[int, Any] = field(default_factory=dict)
    ballots: dict[int, dict[bytes, Any]] = field(default_factory=dict)
    delegations: dict[int, dict[bytes, bytes]] = field(default_factory=dict)
    foreign_tokens: dict[str, dict[bytes, int]] = field(default_factory=dict)
    foreign_issued: dict[str, int] = field(default_factory=dict)
    relayed: dict[str, Any] = field(default_factory=dict)
    crossshard: dict[str, CrossShardRecord] = field(default_factory=dict)

    @classmethod
    def from_allocation(cls, alloc: Mapping[bytes, int], *, shard: int = 0,
                        shard_count: int = 1) -> "WorldState":
        state = cls(shard=shard, shard_count=shard_count)
        for address, amount in alloc.items():
            state.accounts[address] = Account(address, check_amount(amount))
        state.genesis_supply = check_amount(sum(alloc.values()))
        return state

    def copy(self) -> "WorldState":
        return WorldState(
            accounts=dict(self.accounts),
            height=self.height,
            shard=self.shard,
            shard_count=self.shard_count,
            genesis_supply=self.genesis_supply,
            burned=self.burned,
            minted=self.minted,
            exported=self.exported,
            locks=dict(self.locks),
            next_lock_id=self.next_lock_id,
            proposals=dict(self.proposals),
            ballots={k: dict(v) for k, v in self.ballots.items()},
            delegations={k: dict(v) for k, v in self.delegations.items()},
            foreign_tokens={k: dict(v) for k, v in self.foreign_tokens.items()},
            foreign_issued=dict(self.foreign_issued),
            relayed=dict(self.relayed),
            crossshard=dict(self.crossshard),
        )

    def account(self, address: bytes) -> Account:
        return self.accounts.get(address) or Account(address)

    def spendable(self, address: bytes) -> int:
        return self.account(address).spendable

    def locked(self, address: bytes) -> int:
        return self.account(address).locked

    def holding(self, address: bytes) -> int:
        return self.account(address).holding

    def total_supply(self) -> int:
        return sum(a.spendable + a.locked for a in self.accounts.values())

    def expected_supply(self) -> int:
        return self.genesis_supply + self.minted - self.exported - self.burned

    def put(self, account: Account) -> None:
        check_amount(account.spendable)
        check_amount(account.locked)
        self.accounts[account.address] = account

    def credit(self, address: bytes, amount: int) -> None:
        acct = self.account(address)
        self.put(Account(address, checked_add(acct.spendable, amount), acct.locked, acct.nonce))

    def debit(self, address: bytes, amount: int) -> None:
        acct = self.account(address)
        if acct.spendable < amount:
            raise errors.InsufficientSpendable(
                f"{address.hex()[:12]} has {acct.spendable}, needs {amount}"
            )
        self.put(Account(address, acct.spendable - amount, acct.locked, acct.nonce))

    def move(self, src: bytes, dst: bytes, amount: int) -> None:
        if self.spendable(src) < amount:
            raise errors.InsufficientSpendable(
                f"{src.hex()[:12]} has {self.spendable(src)}, needs {amount}"
            )
        checked_add(self.spendable(dst), amount)
        self.debit(src, amount)
        self.credit(dst, amount)

    def canonical_bytes(self) -> bytes:
        return canonical_json(self)

    def digest(self) -> bytes:
        return sha256(self.canonical_bytes())


# ---------------------------------------------------------------------------
# payload handlers
# ---------------------------------------------------------------------------

class ApplyContext:
    """Per-transaction execution context passed to payload handlers."""

    def __init__(self, tx: Transaction, tx_index: int, freeze: Any, events: list[Event]):
        self.tx = tx
        self.tx_index = tx_index
        self.freeze = freeze
        self._events = events
        self._pending: list[Event] = []
        self.height = 0

    def emit(self, kind: str, **attributes: Any) -> None:
        attrs = tuple((k, to_jsonable(v)) for k, v in attributes.items())
        self._pending.append(Event(self.height, self.tx.id, kind, attrs, self.tx_index))

    def commit(self) -> None:
        self._events.extend(self._pending)


Handler = Callable[[WorldState, Transaction, ApplyContext], None]


@dataclass(frozen=True)
class PayloadSpec:
    kind: str
    required: tuple[str, ...]
    optional: tuple[str, ...]
    handler: Handler


PAYLOADS: dict[str, PayloadSpec] = {}


def payload_handler(kind: str, required: Sequence[str] = (), optional: Sequence[str] = ()):
    """Register the state transition for a payload kind."""

    def decorate(fn: Handler) -> Handler:
        PAYLOADS[kind] = PayloadSpec(kind, tuple(required), tuple(optional), fn)
        return fn

    return decorate


def _halted(freeze: Any, shard: int) -> bool:
    if freeze is None:
        return False
    return bool(freeze.network_frozen or shard in freeze.frozen_shards)


def _apply_in_place(state: WorldState, tx: Transaction, ctx: ApplyContext) -> None:
    if _halted(ctx.freeze, state.shard):
        raise errors.Frozen("network is frozen")
    spec = PAYLOADS.get(tx.payload.kind)
    if spec is None:
        raise errors.UnknownPayload(tx.payload.kind)
    names = set(tx.payload.names())
    missing = [n for n in spec.required if n not in names]
    if missing:
        raise errors.MalformedPayload(f"{tx.kind} missing {', '.join(missing)}")
    acct = state.account(tx.sender)
    if acct.nonce != tx.nonce:
        raise errors.NonceMismatch(f"expected nonce {acct.nonce}, got {tx.nonce}")
    ctx.height = state.height
    spec.handler(state, tx, ctx)
    acct = state.account(tx.sender)
    state.put(Account(acct.address, acct.spendable, acct.locked, acct.nonce + 1))
    ctx.commit()


def apply_transaction(state: WorldState, tx: Transaction, freeze: Any = None,
                      events: list[Event] | None = None) -> WorldState:
    """Return the state after ``tx``; ``state`` itself is never modified."""
    work = state.copy()
    sink: list[Event] = []
    _apply_in_place(work, tx, ApplyContext(tx, 0, freeze, sink))
    if events is not None:
        events.extend(sink)
    return work


@payload_handler("transfer", required=("to", "amount"), optional=("shard",))
def _transfer(state: WorldState, tx: Transaction, ctx: ApplyContext) -> None:
    to = addr_field(tx.payload, "to")
    amount = int_field(tx.payload, "amount")
    target = tx.payload.get("shard")
    if target is None:
        target = home_shard(to, state.shard_count) if state.shard_count > 1 else state.shard
    elif isinstance(target, bool) or not isinstance(target, int):
        raise errors.MalformedPayload("shard must be an integer")
    if not 0 <= target < state.shard_count:
        raise errors.UnknownShard(f"shard {target} not in 0..{state.shard_count - 1}")
    if target == state.shard:
        state.move(tx.sender, to, amount)
        ctx.emit("Transfer", sender=tx.sender, to=to, amount=amount)
        return
    # Cross-shard: park the amount in escrow until the target credits it.
    state.move(tx.sender, ESCROW, amount)
    xid = tx.id.hex()
    state.crossshard[xid] = CrossShardRecord(
        xid, tx.sender, to, amount, state.shard, target, "escrowed"
    )
    ctx.emit("CrossShardDebit", xid=xid, sender=tx.sender, to=to, amount=amount,
             source=state.shard, target=target)


@payload_handler("burn", required=("amount",))
def _burn(state: WorldState, tx: Transaction, ctx: ApplyContext) -> None:
    amount = int_field(tx.payload, "amount")
    state.debit(tx.sender, amount)
    state.burned += amount
    ctx.emit("Burn", owner=tx.sender, amount=amount)


@payload_handler("call", required=("contract", "method"), optional=("args", "emit"))
def _call(state: WorldState, tx: Transaction, ctx: ApplyContext) -> None:
    contract = addr_field(tx.payload, "contract")
    if ctx.freeze is not None and contract in ctx.freeze.frozen_contracts:
        raise errors.ContractFrozen(contract.hex())
    method = tx.payload.get("method")
    ctx.emit("Call", contract=contract, method=method, caller=tx.sender)
    emit = tx.payload.as_dict().get("emit")
    if emit is not None:
        if not isinstance(emit, dict) or not isinstance(emit.get("kind"), str):
            raise errors.MalformedPayload("emit needs a kind")
        attrs = emit.get("attributes") or {}
        if not isinstance(attrs, dict):
            raise errors.MalformedPayload("emit attributes must be an object")
        ctx.emit(emit["kind"], **attrs)


@payload_handler("xcredit", required=("xid", "to", "amount", "source"))
def _xcredit(state: WorldState, tx: Transaction, ctx: ApplyContext) -> None:
    xid = tx.payload.get("xid")
    if xid in state.crossshard:
        raise errors.AlreadyResolved(f"cross-shard {xid} already credited")
    to = addr_field(tx.payload, "to")
    amount = int_field(tx.payload, "amount")
    source = int_field(tx.payload, "source")
    state.credit(to, amount)
    state.minted += amount
    state.crossshard[xid] = CrossShardRecord(xid, tx.sender, to, amount, source,
                                             state.shard, "credited")
    ctx.emit("CrossShardCredit", xid=xid, to=to, amount=amount, source=source)


def _escrowed(state: WorldState, xid: Any) -> CrossShardRecord:
    rec = state.crossshard.get(xid)
    if rec is None:
        raise errors.MalformedPayload(f"unknown cross-shard id {xid}")
    if rec.status != "escrowed":
        raise errors.AlreadyResolved(f"cross-shard {xid} is {rec.status}")
    return rec


@payload_handler("xreceipt", required=("xid",))
def _xreceipt(state: WorldState, tx: Transaction, ctx: ApplyContext) -> None:
    rec = _escrowed(state, tx.payload.get("xid"))
    state.debit(ESCROW, rec.amount)
    state.exported += rec.amount
    state.crossshard[rec.xid] = _replace_status(rec, "receipted")
    ctx.emit("CrossShardReceipt", xid=rec.xid, amount=rec.amount, target=rec.target)


@payload_handler("xrefund", required=("xid",), optional=("reason",))
def _xrefund(state: WorldState, tx: Transaction, ctx: ApplyContext) -> None:
    rec = _escrowed(state, tx.payload.get("xid"))
    state.move(ESCROW, rec.sender, rec.amount)
    state.crossshard[rec.xid] = _replace_status(rec, "refunded")
    ctx.emit("CrossShardRefund", xid=rec.xid, sender=rec.sender, amount=rec.amount)


def _replace_status(rec: CrossShardRecord, status: str) -> CrossShardRecord:
    return CrossShardRecord(rec.xid, rec.sender, rec.to, rec.amount, rec.source,
                            rec.target, status)


# ---------------------------------------------------------------------------
# protocol rules
# ---------------------------------------------------------------------------

def _pred_base(block: "Block") -> str | None:
    return None


def _pred_no_burn(block: "Block") -> str | None:
    return "BurnForbidden" if any(tx.kind == "burn" for tx in block.txs) else None


def _pred_no_calls(block: "Block") -> str | None:
    return "CallForbidden" if any(tx.kind == "call" for tx in block.txs) else None


def _pred_transfers_only(block: "Block") -> str | None:
    ok = {"transfer", "xcredit", "xreceipt", "xrefund"}
    return "NonTransfer" if any(tx.kind not in ok for tx in block.txs) else None


RULE_CATALOG: dict[str, Callable[["Block"], str | None]] = {
    "base": _pred_base,
    "no-burn": _pred_no_burn,
    "no-calls": _pred_no_calls,
    "transfers-only": _pred_transfers_only,
}


@dataclass(frozen=True)
class ProtocolRules:
    version: int = 1
    max_block_txs: int = 10
    validity_predicate: str = "base"

    def __post_init__(self):
        if self.validity_predicate not in RULE_CATALOG:
            raise errors.UnknownRuleSet(self.validity_predicate)

    def structural_violation(self, block: "Block") -> str | None:
        """Rule id of the first structural rule ``block`` breaks, if any."""
        if len(block.txs) > self.max_block_txs:
            return "MaxTxs"
        return RULE_CATALOG[self.validity_predicate](block)


# ---------------------------------------------------------------------------
# blocks and chains
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Block:
    height: int
    parent_hash: bytes
    txs: tuple[Transaction, ...]
    validator: bytes
    shard: int = 0

    def to_bytes(self) -> bytes:
        body = b"".join(
            struct.pack(">I", len(raw)) + raw for raw in (tx.to_bytes() for tx in self.txs)
        )
        return (
            b"GBK1"
            + struct.pack(">QI", self.height, self.shard)
            + self.parent_hash
            + self.validator
            + struct.pack(">I", len(self.txs))
            + body
        )

    @cached_property
    def hash(self) -> bytes:
        return sha256(self.to_bytes())


@dataclass(frozen=True)
class Validity:
    valid: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.valid


def _execute_block(block: Block, state: WorldState, rules: ProtocolRules,
                   freeze: Any = None) -> tuple[WorldState, list[Event]]:
    violation = rules.structural_violation(block)
    if violation:
        raise errors.RuleViolation(violation, f"block {block.height}")
    work = state.copy()
    work.height = block.height
    events: list[Event] = []
    for index, tx in enumerate(block.txs):
        _apply_in_place(work, tx, ApplyContext(tx, index, freeze, events))
    return work, events


def validate_block(block: Block, state: WorldState, rules: ProtocolRules) -> Validity:
    """Pure validity of ``block`` on top of ``state`` under exactly ``rules``."""
    try:
        _execute_block(block, state, rules)
    except errors.RuleViolation as exc:
        return Validity(False, exc.rule_id)
    except errors.GovSimError as exc:
        return Validity(False, exc.code)
    return Validity(True)


class Chain:
    """Sealed blocks of one ledger plus the post-state of every height."""

    def __init__(self, alloc: Mapping[bytes, int], rules: ProtocolRules | None = None,
                 *, shard: int = 0, shard_count: int = 1, freeze: Any = None):
        self.genesis_alloc = dict(alloc)
        self.shard = shard
        self.shard_count = shard_count
        self.freeze = freeze
        self.rule_schedule: list[tuple[int, ProtocolRules]] = [(1, rules or ProtocolRules())]
        genesis = Block(0, ZERO_HASH, (), ZERO_HASH, shard)
        self.blocks: list[Block] = [genesis]
        self.states: list[WorldState] = [
            WorldState.from_allocation(alloc, shard=shard, shard_count=shard_count)
        ]
        self.events: list[list[Event]] = [[]]
        self.kind_index: dict[str, list[int]] = {}

    @property
    def state(self) -> WorldState:
        return self.states[-1]

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    @property
    def height(self) -> int:
        return self.tip.height

    @property
    def rules(self) -> ProtocolRules:
        return self.rule_schedule[-1][1]

    @property
    def frozen(self) -> bool:
        return _halted(self.freeze, self.shard)

    def rules_for(self, height: int) -> ProtocolRules:
        current = self.rule_schedule[0][1]
        for start, rules in self.rule_schedule:
            if start <= height:
                current = rules
        return current

    def schedule_rules(self, rules: ProtocolRules, from_height: int) -> None:
        if from_height <= self.height:
            raise ValueError("rules cannot activate retroactively")
        self.rule_schedule.append((from_height, rules))

    def state_at(self, height: int) -> WorldState:
        return self.states[min(height, self.height)]

    def seal(self, txs: Iterable[Transaction], validator: bytes) -> Block:
        return seal_block(self, txs, validator)

    def _append(self, block: Block, state: WorldState, events: list[Event]) -> None:
        self.blocks.append(block)
        self.states.append(state)
        self.events.append(events)
        for kind in dict.fromkeys(e.kind for e in events):
            self.kind_index.setdefault(kind, []).append(block.height)

    def replay(self) -> WorldState:
        """Rebuild the state from the genesis allocation and sealed blocks."""
        state = WorldState.from_allocation(
            self.genesis_alloc, shard=self.shard, shard_count=self.shard_count
        )
        for block in self.blocks[1:]:
            state, _ = _execute_block(block, state, self.rules_for(block.height))
        return state

    def truncated(self, height: int) -> "Chain":
        """Independent chain holding blocks 0..height of this one."""
        other = Chain(self.genesis_alloc, shard=self.shard, shard_count=self.shard_count,
                      freeze=self.freeze)
        other.rule_schedule = [(s, r) for s, r in self.rule_schedule if s <= height] or \
            self.rule_schedule[:1]
        other.blocks = self.blocks[:height + 1]
        other.states = self.states[:height + 1]
        other.events = self.events[:height + 1]
        for h, evs in enumerate(other.events):
            for kind in dict.fromkeys(e.kind for e in evs):
                other.kind_index.setdefault(kind, []).append(h)
        return other


def seal_block(chain: Chain, txs: Iterable[Transaction], validator: bytes) -> Block:
    """Validate ``txs`` as the next block of ``chain`` and append it."""
    if chain.frozen:
        raise errors.Frozen("all on-chain business is suspended")
    if not validator or validator == ZERO_HASH:
        raise errors.EmptyValidator("block needs a validator")
    height = chain.height + 1
    block = Block(height, chain.tip.hash, tuple(txs), validator, chain.shard)
    state, events = _execute_block(block, chain.state, chain.rules_for(height), chain.freeze)
    chain._append(block, state, events)
    log.debug("sealed shard %d height %d with %d txs", chain.shard, height, len(block.txs))
    return block

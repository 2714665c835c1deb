"""Parallel shard ledgers, the header coordinator and cross-shard settlement."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping

from . import errors
from .admission import (
    FilterPolicy,
    KeyPair,
    TransactionPool,
    DrainResult,
    filter_and_admit,
    seal_pending,
    sign_transaction,
)
from .controls import FreezeState
from .ledger import (
    Block,
    Chain,
    Payload,
    ProtocolRules,
    Transaction,
    addr_field,
    home_shard,
    seal_block,
    sha256,
)

log = logging.getLogger(__name__)

TAKEOVER_THRESHOLD = Fraction(2, 3)
SYSTEM_KINDS = ("xcredit", "xreceipt", "xrefund")


@dataclass(frozen=True)
class HeaderRecord:
    shard: int
    height: int
    block_hash: bytes
    link: bytes  # hash chaining this record to the previous one

    def to_json(self) -> dict:
        return {"shard": self.shard, "height": self.height, "block_hash": self.block_hash.hex()}


class Coordinator:
    """Hash-linked log holding one header record per sealed shard block."""

    def __init__(self):
        self.records: list[HeaderRecord] = []
        self._index: dict[tuple[int, int], HeaderRecord] = {}

    def record(self, shard: int, block: Block) -> HeaderRecord:
        prev = self.records[-1].link if self.records else bytes(32)
        link = sha256(prev, shard.to_bytes(4, "big"), block.height.to_bytes(8, "big"), block.hash)
        rec = HeaderRecord(shard, block.height, block.hash, link)
        self.records.append(rec)
        self._index[(shard, block.height)] = rec
        return rec

    def header(self, shard: int, height: int) -> HeaderRecord | None:
        return self._index.get((shard, height))


@dataclass
class CrossShardTransaction:
    base: Transaction
    source: int
    target: int
    phase: str = "debit-pending"  # debit-pending | settled | aborted
    reason: str | None = None
    credit_sealed: bool = False

    @property
    def xid(self) -> str:
        return self.base.id.hex()


@dataclass(frozen=True)
class Route:
    kind: str  # intra | cross
    shard: int
    cross: CrossShardTransaction | None = None


@dataclass(frozen=True)
class Settlement:
    status: str  # settled | aborted | rejected
    reason: str | None = None


@dataclass
class ShardedNetwork:
    shards: list[Chain]
    coordinator: Coordinator
    assignment: dict[bytes, int]
    seed: int
    freeze: FreezeState
    pools: list[TransactionPool]
    system: KeyPair
    policy: FilterPolicy
    warnings: list[str] = field(default_factory=list)
    pending: dict[str, CrossShardTransaction] = field(default_factory=dict)
    replica_records: int = 0

    @property
    def shard_count(self) -> int:
        return len(self.shards)

    def validators_of(self, shard: int) -> list[bytes]:
        return [v for v, s in self.assignment.items() if s == shard]

    def validator_for(self, shard: int) -> bytes:
        staff = self.validators_of(shard)
        if not staff:
            raise errors.EmptyValidator(f"shard {shard} has no validators")
        return staff[(self.shards[shard].height + 1) % len(staff)]

    def total_supply(self) -> int:
        return sum(chain.state.total_supply() for chain in self.shards)

    def heights(self) -> list[int]:
        return [chain.height for chain in self.shards]

    def home(self, address: bytes) -> int:
        return home_shard(address, self.shard_count) if self.shard_count > 1 else 0


def init_shards(k: int, validators: Iterable[bytes], seed: int, *,
                alloc: Mapping[bytes, int] | None = None, rules: ProtocolRules | None = None,
                freeze: FreezeState | None = None, policy: FilterPolicy | None = None,
                keys: Mapping[bytes, bytes] | None = None) -> ShardedNetwork:
    """Create ``k`` shard chains and assign validators from ``seed``.

    Genesis balances land on each address's home shard.
    """
    if k < 1:
        raise errors.ZeroShards("need at least one shard")
    validators = sorted(set(validators))
    if not validators:
        raise errors.NoValidators("validator list is empty")
    order = list(validators)
    random.Random(seed).shuffle(order)
    assignment = {v: i % k for i, v in enumerate(order)}
    freeze = freeze or FreezeState()
    per_shard: list[dict[bytes, int]] = [{} for _ in range(k)]
    for address, amount in (alloc or {}).items():
        shard = home_shard(address, k) if k > 1 else 0
        per_shard[shard][address] = amount
    shards = [Chain(per_shard[i], rules, shard=i, shard_count=k, freeze=freeze) for i in range(k)]
    system = KeyPair.derive("govsim:coordinator", seed)
    base_policy = policy or FilterPolicy.default()
    for kind in SYSTEM_KINDS:
        base_policy = base_policy.restrict(kind, [system.owner])
    pools = []
    for _ in range(k):
        pool = TransactionPool(keys=keys, freeze=freeze)
        pool.register_key(system.owner, system.public_key)
        pools.append(pool)
    net = ShardedNetwork(shards, Coordinator(), assignment, seed, freeze, pools, system,
                         base_policy)
    for i, chain in enumerate(shards):
        net.coordinator.record(i, chain.tip)
        if not net.validators_of(i):
            net.warnings.append(f"UnderstaffedShard:{i}")
    return net


def route_transaction(net: ShardedNetwork, tx: Transaction) -> Route:
    source = net.home(tx.sender)
    if tx.kind != "transfer":
        return Route("intra", source)
    explicit = tx.payload.get("shard")
    if explicit is not None:
        if not isinstance(explicit, int) or not 0 <= explicit < net.shard_count:
            raise errors.UnknownShard(f"shard {explicit} not in 0..{net.shard_count - 1}")
        target = explicit
    else:
        target = net.home(addr_field(tx.payload, "to"))
    if target == source:
        return Route("intra", source)
    cst = CrossShardTransaction(tx, source, target)
    return Route("cross", source, cst)


def submit(net: ShardedNetwork, tx: Transaction):
    """Route ``tx`` and offer it to its home shard's pool."""
    route = route_transaction(net, tx)
    admission = filter_and_admit(net.pools[route.shard], tx, net.policy)
    if admission and route.cross is not None:
        net.pending[route.cross.xid] = route.cross
    return route, admission


def seal_shard(net: ShardedNetwork, shard: int, limit: int | None = None) -> DrainResult:
    chain = net.shards[shard]
    result = seal_pending(chain, net.pools[shard], net.validator_for(shard), limit)
    net.coordinator.record(shard, result.block)
    for tx, reason in result.dropped:
        net.pending.pop(tx.id.hex(), None)
    return result


def _system_seal(net: ShardedNetwork, shard: int, payload: Payload) -> Block:
    chain = net.shards[shard]
    pool = net.pools[shard]
    draft = Transaction(net.system.owner, chain.state.account(net.system.owner).nonce, payload)
    tx = sign_transaction(draft, net.system)
    admission = filter_and_admit(pool, tx, net.policy)
    if not admission:
        raise errors.Frozen(admission.reason) if admission.reason == "Frozen" else \
            errors.RuleViolation(admission.reason or "Rejected")
    try:
        block = seal_block(chain, [tx], net.validator_for(shard))
    finally:
        pool.remove([tx.id])
    net.coordinator.record(shard, block)
    return block


def settle_cross_shard(net: ShardedNetwork, cst: CrossShardTransaction) -> Settlement:
    """Credit the target shard, then seal a receipt (or refund) on the source."""
    if cst.phase != "debit-pending":
        return Settlement("rejected", f"Already{cst.phase.capitalize()}")
    source = net.shards[cst.source]
    rec = source.state.crossshard.get(cst.xid)
    if rec is None or rec.status != "escrowed":
        raise errors.SettlementPrecondition(f"debit {cst.xid[:12]} not sealed on shard {cst.source}")
    if not cst.credit_sealed:
        credit = Payload.of("xcredit", xid=cst.xid, to=rec.to, amount=rec.amount,
                            source=cst.source)
        try:
            _system_seal(net, cst.target, credit)
        except errors.GovSimError as exc:
            _system_seal(net, cst.source, Payload.of("xrefund", xid=cst.xid, reason=exc.code))
            cst.phase, cst.reason = "aborted", exc.code
            net.pending.pop(cst.xid, None)
            net.replica_records += 1
            log.info("cross-shard %s aborted: %s", cst.xid[:12], exc.code)
            return Settlement("aborted", exc.code)
        cst.credit_sealed = True
    _system_seal(net, cst.source, Payload.of("xreceipt", xid=cst.xid))
    cst.phase = "settled"
    net.pending.pop(cst.xid, None)
    net.replica_records += 2
    return Settlement("settled")


def settle_all(net: ShardedNetwork) -> list[tuple[CrossShardTransaction, Settlement]]:
    """Settle every pending cross-shard transfer whose debit is sealed."""
    done = []
    for xid in sorted(net.pending):
        cst = net.pending[xid]
        rec = net.shards[cst.source].state.crossshard.get(xid)
        if rec is None or rec.status != "escrowed":
            continue
        done.append((cst, settle_cross_shard(net, cst)))
    return done


def takeover_risk(net: ShardedNetwork, malicious: Iterable[bytes],
                  threshold: Fraction = TAKEOVER_THRESHOLD) -> list[int]:
    """Shards whose assigned validators are more than ``threshold`` malicious."""
    bad = set(malicious)
    flagged = []
    for shard in range(net.shard_count):
        staff = net.validators_of(shard)
        if staff and Fraction(sum(1 for v in staff if v in bad), len(staff)) > threshold:
            flagged.append(shard)
    return flagged


def missing_headers(net: ShardedNetwork) -> list[tuple[int, int]]:
    missing = []
    for chain in net.shards:
        for block in chain.blocks:
            rec = net.coordinator.header(chain.shard, block.height)
            if rec is None or rec.block_hash != block.hash:
                missing.append((chain.shard, block.height))
    return missing

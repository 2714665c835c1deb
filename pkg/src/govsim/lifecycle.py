"""Protocol forking and social-contract maintainer selection."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from . import errors
from .ledger import (
    MAX_AMOUNT,
    TOKEN,
    Block,
    Chain,
    Payload,
    ProtocolRules,
    Transaction,
    WorldState,
    seal_block,
    system_address,
    validate_block,
)

MAJORITY = Fraction(1, 2)


@dataclass(frozen=True)
class ForkSpec:
    kind: str  # soft | hard
    at_height: int
    new_rules: ProtocolRules
    adoption: Fraction = Fraction(1)

    def to_json(self, old_version: int) -> dict:
        return {"kind": self.kind, "at_height": self.at_height,
                "old_version": old_version, "new_version": self.new_rules.version}


@dataclass
class PlatformInstance:
    chain: Chain
    name: str = "main"
    lineage: list[ForkSpec] = field(default_factory=list)
    abandoned: list[tuple[int, str]] = field(default_factory=list)

    @property
    def rules(self) -> ProtocolRules:
        return self.chain.rules

    @property
    def base_rules(self) -> ProtocolRules:
        return self.chain.rule_schedule[0][1]


# ---------------------------------------------------------------------------
# soft-fork probing
# ---------------------------------------------------------------------------

_PROBE_SENDER = system_address("probe-sender")
_PROBE_TARGET = system_address("probe-target")
_PROBE_CONTRACT = system_address("probe-contract")

_PROBE_TEMPLATES = {
    "transfer": lambda: Payload.of("transfer", to=_PROBE_TARGET, amount=1),
    "burn": lambda: Payload.of("burn", amount=1),
    "call": lambda: Payload.of("call", contract=_PROBE_CONTRACT, method="probe"),
    "lock": lambda: Payload.of("lock", amount=1, purpose="vote-deposit", unlock_at=0),
}


def _probe_block(kinds: Sequence[str]) -> Block:
    txs = tuple(
        Transaction(_PROBE_SENDER, nonce, _PROBE_TEMPLATES[kind]())
        for nonce, kind in enumerate(kinds)
    )
    return Block(1, bytes(32), txs, _PROBE_SENDER, 0)


def probe_universe(old: ProtocolRules, new: ProtocolRules) -> list[Block]:
    """Blocks of every size 0..2*max for each payload kind, plus mixed edges."""
    top = 2 * max(old.max_block_txs, new.max_block_txs)
    kinds = list(_PROBE_TEMPLATES)
    blocks = [_probe_block([])]
    for kind in kinds:
        blocks.extend(_probe_block([kind] * n) for n in range(1, top + 1))
    for a in kinds:
        for b in kinds:
            if a != b:
                blocks.append(_probe_block([a, b]))
                for n in {old.max_block_txs, new.max_block_txs}:
                    if n >= 1:
                        blocks.append(_probe_block([a] * (n - 1) + [b]))
    return blocks


def _probe_state() -> WorldState:
    return WorldState.from_allocation({_PROBE_SENDER: 10**6 * TOKEN})


def backward_incompatible_block(old: ProtocolRules, new: ProtocolRules) -> Block | None:
    """First probe block valid under ``new`` but invalid under ``old``."""
    state = _probe_state()
    state.height = 0
    for block in probe_universe(old, new):
        if validate_block(block, state, new) and not validate_block(block, state, old):
            return block
    return None


# ---------------------------------------------------------------------------
# forks
# ---------------------------------------------------------------------------

def apply_soft_fork(instance: PlatformInstance, spec: ForkSpec,
                    majority: Fraction = MAJORITY) -> PlatformInstance:
    """Tighten the rules in place; later blocks must satisfy the new set."""
    if spec.kind != "soft":
        raise errors.WrongForkKind(spec.kind)
    if Fraction(spec.adoption) < majority:
        raise errors.InsufficientAdoption(f"adoption {spec.adoption} < {majority}")
    witness = backward_incompatible_block(instance.rules, spec.new_rules)
    if witness is not None:
        raise errors.NotBackwardCompatible(
            f"a {len(witness.txs)}-tx block is new-valid but old-invalid"
        )
    effective = replace(spec, at_height=max(spec.at_height, instance.chain.height))
    instance.chain.schedule_rules(spec.new_rules, effective.at_height + 1)
    instance.lineage.append(effective)
    return instance


def apply_hard_fork(instance: PlatformInstance, spec: ForkSpec,
                    name: str | None = None) -> tuple[PlatformInstance, PlatformInstance]:
    """Split at ``spec.at_height``: the old instance keeps everything, the new
    one keeps blocks 0..at_height and continues under the new rules."""
    if spec.kind != "hard":
        raise errors.WrongForkKind(spec.kind)
    if spec.at_height > instance.chain.height:
        raise errors.HeightBeyondTip(f"{spec.at_height} > tip {instance.chain.height}")
    chain = instance.chain.truncated(spec.at_height)
    chain.freeze = copy.deepcopy(instance.chain.freeze)
    chain.schedule_rules(spec.new_rules, spec.at_height + 1)
    forked = PlatformInstance(chain, name or f"{instance.name}-fork",
                              list(instance.lineage) + [spec])
    return instance, forked


def propose_block(instance: PlatformInstance, txs: Iterable[Transaction],
                  validator: bytes) -> Block | None:
    """Seal if the current rules accept the block, else record it abandoned."""
    txs = list(txs)
    try:
        return seal_block(instance.chain, txs, validator)
    except errors.RuleViolation as exc:
        instance.abandoned.append((instance.chain.height + 1, exc.rule_id))
        return None


def rebuild_instance(genesis_alloc: Mapping[bytes, int], base_rules: ProtocolRules,
                     lineage: Sequence[ForkSpec], blocks: Sequence[Block],
                     name: str = "main") -> PlatformInstance:
    """Reconstruct an instance from genesis, its fork lineage and block log."""
    shard = blocks[0].shard if blocks else 0
    chain = Chain(genesis_alloc, base_rules, shard=shard)
    ordered = sorted(lineage, key=lambda s: s.at_height)
    for spec in ordered:
        chain.schedule_rules(spec.new_rules, spec.at_height + 1)
    for block in blocks[1:]:
        seal_block(chain, block.txs, block.validator)
    return PlatformInstance(chain, name, list(ordered))


# ---------------------------------------------------------------------------
# social contract
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SocialContract:
    """Maintainer eligibility: base * (intercept + slope * years) tokens.

    Coefficients are integers in thousandths, so tokens times coefficient is
    already an exact count of base units.
    """

    base_tokens: int = 60_102_216
    intercept_milli: int = 1198
    slope_milli: int = 260
    published: str = "on-chain"


ETHEREUM_CONTRACT = SocialContract()


def social_contract_threshold(n: int, contract: SocialContract = ETHEREUM_CONTRACT) -> int:
    if isinstance(n, bool) or not isinstance(n, int) or n < 0:
        raise ValueError("years must be a non-negative integer")
    units = contract.base_tokens * (contract.intercept_milli + contract.slope_milli * n)
    if units > MAX_AMOUNT:
        raise errors.Overflow(f"threshold for year {n} exceeds the largest amount")
    return units


def select_maintainer(contract: SocialContract, candidates: Iterable[tuple[bytes, int]],
                      n: int, team_active: bool = False) -> bytes | None:
    """First candidate, in address order, holding at least the threshold."""
    if team_active:
        raise errors.TeamStillActive("original team is still maintaining the platform")
    threshold = social_contract_threshold(n, contract)
    for address, holding in sorted(candidates):
        if holding >= threshold:
            return address
    return None

"""Deterministic simulator for blockchain governance mechanisms."""

from . import errors
from .ledger import (
    TOKEN,
    Block,
    Chain,
    Payload,
    ProtocolRules,
    Transaction,
    WorldState,
    apply_transaction,
    format_amount,
    seal_block,
    tokens,
    validate_block,
)
from . import admission, controls, votes, sharding, lifecycle, observability  # noqa: F401  (registers payload handlers)

__version__ = "0.1.0"

__all__ = [
    "TOKEN",
    "Block",
    "Chain",
    "Payload",
    "ProtocolRules",
    "Transaction",
    "WorldState",
    "apply_transaction",
    "errors",
    "format_amount",
    "seal_block",
    "tokens",
    "validate_block",
]

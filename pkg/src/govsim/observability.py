"""Execution events and the block-by-block log extraction pipeline."""

from __future__ import annotations

import bisect
import heapq
import json
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Sequence

from . import errors

if TYPE_CHECKING:
    from .ledger import Chain


@dataclass(frozen=True)
class Event:
    block_height: int
    tx_id: bytes
    kind: str
    attributes: tuple[tuple[str, Any], ...]
    tx_index: int = 0

    def attribute(self, name: str, default: Any = None) -> Any:
        for key, value in self.attributes:
            if key == name:
                return value
        return default


# Attribute names emitted by the built-in payload handlers.
EVENT_SCHEMAS: dict[str, tuple[str, ...]] = {
    "Transfer": ("sender", "to", "amount"),
    "Burn": ("owner", "amount"),
    "Call": ("contract", "method", "caller"),
    "CrossShardDebit": ("xid", "sender", "to", "amount", "source", "target"),
    "CrossShardCredit": ("xid", "to", "amount", "source"),
    "CrossShardReceipt": ("xid", "amount", "target"),
    "CrossShardRefund": ("xid", "sender", "amount"),
    "Lock": ("lock_id", "owner", "amount", "purpose", "unlock_at"),
    "Release": ("lock_id", "owner", "amount"),
    "LockBurn": ("lock_id", "owner", "amount"),
    "ProposalOpened": ("proposal", "mechanism", "closes_at"),
    "Vote": ("proposal", "voter", "choice", "votes", "cost"),
    "Delegate": ("proposal", "delegator", "delegate"),
    "ForeignIssued": ("token", "holder", "amount"),
    "ResultRelayed": ("proposal", "platform", "decision", "accept_weight", "reject_weight"),
}


@dataclass(frozen=True)
class Pipeline:
    """What to harvest: event kinds, an inclusive height range, a projection.

    ``transform`` is either one list of attribute names applied to every kind
    or a mapping from kind to its own list.
    """

    kinds: frozenset[str]
    from_height: int
    to_height: int
    transform: Sequence[str] | Mapping[str, Sequence[str]] = ()

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "Pipeline":
        rng = doc.get("range", [0, 2**63 - 1])
        transform = doc.get("project", ())
        if isinstance(transform, Mapping):
            transform = {k: tuple(v) for k, v in transform.items()}
        else:
            transform = tuple(transform)
        return cls(frozenset(doc["kinds"]), int(rng[0]), int(rng[1]), transform)

    def projection(self, kind: str) -> tuple[str, ...]:
        if isinstance(self.transform, Mapping):
            return tuple(self.transform.get(kind, ()))
        return tuple(self.transform)


@dataclass(frozen=True)
class ExtractedRecord:
    height: int
    tx_id: bytes
    kind: str
    attributes: tuple[tuple[str, Any], ...]
    tx_index: int = 0

    def to_json(self) -> dict[str, Any]:
        return {
            "height": self.height,
            "tx_id": self.tx_id.hex(),
            "kind": self.kind,
            "attributes": {k: v for k, v in self.attributes},
        }


def validate_pipeline(pipeline: Pipeline,
                      known_schemas: Mapping[str, Sequence[str]] = EVENT_SCHEMAS) -> None:
    """Raise unless every kind has a schema and every projected name exists."""
    if pipeline.from_height > pipeline.to_height or pipeline.from_height < 0:
        raise errors.EmptyRange(f"{pipeline.from_height}..{pipeline.to_height}")
    if not pipeline.kinds:
        raise errors.InvalidPipeline("pipeline matches no kinds")
    if isinstance(pipeline.transform, Mapping):
        stray = set(pipeline.transform) - set(pipeline.kinds)
        if stray:
            raise errors.InvalidPipeline(f"projection for unrequested kinds {sorted(stray)}")
    for kind in sorted(pipeline.kinds):
        if kind not in known_schemas:
            raise errors.UnknownKind(kind)
        schema = set(known_schemas[kind])
        for name in pipeline.projection(kind):
            if name not in schema:
                raise errors.UnknownAttribute(f"{kind}.{name}")


def _project(event: Event, names: tuple[str, ...]) -> ExtractedRecord:
    attrs = dict(event.attributes)
    picked = tuple((n, attrs.get(n)) for n in names) if names else event.attributes
    return ExtractedRecord(event.block_height, event.tx_id, event.kind, picked, event.tx_index)


def extract_logs(chain: "Chain", pipeline: Pipeline,
                 known_schemas: Mapping[str, Sequence[str]] = EVENT_SCHEMAS) -> list[ExtractedRecord]:
    """Harvest matching events block by block, in (height, tx order) order.

    Only blocks the chain's kind index marks as containing a requested kind
    are visited.
    """
    validate_pipeline(pipeline, known_schemas)
    lo = pipeline.from_height
    hi = min(pipeline.to_height, chain.height)
    runs = []
    for kind in sorted(pipeline.kinds):
        heights = chain.kind_index.get(kind, [])
        start = bisect.bisect_left(heights, lo)
        stop = bisect.bisect_right(heights, hi)
        runs.append(heights[start:stop])
    records: list[ExtractedRecord] = []
    last = -1
    for height in heapq.merge(*runs):
        if height == last:
            continue
        last = height
        for event in chain.events[height]:
            if event.kind in pipeline.kinds:
                records.append(_project(event, pipeline.projection(event.kind)))
    return records


def dump_jsonl(records: Iterable[ExtractedRecord]) -> str:
    return "".join(
        json.dumps(r.to_json(), sort_keys=True, separators=(",", ":")) + "\n" for r in records
    )

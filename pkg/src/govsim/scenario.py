"""Scenario files: parsing, deterministic execution and reports."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from typing import Any, Callable

import jsonschema

from . import errors
from .admission import (
    SCHEMES,
    FilterPolicy,
    KeyPair,
    TransactionPool,
    filter_and_admit,
    sign_transaction,
    verify_transaction,
)
from .controls import (
    FreezeState,
    ScamList,
    delist_scam,
    flag_scam,
    lock_payload,
    masternode_eligible,
    resolve_payload,
    set_freeze,
    taint_of,
    transfer_edges,
)
from .ledger import (
    Chain,
    Payload,
    ProtocolRules,
    Signature,
    Transaction,
    WorldState,
    apply_transaction,
    burn,
    call,
    format_amount,
    tokens,
    transfer,
)
from .lifecycle import (
    ETHEREUM_CONTRACT,
    ForkSpec,
    PlatformInstance,
    apply_hard_fork,
    apply_soft_fork,
    propose_block,
    select_maintainer,
    social_contract_threshold,
)
from .observability import EVENT_SCHEMAS, Pipeline, extract_logs
from .sharding import (
    Coordinator,
    ShardedNetwork,
    init_shards,
    missing_headers,
    seal_shard,
    settle_all,
    submit,
    takeover_risk,
)
from .votes import (
    CarbonvoteSession,
    CrossChainSession,
    DelegationGraph,
    DictatorPolicy,
    QuadraticSession,
    VoteOutcome,
    carbonvote_tally,
    close_proposal,
    delegate_payload,
    dictator_finalize,
    issue_foreign_payload,
    liquid_weights,
    open_proposal_payload,
    quadratic_funding_match,
    quadratic_tally,
    relay_payload,
    run_crosschain_vote,
    verify_relay,
    vote_payload,
)

log = logging.getLogger(__name__)

REPORT_SCHEMA = "govsim-report/v1"
MAIN = "main"

# Fields of each action that name a declared identity.
IDENTITY_FIELDS = {
    "transfer": ("from", "to"),
    "burn": ("from",),
    "call": ("from", "contract"),
    "lock": ("owner", "by"),
    "release": ("by",),
    "burn_lock": ("by",),
    "open_proposal": ("by", "electorate"),
    "vote": ("voter",),
    "delegate": ("from", "to"),
    "dictator": ("by",),
    "issue_foreign": ("by", "holders"),
    "crosschain_tally": ("by",),
    "freeze": ("by",),
    "flag": ("address",),
    "delist": ("address",),
    "extract": ("by",),
    "social_contract": ("candidates",),
    "sign": ("as", "to", "signer"),
}
PROPOSAL_ACTIONS = ("vote", "delegate", "tally", "dictator", "crosschain_tally")


@lru_cache(maxsize=None)
def load_schema(name: str = "scenario.v1.json") -> dict:
    text = resources.files("govsim").joinpath("schemas", name).read_text()
    return json.loads(text)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    name: str
    seed: int
    genesis: dict
    actions: list[dict]
    assertions: list[dict] = field(default_factory=list)
    privileged: dict = field(default_factory=dict)
    policy: dict | None = None
    schemas: dict = field(default_factory=dict)
    pattern: str = ""
    identities: tuple[str, ...] = ()
    contracts: tuple[str, ...] = ()


def _declared_identities(doc: dict) -> tuple[set[str], set[str]]:
    gen = doc["genesis"]
    names: set[str] = set()
    platforms = [gen] + list(gen.get("platforms", {}).values())
    for plat in platforms:
        names |= set(plat.get("accounts", {}))
        names |= set(plat.get("validators", ()))
        names |= set(plat.get("malicious", ()))
    names |= set(gen.get("identities", ()))
    contracts = set(gen.get("contracts", ()))
    priv = doc.get("privileged", {})
    names |= set(priv.get("freezers", ())) | set(priv.get("dictators", ()))
    return names | contracts, contracts


def _referenced(action: dict, key: str) -> list[str]:
    value = action.get(key)
    if value is None:
        return []
    if isinstance(value, dict):
        return list(value)
    if isinstance(value, list):
        return list(value)
    return [value]


def _at_refs(value: Any) -> list[str]:
    if isinstance(value, str) and value.startswith("@"):
        return [value[1:]]
    if isinstance(value, list):
        return [ref for v in value for ref in _at_refs(v)]
    return []


def parse_scenario(text: str) -> Scenario:
    """Parse and fully validate scenario JSON; raise a ScenarioError subclass."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise errors.ScenarioSyntaxError(exc.msg, exc.lineno) from exc
    schema = load_schema()
    defs = schema["$defs"]["actions"]
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        raise errors.SchemaViolation(f"{'/'.join(map(str, exc.absolute_path))}: {exc.message}") \
            from exc
    identities, contracts = _declared_identities(doc)
    platforms = {MAIN} | set(doc["genesis"].get("platforms", {}))
    proposals: set[int] = set()
    locks: set[str] = set()
    signed: set[str] = set()
    for rule in doc.get("policy", {}).get("content_rules", ()):
        for ref in _at_refs(rule["value"]):
            if ref not in identities:
                raise errors.UndeclaredIdentity(f"policy rule {rule['id']}: {ref!r}")
    for index, action in enumerate(doc["actions"]):
        tag = action["do"]
        if tag not in defs:
            raise errors.UnknownAction(f"action {index}: {tag!r}")
        sub = dict(defs[tag])
        sub["$defs"] = schema["$defs"]
        try:
            jsonschema.validate(action, sub)
        except jsonschema.ValidationError as exc:
            raise errors.SchemaViolation(f"action {index} ({tag}): {exc.message}") from exc
        for key in IDENTITY_FIELDS.get(tag, ()):
            for ref in _referenced(action, key):
                if ref not in identities:
                    raise errors.UndeclaredIdentity(f"action {index} ({tag}): {ref!r}")
        for key in ("platform", "home", "host"):
            if key in action and action[key] not in platforms:
                raise errors.UndeclaredIdentity(f"action {index} ({tag}): platform {action[key]!r}")
        if tag == "call" and "emit" in action:
            for ref in _at_refs(list(action["emit"].get("attributes", {}).values())):
                if ref not in identities:
                    raise errors.UndeclaredIdentity(f"action {index} (call): {ref!r}")
        if tag == "issue_foreign" and action["token"] not in platforms:
            raise errors.UndeclaredIdentity(f"action {index}: platform {action['token']!r}")
        if tag in PROPOSAL_ACTIONS and action["proposal"] not in proposals:
            raise errors.UndeclaredIdentity(f"action {index} ({tag}): proposal {action['proposal']}")
        if tag in ("release", "burn_lock") and action["lock"] not in locks:
            raise errors.UndeclaredIdentity(f"action {index} ({tag}): lock {action['lock']!r}")
        if tag == "submit" and action["label"] not in signed:
            raise errors.UndeclaredIdentity(f"action {index}: signed tx {action['label']!r}")
        if tag == "open_proposal":
            proposals.add(action["proposal"])
        elif tag == "lock" and "label" in action:
            locks.add(action["label"])
        elif tag == "sign":
            signed.add(action["label"])
        elif tag == "hard_fork":
            platforms.add(action["new_platform"])
    return Scenario(
        name=doc["name"],
        seed=doc.get("seed", 0),
        genesis=doc["genesis"],
        actions=doc["actions"],
        assertions=doc.get("assertions", []),
        privileged=doc.get("privileged", {}),
        policy=doc.get("policy"),
        schemas=doc.get("schemas", {}),
        pattern=doc.get("pattern", ""),
        identities=tuple(sorted(identities)),
        contracts=tuple(sorted(contracts)),
    )


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------

@dataclass
class Platform:
    name: str
    net: ShardedNetwork
    instance: PlatformInstance
    malicious: frozenset[bytes] = frozenset()
    proposals: dict[int, Any] = field(default_factory=dict)
    outcomes: dict[int, VoteOutcome] = field(default_factory=dict)
    liquid: dict[int, Any] = field(default_factory=dict)

    @property
    def chain(self) -> Chain:
        return self.net.shards[0]


def _rules(doc: dict | None, base: ProtocolRules | None = None) -> ProtocolRules:
    base = base or ProtocolRules()
    doc = doc or {}
    return ProtocolRules(
        doc.get("version", base.version),
        doc.get("max_block_txs", base.max_block_txs),
        doc.get("predicate", base.validity_predicate),
    )


def _numeric(value: Any) -> Decimal | None:
    if isinstance(value, bool) or value is None:
        return None
    if isinstance(value, (int, float)):
        return Decimal(str(value))
    if isinstance(value, str):
        try:
            return Decimal(value)
        except InvalidOperation:
            return None
    return None


def compare(actual: Any, op: str, expected: Any) -> bool:
    a, e = _numeric(actual), _numeric(expected)
    if a is not None and e is not None:
        actual, expected = a, e
    try:
        if op == "==":
            return actual == expected
        if op == "!=":
            return actual != expected
        if op == "<":
            return actual < expected
        if op == "<=":
            return actual <= expected
        if op == ">":
            return actual > expected
        if op == ">=":
            return actual >= expected
        if op == "in":
            return actual in expected
        if op == "contains":
            return expected in actual
    except TypeError:
        return False
    raise ValueError(f"unknown comparator {op!r}")


class Engine:
    """Runs one scenario against fresh, seeded engine state."""

    def __init__(self, scenario: Scenario, seed: int | None = None):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.rng = random.Random(self.seed)
        self.keys = {n: KeyPair.derive(n, self.seed) for n in scenario.identities}
        self.names = {kp.owner: n for n, kp in self.keys.items()}
        self.scams = ScamList()
        self.labels: dict[str, Any] = {}
        self.tx_labels: dict[str, tuple[str, int, Transaction]] = {}
        self.tx_status: dict[str, str] = {}
        self.extracts: dict[str, list] = {}
        self.forks: list[dict] = []
        self.votes: list[dict] = []
        self.warnings: list[str] = []
        self.terminated = False
        self._projection: dict[tuple[str, int], tuple[Any, WorldState]] = {}
        priv = scenario.privileged
        self.dictators = DictatorPolicy(
            frozenset(self.addr(n) for n in priv.get("dictators", ())),
            priv.get("veto_window", 0),
        )
        self.freezers = frozenset(self.addr(n) for n in priv.get("freezers", ()))
        self.takeover_threshold = Fraction(priv.get("takeover_threshold", "2/3"))
        self.adoption_majority = Fraction(str(priv.get("adoption_majority", 0.5)))
        self.schemas = dict(EVENT_SCHEMAS)
        self.schemas.update({k: tuple(v) for k, v in scenario.schemas.items()})
        self.policy = self._policy(scenario.policy)
        self.platforms: dict[str, Platform] = {}
        gen = scenario.genesis
        self._add_platform(MAIN, gen)
        for name, plat in sorted(gen.get("platforms", {}).items()):
            self._add_platform(name, plat)

    # -- setup ------------------------------------------------------------

    def addr(self, name: str) -> bytes:
        return self.keys[name].owner

    def name_of(self, address: bytes) -> str:
        return self.names.get(address, address.hex())

    def _policy(self, doc: dict | None) -> FilterPolicy:
        if doc is None:
            return FilterPolicy.default()

        doc = dict(doc)
        doc["content_rules"] = [
            {**rule, "value": self._resolve_ref(rule["value"])}
            for rule in doc.get("content_rules", ())
        ]
        return FilterPolicy.from_json(doc, resolve=self.addr)

    def _resolve_ref(self, value: Any) -> Any:
        """``"@name"`` becomes the identity's hex address, recursively in lists."""
        if isinstance(value, str) and value.startswith("@"):
            return self.addr(value[1:]).hex()
        if isinstance(value, list):
            return [self._resolve_ref(v) for v in value]
        return value

    def _add_platform(self, name: str, doc: dict) -> None:
        alloc = {self.addr(n): tokens(v) for n, v in doc.get("accounts", {}).items()}
        validators = [self.addr(v) for v in doc.get("validators", ())]
        freeze = FreezeState(privileged=self.freezers)
        keys = {kp.owner: kp.public_key for kp in self.keys.values()}
        net = init_shards(doc.get("shards", 1), validators, self.seed, alloc=alloc,
                          rules=_rules(doc.get("rules")), freeze=freeze, policy=self.policy,
                          keys=keys)
        self.warnings.extend(f"{name}:{w}" for w in net.warnings)
        malicious = frozenset(self.addr(v) for v in doc.get("malicious", ()))
        self.platforms[name] = Platform(name, net, PlatformInstance(net.shards[0], name),
                                        malicious)

    def _platform(self, action: dict, key: str = "platform") -> Platform:
        return self.platforms[action.get(key, MAIN)]

    def _single_chain(self, plat: Platform) -> Chain:
        if plat.net.shard_count != 1:
            raise errors.WrongMechanism(f"{plat.name} is sharded; use a single-shard platform")
        return plat.chain

    # -- transactions -------------------------------------------------------

    def _next_nonce(self, plat: Platform, address: bytes) -> int:
        shard = plat.net.home(address)
        chain = plat.net.shards[shard]
        queued = sum(1 for t in plat.net.pools[shard].pending.values() if t.sender == address)
        return chain.state.account(address).nonce + queued

    def _submit(self, plat: Platform, sender: str, payload: Payload, action: dict) -> dict:
        kp = self.keys[sender]
        draft = Transaction(kp.owner, self._next_nonce(plat, kp.owner), payload)
        tx = draft if action.get("unsigned") else sign_transaction(draft, kp)
        if action.get("tamper"):
            tx = self._tamper(tx, self.rng.randrange(len(tx.to_bytes())))
            if tx is None:
                if action.get("label"):
                    self.tx_status[action["label"]] = "rejected(Malformed)"
                return {"admission": "rejected(Malformed)"}
        return self._offer(plat, tx, action.get("label"))

    def _projected(self, plat: Platform, shard: int) -> WorldState:
        """State after every queued transaction that applies cleanly."""
        chain = plat.net.shards[shard]
        pool = plat.net.pools[shard]
        key = (chain.tip.hash, pool.snapshot())
        cached = self._projection.get((plat.name, shard))
        if cached is not None and cached[0] == key:
            return cached[1]
        state = chain.state.copy()
        state.height = chain.height + 1
        for tx in pool.pending.values():
            try:
                state = apply_transaction(state, tx, chain.freeze)
            except errors.GovSimError:
                continue
        self._projection[(plat.name, shard)] = (key, state)
        return state

    def _offer(self, plat: Platform, tx: Transaction, label: str | None) -> dict:
        """Admit ``tx`` and trial-apply it on top of the queue.

        A transaction that would fail at sealing is withdrawn and its error
        raised here, so the action that produced it is the one reported.
        """
        route, admission = submit(plat.net, tx)
        detail = {"tx": tx.id.hex(), "route": route.kind, "shard": route.shard,
                  "admission": str(admission)}
        if label:
            self.tx_labels[label] = (plat.name, route.shard, tx)
            self.tx_status[label] = "pending" if admission else str(admission)
        if not admission:
            return detail
        pool = plat.net.pools[route.shard]
        chain = plat.net.shards[route.shard]
        before = (chain.tip.hash, pool.snapshot()[:-1])
        cached = self._projection.get((plat.name, route.shard))
        base = cached[1] if cached is not None and cached[0] == before else None
        if base is None:
            pool.pending.pop(tx.id)
            base = self._projected(plat, route.shard)
            pool.pending[tx.id] = tx
        try:
            after = apply_transaction(base, tx, chain.freeze)
        except errors.GovSimError as exc:
            pool.pending.pop(tx.id, None)
            plat.net.pending.pop(tx.id.hex(), None)
            if label:
                self.tx_status[label] = f"failed({exc.code})"
            raise
        self._projection[(plat.name, route.shard)] = ((chain.tip.hash, pool.snapshot()), after)
        return detail

    @staticmethod
    def _tamper(tx: Transaction, position: int) -> Transaction | None:
        raw = bytearray(tx.to_bytes())
        raw[position % len(raw)] ^= 0x01
        try:
            return Transaction.from_bytes(bytes(raw))
        except errors.MalformedTransaction:
            return None

    def _refresh_tx_status(self) -> None:
        for label, (pname, shard, tx) in self.tx_labels.items():
            if not self.tx_status[label] == "pending":
                continue
            plat = self.platforms.get(pname)
            if plat is None:
                continue
            chain = plat.net.shards[shard]
            if tx.id in plat.net.pools[shard].pending:
                continue
            sealed = any(tx.id == t.id for b in chain.blocks for t in b.txs)
            if sealed:
                self.tx_status[label] = "sealed"

    # -- action dispatch ----------------------------------------------------

    def run(self) -> dict:
        results = []
        for index, action in enumerate(self.scenario.actions):
            results.append(self._run_action(index, action))
        self._refresh_tx_status()
        assertions = []
        for spec in self.scenario.assertions:
            try:
                actual = self.query(spec["query"])
            except (KeyError, errors.GovSimError, ValueError, IndexError) as exc:
                actual = f"<error: {type(exc).__name__}>"
            ok = compare(actual, spec["op"], spec["expected"])
            assertions.append({"query": spec["query"], "op": spec["op"],
                               "expected": spec["expected"], "actual": actual, "pass": ok})
        exit_status = 0
        if any(not a["pass"] for a in assertions):
            exit_status = 1
        if any(r["status"] == "error" for r in results):
            exit_status = 2
        return self._report(results, assertions, exit_status)

    def _run_action(self, index: int, action: dict) -> dict:
        tag = action["do"]
        entry: dict[str, Any] = {"index": index, "do": tag}
        expected = action.get("expect_error")
        try:
            detail = getattr(self, f"_do_{tag}")(action)
        except errors.GovSimError as exc:
            log.debug("action %d (%s) failed: %s", index, tag, exc)
            if expected and exc.code == expected:
                entry["status"] = "expected-error"
            else:
                entry["status"] = "error"
            entry["error"] = exc.code
            return entry
        if expected:
            entry["status"] = "error"
            entry["error"] = f"expected {expected}, none raised"
        elif isinstance(detail, dict) and str(detail.get("admission", "")).startswith("rejected"):
            entry["status"] = "rejected"
        else:
            entry["status"] = "ok"
        if detail:
            entry["detail"] = detail
        return entry

    def _do_transfer(self, a: dict) -> dict:
        plat = self._platform(a)
        payload = transfer(self.addr(a["to"]), tokens(a["amount"]), a.get("shard"))
        return self._submit(plat, a["from"], payload, a)

    def _do_burn(self, a: dict) -> dict:
        return self._submit(self._platform(a), a["from"], burn(tokens(a["amount"])), a)

    def _do_call(self, a: dict) -> dict:
        emit = a.get("emit")
        if emit is not None:
            attrs = {k: self._resolve_ref(v) for k, v in emit.get("attributes", {}).items()}
            emit = {"kind": emit["kind"], "attributes": attrs}
        payload = call(self.addr(a["contract"]), a["method"], a.get("args"), emit)
        return self._submit(self._platform(a), a["from"], payload, a)

    def _do_lock(self, a: dict) -> dict:
        plat = self._platform(a)
        sender = a.get("by", a["owner"])
        owner = self.addr(a["owner"]) if sender != a["owner"] else None
        payload = lock_payload(tokens(a["amount"]), a["purpose"], a.get("unlock_at"), owner)
        detail = self._submit(plat, sender, payload, {**a, "label": None})
        shard = detail["shard"]
        lock_id = self._projected(plat, shard).next_lock_id - 1
        if "label" in a:
            self.labels[f"lock:{a['label']}"] = (plat.name, shard, lock_id)
        detail["lock_id"] = lock_id
        return detail

    def _resolve(self, a: dict, action: str, fraud: bool = False) -> dict:
        pname, shard, lock_id = self.labels[f"lock:{a['lock']}"]
        plat = self.platforms[pname]
        record = self._projected(plat, shard).locks.get(lock_id)
        if record is None:
            raise errors.UnknownLock(a["lock"])
        sender = a.get("by") or self.name_of(record.owner)
        return self._submit(plat, sender, resolve_payload(lock_id, action, fraud), a)

    def _do_release(self, a: dict) -> dict:
        return self._resolve(a, "release")

    def _do_burn_lock(self, a: dict) -> dict:
        return self._resolve(a, "burn", bool(a.get("fraud")))

    def _do_seal(self, a: dict) -> dict:
        plat = self._platform(a)
        shards = [a["shard"]] if "shard" in a else range(plat.net.shard_count)
        sealed, dropped = 0, []
        for _ in range(a.get("count", 1)):
            for shard in shards:
                result = seal_shard(plat.net, shard)
                sealed += 1
                for tx, reason in result.dropped:
                    dropped.append({"tx": tx.id.hex(), "reason": reason})
                    for label, (_, _, ltx) in self.tx_labels.items():
                        if ltx.id == tx.id:
                            self.tx_status[label] = f"dropped({reason})"
        self._refresh_tx_status()
        detail: dict[str, Any] = {"blocks": sealed, "heights": plat.net.heights()}
        if dropped:
            detail["dropped"] = dropped
        return detail

    def _do_propose(self, a: dict) -> dict:
        plat = self._platform(a)
        chain = self._single_chain(plat)
        pool = plat.net.pools[0]
        txs = pool.peek(a["count"])
        block = propose_block(plat.instance, txs, plat.net.validator_for(0))
        if block is None:
            return {"abandoned": True, "height": chain.height + 1,
                    "reason": plat.instance.abandoned[-1][1]}
        pool.remove(tx.id for tx in txs)
        plat.net.coordinator.record(0, block)
        self._refresh_tx_status()
        return {"abandoned": False, "height": block.height}

    def _do_settle(self, a: dict) -> dict:
        plat = self._platform(a)
        outcomes = settle_all(plat.net)
        return {"settled": sum(1 for _, s in outcomes if s.status == "settled"),
                "aborted": sum(1 for _, s in outcomes if s.status == "aborted")}

    # -- governance ---------------------------------------------------------

    def _do_open_proposal(self, a: dict) -> dict:
        plat = self._platform(a)
        self._single_chain(plat)
        electorate = [self.addr(n) for n in a.get("electorate", ())]
        payload = open_proposal_payload(a["proposal"], a["mechanism"], a["closes_at"],
                                        a.get("description", ""), a.get("token"), electorate)
        return self._submit(plat, a["by"], payload, a)

    def _do_vote(self, a: dict) -> dict:
        plat = self._platform(a)
        self._single_chain(plat)
        payload = vote_payload(a["proposal"], a["choice"], a.get("votes", 1))
        return self._submit(plat, a["voter"], payload, a)

    def _do_delegate(self, a: dict) -> dict:
        plat = self._platform(a)
        self._single_chain(plat)
        to = self.addr(a["to"]) if a["to"] is not None else None
        return self._submit(plat, a["from"], delegate_payload(a["proposal"], to), a)

    def _proposal(self, plat: Platform, pid: int):
        if pid in plat.proposals:
            return plat.proposals[pid]
        prop = plat.chain.state.proposals.get(pid)
        if prop is None:
            raise errors.UnknownProposal(str(pid))
        return prop

    def _record_vote(self, plat: Platform, prop, outcome: VoteOutcome) -> dict:
        as_amount = prop.mechanism in ("carbonvote", "crosschain-carbonvote")
        fmt: Callable[[int], Any] = format_amount if as_amount else (lambda v: v)
        entry = {"platform": plat.name, "proposal": prop.id, "mechanism": prop.mechanism,
                 "accept_weight": fmt(outcome.accept_weight),
                 "reject_weight": fmt(outcome.reject_weight),
                 "decision": outcome.decision, "tie_broken": outcome.tie_broken}
        self.votes.append(entry)
        return entry

    def _do_tally(self, a: dict) -> dict:
        plat = self._platform(a)
        chain = self._single_chain(plat)
        prop = self._proposal(plat, a["proposal"])
        if chain.height < prop.closes_at:
            raise errors.NotClosed(f"proposal {prop.id} closes at {prop.closes_at}")
        state = chain.state_at(prop.closes_at)
        if prop.mechanism == "carbonvote":
            outcome = carbonvote_tally(CarbonvoteSession.from_state(state, prop.id), state)
        elif prop.mechanism == "quadratic":
            outcome = quadratic_tally(QuadraticSession.from_state(state, prop.id))
        elif prop.mechanism == "liquid":
            result = liquid_weights(DelegationGraph.from_state(state, prop.id))
            plat.liquid[prop.id] = result
            outcome = result.outcome
        else:
            raise errors.WrongMechanism(f"{prop.mechanism} proposals are not tallied here")
        plat.outcomes[prop.id] = outcome
        plat.proposals[prop.id] = close_proposal(prop, outcome)
        return self._record_vote(plat, prop, outcome)

    def _do_dictator(self, a: dict) -> dict:
        plat = self._platform(a)
        chain = self._single_chain(plat)
        prop = self._proposal(plat, a["proposal"])
        at = a.get("at", chain.height)
        updated = dictator_finalize(prop, self.dictators, plat.outcomes.get(prop.id),
                                    a["decision"], at, self.addr(a["by"]))
        plat.proposals[prop.id] = updated
        return {"status": updated.status, "at": at}

    def _do_issue_foreign(self, a: dict) -> dict:
        plat = self._platform(a)
        self._single_chain(plat)
        holders = {self.addr(n): tokens(v) for n, v in a["holders"].items()}
        return self._submit(plat, a["by"], issue_foreign_payload(a["token"], holders), a)

    def _do_crosschain_tally(self, a: dict) -> dict:
        host = self.platforms[a["host"]]
        home = self.platforms[a["home"]]
        host_chain = self._single_chain(host)
        prop = self._proposal(host, a["proposal"])
        if host_chain.height < prop.closes_at:
            raise errors.NotClosed(f"proposal {prop.id} closes at {prop.closes_at}")
        state = host_chain.state_at(prop.closes_at)
        inner = "quadratic" if prop.mechanism == "crosschain-quadratic" else "carbonvote"
        session = CrossChainSession(a["home"], a["host"], prop.id, inner)
        outcome = run_crosschain_vote(session, state)
        if "claimed" in a:
            claimed = a["claimed"]
            as_units = tokens if inner == "carbonvote" else int
            claim = VoteOutcome(
                as_units(claimed.get("accept_weight", 0)), as_units(claimed.get("reject_weight", 0)),
                claimed["decision"], bool(claimed.get("tie_broken", outcome.tie_broken)),
            )
            verify_relay(session, state, claim)
        host.outcomes[prop.id] = outcome
        host.proposals[prop.id] = close_proposal(prop, outcome)
        entry = self._record_vote(host, prop, outcome)
        detail = self._submit(home, a["by"], relay_payload(session), a)
        seal_shard(home.net, home.net.home(self.addr(a["by"])))
        self._refresh_tx_status()
        return {**entry, "relay": detail["admission"]}

    # -- lifecycle ----------------------------------------------------------

    def _do_soft_fork(self, a: dict) -> dict:
        plat = self._platform(a)
        chain = self._single_chain(plat)
        old = chain.rules
        spec = ForkSpec("soft", a.get("at", chain.height), _rules(a, old),
                        Fraction(str(a.get("adoption", 1))))
        apply_soft_fork(plat.instance, spec, self.adoption_majority)
        entry = {"platform": plat.name, **plat.instance.lineage[-1].to_json(old.version)}
        self.forks.append(entry)
        return entry

    def _do_hard_fork(self, a: dict) -> dict:
        plat = self._platform(a)
        chain = self._single_chain(plat)
        old = chain.rules
        spec = ForkSpec("hard", a["at"], _rules(a, old))
        _, forked = apply_hard_fork(plat.instance, spec, a["new_platform"])
        net = plat.net
        freeze = forked.chain.freeze
        pool = TransactionPool(keys=net.pools[0].keys, freeze=freeze)
        coordinator = Coordinator()
        for block in forked.chain.blocks:
            coordinator.record(0, block)
        new_net = ShardedNetwork([forked.chain], coordinator, dict(net.assignment), net.seed,
                                 freeze, [pool], net.system, net.policy)
        self.platforms[forked.name] = Platform(
            forked.name, new_net, forked, plat.malicious,
            dict(plat.proposals), dict(plat.outcomes), dict(plat.liquid),
        )
        entry = {"platform": plat.name, "new_platform": forked.name,
                 **spec.to_json(old.version), "new_tip": forked.chain.height}
        self.forks.append(entry)
        return entry

    def _do_social_contract(self, a: dict) -> dict:
        plat = self._platform(a)
        candidates = [(self.addr(n), self._global_holding(plat, self.addr(n)))
                      for n in a["candidates"]]
        threshold = social_contract_threshold(a["years"], ETHEREUM_CONTRACT)
        winner = select_maintainer(ETHEREUM_CONTRACT, candidates, a["years"],
                                   bool(a.get("team_active", False)))
        if winner is None:
            self.terminated = True
        result = {"threshold": format_amount(threshold),
                  "maintainer": self.name_of(winner) if winner else None}
        self.labels[f"social:{a['label']}"] = result
        return result

    # -- controls -----------------------------------------------------------

    def _do_freeze(self, a: dict) -> dict:
        plat = self._platform(a)
        scope: Any = a["scope"]
        if scope == "contract":
            scope = ("contract", self.addr(a["target"]))
        elif scope == "shard":
            scope = ("shard", int(a["target"]))
        set_freeze(plat.net.freeze, scope, a.get("on", True), self.addr(a["by"]),
                   max(plat.net.heights()))
        return {"network_frozen": plat.net.freeze.network_frozen}

    def _do_flag(self, a: dict) -> dict:
        entry = flag_scam(self.scams, self.addr(a["address"]), a["reason"],
                          a.get("source", "on-chain-contract"), self.platforms[MAIN].chain.height)
        return {"listed": entry.address.hex()}

    def _do_delist(self, a: dict) -> dict:
        entry = delist_scam(self.scams, self.addr(a["address"]), a["reason"],
                            self.platforms[MAIN].chain.height)
        return {"delisted": entry.address.hex()}

    # -- observability ------------------------------------------------------

    def _do_extract(self, a: dict) -> dict:
        plat = self._platform(a)
        chain = plat.net.shards[a.get("shard", 0)]
        records = extract_logs(chain, Pipeline.from_json(a["pipeline"]), self.schemas)
        self.extracts[a["label"]] = [r.to_json() for r in records]
        return {"records": len(records)}

    def _do_quadratic_funding(self, a: dict) -> dict:
        match = quadratic_funding_match(tokens(c) for c in a["contributions"])
        self.labels[f"qf:{a['label']}"] = format_amount(match)
        return {"match": format_amount(match)}

    # -- signatures ---------------------------------------------------------

    def _do_sign(self, a: dict) -> dict:
        plat = self._platform(a)
        owner = self.keys[a["as"]]
        signer = self.keys[a.get("signer", a["as"])]
        draft = Transaction(owner.owner, self._next_nonce(plat, owner.owner),
                            transfer(self.addr(a["to"]), tokens(a["amount"])))
        if signer is owner:
            tx = sign_transaction(draft, signer)
        else:
            # forged: a valid signature, but by a key the sender does not own
            value = SCHEMES[signer.scheme_id].sign(signer.private_key, draft.id)
            tx = draft.with_signature(Signature(signer.scheme_id, value))
        if "tamper_byte" in a:
            tx = self._tamper(tx, a["tamper_byte"])
        valid = tx is not None and verify_transaction(tx, owner.public_key)
        self.labels[f"sign:{a['label']}"] = (plat.name, tx, valid)
        return {"verified": valid}

    def _do_submit(self, a: dict) -> dict:
        pname, tx, _ = self.labels[f"sign:{a['label']}"]
        plat = self.platforms[a.get("platform", pname)]
        if tx is None:
            self.tx_status[a["label"]] = "rejected(Malformed)"
            return {"admission": "rejected(Malformed)"}
        return self._offer(plat, tx, a["label"])

    # -- queries ------------------------------------------------------------

    def _global_holding(self, plat: Platform, address: bytes) -> int:
        return sum(c.state.holding(address) for c in plat.net.shards)

    def query(self, path: str) -> Any:
        """Resolve ``head.arg[.field][@platform]`` against the final state."""
        pname = MAIN
        if "@" in path:
            path, pname = path.rsplit("@", 1)
        plat = self.platforms[pname]
        head, _, rest = path.partition(".")
        shards = plat.net.shards

        def amount_of(attr: str) -> str:
            address = self.addr(rest)
            return format_amount(sum(getattr(c.state.account(address), attr) for c in shards))

        if head == "balance":
            return amount_of("spendable")
        if head == "locked":
            return amount_of("locked")
        if head == "holding":
            return format_amount(self._global_holding(plat, self.addr(rest)))
        if head == "nonce":
            return sum(c.state.account(self.addr(rest)).nonce for c in shards)
        if head == "supply":
            return format_amount(plat.net.total_supply())
        if head == "burned":
            return format_amount(sum(c.state.burned for c in shards))
        if head == "height":
            return shards[int(rest)].height if rest else max(plat.net.heights())
        if head == "pool":
            return len(plat.net.pools[int(rest or 0)])
        if head == "headers_complete":
            return not missing_headers(plat.net)
        if head == "replay_ok":
            return all(c.replay().canonical_bytes() == c.state.canonical_bytes() for c in shards)
        if head == "tx":
            return self.tx_status[rest]
        if head in ("outcome", "proposal", "liquid", "relayed"):
            pid_text, _, fld = rest.partition(".")
            pid = int(pid_text)
            if head == "outcome":
                return self._vote_entry(plat, pid)[fld]
            if head == "proposal":
                return getattr(self._proposal(plat, pid), fld)
            if head == "liquid":
                value = getattr(plat.liquid[pid], fld)
                return str(value) if isinstance(value, Fraction) else value
            relayed = plat.chain.state.relayed
            key = next(k for k in sorted(relayed) if k.endswith(f":{pid}"))
            return relayed[key][fld]
        if head == "weight":
            pid_text, _, name = rest.partition(".")
            prop = self._proposal(plat, int(pid_text))
            snapshot = plat.chain.state_at(min(prop.closes_at, plat.chain.height))
            if self.addr(name) not in snapshot.ballots.get(prop.id, {}):
                return "0"
            return format_amount(snapshot.holding(self.addr(name)))
        if head == "masternode":
            address = self.addr(rest)
            return any(masternode_eligible(c.state, address) for c in shards)
        if head == "taint":
            edges = transfer_edges(shards)
            return float(taint_of(self.addr(rest), self.scams, edges))
        if head == "listed":
            return self.scams.is_listed(self.addr(rest))
        if head == "scamlist":
            return len(self.scams)
        if head == "extract":
            label, _, fld = rest.partition(".")
            records = self.extracts[label]
            if fld == "count":
                return len(records)
            if fld.startswith("kinds"):
                return [r["kind"] for r in records]
            return records
        if head == "qf":
            return self.labels[f"qf:{rest}"]
        if head == "social":
            label, _, fld = rest.partition(".")
            return self.labels[f"social:{label}"][fld]
        if head == "terminated":
            return self.terminated
        if head == "verify":
            return self.labels[f"sign:{rest}"][2]
        if head == "frozen":
            return plat.net.freeze.network_frozen
        if head == "takeover":
            return takeover_risk(plat.net, plat.malicious, self.takeover_threshold)
        if head == "warnings":
            return list(plat.net.warnings)
        if head == "validators":
            return len(plat.net.validators_of(int(rest)))
        if head == "abandoned":
            return len(plat.instance.abandoned)
        if head == "rules":
            return getattr(plat.chain.rules, rest)
        if head == "block_hash":
            return plat.chain.blocks[int(rest)].hash.hex()
        if head == "prefix_identical":
            other_name, _, h = rest.partition(".")
            other = self.platforms[other_name].chain
            upto = int(h)
            return all(plat.chain.blocks[i].to_bytes() == other.blocks[i].to_bytes()
                       for i in range(upto + 1))
        if head == "fork_tip":
            return next(f["new_tip"] for f in self.forks if f.get("new_platform") == rest)
        if head == "diverges_at":
            other = self.platforms[rest].chain
            mine = plat.chain
            for h in range(min(len(mine.blocks), len(other.blocks))):
                if mine.blocks[h].hash != other.blocks[h].hash:
                    return h
            return None
        if head == "xshard":
            states = [r.status for c in shards for r in c.state.crossshard.values()
                      if c.shard == r.source]
            wanted = {"settled": "receipted", "aborted": "refunded"}.get(rest, rest)
            return sum(1 for s in states if s == wanted)
        if head == "replicas":
            return plat.net.replica_records
        raise KeyError(f"unknown query {head!r}")

    def _vote_entry(self, plat: Platform, pid: int) -> dict:
        for entry in reversed(self.votes):
            if entry["platform"] == plat.name and entry["proposal"] == pid:
                return entry
        raise KeyError(f"no outcome for proposal {pid}")

    # -- report -------------------------------------------------------------

    def _report(self, results: list[dict], assertions: list[dict], exit_status: int) -> dict:
        platforms = {}
        headers = {}
        takeover = {}
        for name, plat in sorted(self.platforms.items()):
            platforms[name] = {
                "shards": plat.net.shard_count,
                "heights": plat.net.heights(),
                "supply": format_amount(plat.net.total_supply()),
                "burned": format_amount(sum(c.state.burned for c in plat.net.shards)),
                "tip_hashes": [c.tip.hash.hex() for c in plat.net.shards],
                "state_digests": [c.state.digest().hex() for c in plat.net.shards],
                "replay_ok": all(c.replay().canonical_bytes() == c.state.canonical_bytes()
                                 for c in plat.net.shards),
                "events": sum(len(e) for c in plat.net.shards for e in c.events),
                "rules_version": plat.chain.rules.version,
                "frozen": plat.net.freeze.network_frozen,
                "pending": [len(p) for p in plat.net.pools],
                "cross_shard_records": plat.net.replica_records,
                "abandoned_blocks": [{"height": h, "reason": r} for h, r in plat.instance.abandoned],
            }
            headers[name] = [r.to_json() for r in plat.net.coordinator.records]
            risk = takeover_risk(plat.net, plat.malicious, self.takeover_threshold)
            if plat.malicious:
                takeover[name] = risk
        report = {
            "schema": REPORT_SCHEMA,
            "scenario": self.scenario.name,
            "pattern": self.scenario.pattern,
            "seed": self.seed,
            "actions": results,
            "assertions": assertions,
            "votes": self.votes,
            "forks": self.forks,
            "headers": headers,
            "platforms": platforms,
            "scam_list": [e.to_json() for e in self.scams.entries],
            "extracts": self.extracts,
            "takeover_risk": takeover,
            "warnings": sorted(self.warnings),
            "exit_status": exit_status,
        }
        return report


def run_scenario(scenario: Scenario, seed: int | None = None) -> dict:
    return Engine(scenario, seed).run()


def render_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def render_text(report: dict) -> str:
    lines = [f"scenario {report['scenario']} (seed {report['seed']})"]
    for act in report["actions"]:
        tail = f" [{act['error']}]" if "error" in act else ""
        lines.append(f"  action {act['index']:>3} {act['do']:<18} {act['status']}{tail}")
    for vote in report["votes"]:
        lines.append(
            f"  vote {vote['platform']}#{vote['proposal']} {vote['mechanism']}: "
            f"accept {vote['accept_weight']} / reject {vote['reject_weight']} -> "
            f"{vote['decision']}{' (tie)' if vote['tie_broken'] else ''}"
        )
    for fork in report["forks"]:
        lines.append(f"  fork {fork['kind']} at {fork['at_height']}: "
                     f"v{fork['old_version']} -> v{fork['new_version']}")
    for name, plat in report["platforms"].items():
        lines.append(f"  platform {name}: heights {plat['heights']} supply {plat['supply']}")
    for a in report["assertions"]:
        mark = "PASS" if a["pass"] else "FAIL"
        lines.append(f"  {mark} {a['query']} {a['op']} {a['expected']!r} (actual {a['actual']!r})")
    lines.append(f"exit {report['exit_status']}")
    return "\n".join(lines) + "\n"

"""Proposals and the decision mechanisms.

Ballots live in the ledger: ``vote`` and ``delegate`` payloads mutate
``WorldState.ballots`` / ``WorldState.delegations``. The session classes are
read-only views over that state, and the tally functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from math import isqrt
from typing import Iterable, Mapping

from . import errors
from .ledger import (
    MAX_AMOUNT,
    TOKEN,
    ApplyContext,
    Payload,
    Transaction,
    WorldState,
    addr_field,
    check_amount,
    int_field,
    payload_handler,
    system_address,
)

CHOICES = ("accept", "reject")
MECHANISMS = (
    "carbonvote",
    "quadratic",
    "liquid",
    "dictator",
    "crosschain-carbonvote",
    "crosschain-quadratic",
)


@dataclass(frozen=True)
class Proposal:
    id: int
    description: str
    mechanism: str
    opened_at: int
    closes_at: int
    status: str = "open"  # open | accepted | rejected | vetoed
    token: str | None = None  # home platform of the tokens, cross-chain only
    electorate: tuple[bytes, ...] = ()


@dataclass(frozen=True)
class Ballot:
    choice: str
    votes: int = 1
    cost: int = 0


@dataclass(frozen=True)
class VoteOutcome:
    accept_weight: int
    reject_weight: int
    decision: str
    tie_broken: bool

    def to_json(self) -> dict:
        return {
            "accept_weight": self.accept_weight,
            "reject_weight": self.reject_weight,
            "decision": self.decision,
            "tie_broken": self.tie_broken,
        }


def decide(accept: int, reject: int) -> VoteOutcome:
    """Strict majority wins; a tie keeps the status quo."""
    decision = "accepted" if accept > reject else "rejected"
    return VoteOutcome(accept, reject, decision, accept == reject and accept > 0)


def close_proposal(proposal: Proposal, outcome: VoteOutcome) -> Proposal:
    if proposal.status != "open":
        raise errors.ProposalClosed(f"proposal {proposal.id} is {proposal.status}")
    return replace(proposal, status=outcome.decision)


def proposal_pool(proposal_id: int) -> bytes:
    """Account collecting tokens consumed by quadratic votes."""
    return system_address(f"proposal-pool:{proposal_id}")


def _proposal(state: WorldState, proposal_id: int) -> Proposal:
    try:
        return state.proposals[proposal_id]
    except KeyError:
        raise errors.UnknownProposal(str(proposal_id)) from None


# ---------------------------------------------------------------------------
# carbonvote
# ---------------------------------------------------------------------------

@dataclass
class CarbonvoteSession:
    proposal: Proposal
    choice_of: dict[bytes, str]
    snapshot: dict[bytes, int] = field(default_factory=dict)

    @classmethod
    def from_state(cls, state: WorldState, proposal_id: int) -> "CarbonvoteSession":
        prop = _proposal(state, proposal_id)
        ballots = state.ballots.get(proposal_id, {})
        return cls(prop, {a: b.choice for a, b in ballots.items()})


def carbonvote_tally(session: CarbonvoteSession, state: WorldState) -> VoteOutcome:
    """Token-weighted tally over holdings in ``state`` (the close snapshot)."""
    if state.height < session.proposal.closes_at:
        raise errors.NotClosed(
            f"proposal {session.proposal.id} closes at {session.proposal.closes_at}"
        )
    totals = {"accept": 0, "reject": 0}
    session.snapshot = {}
    for address, choice in session.choice_of.items():
        weight = state.holding(address)
        session.snapshot[address] = weight
        totals[choice] += weight
    return decide(totals["accept"], totals["reject"])


# ---------------------------------------------------------------------------
# quadratic voting and funding
# ---------------------------------------------------------------------------

def quadratic_cost(n: int) -> int:
    """Cost of ``n`` votes: n squared whole tokens, in base units."""
    if n < 0:
        raise ValueError("vote count must be non-negative")
    cost = n * n * TOKEN
    if cost > MAX_AMOUNT:
        raise errors.Overflow(f"{n} votes cost more than the largest amount")
    return cost


def max_affordable_votes(spendable: int) -> int:
    return isqrt(spendable // TOKEN)


@dataclass
class QuadraticSession:
    proposal: Proposal
    votes: dict[bytes, tuple[str, int]]
    tokens_consumed: dict[bytes, int]
    as_of: int

    @classmethod
    def from_state(cls, state: WorldState, proposal_id: int) -> "QuadraticSession":
        prop = _proposal(state, proposal_id)
        ballots = state.ballots.get(proposal_id, {})
        return cls(
            prop,
            {a: (b.choice, b.votes) for a, b in ballots.items()},
            {a: b.cost for a, b in ballots.items()},
            state.height,
        )


def quadratic_tally(session: QuadraticSession) -> VoteOutcome:
    if session.as_of < session.proposal.closes_at:
        raise errors.NotClosed(
            f"proposal {session.proposal.id} closes at {session.proposal.closes_at}"
        )
    totals = {"accept": 0, "reject": 0}
    for choice, n in session.votes.values():
        totals[choice] += n
    return decide(totals["accept"], totals["reject"])


_QF_START_DIGITS = 6
_QF_MAX_DIGITS = 40


def quadratic_funding_match(contributions: Iterable[int]) -> int:
    """Matched funding (sum of square roots, squared), floored to a base unit.

    Square roots are integer roots of the base-unit amounts at 10**6 fixed
    precision; precision grows until the floor is pinned by the lower and
    upper bounds of the root sum.
    """
    cs = [int(c) for c in contributions]
    if any(c < 0 for c in cs):
        raise ValueError("contributions must be non-negative")
    if not cs:
        return 0
    digits = _QF_START_DIGITS
    while True:
        scale2 = 10 ** (2 * digits)
        roots = [isqrt(c * scale2) for c in cs]
        inexact = sum(1 for r, c in zip(roots, cs) if r * r != c * scale2)
        lo = sum(roots)
        hi = lo + inexact
        floor_lo, floor_hi = (lo * lo) // scale2, (hi * hi) // scale2
        if floor_lo == floor_hi:
            return check_amount(floor_lo)
        if digits >= _QF_MAX_DIGITS:
            # The bracket straddles an integer; exact-integer squares are
            # the common cause (e.g. sqrt 2 + sqrt 8).
            return check_amount(floor_hi)
        digits *= 2


# ---------------------------------------------------------------------------
# liquid democracy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DelegationGraph:
    edges: Mapping[bytes, bytes] = field(default_factory=dict)
    direct_votes: Mapping[bytes, str] = field(default_factory=dict)
    members: frozenset[bytes] = frozenset()

    @classmethod
    def from_state(cls, state: WorldState, proposal_id: int) -> "DelegationGraph":
        prop = _proposal(state, proposal_id)
        edges = dict(state.delegations.get(proposal_id, {}))
        votes = {a: b.choice for a, b in state.ballots.get(proposal_id, {}).items()}
        members = set(prop.electorate) | set(edges) | set(edges.values()) | set(votes)
        return cls(edges, votes, frozenset(members))

    def terminal(self, address: bytes) -> bytes:
        seen = set()
        while address in self.edges:
            if address in seen:
                raise errors.CycleDetected(address.hex())
            seen.add(address)
            address = self.edges[address]
        return address


def set_delegate(graph: DelegationGraph, frm: bytes, to: bytes | None) -> DelegationGraph:
    """Add, replace or (``to=None``) revoke ``frm``'s delegation."""
    edges = dict(graph.edges)
    votes = dict(graph.direct_votes)
    members = set(graph.members) | {frm}
    if to is None:
        edges.pop(frm, None)
        return DelegationGraph(edges, votes, frozenset(members))
    if to == frm:
        raise errors.SelfDelegation(frm.hex())
    node = to
    while node is not None:
        if node == frm:
            raise errors.CycleDetected(f"{frm.hex()[:12]} -> {to.hex()[:12]}")
        node = edges.get(node)
    edges[frm] = to
    votes.pop(frm, None)
    members.add(to)
    return DelegationGraph(edges, votes, frozenset(members))


def cast_direct(graph: DelegationGraph, voter: bytes, choice: str) -> DelegationGraph:
    if voter in graph.edges:
        raise errors.DelegatedVoter(f"{voter.hex()[:12]} has delegated; revoke first")
    if choice not in CHOICES:
        raise errors.InvalidChoice(choice)
    votes = dict(graph.direct_votes)
    votes[voter] = choice
    return DelegationGraph(dict(graph.edges), votes, graph.members | {voter})


@dataclass(frozen=True)
class LiquidTally:
    outcome: VoteOutcome
    weights: dict[bytes, int]  # terminal address -> accumulated weight
    counted: int
    uncounted: int
    max_delegate_share: Fraction


def liquid_weights(graph: DelegationGraph) -> LiquidTally:
    """Flow one unit per member to its terminal; only voting terminals count."""
    terminal_of: dict[bytes, bytes] = {}

    def resolve(address: bytes) -> bytes:
        path = []
        while address in graph.edges and address not in terminal_of:
            path.append(address)
            address = graph.edges[address]
            if len(path) > len(graph.edges):
                raise errors.CycleDetected("delegation graph has a cycle")
        end = terminal_of.get(address, address)
        for node in path:
            terminal_of[node] = end
        return end

    weights: dict[bytes, int] = {}
    for member in sorted(graph.members):
        end = resolve(member)
        weights[end] = weights.get(end, 0) + 1
    totals = {"accept": 0, "reject": 0}
    uncounted = 0
    for end, weight in weights.items():
        choice = graph.direct_votes.get(end)
        if choice is None:
            uncounted += weight
        else:
            totals[choice] += weight
    counted = totals["accept"] + totals["reject"]
    voting = [w for end, w in weights.items() if end in graph.direct_votes]
    share = Fraction(max(voting), len(graph.members)) if voting else Fraction(0)
    return LiquidTally(decide(totals["accept"], totals["reject"]), weights, counted,
                       uncounted, share)


def liquid_tally(graph: DelegationGraph) -> VoteOutcome:
    return liquid_weights(graph).outcome


# ---------------------------------------------------------------------------
# benevolent dictatorship
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DictatorPolicy:
    dictators: frozenset[bytes]
    veto_window: int
    genesis_height: int = 0

    @property
    def window_end(self) -> int:
        return self.genesis_height + self.veto_window


def dictator_finalize(proposal: Proposal, policy: DictatorPolicy,
                      community: VoteOutcome | None, action: str, at: int,
                      actor: bytes) -> Proposal:
    """Apply a dictator's decision; a veto only works inside the window."""
    if actor not in policy.dictators:
        raise errors.NotDictator(actor.hex()[:12])
    if action not in ("accept", "reject", "veto"):
        raise errors.InvalidChoice(action)
    current = proposal
    if community is not None and current.status == "open":
        current = close_proposal(current, community)
    if action == "veto":
        if at >= policy.window_end:
            raise errors.VetoWindowExpired(f"window ended at {policy.window_end}")
        if current.status not in ("open", "accepted"):
            raise errors.ProposalClosed(f"proposal {current.id} is {current.status}")
        return replace(current, status="vetoed")
    if current.status != "open":
        raise errors.ProposalClosed(f"proposal {current.id} is {current.status}")
    return replace(current, status=action + "ed")


# ---------------------------------------------------------------------------
# cross-chain token voting
# ---------------------------------------------------------------------------

@dataclass
class CrossChainSession:
    """A vote about platform ``home`` run on host platform ``host``."""

    home: str
    host: str
    proposal_id: int
    inner: str = "carbonvote"  # carbonvote | quadratic
    foreign_token_ledger: dict[bytes, int] = field(default_factory=dict)
    relayed_result: VoteOutcome | None = None


def _crosschain_outcome(session: CrossChainSession, host_state: WorldState) -> VoteOutcome:
    if session.home not in host_state.foreign_issued:
        raise errors.TokensNotIssued(f"no {session.home} tokens on {session.host}")
    prop = _proposal(host_state, session.proposal_id)
    if host_state.height < prop.closes_at:
        raise errors.NotClosed(f"proposal {prop.id} closes at {prop.closes_at}")
    ledger = dict(host_state.foreign_tokens.get(session.home, {}))
    session.foreign_token_ledger = ledger
    totals = {"accept": 0, "reject": 0}
    for address, ballot in host_state.ballots.get(session.proposal_id, {}).items():
        if session.inner == "quadratic":
            totals[ballot.choice] += ballot.votes
        else:
            totals[ballot.choice] += ledger.get(address, 0)
    return decide(totals["accept"], totals["reject"])


def run_crosschain_vote(session: CrossChainSession, host_state: WorldState) -> VoteOutcome:
    """Tally on the host from foreign-token holdings and set the relay value."""
    outcome = _crosschain_outcome(session, host_state)
    session.relayed_result = outcome
    return outcome


def verify_relay(session: CrossChainSession, host_state: WorldState,
                 claimed: VoteOutcome) -> VoteOutcome:
    actual = _crosschain_outcome(session, host_state)
    if claimed != actual:
        raise errors.RelayMismatch(f"relayed {claimed.decision}, host tallied {actual.decision}")
    return actual


def relay_payload(session: CrossChainSession, outcome: VoteOutcome | None = None) -> Payload:
    outcome = outcome or session.relayed_result
    if outcome is None:
        raise errors.RelayMismatch("nothing to relay")
    return Payload.of(
        "governance", action="relay_result", proposal=session.proposal_id,
        platform=session.host, decision=outcome.decision,
        accept_weight=outcome.accept_weight, reject_weight=outcome.reject_weight,
        tie_broken=outcome.tie_broken,
    )


# ---------------------------------------------------------------------------
# ledger payloads
# ---------------------------------------------------------------------------

def open_proposal_payload(proposal_id: int, mechanism: str, closes_at: int,
                          description: str = "", token: str | None = None,
                          electorate: Iterable[bytes] = ()) -> Payload:
    values = {"action": "open_proposal", "proposal": proposal_id, "mechanism": mechanism,
              "closes_at": closes_at, "description": description}
    if token is not None:
        values["token"] = token
    electorate = [a.hex() for a in electorate]
    if electorate:
        values["electorate"] = electorate
    return Payload.of("governance", **values)


def issue_foreign_payload(token: str, holders: Mapping[bytes, int]) -> Payload:
    return Payload.of("governance", action="issue_foreign", token=token,
                      holders={a.hex(): amt for a, amt in sorted(holders.items())})


def vote_payload(proposal_id: int, choice: str, votes: int = 1) -> Payload:
    return Payload.of("vote", proposal=proposal_id, choice=choice, votes=votes)


def delegate_payload(proposal_id: int, to: bytes | None) -> Payload:
    return Payload.of("delegate", proposal=proposal_id, to=to.hex() if to else None)


@payload_handler(
    "governance",
    required=("action",),
    optional=("proposal", "mechanism", "closes_at", "description", "token", "electorate",
              "holders", "platform", "decision", "accept_weight", "reject_weight",
              "tie_broken"),
)
def _governance(state: WorldState, tx: Transaction, ctx: ApplyContext) -> None:
    action = tx.payload.get("action")
    data = tx.payload.as_dict()
    if action == "open_proposal":
        pid = int_field(tx.payload, "proposal")
        if pid in state.proposals:
            raise errors.DuplicateProposal(str(pid))
        mechanism = data.get("mechanism")
        if mechanism not in MECHANISMS:
            raise errors.WrongMechanism(str(mechanism))
        closes_at = int_field(tx.payload, "closes_at")
        token = data.get("token")
        if mechanism.startswith("crosschain-"):
            if not token or token not in state.foreign_issued:
                raise errors.TokensNotIssued(f"{token} tokens not issued on this platform")
        electorate = tuple(bytes.fromhex(a) for a in data.get("electorate", ()))
        state.proposals[pid] = Proposal(pid, str(data.get("description", "")), mechanism,
                                        state.height, closes_at, token=token,
                                        electorate=electorate)
        ctx.emit("ProposalOpened", proposal=pid, mechanism=mechanism, closes_at=closes_at)
    elif action == "issue_foreign":
        token = data.get("token")
        holders = data.get("holders") or {}
        if not isinstance(token, str) or not isinstance(holders, dict):
            raise errors.MalformedPayload("issue_foreign needs token and holders")
        book = state.foreign_tokens.setdefault(token, {})
        for hexaddr, amount in sorted(holders.items()):
            if isinstance(amount, bool) or not isinstance(amount, int) or amount < 0:
                raise errors.MalformedPayload("foreign amount must be a non-negative integer")
            address = bytes.fromhex(hexaddr)
            book[address] = check_amount(book.get(address, 0) + amount)
            ctx.emit("ForeignIssued", token=token, holder=address, amount=amount)
        state.foreign_issued.setdefault(token, state.height)
    elif action == "relay_result":
        pid = int_field(tx.payload, "proposal")
        platform = data.get("platform")
        record = {k: data.get(k) for k in ("decision", "accept_weight", "reject_weight",
                                           "tie_broken")}
        state.relayed[f"{platform}:{pid}"] = record
        ctx.emit("ResultRelayed", proposal=pid, platform=platform,
                 decision=record["decision"], accept_weight=record["accept_weight"],
                 reject_weight=record["reject_weight"])
    else:
        raise errors.MalformedPayload(f"unknown governance action {action!r}")


@payload_handler("vote", required=("proposal", "choice"), optional=("votes",))
def _vote(state: WorldState, tx: Transaction, ctx: ApplyContext) -> None:
    pid = int_field(tx.payload, "proposal")
    prop = _proposal(state, pid)
    if state.height > prop.closes_at:
        raise errors.VotingClosed(f"proposal {pid} closed at {prop.closes_at}")
    choice = tx.payload.get("choice")
    if choice not in CHOICES:
        raise errors.InvalidChoice(str(choice))
    voter = tx.sender
    ballots = state.ballots.setdefault(pid, {})
    cost = 0
    n = 1
    if prop.mechanism in ("quadratic", "crosschain-quadratic"):
        n = int_field(tx.payload, "votes", minimum=1)
        cost = quadratic_cost(n)
        previous = ballots.get(voter)
        refund = previous.cost if previous else 0
        if prop.mechanism == "quadratic":
            pool = proposal_pool(pid)
            if state.spendable(voter) + refund < cost:
                raise errors.InsufficientSpendable(
                    f"{n} votes cost {cost}, spendable {state.spendable(voter)}"
                )
            if refund:
                state.move(pool, voter, refund)
            state.move(voter, pool, cost)
        else:
            book = state.foreign_tokens.setdefault(prop.token, {})
            have = book.get(voter, 0) + refund
            if have < cost:
                raise errors.InsufficientSpendable(f"{n} votes cost {cost} foreign, have {have}")
            book[voter] = have - cost
    elif prop.mechanism == "liquid":
        if voter in state.delegations.get(pid, {}):
            raise errors.DelegatedVoter(f"{voter.hex()[:12]} has delegated; revoke first")
    ballots[voter] = Ballot(choice, n, cost)
    ctx.emit("Vote", proposal=pid, voter=voter, choice=choice, votes=n, cost=cost)


@payload_handler("delegate", required=("proposal", "to"))
def _delegate(state: WorldState, tx: Transaction, ctx: ApplyContext) -> None:
    pid = int_field(tx.payload, "proposal")
    prop = _proposal(state, pid)
    if prop.mechanism != "liquid":
        raise errors.WrongMechanism(f"proposal {pid} uses {prop.mechanism}")
    if state.height > prop.closes_at:
        raise errors.VotingClosed(f"proposal {pid} closed at {prop.closes_at}")
    to = addr_field(tx.payload, "to") if tx.payload.get("to") is not None else None
    graph = DelegationGraph.from_state(state, pid)
    graph = set_delegate(graph, tx.sender, to)
    state.delegations[pid] = dict(graph.edges)
    ballots = state.ballots.setdefault(pid, {})
    if to is not None:
        ballots.pop(tx.sender, None)
    ctx.emit("Delegate", proposal=pid, delegator=tx.sender, delegate=to)

import random
from fractions import Fraction
from math import isqrt

import mpmath
import pytest
from hypothesis import given, settings, strategies as st

from govsim import errors
from govsim.ledger import MAX_AMOUNT, TOKEN, Chain, transfer
from govsim.votes import (
    CarbonvoteSession,
    CrossChainSession,
    DelegationGraph,
    DictatorPolicy,
    Proposal,
    QuadraticSession,
    VoteOutcome,
    carbonvote_tally,
    cast_direct,
    decide,
    delegate_payload,
    dictator_finalize,
    issue_foreign_payload,
    liquid_tally,
    liquid_weights,
    max_affordable_votes,
    open_proposal_payload,
    proposal_pool,
    quadratic_cost,
    quadratic_funding_match,
    quadratic_tally,
    relay_payload,
    run_crosschain_vote,
    set_delegate,
    verify_relay,
    vote_payload,
)

from ledger_driver import Driver


def addr(i):
    return bytes([i]) * 32


def carbon(balances, choices, closes_at=2, between=()):
    """Open, vote and close a carbonvote; return (outcome, session)."""
    d = Driver({k: v * TOKEN for k, v in balances.items()})
    first = next(iter(balances))
    d.block((first, open_proposal_payload(1, "carbonvote", closes_at)))
    d.block(*((name, vote_payload(1, choice)) for name, choice in choices.items()))
    if between:
        d.block(*between)
    while d.chain.height < closes_at:
        d.block()
    state = d.chain.state_at(closes_at)
    session = CarbonvoteSession.from_state(state, 1)
    return carbonvote_tally(session, state), session, d


class TestCarbonvote:
    def test_dao_split(self):
        outcome, _, _ = carbon({"a": 86, "b": 14}, {"a": "accept", "b": "reject"})
        assert outcome == VoteOutcome(86 * TOKEN, 14 * TOKEN, "accepted", False)

    def test_migration_zeroes_weight(self):
        outcome, session, d = carbon(
            {"a": 40, "b": 30}, {"a": "accept", "b": "reject"}, closes_at=3,
            between=[("a", transfer(Driver({}).addr("fresh"), 40 * TOKEN))],
        )
        assert session.snapshot[d.addr("a")] == 0
        assert outcome.decision == "rejected"

    def test_tie_keeps_status_quo(self):
        outcome, _, _ = carbon({"a": 50, "b": 50}, {"a": "accept", "b": "reject"})
        assert outcome.decision == "rejected" and outcome.tie_broken

    def test_no_votes(self):
        assert decide(0, 0) == VoteOutcome(0, 0, "rejected", False)

    def test_not_closed(self):
        d = Driver({"a": TOKEN})
        d.block(("a", open_proposal_payload(1, "carbonvote", 10)))
        with pytest.raises(errors.NotClosed):
            carbonvote_tally(CarbonvoteSession.from_state(d.chain.state, 1), d.chain.state)

    def test_last_write_wins(self):
        d = Driver({"a": 5 * TOKEN})
        d.block(("a", open_proposal_payload(1, "carbonvote", 3)))
        d.block(("a", vote_payload(1, "reject")))
        d.block(("a", vote_payload(1, "accept")))
        state = d.chain.state
        assert carbonvote_tally(CarbonvoteSession.from_state(state, 1), state).decision == "accepted"

    def test_voting_after_close_refused(self):
        d = Driver({"a": TOKEN})
        d.block(("a", open_proposal_payload(1, "carbonvote", 1)))
        with pytest.raises(errors.VotingClosed):
            d.block(("a", vote_payload(1, "accept")))

    def test_flash_loan_swings_the_snapshot(self):
        # borrowed tokens that sit in the voter's account at close count in full
        outcome, session, d = carbon(
            {"lender": 1000, "a": 10, "b": 50}, {"a": "accept", "b": "reject"}, closes_at=3,
            between=[("lender", transfer(Driver({}).addr("a"), 1000 * TOKEN))],
        )
        d.block(("a", transfer(d.addr("lender"), 1000 * TOKEN)))
        assert outcome.decision == "accepted"
        assert session.snapshot[d.addr("a")] == d.chain.state_at(3).holding(d.addr("a"))
        assert d.chain.state.holding(d.addr("a")) == 10 * TOKEN

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(1, 100), min_size=2, max_size=6), st.integers(2, 9))
    def test_scale_invariance(self, holdings, factor):
        names = {f"v{i}": h for i, h in enumerate(holdings)}
        choices = {n: "accept" if i % 2 else "reject" for i, n in enumerate(names)}
        base, _, _ = carbon(names, choices)
        scaled, _, _ = carbon({n: h * factor for n, h in names.items()}, choices)
        assert base.decision == scaled.decision


class TestQuadratic:
    @pytest.mark.parametrize("n,tokens", [(0, 0), (1, 1), (3, 9), (10, 100)])
    def test_cost(self, n, tokens):
        assert quadratic_cost(n) == tokens * TOKEN

    def test_marginal_law(self):
        for n in range(1, 500):
            assert quadratic_cost(n) - quadratic_cost(n - 1) == (2 * n - 1) * TOKEN

    def test_overflow(self):
        limit = isqrt(MAX_AMOUNT // TOKEN)
        quadratic_cost(limit)
        with pytest.raises(errors.Overflow):
            quadratic_cost(limit + 1)

    def test_affordability(self):
        assert max_affordable_votes(8 * TOKEN) == 2
        d = Driver({"a": 8 * TOKEN})
        d.block(("a", open_proposal_payload(1, "quadratic", 5)))
        with pytest.raises(errors.InsufficientSpendable):
            d.block(("a", vote_payload(1, "accept", 3)))
        d.block(("a", vote_payload(1, "accept", 2)))
        assert d.chain.state.spendable(d.addr("a")) == 4 * TOKEN

    def test_tally_and_pool(self):
        d = Driver({"a": 20 * TOKEN, "b": 20 * TOKEN})
        d.block(("a", open_proposal_payload(1, "quadratic", 2)))
        d.block(("a", vote_payload(1, "accept", 3)), ("b", vote_payload(1, "reject", 2)))
        state = d.chain.state
        outcome = quadratic_tally(QuadraticSession.from_state(state, 1))
        assert (outcome.accept_weight, outcome.reject_weight, outcome.decision) == (3, 2, "accepted")
        assert state.spendable(proposal_pool(1)) == 13 * TOKEN
        assert state.total_supply() == 40 * TOKEN

    def test_recast_refunds(self):
        d = Driver({"a": 20 * TOKEN})
        d.block(("a", open_proposal_payload(1, "quadratic", 5)))
        d.block(("a", vote_payload(1, "accept", 4)))
        d.block(("a", vote_payload(1, "accept", 1)))
        session = QuadraticSession.from_state(d.chain.state, 1)
        assert session.tokens_consumed[d.addr("a")] == TOKEN
        assert d.chain.state.spendable(d.addr("a")) == 19 * TOKEN

    def test_tie(self):
        d = Driver({"a": 20 * TOKEN, "b": 20 * TOKEN})
        d.block(("a", open_proposal_payload(1, "quadratic", 2)))
        d.block(("a", vote_payload(1, "accept", 2)), ("b", vote_payload(1, "reject", 2)))
        outcome = quadratic_tally(QuadraticSession.from_state(d.chain.state, 1))
        assert outcome.decision == "rejected" and outcome.tie_broken

    def test_not_closed(self):
        d = Driver({"a": 20 * TOKEN})
        d.block(("a", open_proposal_payload(1, "quadratic", 9)))
        with pytest.raises(errors.NotClosed):
            quadratic_tally(QuadraticSession.from_state(d.chain.state, 1))


def qf_oracle(contributions):
    """Floor of (sum of square roots)^2 using 80-digit arithmetic."""
    with mpmath.workdps(80):
        total = mpmath.fsum(mpmath.sqrt(c) for c in contributions) ** 2
        nearest = mpmath.nint(total)
        if abs(total - nearest) < mpmath.mpf(10) ** -40:
            return int(nearest)
        return int(mpmath.floor(total))


class TestFunding:
    def test_examples(self):
        assert quadratic_funding_match([TOKEN, 4 * TOKEN, 4 * TOKEN]) == 25 * TOKEN
        assert quadratic_funding_match([]) == 0
        assert quadratic_funding_match([12_345]) == 12_345

    def test_irrational_roots_that_square_to_integers(self):
        assert quadratic_funding_match([2, 8]) == 18
        assert quadratic_funding_match([3, 12, 27]) == 108

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 10**12), max_size=12))
    def test_matches_high_precision_oracle(self, cs):
        assert quadratic_funding_match(cs) == qf_oracle(cs)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 10**9), max_size=8), st.integers(1, 10**9))
    def test_monotone(self, cs, extra):
        assert quadratic_funding_match(cs + [extra]) >= quadratic_funding_match(cs)

    def test_single_contribution_is_identity(self):
        rng = random.Random(0)
        for _ in range(200):
            c = rng.randrange(10**15)
            assert quadratic_funding_match([c]) == c


def path_walk(graph):
    """Independent oracle: walk every member to its terminal."""
    weights = {}
    for member in graph.members:
        node, hops = member, 0
        while node in graph.edges:
            node = graph.edges[node]
            hops += 1
            assert hops <= len(graph.members)
        weights[node] = weights.get(node, 0) + 1
    return weights


class TestLiquid:
    def test_chain_of_three(self):
        a, b, c, dd = addr(1), addr(2), addr(3), addr(4)
        g = DelegationGraph()
        g = set_delegate(g, a, b)
        g = set_delegate(g, b, c)
        g = cast_direct(g, c, "accept")
        g = cast_direct(g, dd, "reject")
        result = liquid_weights(g)
        assert result.weights[c] == 3
        assert (result.outcome.accept_weight, result.outcome.reject_weight) == (3, 1)
        assert result.outcome.decision == "accepted"

    def test_revoke_and_vote_directly(self):
        a, b, c = addr(1), addr(2), addr(3)
        g = set_delegate(set_delegate(DelegationGraph(), a, b), b, c)
        g = cast_direct(g, c, "accept")
        g = set_delegate(g, a, None)
        g = cast_direct(g, a, "accept")
        weights = liquid_weights(g).weights
        assert weights[c] == 2 and weights[a] == 1

    def test_cycle_rejected(self):
        a, b, c = addr(1), addr(2), addr(3)
        g = set_delegate(set_delegate(DelegationGraph(), a, b), b, c)
        with pytest.raises(errors.CycleDetected):
            set_delegate(g, c, a)
        with pytest.raises(errors.SelfDelegation):
            set_delegate(g, a, a)

    def test_delegating_clears_direct_vote(self):
        a, b = addr(1), addr(2)
        g = cast_direct(DelegationGraph(), a, "reject")
        g = set_delegate(g, a, b)
        assert a not in g.direct_votes
        with pytest.raises(errors.DelegatedVoter):
            cast_direct(g, a, "accept")

    def test_nobody_votes(self):
        g = set_delegate(DelegationGraph(), addr(1), addr(2))
        outcome = liquid_tally(g)
        assert (outcome.accept_weight, outcome.reject_weight, outcome.decision) == (0, 0, "rejected")

    def test_star_centralisation(self):
        hub = addr(99)
        g = DelegationGraph()
        for i in range(10):
            g = set_delegate(g, addr(i + 1), hub)
        g = cast_direct(g, hub, "accept")
        result = liquid_weights(g)
        assert result.weights[hub] == 11
        assert result.max_delegate_share == Fraction(11, 11)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 50), st.randoms(use_true_random=False))
    def test_conservation_against_oracle(self, n, rnd):
        nodes = [addr(i) for i in range(n)]
        g = DelegationGraph(members=frozenset(nodes))
        order = nodes[:]
        rnd.shuffle(order)
        for i, node in enumerate(order):
            if i and rnd.random() < 0.6:
                g = set_delegate(g, node, order[rnd.randrange(i)])
        for node in nodes:
            if node not in g.edges and rnd.random() < 0.5:
                g = cast_direct(g, node, rnd.choice(["accept", "reject"]))
        result = liquid_weights(g)
        assert result.weights == path_walk(g)
        assert result.counted + result.uncounted == n

    def test_ledger_delegation_flow(self):
        d = Driver({"a": TOKEN, "b": TOKEN, "c": TOKEN})
        d.block(("a", open_proposal_payload(1, "liquid", 5)))
        d.block(("a", delegate_payload(1, d.addr("b"))), ("b", delegate_payload(1, d.addr("c"))),
                ("c", vote_payload(1, "accept")))
        with pytest.raises(errors.CycleDetected):
            d.block(("c", delegate_payload(1, d.addr("a"))))
        with pytest.raises(errors.DelegatedVoter):
            d.block(("a", vote_payload(1, "reject")))
        graph = DelegationGraph.from_state(d.chain.state, 1)
        assert liquid_weights(graph).weights[d.addr("c")] == 3


class TestDictator:
    founder = addr(7)
    policy = DictatorPolicy(frozenset({addr(7)}), veto_window=12)
    proposal = Proposal(1, "upgrade", "carbonvote", 0, 5)
    accepted = VoteOutcome(60, 40, "accepted", False)

    def test_veto_inside_window(self):
        p = dictator_finalize(self.proposal, self.policy, self.accepted, "veto", 11, self.founder)
        assert p.status == "vetoed"

    def test_veto_after_window(self):
        with pytest.raises(errors.VetoWindowExpired):
            dictator_finalize(self.proposal, self.policy, self.accepted, "veto", 12, self.founder)

    def test_direct_accept(self):
        p = dictator_finalize(self.proposal, self.policy, None, "accept", 30, self.founder)
        assert p.status == "accepted"

    def test_not_dictator(self):
        with pytest.raises(errors.NotDictator):
            dictator_finalize(self.proposal, self.policy, None, "accept", 1, addr(8))

    def test_closed_is_immutable(self):
        p = dictator_finalize(self.proposal, self.policy, None, "reject", 1, self.founder)
        with pytest.raises(errors.ProposalClosed):
            dictator_finalize(p, self.policy, None, "accept", 2, self.founder)


class TestCrossChain:
    def host(self, holders, votes, inner="crosschain-carbonvote"):
        d = Driver({"op": TOKEN, **{h: 0 for h in holders}})
        d.block(("op", issue_foreign_payload("A", {d.addr(h): v * TOKEN for h, v in holders.items()})))
        d.block(("op", open_proposal_payload(4, inner, 3, token="A")))
        d.block(*((h, vote_payload(4, c)) for h, c in votes.items()))
        d.block()
        return d

    def test_sixty_forty(self):
        d = self.host({"x": 35, "y": 25, "z": 40}, {"x": "accept", "y": "accept", "z": "reject"})
        session = CrossChainSession("A", "B", 4)
        outcome = run_crosschain_vote(session, d.chain.state)
        assert (outcome.accept_weight, outcome.reject_weight) == (60 * TOKEN, 40 * TOKEN)
        assert session.relayed_result == outcome
        assert verify_relay(session, d.chain.state, outcome) == outcome
        home = Driver({"team": TOKEN})
        home.block(("team", relay_payload(session)))
        assert home.chain.state.relayed["B:4"]["decision"] == "accepted"

    def test_zero_holder_counts_zero(self):
        d = self.host({"x": 10, "w": 0}, {"x": "reject", "w": "accept"})
        outcome = run_crosschain_vote(CrossChainSession("A", "B", 4), d.chain.state)
        assert outcome.accept_weight == 0 and outcome.decision == "rejected"

    def test_tokens_not_issued(self):
        d = Driver({"op": TOKEN})
        with pytest.raises(errors.TokensNotIssued):
            d.block(("op", open_proposal_payload(4, "crosschain-carbonvote", 3, token="A")))
        with pytest.raises(errors.TokensNotIssued):
            run_crosschain_vote(CrossChainSession("A", "B", 4), d.chain.state)

    def test_relay_mismatch(self):
        d = self.host({"x": 10, "y": 5}, {"x": "accept", "y": "reject"})
        session = CrossChainSession("A", "B", 4)
        with pytest.raises(errors.RelayMismatch):
            verify_relay(session, d.chain.state, VoteOutcome(0, 15 * TOKEN, "rejected", False))

    def test_quadratic_inner_spends_foreign_tokens(self):
        d = Driver({"op": TOKEN, "x": 0})
        d.block(("op", issue_foreign_payload("A", {d.addr("x"): 10 * TOKEN})))
        d.block(("op", open_proposal_payload(4, "crosschain-quadratic", 3, token="A")))
        d.block(("x", vote_payload(4, "accept", 3)))
        d.block()
        outcome = run_crosschain_vote(CrossChainSession("A", "B", 4, "quadratic"), d.chain.state)
        assert outcome.accept_weight == 3
        assert d.chain.state.foreign_tokens["A"][d.addr("x")] == TOKEN

"""Acceptance gate: one test per criterion, each yielding a PASS/FAIL line.

Under pytest the lines are collected and shown in an "acceptance criteria"
section of the terminal summary. ``python tests/test_acceptance.py`` runs the
same gate.
"""

import json
import random
import sys
import time
from contextlib import contextmanager
from fractions import Fraction
from importlib import resources

import pytest

from govsim import errors
from govsim.admission import (
    FilterPolicy,
    TransactionPool,
    check_transaction,
    filter_and_admit,
    sign_transaction,
    verify_transaction,
)
from govsim.controls import FreezeState, set_freeze
from govsim.ledger import TOKEN, ProtocolRules, Transaction, burn, call, home_shard, transfer
from govsim.lifecycle import (
    ForkSpec,
    PlatformInstance,
    apply_hard_fork,
    apply_soft_fork,
    backward_incompatible_block,
    propose_block,
    social_contract_threshold,
)
from govsim.observability import Pipeline, dump_jsonl, extract_logs
from govsim.scenario import parse_scenario, render_json, run_scenario
from govsim.sharding import init_shards, seal_shard, settle_cross_shard, submit
from govsim.votes import (
    CarbonvoteSession,
    DelegationGraph,
    carbonvote_tally,
    cast_direct,
    liquid_weights,
    open_proposal_payload,
    quadratic_cost,
    set_delegate,
    vote_payload,
)
from govsim.ledger import Chain

from conftest import ACCEPTANCE_VERDICTS, keypair, signed
from ledger_driver import Driver


def _emit(line):
    ACCEPTANCE_VERDICTS.append(line)
    print(line)


@contextmanager
def criterion(number, title):
    try:
        yield
    except BaseException:
        _emit(f"FAIL criterion {number}: {title}")
        raise
    _emit(f"PASS criterion {number}: {title}")


def fixture(name):
    return resources.files("govsim").joinpath("scenarios", name).read_text()


def report_of(name):
    report = run_scenario(parse_scenario(fixture(name)))
    failed = [a for a in report["assertions"] if not a["pass"]]
    assert report["exit_status"] == 0, failed
    return report


def test_criterion_01_quadratic_cost_table():
    with criterion(1, "quadratic cost n^2 and marginal 2n-1 for n in 0..1000 under 1 s"):
        start = time.perf_counter()
        for n in range(1001):
            assert quadratic_cost(n) == n * n * TOKEN
            if n:
                assert quadratic_cost(n) - quadratic_cost(n - 1) == (2 * n - 1) * TOKEN
        assert quadratic_cost(3) == 9 * TOKEN
        assert time.perf_counter() - start < 1.0


def test_criterion_02_social_contract_thresholds():
    with criterion(2, "social-contract thresholds exact with constant yearly step"):
        assert social_contract_threshold(0) == 72_002_454_768
        assert social_contract_threshold(1) == 87_629_030_928
        for n in range(51):
            # big-integer oracle: tokens * thousandths, no intermediate rounding
            oracle = 60_102_216 * (1198 + 260 * n)
            assert social_contract_threshold(n) == oracle
            assert Fraction(oracle, TOKEN) == 60_102_216 * (Fraction("1.198") + Fraction("0.26") * n)
        steps = {social_contract_threshold(n + 1) - social_contract_threshold(n) for n in range(50)}
        assert steps == {15_626_576_160}
        assert Fraction(15_626_576_160, TOKEN) == Fraction("15626576.16")


def test_criterion_03_dao_carbonvote():
    with criterion(3, "DAO carbonvote 86/14 accepted; migrated address weighs 0"):
        report = report_of("dao_carbonvote.json")
        vote = report["votes"][0]
        assert (vote["accept_weight"], vote["reject_weight"], vote["decision"]) == ("86", "14", "accepted")
        by_query = {a["query"]: a["actual"] for a in report["assertions"]}
        assert by_query["weight.1.mallory"] == "0"


def _carbon(holdings, choices, split=None):
    """Run a carbonvote; ``split=(name, k)`` moves that voter's tokens to k fresh
    addresses before the snapshot and has them all vote the same way."""
    d = Driver(dict(holdings), ProtocolRules(max_block_txs=64))
    first = next(iter(holdings))
    d.block((first, open_proposal_payload(1, "carbonvote", 3)))
    voters = dict(choices)
    moves = []
    if split:
        name, k = split
        choice = voters.pop(name)
        amount = holdings[name]
        shares = [amount // k] * k
        shares[-1] += amount - sum(shares)
        for i, share in enumerate(shares):
            fresh = f"{name}~{i}"
            d.addr(fresh)
            if share:
                moves.append((name, transfer(d.addr(fresh), share)))
            voters[fresh] = choice
    d.block(*moves)
    d.block(*((n, vote_payload(1, c)) for n, c in voters.items()))
    state = d.chain.state_at(3)
    return carbonvote_tally(CarbonvoteSession.from_state(state, 1), state)


def test_criterion_04_sybil_split_invariance():
    with criterion(4, "200 sybil splits leave decision and weights unchanged under 5 s"):
        rng = random.Random(4)
        start = time.perf_counter()
        for _ in range(200):
            names = [f"h{i}" for i in range(rng.randrange(2, 7))]
            holdings = {n: rng.randrange(1, 10_000) * rng.choice([1, TOKEN]) for n in names}
            choices = {n: rng.choice(["accept", "reject"]) for n in names}
            target = rng.choice(names)
            base = _carbon(holdings, choices)
            split = _carbon(holdings, choices, (target, rng.randrange(1, 11)))
            assert split == base
        assert time.perf_counter() - start < 5.0


def test_criterion_05_hard_fork():
    with criterion(5, "hard fork of 99 blocks at 80 shares the prefix and then diverges"):
        report = report_of("hardfork_80.json")
        fork = report["forks"][0]
        assert fork["at_height"] == 80
        assert report["platforms"]["forked"]["heights"] == [81]
        assert report["platforms"]["main"]["heights"] == [99]
        a = keypair("alice")
        inst = PlatformInstance(Chain({a.owner: 1000 * TOKEN}))
        for i in range(99):
            propose_block(inst, [signed(a, i, transfer(keypair("bob").owner, 1))], keypair("v").owner)
        old, new = apply_hard_fork(inst, ForkSpec("hard", 80, ProtocolRules(2)))
        assert new.chain.height == 80
        assert [b.hash for b in new.chain.blocks] == [b.hash for b in old.chain.blocks[:81]]
        propose_block(new, [signed(a, 80, burn(5))], keypair("v").owner)
        assert new.chain.height == 81
        assert new.chain.blocks[81].hash != old.chain.blocks[81].hash
        assert new.chain.state.digest() != old.chain.state_at(81).digest()


def test_criterion_06_soft_fork_subset_law():
    with criterion(6, "loosening refused, tightening abandons a 7-tx block, probe under 1 s"):
        a = keypair("alice")
        inst = PlatformInstance(Chain({a.owner: 1000 * TOKEN}, ProtocolRules(1, 10)))
        start = time.perf_counter()
        with pytest.raises(errors.NotBackwardCompatible):
            apply_soft_fork(inst, ForkSpec("soft", 0, ProtocolRules(2, 20)))
        assert backward_incompatible_block(ProtocolRules(1, 10), ProtocolRules(2, 5)) is None
        assert time.perf_counter() - start < 1.0
        apply_soft_fork(inst, ForkSpec("soft", 0, ProtocolRules(2, 5)))
        seven = [signed(a, i, transfer(keypair("bob").owner, 1)) for i in range(7)]
        assert propose_block(inst, seven, keypair("v").owner) is None
        assert inst.abandoned and inst.chain.height == 0
        assert propose_block(inst, seven[:5], keypair("v").owner) is not None


class ShardDriver:
    def __init__(self, k=4, per_shard=4, balance=1000):
        people = []
        i = 0
        counts = {s: 0 for s in range(k)}
        while min(counts.values()) < per_shard:
            kp = keypair(f"user{i}")
            s = home_shard(kp.owner, k)
            if counts[s] < per_shard:
                counts[s] += 1
                people.append(kp)
            i += 1
        self.people = people
        self.ops = keypair("ops")
        self.freeze = FreezeState(privileged=frozenset({self.ops.owner}))
        self.net = init_shards(k, [keypair(f"val{j}").owner for j in range(2 * k)], 3,
                               alloc={p.owner: balance * TOKEN for p in people},
                               freeze=self.freeze, keys={p.owner: p.public_key for p in people})

    def send(self, kp, payload):
        shard = self.net.home(kp.owner)
        queued = sum(1 for t in self.net.pools[shard].pending.values() if t.sender == kp.owner)
        nonce = self.net.shards[shard].state.account(kp.owner).nonce + queued
        tx = sign_transaction(Transaction(kp.owner, nonce, payload), kp)
        route, admission = submit(self.net, tx)
        assert admission, admission.reason
        return route, tx

    def escrowed(self):
        net = self.net
        return [c for x, c in sorted(net.pending.items())
                if (r := net.shards[c.source].state.crossshard.get(x)) is not None
                and r.status == "escrowed"]


def test_criterion_07_cross_shard_conservation():
    with criterion(7, "1000 transfers over 4 shards conserve supply; burns drop it exactly"):
        d = ShardDriver()
        net = d.net
        total = net.total_supply()
        rng = random.Random(7)
        settled = aborted = 0
        for step in range(1000):
            src, dst = rng.sample(d.people, 2)
            d.send(src, transfer(dst.owner, rng.randrange(1, 2 * TOKEN)))
            if step % 8 == 7:
                for shard in range(4):
                    seal_shard(net, shard)
                pending = d.escrowed()
                if step % 64 == 63 and pending:
                    # freeze one target shard so its credits abort and refund
                    target = pending[0].target
                    set_freeze(d.freeze, ("shard", target), True, d.ops.owner)
                    for cst in pending:
                        if cst.target == target and cst.source != target:
                            aborted += settle_cross_shard(net, cst).status == "aborted"
                    set_freeze(d.freeze, ("shard", target), False, d.ops.owner)
                for cst in d.escrowed():
                    settled += settle_cross_shard(net, cst).status == "settled"
                assert net.total_supply() == total
        while any(len(p) for p in net.pools):
            for shard in range(4):
                seal_shard(net, shard)
        for cst in d.escrowed():
            settled += settle_cross_shard(net, cst).status == "settled"
        assert net.total_supply() == total
        assert settled >= 100 and aborted >= 10, (settled, aborted)
        sizes = [3 * TOKEN, 7 * TOKEN, 11]
        for kp, size in zip(d.people, sizes):
            d.send(kp, burn(size))
        for shard in range(4):
            seal_shard(net, shard)
        assert net.total_supply() == total - sum(sizes)


def test_criterion_08_tamper_fuzz():
    with criterion(8, "10000 single-byte mutations never verify; 1000 unsigned all rejected"):
        rng = random.Random(8)
        kp = keypair("fuzz")
        policy = FilterPolicy.default()
        txs = [signed(kp, n, transfer(keypair(f"r{n}").owner, rng.randrange(1, 10**6)))
               for n in range(50)]
        false_accepts = 0
        for trial in range(10_000):
            original = txs[trial % len(txs)].to_bytes()
            raw = bytearray(original)
            pos = rng.randrange(len(raw))
            raw[pos] = (raw[pos] + rng.randrange(1, 256)) % 256
            try:
                mutated = Transaction.from_bytes(bytes(raw))
                accepted = verify_transaction(mutated, kp.public_key) and \
                    check_transaction(mutated, policy, kp.public_key) is None
            except (errors.MalformedTransaction, errors.UnknownScheme):
                accepted = False
            false_accepts += accepted
        assert false_accepts == 0
        pool = TransactionPool(keys={kp.owner: kp.public_key})
        for n in range(1000):
            unsigned = Transaction(kp.owner, n, transfer(keypair("x").owner, n + 1))
            result = filter_and_admit(pool, unsigned, policy)
            assert not result and result.reason == "Unsigned"
        assert len(pool) == 0


def _walk(graph):
    weights = {}
    for member in graph.members:
        node = member
        while node in graph.edges:
            node = graph.edges[node]
        weights[node] = weights.get(node, 0) + 1
    return weights


def test_criterion_09_liquid_conservation():
    with criterion(9, "100 delegation forests conserve weight and reject every cycle"):
        rng = random.Random(9)
        for _ in range(100):
            n = rng.randrange(2, 51)
            nodes = [bytes([i]) * 32 for i in range(n)]
            rng.shuffle(nodes)
            g = DelegationGraph(members=frozenset(nodes))
            for i in range(1, n):
                if rng.random() < 0.7:
                    g = set_delegate(g, nodes[i], nodes[rng.randrange(i)])
            for node in nodes:
                if node not in g.edges and rng.random() < 0.6:
                    g = cast_direct(g, node, rng.choice(["accept", "reject"]))
            result = liquid_weights(g)
            assert result.counted + result.uncounted == n
            assert result.weights == _walk(g)
            for delegator in [x for x in nodes if x in g.edges][:5]:
                root = delegator
                while root in g.edges:
                    root = g.edges[root]
                with pytest.raises(errors.CycleDetected):
                    set_delegate(g, root, delegator)


def _scan(chain, pipeline):
    lines = []
    for height in range(len(chain.blocks)):
        if not pipeline.from_height <= height <= pipeline.to_height:
            continue
        for ev in chain.events[height]:
            if ev.kind in pipeline.kinds:
                attrs = dict(ev.attributes)
                names = pipeline.projection(ev.kind)
                doc = {"height": height, "tx_id": ev.tx_id.hex(), "kind": ev.kind,
                       "attributes": {k: attrs.get(k) for k in names} if names else attrs}
                lines.append(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")
    return "".join(lines)


def test_criterion_10_log_extractor_oracle():
    with criterion(10, "extraction byte-equal to a linear scan on 20 random chains"):
        kinds = ["Transfer", "Burn", "Call", "Vote"]
        for seed in range(20):
            rng = random.Random(seed)
            names = [f"p{i}" for i in range(5)]
            d = Driver({n: 10_000 * TOKEN for n in names})
            d.block((names[0], open_proposal_payload(1, "carbonvote", 10**6)))
            for _ in range(110):
                items = []
                for _ in range(rng.randrange(3, 10)):
                    who = rng.choice(names)
                    roll = rng.random()
                    if roll < 0.5:
                        items.append((who, transfer(d.addr(rng.choice(names)), rng.randrange(1, 50))))
                    elif roll < 0.65:
                        items.append((who, burn(rng.randrange(1, 5))))
                    elif roll < 0.8:
                        items.append((who, call(bytes([7]) * 32, "poke")))
                    else:
                        items.append((who, vote_payload(1, rng.choice(["accept", "reject"]))))
                d.block(*items)
            chain = d.chain
            assert chain.height >= 100
            assert sum(len(evs) for evs in chain.events) >= 500
            for _ in range(5):
                lo = rng.randrange(0, 100)
                chosen = rng.sample(kinds, rng.randrange(1, 5))
                project = {"Transfer": ("amount", "to")} if "Transfer" in chosen and rng.random() < 0.5 else ()
                pipeline = Pipeline(frozenset(chosen), lo, lo + rng.randrange(0, 60), project)
                assert dump_jsonl(extract_logs(chain, pipeline)) == _scan(chain, pipeline)
            full = Pipeline(frozenset(kinds), 0, 10**9)
            assert dump_jsonl(extract_logs(chain, full)) == _scan(chain, full)


def test_criterion_11_freeze_totality():
    with criterion(11, "network freeze blocks 100 seals; unfreeze drains FIFO"):
        d = ShardDriver(per_shard=2)
        net = d.net
        queued = [d.send(kp, transfer(d.people[0].owner if kp != d.people[0] else d.people[1].owner, 1))[1]
                  for kp in d.people]
        set_freeze(d.freeze, "network", True, d.ops.owner)
        heights = net.heights()
        pools = [p.snapshot() for p in net.pools]
        for attempt in range(100):
            with pytest.raises(errors.Frozen):
                seal_shard(net, attempt % net.shard_count)
        assert net.heights() == heights
        assert [p.snapshot() for p in net.pools] == pools
        set_freeze(d.freeze, "network", False, d.ops.owner)
        for shard in range(net.shard_count):
            order = list(pools[shard])
            block = seal_shard(net, shard).block
            assert [tx.id for tx in block.txs] == order[:len(block.txs)]
            assert len(block.txs) == len(order)
        assert sum(len(p) for p in net.pools) == 0
        assert len(queued) == len(d.people)


def test_criterion_12_fixture_determinism():
    with criterion(12, "every fixture reruns byte-identically; corpus under 30 s"):
        names = sorted(p.name for p in resources.files("govsim").joinpath("scenarios").iterdir()
                       if p.name.endswith(".json"))
        assert len(names) >= 14
        patterns = set()
        start = time.perf_counter()
        for name in names:
            text = fixture(name)
            scenario = parse_scenario(text)
            patterns.add(scenario.pattern)
            first = render_json(run_scenario(scenario))
            second = render_json(run_scenario(parse_scenario(text)))
            assert first == second, name
            assert json.loads(first)["exit_status"] == 0, name
        assert time.perf_counter() - start < 30.0
        assert len(patterns) >= 14


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))

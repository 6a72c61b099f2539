import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from toysim.harness import trace as tr
from toysim.rbcast import RbInit

from conftest import make_cluster

LINKS = [(s, d) for s in range(4) for d in range(4) if s != d]


def fixed_delays(assignment):
    table = dict(zip(LINKS, assignment))
    return lambda src, dst, now: table[(src, dst)]


class InitTo:
    """Origin sends its INIT only to ``dsts`` (then behaves)."""

    def __init__(self, dsts):
        self.dsts = set(dsts)

    def outgoing(self, node, dsts, msg):
        if isinstance(msg, RbInit) and msg.origin == node.id:
            return [(d, msg) for d in dsts if d in self.dsts]
        return [(d, msg) for d in dsts]


class SplitInit:
    """Origin sends INIT payload ``a`` to ``half`` and ``b`` to the rest."""

    def __init__(self, half, other):
        self.half = set(half)
        self.other = other

    def outgoing(self, node, dsts, msg):
        if isinstance(msg, RbInit) and msg.origin == node.id:
            return [(d, msg if d in self.half else RbInit(msg.origin, msg.tag, self.other)) for d in dsts]
        return [(d, msg) for d in dsts]


def rb_run(assignment, strategy=None, payload="v"):
    net, peers = make_cluster(4, 1)
    net.delay_fn = fixed_delays(assignment)
    if strategy is not None:
        peers[0].corrupt(strategy)
    peers[0].rb.rb_broadcast(("T", 0), payload)
    net.run()
    return {p.id: [x[2] for x in p.rb_got] for p in peers}


def _check(got, correct, must_deliver):
    outs = [got[i] for i in correct]
    assert all(len(o) <= 1 for o in outs)
    delivered = [o[0] for o in outs if o]
    assert len(set(delivered)) <= 1, "agreement"
    # every run is quiescent here, so delivery is all or nothing
    assert len(delivered) in (0, len(correct)), "totality"
    if must_deliver:
        assert len(delivered) == len(correct), "validity"


ALL_ASSIGNMENTS = list(itertools.product((1, 2), repeat=len(LINKS)))


def test_correct_origin_exhaustive():
    for assignment in ALL_ASSIGNMENTS:
        got = rb_run(assignment)
        _check(got, [0, 1, 2, 3], must_deliver=True)
        assert got[0] == ["v"]


def test_origin_reaching_one_peer_exhaustive():
    # an INIT seen by a single correct node cannot gather an echo quorum
    for assignment in ALL_ASSIGNMENTS:
        got = rb_run(assignment, InitTo({1}))
        _check(got, [1, 2, 3], must_deliver=False)


def test_equivocating_origin_exhaustive():
    for assignment in ALL_ASSIGNMENTS:
        got = rb_run(assignment, SplitInit({0, 1, 2}, "w"))
        _check(got, [1, 2, 3], must_deliver=False)


@pytest.mark.parametrize("reach", [{1, 2}, {1, 2, 3}, {0, 1, 2}])
def test_partial_init_is_all_or_nothing(reach):
    for seed in range(100):
        rng = random.Random(seed)
        got = rb_run([rng.randint(1, 6) for _ in LINKS], InitTo(reach))
        _check(got, [1, 2, 3], must_deliver=len(reach - {0}) == 3)


def test_rb_trace_and_listener_routing():
    net, peers = make_cluster(4, 1, seed=3)
    hits = []
    for p in peers:
        p.rb.listen("X", lambda o, t, v, p=p: hits.append((p.id, o, t, v)))
    peers[2].rb.rb_broadcast(("X", 9), "payload")
    peers[1].rb.rb_broadcast("plain", 1)
    net.run()
    assert sorted(h[0] for h in hits) == [0, 1, 2, 3]
    assert all(p.rb_got == [(1, "plain", 1)] for p in peers)
    assert sum(1 for e in net.trace if e.kind == tr.RB_DELIVER) == 8


# -- binary consensus ----------------------------------------------------------

def bbc_run(seed, n, f, inputs, crash=(), delta=5):
    net, peers = make_cluster(n, f, seed=seed, delta=delta)
    for c in crash:
        net.crash(c, 0)
    for p in peers:
        if p.id not in crash:
            p.spawn(p.bbc.run("I", inputs[p.id]), name="bbc")
    net.run(until=200_000)
    return [peers[i].bbc.decision("I") for i in range(n) if i not in crash]


def test_bbc_agreement_validity_and_termination_over_seeds():
    for seed in range(1000):
        rng = random.Random(seed)
        n, f = (4, 1) if seed % 2 else (7, 2)
        inputs = [rng.randint(0, 1) for _ in range(n)]
        crash = tuple(rng.sample(range(n), rng.randint(0, f)))
        decisions = bbc_run(seed, n, f, inputs, crash)
        assert None not in decisions, f"seed {seed} did not terminate"
        assert len(set(decisions)) == 1, f"seed {seed} disagreed"
        live = {inputs[i] for i in range(n) if i not in crash}
        if len(live) == 1:
            assert decisions[0] in live


def test_bbc_rejects_non_bits_and_double_proposals():
    _, peers = make_cluster(4, 1)
    with pytest.raises(ValueError):
        peers[0].bbc.bbc_propose("I", 2)
    peers[0].bbc.bbc_propose("I", 1)
    with pytest.raises(ValueError):
        peers[0].bbc.bbc_propose("I", 0)


def test_bbc_decisions_are_traced():
    net, peers = make_cluster(4, 1, seed=1)
    for p in peers:
        p.spawn(p.bbc.run("J", 1))
    net.run()
    decs = [e for e in net.trace if e.kind == tr.BBC_DECIDE]
    assert len(decs) == 4 and {e.data["bit"] for e in decs} == {1}


# -- atomic broadcast --------------------------------------------------------------

def ab_run(seed, n=4, f=1, senders=None, crash=(), delta=5):
    net, peers = make_cluster(n, f, seed=seed, delta=delta, ab_timeout=15.0)
    rng = random.Random(seed)
    senders = [i for i in range(n) if i not in crash] if senders is None else senders
    for c in crash:
        net.crash(c, 0)
    for p in peers:
        p.ab.activate("C")
    for s in senders:
        net.at(rng.randint(0, 30), lambda s=s: peers[s].ab.ab_broadcast("C", f"in{s}"))
    live = [p for p in peers if p.id not in crash]
    net.run(until=100_000, stop=lambda: all(len(p.ab.log("C").delivered) >= len(senders) for p in live))
    return [p.ab.log("C").delivered for p in live]


def test_ab_total_order_over_schedules():
    for seed in range(1000):
        crash = (seed % 4,) if seed % 3 == 0 else ()
        logs = ab_run(seed, crash=crash)
        first = logs[0]
        assert all(log == first for log in logs), f"seed {seed}: logs differ"
        origins = [o for o, _ in first]
        assert len(origins) == len(set(origins)) == 4 - len(crash)
        assert all(payload == f"in{o}" for o, payload in first)


@given(st.integers(0, 10_000), st.sampled_from([(4, 1), (7, 2)]))
@settings(max_examples=25, deadline=None)
def test_ab_logs_are_prefix_consistent_mid_run(seed, nf):
    n, f = nf
    net, peers = make_cluster(n, f, seed=seed, ab_timeout=15.0)
    for p in peers:
        p.ab.ab_broadcast("C", p.id)
    net.run(max_events=random.Random(seed).randint(50, 3000))
    logs = [p.ab.log("C").delivered for p in peers]
    for a in logs:
        for b in logs:
            m = min(len(a), len(b))
            assert a[:m] == b[:m]

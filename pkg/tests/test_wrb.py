import pytest
from hypothesis import given, settings, strategies as st

from toysim import crypto
from toysim.toy import make_block
from toysim.wrb import WeakReliableBroadcast, WrbMsg, WrbTimer, timer_update

from conftest import make_cluster


def test_skip_doubles_the_timer():
    assert timer_update(WrbTimer(4), "skip").current == 8


def test_skip_respects_cap():
    assert timer_update(WrbTimer(3000, cap=4096), "skip").current == 4096


def test_success_blends_observed_delay():
    # alpha = 2 / (9 + 1) = 0.2; 0.2 * 5 + 0.8 * 10
    assert timer_update(WrbTimer(10, window=9), "success", 5).current == pytest.approx(9.0)


def test_success_needs_delay_and_unknown_outcome_fails():
    with pytest.raises(ValueError):
        timer_update(WrbTimer(4), "success")
    with pytest.raises(ValueError):
        timer_update(WrbTimer(4), "maybe")


@given(st.floats(1, 4096), st.integers(1, 200))
def test_converges_to_a_steady_delay(start, d):
    t = WrbTimer(start)
    for _ in range(50):
        t = timer_update(t, "success", d)
    if start < 200:
        assert abs(t.current - d) < 1
    # the EMA moves monotonically towards d and never below the floor
    assert min(start, d) - 1e-9 <= t.current <= max(start, d) + 1e-9
    assert t.current >= t.floor


def test_floor_holds():
    t = WrbTimer(1.5)
    for _ in range(20):
        t = timer_update(t, "success", 0)
    assert t.current == 1.0


# -- deliver on a small cluster ---------------------------------------------------------

def wrb_cluster(seed=0, n=4, f=1, delta=5, tau=20):
    net, peers = make_cluster(n, f, seed=seed, delta=delta)
    wrbs = [WeakReliableBroadcast(p, p.obbc, tau=tau) for p in peers]
    keys = [crypto.keygen(seed, i) for i in range(n)]
    return net, peers, wrbs, keys


def run_round(net, peers, wrbs, k, skip=()):
    results = {}

    def proc(i):
        results[i] = yield from wrbs[i].deliver(0, 0, 0, k)

    for p in peers:
        if p.id not in skip:
            p.spawn(proc(p.id), name="wrb")
    net.run(until=200_000)
    return results


@pytest.mark.parametrize("seed", range(20))
def test_correct_sender_is_delivered_everywhere(seed):
    net, peers, wrbs, keys = wrb_cluster(seed)
    block = make_block(keys[1], 0, 0, crypto.GENESIS, (b"tx",))
    wrbs[1].wrb_broadcast(block)
    res = run_round(net, peers, wrbs, 1)
    assert all(r is not None and r.digest == block.digest for r in res.values())


@pytest.mark.parametrize("seed", range(20))
def test_silent_sender_is_nil_everywhere(seed):
    net, peers, wrbs, _ = wrb_cluster(seed)
    net.crash(2, 0)
    res = run_round(net, peers, wrbs, 2, skip={2})
    assert set(res.values()) == {None}


@pytest.mark.parametrize("seed", range(30))
def test_partial_send_agrees_on_nil_or_block(seed):
    net, peers, wrbs, keys = wrb_cluster(seed, tau=3)
    block = make_block(keys[3], 0, 0, crypto.GENESIS, ())
    target = seed % 3
    net.send(3, target, WrbMsg(block))
    net.crash(3, 0)
    res = run_round(net, peers, wrbs, 3, skip={3})
    outcomes = {r is None for r in res.values()}
    assert len(outcomes) == 1
    if outcomes == {False}:
        assert {r.digest for r in res.values()} == {block.digest}


def test_pool_rejects_bad_signatures_and_caps_slots():
    net, peers, wrbs, keys = wrb_cluster()
    w = wrbs[0]
    forged = make_block(keys[2], 0, 0, crypto.GENESIS, ())
    forged = type(forged)(0, 0, 1, forged.prev, forged.tx_root, forged.txs, forged.sig)
    assert not w.offer(forged, 1)
    for i in range(6):
        w.offer(make_block(keys[1], 0, 0, bytes([i]) * 32, ()), 1)
    assert len(w.pool[(0, 0, 1)]) == w.SLOT_CAP
    assert w.held(0, 0, 1, prev=bytes([2]) * 32).prev == bytes([2]) * 32
    assert w.held(0, 0, 1, prev=b"x" * 32) is not None
    w.prune(1)
    assert not w.pool and not w.offer(make_block(keys[1], 0, 0, crypto.GENESIS, ()), 1)


def test_evidence_must_match_instance():
    _, _, wrbs, keys = wrb_cluster()
    b = make_block(keys[1], 5, 0, crypto.GENESIS, ())
    w = wrbs[0]
    assert w._valid_evidence((0, 5, 0, 1), b)
    assert not w._valid_evidence((0, 5, 0, 2), b)
    assert not w._valid_evidence((0, 6, 0, 1), b)
    assert not w._valid_evidence((1, 5, 0, 1), b)
    assert not w._valid_evidence((0, 5, 0, 1), None)

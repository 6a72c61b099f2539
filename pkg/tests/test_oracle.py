"""Oracle self-test: seeded faults in otherwise clean traces must be caught."""
import copy

import pytest

from toysim.harness import trace as tr
from toysim.harness.oracle import FAMILIES, check_oracle
from toysim.harness.runner import run_scenario
from toysim.harness.scenario import Fault, Scenario


@pytest.fixture(scope="module")
def clean():
    res = run_scenario(Scenario(n=4, f=1, seed=5, rounds=40, delta=3))
    assert res.violations == []
    return res.trace


@pytest.fixture(scope="module")
def recovered():
    res = run_scenario(Scenario(n=4, f=1, seed=1, rounds=40, delta=5, faults=[Fault(0, 0, "equivocate", "10")]))
    assert res.violations == [] and res.report["recoveries"] == 1
    return res.trace


def mutate(trace, fn):
    log = tr.TraceLog(dict(trace.meta))
    log.events = [copy.deepcopy(e) for e in trace.events]
    fn(log.events)
    return log


def families(log):
    return {v.family for v in check_oracle(log)}


def first(events, kind, node=None, pred=lambda e: True):
    return next(e for e in events if e.kind == kind and (node is None or e.node == node) and pred(e))


def test_clean_traces_pass(clean, recovered):
    assert check_oracle(clean) == [] and check_oracle(recovered) == []


def test_diverging_definite_blocks_break_agreement(clean):
    def fault(events):
        ev = first(events, tr.DEFINITE_DECIDE, node=2, pred=lambda e: e.round == 5)
        ev.data["digest"] = "ffffffffffffffff"
    assert "agreement" in families(mutate(clean, fault))


def test_definite_block_replacement_breaks_finality(recovered):
    def fault(events):
        ev = first(events, tr.RECOVERY_END, node=1)
        ev.data["from"] = 0
        ev.data["blocks"] = [[0, "0000000000000000", 1]] + ev.data["blocks"]
    assert "finality" in families(mutate(recovered, fault))


def test_split_wrb_outcome_breaks_wrb_agreement(clean):
    def fault(events):
        ev = first(events, tr.WRB_RETURN, node=3, pred=lambda e: e.round == 7)
        ev.data["nil"] = 1
    assert "wrb_agreement" in families(mutate(clean, fault))


def test_repeated_proposer_breaks_rotation(clean):
    def fault(events):
        a = first(events, tr.TENTATIVE_DECIDE, node=1, pred=lambda e: e.round == 10)
        b = first(events, tr.TENTATIVE_DECIDE, node=1, pred=lambda e: e.round == 11)
        b.data["proposer"] = a.data["proposer"]
    assert "rotation" in families(mutate(clean, fault))


def test_early_definite_breaks_latency(clean):
    def fault(events):
        idx = next(i for i, e in enumerate(events) if e.kind == tr.DEFINITE_DECIDE and e.node == 0)
        ev = events.pop(idx)
        tent = next(i for i, e in enumerate(events) if e.kind == tr.TENTATIVE_DECIDE and e.node == 0
                    and e.round == ev.round)
        events.insert(tent + 1, ev)
    assert "latency" in families(mutate(clean, fault))


def test_slow_post_gst_delivery_breaks_timing(clean):
    def fault(events):
        ev = first(events, tr.SEND, node=1, pred=lambda e: e.data["to"] != 1)
        ev.data["at"] = ev.t + 50
    assert "post_gst" in families(mutate(clean, fault))


def test_lost_or_duplicated_messages_break_reliability(clean):
    def drop(events):
        idx = next(i for i, e in enumerate(events) if e.kind == tr.DELIVER)
        events.pop(idx)

    def dup(events):
        ev = first(events, tr.DELIVER)
        events.append(copy.deepcopy(ev))
    assert "reliability" in families(mutate(clean, drop))
    assert "reliability" in families(mutate(clean, dup))


def test_conflicting_consensus_outcomes(clean, recovered):
    def obbc(events):
        ev = first(events, tr.OBBC_DECIDE, node=2)
        ev.data["bit"] = 1 - ev.data["bit"]

    def rb(events):
        ev = first(events, tr.RB_DELIVER, node=3)
        ev.data["digest"] = "0"

    def ab(events):
        ev = first(events, tr.AB_DELIVER, node=2)
        ev.data["origin"] = (ev.data["origin"] + 1) % 4
    assert "obbc_agreement" in families(mutate(clean, obbc))
    assert "rb" in families(mutate(recovered, rb))
    assert "ab_prefix" in families(mutate(recovered, ab))


def test_definite_without_tentative_breaks_reference(clean):
    def fault(events):
        ev = first(events, tr.DEFINITE_DECIDE, node=1)
        ev.data["digest"] = "abababababababab"
        for e in events:
            if e.kind == tr.DEFINITE_DECIDE and e.round == ev.round:
                e.data["digest"] = "abababababababab"
    assert families(mutate(clean, fault)) == {"definite_ref"}


def test_lonely_decision_breaks_front(clean):
    def fault(events):
        events[:] = [e for e in events if not (e.kind == tr.ROUND and e.round == 12 and e.node != 0)]
    assert "front" in families(mutate(clean, fault))


def test_faulty_nodes_are_not_judged(clean):
    log = mutate(clean, lambda events: first(events, tr.DEFINITE_DECIDE, node=2).data.update(digest="x"))
    log.meta["faulty"] = [2]
    assert check_oracle(log) == []


def test_family_names_are_declared():
    assert len(FAMILIES) == len(set(FAMILIES)) >= 6

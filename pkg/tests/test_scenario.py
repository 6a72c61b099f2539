from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from toysim.harness.runner import run_scenario
from toysim.harness.scenario import Fault, Scenario, load_scenario, parse_scenario

SCENARIOS = sorted((Path(__file__).resolve().parent.parent / "scenarios").glob("*.cfg"))


def test_parse_basic_file():
    sc = parse_scenario("""
        # comment
        n=7
        f=2
        seed=5
        fd=true
        tx_rate=0.5
        fault=3:150:crash
        fault=0:0:equivocate:12
    """)
    assert (sc.n, sc.f, sc.seed, sc.fd, sc.tx_rate) == (7, 2, 5, True, 0.5)
    assert sc.faults == [Fault(3, 150, "crash"), Fault(0, 0, "equivocate", "12")]
    assert sc.faulty == {0, 3} and sc.correct == [1, 2, 4, 5, 6]


def test_derived_defaults():
    sc = Scenario(delta=4)
    assert sc.wrb_tau == 4 * 2.5
    assert (sc.bbc_base, sc.ab_base, sc.fd_limit) == (24, 48, 8)
    assert sc.time_limit == 400 * sc.rounds * 4 + 20000
    assert Scenario(tau=3, max_time=9).wrb_tau == 3 and Scenario(max_time=9).time_limit == 9


@pytest.mark.parametrize("text", [
    "n=3\nf=1",
    "delta=0",
    "bogus=1",
    "just words",
    "fault=1:0:teleport",
    "fault=1:0",
    "fault=9:0:crash",
    "fd=perhaps",
    "fault=1:0:crash\nfault=2:0:crash",
])
def test_invalid_scenarios_rejected(text):
    with pytest.raises(ValueError):
        parse_scenario(text)


def test_beyond_f_tag_allows_extra_faults():
    sc = parse_scenario("beyond_f=true\nfault=1:0:crash\nfault=2:0:crash")
    assert sc.faulty == {1, 2}


def test_overrides():
    sc = parse_scenario("seed=3\nrounds=9", seed=8, rounds=None)
    assert (sc.seed, sc.rounds) == (8, 9)


@given(st.integers(4, 13), st.integers(0, 10**6), st.integers(1, 500), st.booleans(), st.integers(0, 20))
def test_dumps_roundtrip(n, seed, rounds, fd, perm):
    f = (n - 1) // 3
    sc = Scenario(n=n, f=f, seed=seed, rounds=rounds, fd=fd, perm_interval=perm, name="x",
                  faults=[Fault(n - 1, 10, "delay", "5")] if f else [])
    assert parse_scenario(sc.dumps()) == sc


@pytest.mark.parametrize("path", SCENARIOS, ids=lambda p: p.stem)
def test_shipped_scenarios_pass_the_oracle(path):
    sc = load_scenario(path)
    res = run_scenario(sc)
    assert res.violations == []
    if not sc.beyond_f:
        assert res.finished


def test_beyond_f_run_completes_without_oracle():
    sc = load_scenario(Path(SCENARIOS[0]).parent / "beyond_f.cfg")
    res = run_scenario(sc)
    assert not res.finished and res.violations == []

"""Build a network of TOY nodes from a scenario and run it."""
from __future__ import annotations

from dataclasses import dataclass, field

from .. import crypto
from ..adversary import make_strategy
from ..netsim import Network, SimConfig
from ..toy import ToyConfig, ToyNode, TxFeed
from . import trace as tr
from .metrics import build_report
from .oracle import check_oracle
from .scenario import Scenario


@dataclass
class RunResult:
    scenario: Scenario
    trace: tr.TraceLog
    nodes: list[ToyNode]
    net: Network
    finished: bool
    report: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)

    @property
    def correct(self) -> list[ToyNode]:
        return [self.nodes[i] for i in self.scenario.correct]


def build(sc: Scenario) -> tuple[Network, list[ToyNode]]:
    cfg = SimConfig(sc.n, sc.f, sc.seed, sc.gst, sc.delta, sc.pre_gst_delay_max)
    log = tr.TraceLog(meta={"n": sc.n, "f": sc.f, "seed": sc.seed, "scenario": sc.name,
                            "faulty": sorted(sc.faulty), "beyond_f": sc.beyond_f,
                            "gst": sc.gst, "delta": sc.delta,
                            "crashed": sorted(x.node for x in sc.faults if x.strategy == "crash")})
    net = Network(cfg, log)
    keys = [crypto.keygen(sc.seed, i) for i in range(sc.n)]
    pubkeys = [k.public for k in keys]
    toy_cfg = ToyConfig(beta=sc.beta, sigma=sc.sigma, heartbeat=sc.heartbeat, header_mode=sc.header_mode,
                        fd=sc.fd, fd_threshold=sc.fd_limit, perm_interval=sc.perm_interval, tau=sc.wrb_tau,
                        bbc_timeout=sc.bbc_base, ab_timeout=sc.ab_base)
    nodes = [ToyNode(i, net, keys[i], pubkeys, toy_cfg, TxFeed(i, sc.tx_rate, sc.sigma)) for i in range(sc.n)]
    for fault in sc.faults:
        if fault.strategy == "crash":
            net.crash(fault.node, fault.time)
        else:
            net.corrupt(fault.node, make_strategy(fault.strategy, fault.param, seed=sc.seed), fault.time)
    return net, nodes


def run_scenario(sc: Scenario, check: bool = True, max_events: int | None = None) -> RunResult:
    """Run until every correct node holds ``rounds`` blocks (or the time limit)."""
    net, nodes = build(sc)
    correct = [nodes[i] for i in sc.correct]
    for node in nodes:
        node.start()

    def done() -> bool:
        return all(len(node.chain) >= sc.rounds for node in correct)

    net.run(until=sc.time_limit, stop=done, max_events=max_events)
    result = RunResult(sc, net.trace, nodes, net, done())
    result.report = build_report(net.trace, sc)
    if check and not sc.beyond_f:
        result.violations = check_oracle(net.trace, sc)
    return result

"""Deterministic discrete-event network with partial synchrony.

Links are reliable and authenticated: every envelope addressed to a live
node is delivered exactly once, unmodified.  Delays are integers drawn from
per-link random streams, so adding traffic on one link never perturbs the
delays of another.  Before GST a delay is drawn from ``[1,
pre_gst_delay_max]`` and clipped at ``gst + delta``; after GST it is drawn
from ``[1, delta]``.  Self-addressed envelopes are delivered with delay 0.

Nodes run protocol code as generator-based processes.  A process yields a
:class:`Wait` and is resumed with ``True`` when the condition holds or
``False`` when its timeout fires.
"""
from __future__ import annotations

import hashlib
import heapq
import itertools
import random
import struct
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, Iterable

from . import crypto
from .harness import trace as tr


@dataclass
class SimConfig:
    n: int
    f: int
    seed: int = 0
    gst: int = 0
    delta: int = 5
    pre_gst_delay_max: int = 50

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.f < 0 or 3 * self.f >= self.n:
            raise ValueError(f"need f < n/3, got n={self.n} f={self.f}")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.gst < 0:
            raise ValueError("gst must be non-negative")
        if self.pre_gst_delay_max < 1:
            raise ValueError("pre_gst_delay_max must be >= 1")

    @property
    def quorum(self) -> int:
        return self.n - self.f


@dataclass(slots=True)
class Envelope:
    src: int
    dst: int
    payload: Any
    sent_at: int
    deliver_at: int
    msg_id: int = 0


class Message:
    """Base for protocol messages; subclasses set ``kind``."""

    kind = "MSG"

    def trace_info(self) -> tuple[int, int, dict[str, Any]]:
        """(round, epoch, extra fields) recorded with SEND/DELIVER events."""
        return -1, -1, {}

    def nbytes(self) -> int:
        return 64


@dataclass
class Wait:
    cond: Callable[[], bool] | None = None
    timeout: float | None = None


ProcGen = Generator[Wait, bool, Any]


class Process:
    _ids = itertools.count()

    def __init__(self, node: "NodeBase", gen: ProcGen, name: str):
        self.node = node
        self.gen = gen
        self.name = name
        self.pid = next(Process._ids)
        self.wait: Wait | None = None
        self.timer: int | None = None
        self.alive = True
        self.result: Any = None

    def __repr__(self) -> str:
        return f"<Process {self.name} node={self.node.id} alive={self.alive}>"


def _link_seed(seed: int, src: int, dst: int) -> int:
    raw = hashlib.sha256(b"link" + struct.pack(">qqq", seed, src, dst)).digest()
    return int.from_bytes(raw[:8], "big")


class Network:
    """Event queue, links, timers and node lifecycle."""

    def __init__(self, config: SimConfig, trace: tr.TraceLog | None = None):
        self.config = config
        self.trace = trace if trace is not None else tr.TraceLog()
        self.now = 0
        self.nodes: dict[int, NodeBase] = {}
        self._queue: list[tuple[int, int, str, Any]] = []
        self._seq = itertools.count()
        self._msg_ids = itertools.count(1)
        self._bcast_ids = itertools.count(1)
        self._timer_ids = itertools.count(1)
        self._active_timers: set[int] = set()
        self._links: dict[tuple[int, int], random.Random] = {}
        self.extra_delay: dict[int, int] = {}
        self.delay_fn: Callable[[int, int, int], int] | None = None

    # -- wiring --------------------------------------------------------------
    def register(self, node: "NodeBase") -> None:
        self.nodes[node.id] = node

    def _rng(self, src: int, dst: int) -> random.Random:
        rng = self._links.get((src, dst))
        if rng is None:
            rng = self._links[(src, dst)] = random.Random(_link_seed(self.config.seed, src, dst))
        return rng

    def link_delay(self, src: int, dst: int) -> int:
        if src == dst:
            return 0
        if self.delay_fn is not None:
            delay = self.delay_fn(src, dst, self.now)
        else:
            cfg = self.config
            rng = self._rng(src, dst)
            if self.now >= cfg.gst:
                delay = rng.randint(1, cfg.delta)
            else:
                delay = rng.randint(1, cfg.pre_gst_delay_max)
                delay = min(delay, cfg.gst + cfg.delta - self.now)
        return delay + self.extra_delay.get(src, 0)

    # -- messaging -----------------------------------------------------------
    def send(self, src: int, dst: int, payload: Any, bcast: int = 0) -> None:
        node = self.nodes.get(src)
        if node is not None and not node.alive:
            return
        deliver_at = self.now + self.link_delay(src, dst)
        env = Envelope(src, dst, payload, self.now, deliver_at, next(self._msg_ids))
        rnd, ep, extra = payload.trace_info() if isinstance(payload, Message) else (-1, -1, {})
        self.trace.emit(self.now, src, tr.SEND, rnd, ep, id=env.msg_id, to=dst, mk=getattr(payload, "kind", "?"),
                        at=deliver_at, b=bcast, sz=payload.nbytes() if isinstance(payload, Message) else 0, **extra)
        heapq.heappush(self._queue, (deliver_at, next(self._seq), "msg", env))

    def broadcast(self, src: int, payload: Any) -> None:
        node = self.nodes.get(src)
        if node is not None and not node.alive:
            return
        bid = next(self._bcast_ids)
        for dst in range(self.config.n):
            self.send(src, dst, payload, bcast=bid)

    def new_broadcast_id(self) -> int:
        return next(self._bcast_ids)

    # -- timers --------------------------------------------------------------
    def set_timer(self, node: int, duration: float, tag: Any) -> int:
        tid = next(self._timer_ids)
        fire = self.now + max(0, int(-(-duration // 1)))
        self._active_timers.add(tid)
        heapq.heappush(self._queue, (fire, next(self._seq), "timer", (node, tid, tag)))
        return tid

    def cancel_timer(self, tid: int) -> None:
        self._active_timers.discard(tid)

    # -- lifecycle -----------------------------------------------------------
    def at(self, time: int, fn: Callable[[], None]) -> None:
        heapq.heappush(self._queue, (max(time, self.now), next(self._seq), "call", fn))

    def crash(self, node: int, at_time: int) -> None:
        def _do() -> None:
            target = self.nodes[node]
            if target.alive:
                target.halt()
                self.trace.emit(self.now, node, tr.CRASH)
        self.at(at_time, _do)

    def corrupt(self, node: int, strategy: Any, at_time: int) -> None:
        def _do() -> None:
            self.nodes[node].corrupt(strategy)
            self.trace.emit(self.now, node, tr.CORRUPT, strategy=getattr(strategy, "name", str(strategy)))
        self.at(at_time, _do)

    # -- loop ----------------------------------------------------------------
    def pending(self) -> int:
        return len(self._queue)

    def step(self) -> bool:
        """Process the earliest event; False when the queue is empty."""
        while self._queue:
            time, _, kind, item = heapq.heappop(self._queue)
            if kind == "timer":
                node_id, tid, tag = item
                if tid not in self._active_timers:
                    continue
                self._active_timers.discard(tid)
                self.now = time
                node = self.nodes.get(node_id)
                if node is None or not node.alive:
                    continue
                node.on_timer(tid, tag)
                return True
            self.now = time
            if kind == "call":
                item()
                return True
            env: Envelope = item
            node = self.nodes.get(env.dst)
            if node is None or not node.alive:
                self.trace.emit(self.now, env.dst, tr.DROP, id=env.msg_id)
                return True
            p = env.payload
            rnd, ep, _ = p.trace_info() if isinstance(p, Message) else (-1, -1, {})
            self.trace.emit(self.now, env.dst, tr.DELIVER, rnd, ep, id=env.msg_id, frm=env.src,
                            mk=getattr(p, "kind", "?"))
            node.on_envelope(env)
            return True
        return False

    def run(self, until: int | None = None, stop: Callable[[], bool] | None = None,
            max_events: int | None = None) -> int:
        count = 0
        while self._queue:
            if until is not None and self._queue[0][0] > until:
                break
            if stop is not None and stop():
                break
            if max_events is not None and count >= max_events:
                break
            self.step()
            count += 1
        return count


class NodeBase:
    """A simulated node: message dispatch, timers, processes and key use."""

    def __init__(self, node_id: int, net: Network, keys: crypto.KeyPair, pubkeys: list[bytes]):
        self.id = node_id
        self.net = net
        self.keys = keys
        self.pubkeys = pubkeys
        self.n = net.config.n
        self.f = net.config.f
        self.alive = True
        self.strategy: Any = None
        self.handlers: dict[str, Callable[[int, Any, Envelope], None]] = {}
        self.procs: list[Process] = []
        self._timer_cbs: dict[int, Callable[[], None]] = {}
        self.sign_count = 0
        self.verify_count = 0
        net.register(self)

    @property
    def now(self) -> int:
        return self.net.now

    @property
    def trace(self) -> tr.TraceLog:
        return self.net.trace

    @property
    def byzantine(self) -> bool:
        return self.strategy is not None

    # -- crypto with accounting ----------------------------------------------
    def sign(self, data: bytes, what: str = "", round: int = -1, epoch: int = -1) -> bytes:
        self.sign_count += 1
        self.trace.emit(self.now, self.id, tr.SIGN, round, epoch, what=what)
        return crypto.sign(self.keys, data)

    def verify(self, signer: int, data: bytes, sig: bytes, what: str = "") -> bool:
        self.verify_count += 1
        self.trace.emit(self.now, self.id, tr.VERIFY, what=what, signer=signer)
        if not 0 <= signer < len(self.pubkeys):
            return False
        return crypto.verify(self.pubkeys[signer], data, sig)

    # -- messaging -------------------------------------------------------------
    def send(self, dst: int, msg: Message) -> None:
        if not self.alive:
            return
        if self.strategy is not None:
            for d, m in self.strategy.outgoing(self, [dst], msg):
                self.net.send(self.id, d, m)
            return
        self.net.send(self.id, dst, msg)

    def broadcast(self, msg: Message) -> None:
        if not self.alive:
            return
        if self.strategy is not None:
            bid = self.net.new_broadcast_id()
            for d, m in self.strategy.outgoing(self, list(range(self.n)), msg):
                self.net.send(self.id, d, m, bcast=bid)
            return
        self.net.broadcast(self.id, msg)

    def on(self, kind: str, handler: Callable[[int, Any, Envelope], None]) -> None:
        self.handlers[kind] = handler

    def on_envelope(self, env: Envelope) -> None:
        msg = env.payload
        handler = self.handlers.get(getattr(msg, "kind", None))
        if handler is not None:
            handler(env.src, msg, env)
        self.pump()

    # -- timers ----------------------------------------------------------------
    def set_timer(self, duration: float, callback: Callable[[], None], tag: str = "") -> int:
        tid = self.net.set_timer(self.id, duration, tag)
        self._timer_cbs[tid] = callback
        return tid

    def cancel_timer(self, tid: int | None) -> None:
        if tid is None:
            return
        self.net.cancel_timer(tid)
        self._timer_cbs.pop(tid, None)

    def on_timer(self, tid: int, tag: Any) -> None:
        cb = self._timer_cbs.pop(tid, None)
        if cb is None:
            return
        self.trace.emit(self.now, self.id, tr.TIMER, tag=str(tag))
        cb()
        self.pump()

    # -- processes ---------------------------------------------------------------
    def spawn(self, gen: ProcGen, name: str = "proc") -> Process:
        proc = Process(self, gen, name)
        self.procs.append(proc)
        self._resume(proc, None)
        return proc

    def kill(self, proc: Process | None) -> None:
        if proc is None or not proc.alive:
            return
        proc.alive = False
        self.cancel_timer(proc.timer)
        proc.timer = None
        if proc in self.procs:
            self.procs.remove(proc)
        proc.gen.close()

    def _resume(self, proc: Process, value: Any) -> None:
        self.cancel_timer(proc.timer)
        proc.timer = None
        proc.wait = None
        while proc.alive:
            try:
                w = proc.gen.send(value)
            except StopIteration as stop:
                proc.alive = False
                proc.result = stop.value
                if proc in self.procs:
                    self.procs.remove(proc)
                return
            if w.cond is not None and w.cond():
                value = True
                continue
            if w.timeout is not None and w.timeout <= 0:
                value = False
                continue
            proc.wait = w
            if w.timeout is not None:
                proc.timer = self.set_timer(w.timeout, lambda p=proc: self._expire(p), tag=proc.name)
            return

    def _expire(self, proc: Process) -> None:
        proc.timer = None
        if proc.alive:
            self._resume(proc, False)

    def pump(self) -> None:
        progressed = True
        while progressed:
            progressed = False
            for proc in list(self.procs):
                w = proc.wait
                if proc.alive and w is not None and w.cond is not None and w.cond():
                    self._resume(proc, True)
                    progressed = True

    # -- lifecycle -----------------------------------------------------------------
    def halt(self) -> None:
        self.alive = False
        for proc in list(self.procs):
            self.kill(proc)
        for tid in list(self._timer_cbs):
            self.cancel_timer(tid)

    def corrupt(self, strategy: Any) -> None:
        self.strategy = strategy
        install = getattr(strategy, "install", None)
        if install is not None:
            install(self)

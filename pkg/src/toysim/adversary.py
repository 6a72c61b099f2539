"""Byzantine strategies for corrupted nodes.

A corrupted node keeps running the honest code, but every outgoing message
passes through ``strategy.outgoing(node, dsts, msg)``, which returns the
(destination, message) pairs actually sent.  Strategies sign only with the
corrupted node's own key and are deterministic in (seed, node, round).
"""
from __future__ import annotations

import dataclasses
import hashlib
import random
import struct
from typing import Any

from . import crypto
from .obbc import ObbcVote
from .toy import Block, BlockBody, tx_root
from .wrb import WrbMsg, WrbResp


def _own_block(node, msg) -> Block | None:
    if isinstance(msg, (WrbMsg, WrbResp)):
        b = msg.block
    elif isinstance(msg, ObbcVote):
        b = msg.pgd
    else:
        return None
    if isinstance(b, Block) and b.proposer == node.id:
        return b
    return None


def _with_block(msg, block: Block):
    if isinstance(msg, ObbcVote):
        return ObbcVote(msg.inst, msg.bit, block)
    return dataclasses.replace(msg, block=block)


def _resign(node, block: Block) -> Block:
    return dataclasses.replace(block, sig=crypto.sign(node.keys, block.signed_bytes()))


class Strategy:
    name = "custom"

    def install(self, node) -> None:
        pass

    def outgoing(self, node, dsts: list[int], msg) -> list[tuple[int, Any]]:
        return [(d, msg) for d in dsts]


class Silent(Strategy):
    name = "silent"

    def outgoing(self, node, dsts, msg):
        return []


class Delay(Strategy):
    """Adds a fixed latency to everything the node sends."""

    name = "delay"

    def __init__(self, amount: int = 20):
        if amount < 0:
            raise ValueError("delay must be non-negative")
        self.amount = amount

    def install(self, node) -> None:
        node.net.extra_delay[node.id] = self.amount


class Equivocate(Strategy):
    """Send block A to one half of the peers and a conflicting block B to the other.

    Triggers on the node's first own block with round >= ``round`` (every
    such block if ``once`` is False).  B differs from A only in its
    transactions, so both are individually valid and correctly signed.
    """

    name = "equivocate"

    def __init__(self, round: int = 0, once: bool = True, seed: int = 0):
        self.round = round
        self.once = once
        self.seed = seed
        self.target: tuple[int, int] | None = None
        self.twins: dict[bytes, Block] = {}
        self.halves: dict[tuple[int, int], set[int]] = {}
        self.twin_bodies: dict[bytes, tuple] = {}

    def _split(self, node, block: Block) -> set[int]:
        key = (block.epoch, block.round)
        half = self.halves.get(key)
        if half is None:
            raw = hashlib.sha256(b"split" + struct.pack(">qqqq", self.seed, node.id, *key)).digest()
            peers = [p for p in range(node.n) if p != node.id]
            random.Random(raw).shuffle(peers)
            half = self.halves[key] = set(peers[: len(peers) // 2])
        return half

    def _twin(self, node, block: Block) -> Block:
        twin = self.twins.get(block.digest)
        if twin is None:
            txs = tuple(block.txs or ()) + (b"conflict",) if block.txs is not None else None
            body = tuple(node.bodies.get(block.tx_root, ())) + (b"conflict",)
            root = tx_root(txs if txs is not None else body)
            twin = _resign(node, dataclasses.replace(block, tx_root=root, txs=txs))
            self.twins[block.digest] = twin
            self.twin_bodies[twin.tx_root] = body
        return twin

    def _armed(self, block: Block) -> bool:
        if block.round < self.round:
            return False
        key = (block.epoch, block.round)
        if self.target is None:
            self.target = key
            return True
        return key == self.target or not self.once

    def outgoing(self, node, dsts, msg):
        block = _own_block(node, msg)
        if block is None or not self._armed(block):
            return [(d, msg) for d in dsts]
        half = self._split(node, block)
        twin = self._twin(node, block)
        out = []
        for d in dsts:
            if d in half:
                if twin.txs is None:
                    out.append((d, BlockBody(twin.tx_root, self.twin_bodies[twin.tx_root])))
                out.append((d, _with_block(msg, twin)))
            else:
                out.append((d, msg))
        return out


class BadLink(Strategy):
    """Propose a block whose predecessor digest is wrong."""

    name = "bad_link"

    def __init__(self, round: int = 0, once: bool = True):
        self.round = round
        self.once = once
        self.target: tuple[int, int] | None = None
        self.forged: dict[bytes, Block] = {}

    def outgoing(self, node, dsts, msg):
        block = _own_block(node, msg)
        if block is None or block.round < self.round:
            return [(d, msg) for d in dsts]
        key = (block.epoch, block.round)
        if self.target is None:
            self.target = key
        if self.once and key != self.target:
            return [(d, msg) for d in dsts]
        bad = self.forged.get(block.digest)
        if bad is None:
            bad = _resign(node, dataclasses.replace(block, prev=crypto.hash(b"bogus" + block.prev)))
            self.forged[block.digest] = bad
        return [(d, _with_block(msg, bad)) for d in dsts]


STRATEGIES = {
    "silent": Silent,
    "delay": Delay,
    "equivocate": Equivocate,
    "bad_link": BadLink,
}


def make_strategy(name: str, param: str | None = None, seed: int = 0) -> Strategy:
    """Build a strategy from its scenario spelling (``name[:param]``)."""
    if name not in STRATEGIES:
        raise ValueError(f"unknown strategy {name!r}")
    if name == "silent":
        return Silent()
    if name == "delay":
        return Delay(int(param)) if param else Delay()
    if name == "equivocate":
        return Equivocate(int(param) if param else 0, seed=seed)
    return BadLink(int(param) if param else 0)

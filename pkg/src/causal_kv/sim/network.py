"""Simulated point-to-point network with latency, jitter, and partitions.

Per ordered link: FIFO delivery, an autoregressive jitter model (lag-1
correlated noise so bursts of slow packets cluster like a real shaped link),
and a partition switch checked at both send and delivery time - a cut link
delivers nothing until healed, silently, like an iptables DROP. Every send is
recorded in the message log, delivered or not; the log is the ground truth that
replication-status answers are audited against.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from ..engine import canonical_json_bytes
from .events import Scheduler


@dataclass
class LinkConfig:
    delay_ms: float = 0.0
    jitter: float = 0.0  # fractional variation of the base delay
    correlation: float = 0.0  # lag-1 correlation of the noise process

    def validate(self) -> "LinkConfig":
        if self.delay_ms < 0:
            raise ValueError("delay_ms must be >= 0")
        if not 0.0 <= self.jitter <= 1.0:
            raise ValueError("jitter must be in [0, 1]")
        if not 0.0 <= self.correlation <= 1.0:
            raise ValueError("correlation must be in [0, 1]")
        return self


class DelayModel:
    """delay_i = base * (1 + jitter * n_i) with n_i = c*n_{i-1} + (1-c)*u_i,
    u_i uniform on [-1, 1]; |n_i| <= 1 so delays stay within base*(1 +- jitter)."""

    def __init__(self, cfg: LinkConfig, rng: random.Random):
        self.cfg = cfg
        self.rng = rng
        self._noise = 0.0

    def sample_ms(self) -> float:
        c = self.cfg.correlation
        self._noise = c * self._noise + (1.0 - c) * self.rng.uniform(-1.0, 1.0)
        return max(0.0, self.cfg.delay_ms * (1.0 + self.cfg.jitter * self._noise))


@dataclass
class MessageRecord:
    send_s: float
    src: int
    dst: int
    kind: str
    size: int
    change_hashes: tuple[str, ...]
    delivered: bool = False
    deliver_s: float | None = None


@dataclass
class _Link:
    cfg: LinkConfig
    delay: DelayModel
    partitioned: bool = False
    fifo_horizon: float = 0.0  # delivery times are non-decreasing per link


def _hashes_in(msg: dict) -> tuple[str, ...]:
    if msg.get("type") == "change":
        return (msg["change"]["hash"],)
    if msg.get("type") == "sync_resp":
        return tuple(c["hash"] for c in msg.get("changes", ()))
    return ()


class SimNetwork:
    """Owns every configured link; anything outside the topology is unroutable."""

    def __init__(self, scheduler: Scheduler, edges, link_cfg: LinkConfig, seed: int):
        self.scheduler = scheduler
        self.links: dict[tuple[int, int], _Link] = {}
        self.handlers: dict[int, object] = {}
        self.log: list[MessageRecord] = []
        for a, b in edges:
            for src, dst in ((a, b), (b, a)):
                rng = random.Random(f"{seed}:link:{src}:{dst}")
                self.links[(src, dst)] = _Link(cfg=link_cfg, delay=DelayModel(link_cfg, rng))

    def connect(self, node_id: int, handler) -> None:
        """handler(msg) -> optional reply, sent back over the reverse link."""
        self.handlers[node_id] = handler

    def sender_for(self, node_id: int):
        return lambda dst, msg: self.send(node_id, dst, msg)

    def send(self, src: int, dst: int, msg: dict) -> None:
        link = self.links[(src, dst)]  # sends outside the topology are a config bug
        record = MessageRecord(
            send_s=self.scheduler.now,
            src=src,
            dst=dst,
            kind=msg.get("type", "?"),
            size=len(canonical_json_bytes(msg)),
            change_hashes=_hashes_in(msg),
        )
        self.log.append(record)
        if link.partitioned:
            return
        delay_s = link.delay.sample_ms() / 1000.0
        deliver_at = max(self.scheduler.now + delay_s, link.fifo_horizon)
        link.fifo_horizon = deliver_at
        self.scheduler.at(deliver_at, lambda: self._deliver(record, msg))

    def _deliver(self, record: MessageRecord, msg: dict) -> None:
        if self.links[(record.src, record.dst)].partitioned:
            return  # cut while in flight
        record.delivered = True
        record.deliver_s = self.scheduler.now
        reply = self.handlers[record.dst](msg)
        if reply is not None:
            self.send(record.dst, record.src, reply)

    # -- fault and latency controls ------------------------------------------------

    def _pairs_for(self, args: dict):
        if "node" in args:
            node = args["node"]
            return [pair for pair in self.links if node in pair]
        return [(args["a"], args["b"]), (args["b"], args["a"])]

    def set_partitioned(self, args: dict, flag: bool) -> None:
        pairs = self._pairs_for(args)
        if not pairs or any(p not in self.links for p in pairs):
            raise ValueError(f"partition target {args!r} is not in the topology")
        for pair in pairs:
            self.links[pair].partitioned = flag

    def set_latency(self, args: dict) -> None:
        cfg = LinkConfig(
            delay_ms=args["delay_ms"],
            jitter=args.get("jitter", 0.0),
            correlation=args.get("correlation", 0.0),
        ).validate()
        pairs = list(self.links) if args.get("all") else self._pairs_for(args)
        for pair in pairs:
            link = self.links[pair]
            link.cfg = cfg
            link.delay.cfg = cfg

    # -- ground truth --------------------------------------------------------------

    def delivered_changes_to(self, node_id: int) -> set[str]:
        """Every change hash that actually reached `node_id`, per the message log."""
        out: set[str] = set()
        for record in self.log:
            if record.dst == node_id and record.delivered:
                out.update(record.change_hashes)
        return out

    def counts(self, kind: str | None = None) -> tuple[int, int]:
        """(sent, delivered) message counts, optionally for one message kind."""
        relevant = [r for r in self.log if kind is None or r.kind == kind]
        return len(relevant), sum(r.delivered for r in relevant)

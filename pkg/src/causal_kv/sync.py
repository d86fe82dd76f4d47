"""Two-tier replication between configured peers.

Optimistic tier: a freshly committed local change is sent once to every peer,
fire-and-forget, and never relayed further. Pessimistic tier: a periodic
heads-exchange round pulls exactly the changes each side lacks and acks what it
applied, so PeerState only ever credits a peer with history the peer itself has
reported holding. All locally stored changes are eligible for the periodic
tier, which is what propagates changes transitively across the topology.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

from .engine import Change, Document, change_from_wire, change_to_wire

logger = logging.getLogger(__name__)


@dataclass
class PeerState:
    """What we know about one direct peer's history, per its own reports."""

    peer_id: int
    address: object = None
    last_known_heads: tuple[str, ...] = ()
    shared_heads: tuple[str, ...] = ()  # greatest frontier both nodes are known to share
    last_sync_at: float = 0.0


class SyncManager:
    """Replication state machine for one node.

    Methods build peer-protocol messages or consume them; the owner performs the
    actual sends so the engine lock never wraps network I/O.
    """

    def __init__(
        self,
        doc: Document,
        node_id: int,
        peers: dict[int, object],
        clock: Callable[[], float] | None = None,
        on_apply: Callable[[Change], None] | None = None,
    ):
        self.doc = doc
        self.node_id = node_id
        self.clock = clock or (lambda: 0.0)
        self.on_apply = on_apply
        self.peer_states = {pid: PeerState(peer_id=pid, address=addr) for pid, addr in peers.items()}

    # -- message construction ------------------------------------------------

    def broadcast_messages(self, change: Change) -> list[tuple[int, dict]]:
        """One change message per configured peer; never triggered by received changes."""
        msg = {"type": "change", "from": self.node_id, "change": change_to_wire(change)}
        return [(pid, msg) for pid in self.peer_states]

    def sync_request(self, peer_id: int) -> tuple[int, dict]:
        state = self.peer_states[peer_id]
        return peer_id, {
            "type": "sync_req",
            "from": self.node_id,
            "heads": list(self.doc.heads),
            "shared": list(state.shared_heads),
        }

    # -- message handling -------------------------------------------------------

    def handle_message(self, msg: dict) -> dict | None:
        """Consume one peer message; returns a reply to send back, if any."""
        kind = msg.get("type")
        if kind == "change":
            self._apply_wire_changes([msg.get("change")])
            return None
        if kind == "sync_req":
            self._note_peer(msg.get("from"), msg.get("heads", ()))
            # the shared hint widens what we can assume the requester holds when
            # its heads are not recognized here (e.g. after it committed alone)
            assumed = list(msg.get("heads", ())) + list(msg.get("shared", ()))
            return {
                "type": "sync_resp",
                "from": self.node_id,
                "heads": list(self.doc.heads),
                "changes": [change_to_wire(c) for c in self.doc.missing_changes(assumed)],
            }
        if kind == "sync_resp":
            applied = self._apply_wire_changes(msg.get("changes", ()))
            their_heads = msg.get("heads", ())
            self._note_peer(msg.get("from"), their_heads)
            outgoing = self.doc.missing_changes(their_heads)
            if applied or outgoing:
                return {
                    "type": "sync_resp",
                    "from": self.node_id,
                    "heads": list(self.doc.heads),
                    "changes": [change_to_wire(c) for c in outgoing],
                }
            return None
        logger.warning("node %d: unknown peer message type %r", self.node_id, kind)
        return None

    def _apply_wire_changes(self, wire_changes) -> int:
        applied_count = 0
        for obj in wire_changes:
            try:
                change = change_from_wire(obj)  # verifies the hash before applying
                status, applied = self.doc.apply_remote(change)
            except Exception as exc:
                logger.warning("node %d: rejected peer change: %s", self.node_id, exc)
                continue
            applied_count += len(applied)
            if self.on_apply:
                for c in applied:
                    self.on_apply(c)
        return applied_count

    def _note_peer(self, peer_id, their_heads) -> None:
        state = self.peer_states.get(peer_id)
        if state is None:
            return
        state.last_known_heads = tuple(sorted(their_heads))
        known = [h for h in state.last_known_heads if self.doc.has_change(h)]
        state.shared_heads = tuple(
            h for h in known if not any(o != h and self.doc.is_ancestor(h, o) for o in known)
        )
        state.last_sync_at = self.clock()

    # -- replication status --------------------------------------------------------

    def replication_status(self, hashes) -> dict[int, bool]:
        """Per direct peer: does its last-reported history cover every queried hash?"""
        return {
            pid: all(self.doc.in_closure(h, state.last_known_heads) for h in hashes)
            for pid, state in sorted(self.peer_states.items())
        }

"""Bootstrapping and push-pull anti-entropy between registry replicas."""

from __future__ import annotations

import enum
import logging
import random
import threading
from dataclasses import dataclass
from typing import Callable, Optional

from .api import STATE_EXCHANGE, ApiClient, ProtocolError, require_field
from .registry import Registry, RegistryState

log = logging.getLogger(__name__)


class SeedUnreachable(Exception):
    code = "SeedUnreachable"


class PeerStatus(str, enum.Enum):
    ALIVE = "Alive"
    SUSPECT = "Suspect"
    UNREACHABLE = "Unreachable"


@dataclass
class GossipConfig:
    period_ms: int = 1000
    fanout: int = 1
    failure_threshold: int = 3
    rpc_timeout_ms: int = 500
    # Unreachable peers are skipped by the random pick, so one of them is
    # re-probed per round or a healed partition would never be noticed.
    probe_unreachable: bool = True
    bootstrap_attempts: int = 3
    bootstrap_backoff_ms: int = 500

    def __post_init__(self):
        if self.period_ms <= 0:
            raise ValueError("period_ms must be positive")
        if self.fanout < 1:
            raise ValueError("fanout must be at least 1")
        if self.failure_threshold < 1:
            raise ValueError("failure_threshold must be at least 1")
        if not 0 < self.rpc_timeout_ms < self.period_ms:
            raise ValueError("rpc_timeout_ms must be positive and shorter than period_ms")
        if self.bootstrap_attempts < 1:
            raise ValueError("bootstrap_attempts must be at least 1")


@dataclass
class PeerEntry:
    node_id: str
    address: str
    status: PeerStatus = PeerStatus.ALIVE
    last_contact: Optional[float] = None
    consecutive_failures: int = 0


class GossipNode:
    """Runs anti-entropy for one registry replica.

    Peers are discovered from the registry's node set, so a node that only
    knows its seed learns the rest of the overlay transitively.
    """

    def __init__(self, node_id: str, address: str, registry: Registry, transport, scheduler,
                 config: Optional[GossipConfig] = None, rng: Optional[random.Random] = None):
        self.node_id = node_id
        self.address = address
        self.registry = registry
        self.transport = transport
        self.scheduler = scheduler
        self.config = config or GossipConfig()
        self.rng = rng or random.Random()
        self.client = ApiClient(transport, address, timeout_ms=self.config.rpc_timeout_ms)
        self.peers: dict = {}
        self.joined = False
        self.boot_error: Optional[Exception] = None
        self.rounds = 0
        self.exchanges_ok = 0
        self.exchanges_failed = 0
        self._running = False
        self._lock = threading.RLock()

    # -- membership ---------------------------------------------------

    def sync_peers(self) -> None:
        with self._lock:
            for rec in self.registry.nodes():
                if rec.node_id == self.node_id:
                    continue
                peer = self.peers.get(rec.node_id)
                if peer is None:
                    self.peers[rec.node_id] = PeerEntry(rec.node_id, rec.address)
                else:
                    peer.address = rec.address

    def mark_peers(self, now_ms: Optional[float] = None) -> None:
        with self._lock:
            for peer in self.peers.values():
                if peer.consecutive_failures >= self.config.failure_threshold:
                    peer.status = PeerStatus.UNREACHABLE
                elif peer.consecutive_failures > 0:
                    peer.status = PeerStatus.SUSPECT
                else:
                    peer.status = PeerStatus.ALIVE

    def _record(self, node_id: Optional[str], ok: bool) -> None:
        with self._lock:
            peer = self.peers.get(node_id) if node_id else None
            if peer is None:
                return
            if ok:
                peer.consecutive_failures = 0
                peer.last_contact = self.scheduler.now()
            else:
                peer.consecutive_failures += 1
        self.mark_peers()

    # -- exchange -----------------------------------------------------

    def _body(self) -> dict:
        return {"address": self.address, "from": self.node_id, "state": self.registry.snapshot().to_raw()}

    def exchange_with(self, address: str, on_done: Optional[Callable] = None, node_id: Optional[str] = None) -> None:
        """Push our state to ``address`` and merge what comes back."""

        def finish(result, error):
            if error is None:
                try:
                    remote = RegistryState.from_record(require_field(result, "state", dict), self.registry.snapshot())
                    self.registry.merge_state(remote)
                    self.sync_peers()
                    peer_id = result.get("from") or node_id
                except (ProtocolError, ValueError) as exc:
                    error, peer_id = exc, node_id
            else:
                peer_id = node_id
            with self._lock:
                if error is None:
                    self.exchanges_ok += 1
                else:
                    self.exchanges_failed += 1
            self._record(peer_id, error is None)
            if on_done is not None:
                on_done(error)

        self.client.call(address, STATE_EXCHANGE, self._body(), finish)

    def handle_exchange(self, body: dict) -> dict:
        """Server side of push-pull: merge the sender's state, return ours from before the merge."""
        remote = RegistryState.from_record(require_field(body, "state", dict), self.registry.snapshot())
        before = self.registry.exchange(remote)
        self.sync_peers()
        self._record(body.get("from"), True)
        return {"address": self.address, "from": self.node_id, "state": before.to_raw()}

    # -- lifecycle ----------------------------------------------------

    def bootstrap(self, seed_address: Optional[str] = None, on_done: Optional[Callable] = None) -> None:
        """Register ourselves and join through ``seed_address`` (None starts a new overlay).

        ``on_done(error)`` fires once; error is None or SeedUnreachable.
        """
        self.registry.register_node(self.node_id, self.address)
        if seed_address is None:
            self.joined = True
            if on_done:
                on_done(None)
            return
        attempts = [0]

        def attempt():
            attempts[0] += 1
            self.exchange_with(seed_address, after)

        def after(error):
            if error is None:
                self.joined = True
                if on_done:
                    on_done(None)
                return
            if attempts[0] >= self.config.bootstrap_attempts:
                self.boot_error = SeedUnreachable(f"seed {seed_address} unreachable after {attempts[0]} attempts")
                if on_done:
                    on_done(self.boot_error)
                return
            backoff = self.config.bootstrap_backoff_ms * 2 ** (attempts[0] - 1)
            self.scheduler.call_later(backoff, attempt)

        attempt()

    def gossip_round(self) -> None:
        self.sync_peers()
        self.mark_peers()
        with self._lock:
            self.rounds += 1
            ordered = [self.peers[k] for k in sorted(self.peers)]
            live = [p for p in ordered if p.status is not PeerStatus.UNREACHABLE]
            dead = [p for p in ordered if p.status is PeerStatus.UNREACHABLE]
            targets = self.rng.sample(live, min(self.config.fanout, len(live)))
            if dead and self.config.probe_unreachable:
                targets.append(self.rng.choice(dead))
        for peer in targets:
            self.exchange_with(peer.address, node_id=peer.node_id)

    def start(self, first_round_ms: Optional[float] = None) -> None:
        """Schedule periodic rounds; the first fires after ``first_round_ms`` (random phase by default)."""
        if self._running:
            return
        self._running = True
        if first_round_ms is None:
            first_round_ms = self.rng.randrange(self.config.period_ms)

        def tick():
            if not self._running:
                return
            self.gossip_round()
            self.scheduler.call_later(self.config.period_ms, tick)

        self.scheduler.call_later(first_round_ms, tick)

    def stop(self) -> None:
        self._running = False

"""Majority-ack replicated store used as the strongly consistent baseline.

No leader election and no log compaction: whichever member receives a
client write coordinates it, assigns the next log index, and commits once
a majority (itself included) has accepted the entry. Without a reachable
majority it answers ``NoQuorum`` and stays unavailable until
:meth:`QuorumStore.recover` has run and the reconnect backoff has passed.
"""

from __future__ import annotations

import json
import logging
import threading
from typing import Callable, Iterable, Optional

from .api import ApiClient, ProtocolError, Service, UnknownMessage, require_field
from .registry import ALL_ACTIONS, InvalidArgument, KeygroupExists, NoSuchKeygroup, NoSuchNode, normalize_actions, parse_address

log = logging.getLogger(__name__)

Q_APPEND = "QAppend"
Q_COMMIT = "QCommit"
Q_BARRIER = "QBarrier"
Q_SYNC = "QSync"


class NoQuorum(Exception):
    code = "NoQuorum"


def majority(n: int) -> int:
    return n // 2 + 1


class QuorumStore:
    """One member of the quorum group.

    ``members`` lists every member address, this one included.
    """

    def __init__(self, address: str, members: Iterable[str], transport, scheduler,
                 timeout_ms: float = 500, recovery_backoff_ms: float = 5000,
                 probe_interval_ms: Optional[float] = None):
        self.address = address
        self.members = list(members)
        if address not in self.members:
            raise ValueError("members must include this store's own address")
        if len(self.members) < 3:
            raise ValueError("a quorum group needs at least three members")
        self.transport = transport
        self.scheduler = scheduler
        self.timeout_ms = timeout_ms
        self.recovery_backoff_ms = recovery_backoff_ms
        # When set, a degraded store probes its peers and starts recovery by
        # itself; otherwise recover() is driven by a heal notification.
        self.probe_interval_ms = probe_interval_ms
        self.client = ApiClient(transport, address, timeout_ms=timeout_ms)
        self.next_index = 1
        self.accepted: dict = {}
        self.committed: dict = {}
        self.degraded = False
        self.recover_at: Optional[float] = None
        self._kv: Optional[dict] = None
        self._lock = threading.RLock()

    @property
    def quorum(self) -> int:
        return majority(len(self.members))

    @property
    def others(self) -> list:
        return [m for m in self.members if m != self.address]

    # -- materialized view --------------------------------------------

    @property
    def kv(self) -> dict:
        with self._lock:
            if self._kv is None:
                kv = {}
                for idx in sorted(self.committed):
                    for key, value in self.committed[idx]["ops"]:
                        if value is None:
                            kv.pop(key, None)
                        else:
                            kv[key] = value
                self._kv = kv
            return self._kv

    def committed_log(self) -> list:
        with self._lock:
            return [self.committed[i] for i in sorted(self.committed)]

    def _commit(self, entry: dict) -> None:
        with self._lock:
            if entry["index"] not in self.committed:
                self.committed[entry["index"]] = entry
                self._kv = None

    # -- availability -------------------------------------------------

    def available(self) -> bool:
        with self._lock:
            if self.degraded and self.recover_at is not None and self.scheduler.now() >= self.recover_at:
                self._finish_recovery()
            return not self.degraded

    def recover(self) -> None:
        """Start reconnecting after a heal; serving resumes after the backoff.

        No-op when the store never lost its quorum or is already recovering.
        """
        with self._lock:
            if not self.degraded or self.recover_at is not None:
                return
            self.recover_at = self.scheduler.now() + self.recovery_backoff_ms
        self.scheduler.call_later(self.recovery_backoff_ms, self.available)

    def _finish_recovery(self) -> None:
        self.degraded = False
        self.recover_at = None
        entries = self.committed_log()
        for member in self.others:
            self.client.call(member, Q_SYNC, {"entries": entries}, lambda result, error: None)

    def _lose_quorum(self) -> None:
        with self._lock:
            if self.degraded:
                return
            log.info("%s lost its quorum", self.address)
            self.degraded = True
        if self.probe_interval_ms:
            self.scheduler.call_later(self.probe_interval_ms, self._probe)

    def _probe(self) -> None:
        with self._lock:
            if not self.degraded or self.recover_at is not None:
                return
        acks = [1]

        def acked(result, error):
            if error is not None:
                return
            acks[0] += 1
            if acks[0] == self.quorum:
                self.recover()

        for member in self.others:
            self.client.call(member, Q_BARRIER, {}, acked)
        self.scheduler.call_later(self.probe_interval_ms, self._probe)

    # -- client-facing ------------------------------------------------

    def write(self, ops: list, on_done: Callable[[Optional[Exception]], None]) -> None:
        """Replicate one log entry of ``[key, value-or-None]`` ops."""
        if not self.available():
            on_done(NoQuorum(f"{self.address} has no quorum"))
            return
        with self._lock:
            index = self.next_index
            self.next_index += 1
            entry = {"index": index, "ops": [[k, v] for k, v in ops]}
            self.accepted[index] = entry
        state = {"acks": 1, "finished": False}
        lock = threading.Lock()

        def finish(error):
            with lock:
                if state["finished"]:
                    return
                state["finished"] = True
            if error is None:
                self._commit(entry)
                for member in self.others:
                    self.client.call(member, Q_COMMIT, {"index": index}, lambda result, err: None)
            else:
                self._lose_quorum()
            on_done(error)

        with self._lock:
            base = len(self.committed)

        def acked(result, error, member):
            if error is not None:
                return
            behind = result.get("committed")
            if isinstance(behind, int) and behind < base:
                # the member missed commits (it was cut off); hand it our log
                self.client.call(member, Q_SYNC, {"entries": self.committed_log()}, lambda r, e: None)
            with lock:
                state["acks"] += 1
                reached = state["acks"] >= self.quorum
            if reached:
                finish(None)

        if state["acks"] >= self.quorum:
            finish(None)
            return
        self.scheduler.call_later(self.timeout_ms, lambda: finish(NoQuorum(f"write {index} got no majority")))
        for member in self.others:
            self.client.call(member, Q_APPEND, {"entry": entry}, lambda r, e, m=member: acked(r, e, m))

    def read_barrier(self, on_done: Callable[[Optional[Exception]], None]) -> None:
        """Confirm a majority is reachable before serving a read locally."""
        if not self.available():
            on_done(NoQuorum(f"{self.address} has no quorum"))
            return
        state = {"acks": 1, "finished": False}
        lock = threading.Lock()

        def finish(error):
            with lock:
                if state["finished"]:
                    return
                state["finished"] = True
            if error is not None:
                self._lose_quorum()
            on_done(error)

        def acked(result, error):
            if error is not None:
                return
            with lock:
                state["acks"] += 1
                reached = state["acks"] >= self.quorum
            if reached:
                finish(None)

        self.scheduler.call_later(self.timeout_ms, lambda: finish(NoQuorum("read barrier got no majority")))
        for member in self.others:
            self.client.call(member, Q_BARRIER, {}, acked)

    # -- member side --------------------------------------------------

    def on_append(self, entry: dict) -> None:
        with self._lock:
            self.accepted[entry["index"]] = entry
            self.next_index = max(self.next_index, entry["index"] + 1)

    def on_commit(self, index: int) -> None:
        with self._lock:
            entry = self.accepted.get(index)
        if entry is not None:
            self._commit(entry)

    def on_sync(self, entries: list) -> None:
        for entry in entries:
            self.on_append(entry)
            self._commit(entry)


def q_write(store: QuorumStore, key: str, value, on_done) -> None:
    store.write([[key, value]], on_done)


def q_recover(store: QuorumStore) -> None:
    store.recover()


def _key(*parts: str) -> str:
    return json.dumps(list(parts), separators=(",", ":"))


class QuorumService(Service):
    """Naming-service endpoint backed by a :class:`QuorumStore`.

    Same client messages as the CRDT endpoint, but every write needs a
    majority ack and every read a majority barrier.
    """

    def __init__(self, store: QuorumStore):
        self.store = store

    def dispatch(self, env, respond) -> None:
        b, store = env.body, self.store
        mt = env.msg_type
        if mt == Q_APPEND:
            store.on_append(_entry(require_field(b, "entry", dict)))
            respond({"committed": len(store.committed)})
        elif mt == Q_COMMIT:
            store.on_commit(require_field(b, "index", int))
            respond({})
        elif mt == Q_BARRIER:
            respond({})
        elif mt == Q_SYNC:
            store.on_sync([_entry(e) for e in require_field(b, "entries", list)])
            respond({})
        else:
            op = getattr(self, "_op_" + mt, None)
            if op is None:
                respond(error=UnknownMessage(f"unknown msg_type {mt!r}"))
                return
            op(b, respond)

    def _write(self, ops, respond) -> None:
        self.store.write(ops, lambda error: respond({}, error))

    def _read(self, compute, respond) -> None:
        def after(error):
            if error is not None:
                respond(error=error)
                return
            try:
                respond(compute())
            except Exception as exc:
                respond(error=exc)

        self.store.read_barrier(after)

    def _has_kg(self, kg: str) -> bool:
        return _key("kg", kg) in self.store.kv

    def _op_CreateKeygroup(self, b, respond):
        kg, creator = require_field(b, "keygroup_id"), require_field(b, "creator")
        config = require_field(b, "config", dict, optional=True) or {}
        if not kg or not creator:
            raise InvalidArgument("keygroup_id and creator must be non-empty")
        if self._has_kg(kg):
            raise KeygroupExists(kg)
        self._write(
            [[_key("kg", kg), {"config": config, "creator": creator}], [_key("perm", creator, kg), list(ALL_ACTIONS)]],
            respond,
        )

    def _op_DeleteKeygroup(self, b, respond):
        kg = require_field(b, "keygroup_id")
        if not self._has_kg(kg):
            raise NoSuchKeygroup(kg)
        ops = [[_key("kg", kg), None]]
        for key in sorted(self.store.kv):
            parts = json.loads(key)
            if (parts[0] == "mem" and parts[1] == kg) or (parts[0] == "perm" and parts[2] == kg):
                ops.append([key, None])
        self._write(ops, respond)

    def _membership(self, b, value, respond):
        kg, node = require_field(b, "keygroup_id"), require_field(b, "node_id")
        if not self._has_kg(kg):
            raise NoSuchKeygroup(kg)
        if _key("node", node) not in self.store.kv:
            raise NoSuchNode(node)
        self._write([[_key("mem", kg, node), value]], respond)

    def _op_JoinKeygroup(self, b, respond):
        self._membership(b, {"role": "replica"}, respond)

    def _op_LeaveKeygroup(self, b, respond):
        self._membership(b, None, respond)

    def _op_RegisterNode(self, b, respond):
        node, address = require_field(b, "node_id"), require_field(b, "address")
        if not node:
            raise InvalidArgument("node_id must be non-empty")
        parse_address(address)
        self._write([[_key("node", node), {"address": address}]], respond)

    def _op_SetPermission(self, b, respond):
        user, kg = require_field(b, "user_id"), require_field(b, "keygroup_id")
        actions = normalize_actions(require_field(b, "actions", list))
        if not self._has_kg(kg):
            raise NoSuchKeygroup(kg)
        self._write([[_key("perm", user, kg), actions]], respond)

    def _op_RevokePermission(self, b, respond):
        user, kg = require_field(b, "user_id"), require_field(b, "keygroup_id")
        if not self._has_kg(kg):
            raise NoSuchKeygroup(kg)
        self._write([[_key("perm", user, kg), None]], respond)

    def _op_CheckPermission(self, b, respond):
        user, kg, action = require_field(b, "user_id"), require_field(b, "keygroup_id"), require_field(b, "action")
        self._read(lambda: {"allowed": action in self.store.kv.get(_key("perm", user, kg), [])}, respond)

    def _op_GetReplicas(self, b, respond):
        kg = require_field(b, "keygroup_id")

        def compute():
            kv = self.store.kv
            if _key("kg", kg) not in kv:
                raise NoSuchKeygroup(kg)
            out = []
            for key in kv:
                parts = json.loads(key)
                if parts[0] == "mem" and parts[1] == kg and _key("node", parts[2]) in kv:
                    out.append({"address": kv[_key("node", parts[2])]["address"], "node_id": parts[2]})
            return {"replicas": sorted(out, key=lambda r: r["node_id"].encode("utf-8"))}

        self._read(compute, respond)

    def _op_KeygroupCount(self, b, respond):
        self._read(lambda: {"count": keygroup_count(self.store)}, respond)


def keygroup_count(store: QuorumStore) -> int:
    return sum(1 for key in store.kv if json.loads(key)[0] == "kg")


def _entry(rec: dict) -> dict:
    index = rec.get("index")
    ops = rec.get("ops")
    if not isinstance(index, int) or isinstance(index, bool) or index < 1 or not isinstance(ops, list):
        raise ProtocolError("malformed log entry")
    for op in ops:
        if not (isinstance(op, list) and len(op) == 2 and isinstance(op[0], str)):
            raise ProtocolError("malformed log op")
    return {"index": index, "ops": [list(op) for op in ops]}

"""Naming-service state machine built from four LWW element sets.

One replica owns a :class:`Registry`. Every mutator works on local state
only and stamps its writes with the replica clock; replicas converge by
exchanging whole :class:`RegistryState` values and merging them.

Element ids inside the sets:

* nodes: ``node_id``
* keygroups: ``["kg"]`` for the keygroup record, ``["kg","node"]`` for a
  replica membership (membership is part of keygroup configuration)
* permissions: ``["user","kg"]``
* organization: ``node_id``
"""

from __future__ import annotations

import enum
import functools
import hashlib
import json
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional
from urllib.parse import urlsplit

from .codec import RawJson, canonical_json, load_json
from .crdt import LwwElementSet, ReplicaClock, Timestamp

PAYLOAD_VERSION = 1
SNAPSHOT_VERSION = 1


class RegistryError(Exception):
    code = "RegistryError"


class MalformedAddress(RegistryError):
    code = "MalformedAddress"


class KeygroupExists(RegistryError):
    code = "KeygroupExists"


class NoSuchKeygroup(RegistryError):
    code = "NoSuchKeygroup"


class NoSuchNode(RegistryError):
    code = "NoSuchNode"


class InvalidArgument(RegistryError):
    code = "InvalidArgument"


class Action(str, enum.Enum):
    READ = "Read"
    UPDATE = "Update"
    DELETE = "Delete"
    CONFIGURE = "Configure"


ALL_ACTIONS = tuple(a.value for a in Action)


@dataclass(frozen=True)
class NodeRecord:
    node_id: str
    address: str


@dataclass(frozen=True)
class KeygroupRecord:
    keygroup_id: str
    config: dict
    creator: str


@dataclass(frozen=True)
class OrganizationRecord:
    node_id: str
    zone: str
    metadata: dict


def parse_address(address: str) -> tuple:
    """Split ``host:port`` into ``(host, port)``; raises MalformedAddress."""
    if not isinstance(address, str) or any(c in address for c in "/@?# "):
        raise MalformedAddress(f"not a host:port address: {address!r}")
    try:
        parts = urlsplit("//" + address)
        host, port = parts.hostname, parts.port
    except ValueError as exc:
        raise MalformedAddress(f"not a host:port address: {address!r}") from exc
    if not host or not port:
        raise MalformedAddress(f"not a host:port address: {address!r}")
    return host, port


def make_key(*parts: str) -> str:
    return json.dumps(list(parts), separators=(",", ":"), ensure_ascii=True)


@functools.lru_cache(maxsize=1 << 16)
def split_key(key: str) -> tuple:
    return tuple(json.loads(key))


def _payload(**fields) -> bytes:
    return canonical_json({"v": PAYLOAD_VERSION, **fields})


def _read_payload(data: bytes) -> dict:
    rec = load_json(data)
    if rec.get("v") != PAYLOAD_VERSION:
        raise ValueError(f"unsupported payload version {rec.get('v')!r}")
    return rec


def normalize_actions(actions: Iterable) -> list:
    if isinstance(actions, (str, Action)):
        actions = [actions]
    out = set()
    for a in actions:
        try:
            out.add(Action(a).value)
        except ValueError as exc:
            raise InvalidArgument(f"unknown action {a!r}") from exc
    if not out:
        raise InvalidArgument("permission needs at least one action")
    return sorted(out)


def _require_id(value, what: str) -> None:
    if not isinstance(value, str) or not value:
        raise InvalidArgument(f"{what} must be a non-empty string")


@dataclass
class RegistryState:
    nodes: LwwElementSet = field(default_factory=LwwElementSet)
    keygroups: LwwElementSet = field(default_factory=LwwElementSet)
    permissions: LwwElementSet = field(default_factory=LwwElementSet)
    organization: LwwElementSet = field(default_factory=LwwElementSet)
    clock: Optional[ReplicaClock] = None

    SETS = ("nodes", "keygroups", "permissions", "organization")

    def sets(self) -> tuple:
        return (self.nodes, self.keygroups, self.permissions, self.organization)

    def copy(self) -> "RegistryState":
        # Sets are immutable values, so a shallow copy is a snapshot.
        return RegistryState(*self.sets(), clock=self.clock.copy() if self.clock else None)

    def same_data(self, other: "RegistryState") -> bool:
        return self.sets() == other.sets()

    def max_stamp(self) -> Optional[Timestamp]:
        return max((s for s in (x.max_stamp() for x in self.sets()) if s is not None), default=None)

    def to_record(self) -> dict:
        return {name: getattr(self, name).to_record() for name in self.SETS}

    @classmethod
    def from_record(cls, rec: dict, known: Optional["RegistryState"] = None) -> "RegistryState":
        """Decode a state record; ``known`` (usually the local state) speeds up decoding."""
        if not isinstance(rec, dict) or set(rec) != set(cls.SETS):
            raise ValueError("registry state record must hold exactly the four sets")
        return cls(*(
            LwwElementSet.from_record(rec[name], getattr(known, name) if known is not None else None)
            for name in cls.SETS
        ))

    def to_raw(self) -> RawJson:
        """Canonical JSON of :meth:`to_record`, reusing each set's cached text."""
        parts = ",".join(f'"{name}":{getattr(self, name).to_raw().text}' for name in sorted(self.SETS))
        return RawJson("{" + parts + "}")

    def encode(self) -> bytes:
        return self.to_raw().text.encode("ascii")

    def state_hash(self) -> str:
        return hashlib.sha256(self.encode()).hexdigest()


def cascade_deleted_keygroups(keygroups: LwwElementSet, permissions: LwwElementSet) -> tuple:
    """Tombstone every live membership/permission of a removed keygroup.

    Local deletes already cascade with fresh stamps; this covers dependents
    written concurrently elsewhere that only show up through a merge. The
    tombstone stamp is ``max(keygroup remove stamp, dependent add stamp)``:
    a function of the merged state alone, so every replica derives the same
    entries, and never older than the add, so the dependent is hidden.
    """
    dead = {}
    for key, stamp in keygroups.removes.items():
        parts = split_key(key)
        if len(parts) == 1 and not keygroups.is_member(key):
            dead[parts[0]] = stamp
    if not dead:
        return keygroups, permissions
    for key, entry in list(keygroups.adds.items()):
        parts = split_key(key)
        if len(parts) == 2 and parts[0] in dead and keygroups.is_member(key):
            keygroups = keygroups.remove(key, max(dead[parts[0]], entry.stamp))
    for key, entry in list(permissions.adds.items()):
        kg = split_key(key)[1]
        if kg in dead and permissions.is_member(key):
            permissions = permissions.remove(key, max(dead[kg], entry.stamp))
    return keygroups, permissions


class Registry:
    """One replica of the naming service.

    ``clock_fn`` returns the current time in ms; the simulator passes its
    virtual clock, real deployments default to the wall clock. A reentrant
    lock serializes mutators and merges.
    """

    def __init__(self, replica_id: str, clock_fn: Optional[Callable[[], int]] = None):
        _require_id(replica_id, "replica id")
        self.replica_id = replica_id
        self._now = clock_fn or (lambda: int(time.time() * 1000))
        self._lock = threading.RLock()
        self._count_cache = None
        self.state = RegistryState(clock=ReplicaClock(replica_id))

    def _stamp(self) -> Timestamp:
        return self.state.clock.next(int(self._now()))

    # -- nodes --------------------------------------------------------

    def register_node(self, node_id: str, address: str) -> None:
        _require_id(node_id, "node id")
        parse_address(address)
        with self._lock:
            st = self.state
            st.nodes = st.nodes.add(node_id, _payload(address=address), self._stamp())

    def remove_node(self, node_id: str) -> None:
        with self._lock:
            st = self.state
            if not st.nodes.is_member(node_id):
                raise NoSuchNode(node_id)
            st.nodes = st.nodes.remove(node_id, self._stamp())

    def get_node(self, node_id: str) -> Optional[NodeRecord]:
        with self._lock:
            data = self.state.nodes.lookup(node_id)
        if data is None:
            return None
        return NodeRecord(node_id, _read_payload(data)["address"])

    def nodes(self) -> list:
        with self._lock:
            members = self.state.nodes.members()
        return [NodeRecord(nid, _read_payload(members[nid])["address"]) for nid in sorted(members)]

    # -- keygroups ----------------------------------------------------

    def has_keygroup(self, keygroup_id: str) -> bool:
        with self._lock:
            return self.state.keygroups.is_member(make_key(keygroup_id))

    def create_keygroup(self, keygroup_id: str, config: Optional[dict] = None, creator: str = "") -> None:
        _require_id(keygroup_id, "keygroup id")
        _require_id(creator, "creator")
        config = dict(config or {})
        with self._lock:
            st = self.state
            key = make_key(keygroup_id)
            if st.keygroups.is_member(key):
                raise KeygroupExists(keygroup_id)
            st.keygroups = st.keygroups.add(key, _payload(config=config, creator=creator), self._stamp())
            st.permissions = st.permissions.add(
                make_key(creator, keygroup_id), _payload(actions=list(ALL_ACTIONS)), self._stamp()
            )

    def get_keygroup(self, keygroup_id: str) -> Optional[KeygroupRecord]:
        with self._lock:
            data = self.state.keygroups.lookup(make_key(keygroup_id))
        if data is None:
            return None
        rec = _read_payload(data)
        return KeygroupRecord(keygroup_id, rec["config"], rec["creator"])

    def keygroups(self) -> list:
        with self._lock:
            members = self.state.keygroups.members()
        return sorted(split_key(k)[0] for k in members if len(split_key(k)) == 1)

    def delete_keygroup(self, keygroup_id: str) -> None:
        with self._lock:
            st = self.state
            key = make_key(keygroup_id)
            if not st.keygroups.is_member(key):
                raise NoSuchKeygroup(keygroup_id)
            kgs = st.keygroups.remove(key, self._stamp())
            for k in sorted(kgs.adds):
                parts = split_key(k)
                if len(parts) == 2 and parts[0] == keygroup_id and kgs.is_member(k):
                    kgs = kgs.remove(k, self._stamp())
            perms = st.permissions
            for k in sorted(perms.adds):
                if split_key(k)[1] == keygroup_id and perms.is_member(k):
                    perms = perms.remove(k, self._stamp())
            st.keygroups, st.permissions = kgs, perms

    def keygroup_count(self) -> int:
        with self._lock:
            kgs = self.state.keygroups
            # sets are immutable, so the count only changes when the set object does
            cached = self._count_cache
            if cached is not None and cached[0] is kgs:
                return cached[1]
            count = sum(1 for k in kgs.adds if len(split_key(k)) == 1 and kgs.is_member(k))
            self._count_cache = (kgs, count)
            return count

    # -- membership ---------------------------------------------------

    def join_keygroup(self, keygroup_id: str, node_id: str, role: str = "replica") -> None:
        with self._lock:
            st = self.state
            if not st.keygroups.is_member(make_key(keygroup_id)):
                raise NoSuchKeygroup(keygroup_id)
            if not st.nodes.is_member(node_id):
                raise NoSuchNode(node_id)
            st.keygroups = st.keygroups.add(make_key(keygroup_id, node_id), _payload(role=role), self._stamp())

    def leave_keygroup(self, keygroup_id: str, node_id: str) -> None:
        with self._lock:
            st = self.state
            if not st.keygroups.is_member(make_key(keygroup_id)):
                raise NoSuchKeygroup(keygroup_id)
            if not st.nodes.is_member(node_id):
                raise NoSuchNode(node_id)
            st.keygroups = st.keygroups.remove(make_key(keygroup_id, node_id), self._stamp())

    def get_replicas(self, keygroup_id: str) -> list:
        with self._lock:
            st = self.state
            if not st.keygroups.is_member(make_key(keygroup_id)):
                raise NoSuchKeygroup(keygroup_id)
            out = []
            for key in st.keygroups.adds:
                parts = split_key(key)
                if len(parts) == 2 and parts[0] == keygroup_id and st.keygroups.is_member(key):
                    data = st.nodes.lookup(parts[1])
                    if data is not None:
                        out.append(NodeRecord(parts[1], _read_payload(data)["address"]))
        return sorted(out, key=lambda r: r.node_id.encode("utf-8"))

    # -- permissions --------------------------------------------------

    def set_permission(self, user_id: str, keygroup_id: str, actions: Iterable) -> None:
        _require_id(user_id, "user id")
        acts = normalize_actions(actions)
        with self._lock:
            st = self.state
            if not st.keygroups.is_member(make_key(keygroup_id)):
                raise NoSuchKeygroup(keygroup_id)
            st.permissions = st.permissions.add(make_key(user_id, keygroup_id), _payload(actions=acts), self._stamp())

    def revoke_permission(self, user_id: str, keygroup_id: str) -> None:
        with self._lock:
            st = self.state
            if not st.keygroups.is_member(make_key(keygroup_id)):
                raise NoSuchKeygroup(keygroup_id)
            st.permissions = st.permissions.remove(make_key(user_id, keygroup_id), self._stamp())

    def get_permissions(self, user_id: str, keygroup_id: str) -> list:
        with self._lock:
            data = self.state.permissions.lookup(make_key(user_id, keygroup_id))
        return [] if data is None else list(_read_payload(data)["actions"])

    def check_permission(self, user_id: str, keygroup_id: str, action) -> bool:
        try:
            wanted = Action(action).value
        except ValueError:
            return False
        return wanted in self.get_permissions(user_id, keygroup_id)

    # -- organization -------------------------------------------------

    def set_organization(self, node_id: str, zone: str, metadata: Optional[dict] = None) -> None:
        with self._lock:
            st = self.state
            if not st.nodes.is_member(node_id):
                raise NoSuchNode(node_id)
            st.organization = st.organization.add(
                node_id, _payload(zone=zone, metadata=dict(metadata or {})), self._stamp()
            )

    def get_organization(self, node_id: str) -> Optional[OrganizationRecord]:
        with self._lock:
            data = self.state.organization.lookup(node_id)
        if data is None:
            return None
        rec = _read_payload(data)
        return OrganizationRecord(node_id, rec["zone"], rec["metadata"])

    # -- replication --------------------------------------------------

    def snapshot(self) -> RegistryState:
        with self._lock:
            return self.state.copy()

    def merge_state(self, remote: RegistryState) -> None:
        with self._lock:
            st = self.state
            kgs = st.keygroups.merge(remote.keygroups)
            perms = st.permissions.merge(remote.permissions)
            st.keygroups, st.permissions = cascade_deleted_keygroups(kgs, perms)
            st.nodes = st.nodes.merge(remote.nodes)
            st.organization = st.organization.merge(remote.organization)
            seen = remote.max_stamp()
            if seen is not None:
                st.clock.observe(seen)

    def exchange(self, remote: RegistryState) -> RegistryState:
        """Merge ``remote`` and return the pre-merge local state (push-pull server side)."""
        with self._lock:
            before = self.state.copy()
            self.merge_state(remote)
        return before

    def state_hash(self) -> str:
        with self._lock:
            return self.state.state_hash()

    # -- snapshots ----------------------------------------------------

    def save_snapshot(self, path) -> None:
        with self._lock:
            rec = {
                "version": SNAPSHOT_VERSION,
                "replica_id": self.replica_id,
                "clock": [self.state.clock.last_time_ms, self.state.clock.last_seq],
                "state": self.state.to_record(),
            }
        data = canonical_json(rec)
        directory = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".snapshot-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load_snapshot(cls, path, clock_fn: Optional[Callable[[], int]] = None) -> "Registry":
        with open(path, "rb") as fh:
            rec = load_json(fh.read())
        if rec.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {rec.get('version')!r}")
        reg = cls(rec["replica_id"], clock_fn)
        state = RegistryState.from_record(rec["state"])
        last_time, last_seq = rec["clock"]
        state.clock = ReplicaClock(reg.replica_id, last_time, last_seq)
        reg.state = state
        return reg

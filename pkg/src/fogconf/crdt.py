"""State-based last-write-wins element set.

Each set keeps, per element id, only the newest add entry and the newest
remove stamp. That compacted form answers every membership query exactly
like the full add/remove history would, and merging two sets is a
per-element maximum, which makes merge a lattice join.
"""

from __future__ import annotations

import binascii
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

from .codec import RawJson, canonical_json


class Timestamp(NamedTuple):
    """Totally ordered, globally unique write stamp.

    Tuple ordering gives the lexicographic order on
    ``(time_ms, seq, replica_id)``; two replicas never share an id, so two
    stamps issued anywhere are equal only if they are the same stamp.
    """

    time_ms: int
    seq: int
    replica_id: str

    def to_record(self) -> list:
        return [self.time_ms, self.seq, self.replica_id]

    @classmethod
    def from_record(cls, rec) -> "Timestamp":
        time_ms, seq, replica_id = rec
        if not isinstance(time_ms, int) or not isinstance(seq, int) or not isinstance(replica_id, str):
            raise ValueError(f"bad timestamp record: {rec!r}")
        if time_ms < 0 or seq < 0:
            raise ValueError(f"negative timestamp field: {rec!r}")
        return cls(time_ms, seq, replica_id)


class ReplicaClock:
    """Per-replica stamp issuer, monotone even if the wall clock is not."""

    def __init__(self, replica_id: str, last_time_ms: int = 0, last_seq: int = -1):
        self.replica_id = replica_id
        self.last_time_ms = last_time_ms
        self.last_seq = last_seq

    def next(self, now_ms: int) -> Timestamp:
        if now_ms > self.last_time_ms:
            self.last_time_ms = now_ms
            self.last_seq = 0
        else:
            self.last_seq += 1
        return Timestamp(self.last_time_ms, self.last_seq, self.replica_id)

    def observe(self, stamp: Timestamp) -> None:
        """Advance past a stamp seen from elsewhere (hybrid-clock receive rule)."""
        if stamp.time_ms > self.last_time_ms:
            self.last_time_ms = stamp.time_ms
            self.last_seq = stamp.seq
        elif stamp.time_ms == self.last_time_ms and stamp.seq > self.last_seq:
            self.last_seq = stamp.seq

    def copy(self) -> "ReplicaClock":
        return ReplicaClock(self.replica_id, self.last_time_ms, self.last_seq)

    def __repr__(self) -> str:
        return f"ReplicaClock({self.replica_id!r}, last=({self.last_time_ms}, {self.last_seq}))"


def clock_next(clock: ReplicaClock, now_ms: int) -> Timestamp:
    return clock.next(now_ms)


@dataclass(frozen=True)
class LwwEntry:
    element_id: str
    payload: bytes
    stamp: Timestamp
    # base64 form of payload, filled on first encode or on decode
    wire: Optional[str] = field(default=None, compare=False, repr=False)

    def encoded_payload(self) -> str:
        if self.wire is None:
            object.__setattr__(self, "wire", _b64(self.payload))
        return self.wire

    def to_row(self) -> list:
        row = self.__dict__.get("_row")
        if row is None:
            row = [self.element_id, self.encoded_payload(), list(self.stamp)]
            object.__setattr__(self, "_row", row)
        return row

    def row_text(self) -> str:
        text = self.__dict__.get("_row_text")
        if text is None:
            text = canonical_json(self.to_row()).decode("ascii")
            object.__setattr__(self, "_row_text", text)
        return text


@dataclass(frozen=True)
class LwwElementSet:
    """Immutable LWW element set; every mutator returns a new set."""

    adds: dict = field(default_factory=dict)
    removes: dict = field(default_factory=dict)

    def add(self, element_id: str, payload: bytes, stamp: Timestamp) -> "LwwElementSet":
        if not isinstance(payload, (bytes, bytearray)):
            raise TypeError("payload must be bytes")
        current = self.adds.get(element_id)
        if current is not None and current.stamp >= stamp:
            return self
        adds = dict(self.adds)
        adds[element_id] = LwwEntry(element_id, bytes(payload), stamp)
        return LwwElementSet(adds, self.removes)

    def remove(self, element_id: str, stamp: Timestamp) -> "LwwElementSet":
        current = self.removes.get(element_id)
        if current is not None and current >= stamp:
            return self
        removes = dict(self.removes)
        removes[element_id] = stamp
        return LwwElementSet(self.adds, removes)

    def is_member(self, element_id: str) -> bool:
        entry = self.adds.get(element_id)
        if entry is None:
            return False
        removed = self.removes.get(element_id)
        return removed is None or entry.stamp > removed

    def lookup(self, element_id: str) -> Optional[bytes]:
        if self.is_member(element_id):
            return self.adds[element_id].payload
        return None

    def members(self) -> dict:
        return {eid: e.payload for eid, e in self.adds.items() if self.is_member(eid)}

    def merge(self, other: "LwwElementSet") -> "LwwElementSet":
        if other is self:
            return self
        adds = dict(self.adds)
        for eid, entry in other.adds.items():
            mine = adds.get(eid)
            if mine is None or entry.stamp > mine.stamp:
                adds[eid] = entry
        removes = dict(self.removes)
        for eid, stamp in other.removes.items():
            mine = removes.get(eid)
            if mine is None or stamp > mine:
                removes[eid] = stamp
        return LwwElementSet(adds, removes)

    def max_stamp(self) -> Optional[Timestamp]:
        stamps = [e.stamp for e in self.adds.values()]
        stamps.extend(self.removes.values())
        return max(stamps, default=None)

    def __len__(self) -> int:
        return sum(1 for eid in self.adds if self.is_member(eid))

    def __contains__(self, element_id: object) -> bool:
        return isinstance(element_id, str) and self.is_member(element_id)

    # Canonical record: ids sorted by UTF-8 bytes, payload bytes base64.
    # Equal sets give equal records, hence equal canonical JSON bytes.
    # UTF-8 preserves code point order, so plain str sorting is byte order.
    def to_record(self) -> dict:
        cached = self.__dict__.get("_record")
        if cached is None:
            adds, removes = self.adds, self.removes
            cached = {
                "adds": [adds[eid].to_row() for eid in sorted(adds)],
                "removes": [[eid, list(removes[eid])] for eid in sorted(removes)],
            }
            # frozen instance: the record is a pure function of the fields
            object.__setattr__(self, "_record", cached)
        return cached

    def to_raw(self) -> RawJson:
        """Canonical JSON of :meth:`to_record`, built from per-entry cached text."""
        raw = self.__dict__.get("_raw")
        if raw is None:
            adds, removes = self.adds, self.removes
            raw = RawJson(
                '{"adds":[' + ",".join(adds[eid].row_text() for eid in sorted(adds)) + '],"removes":['
                + ",".join(canonical_json([eid, list(removes[eid])]).decode("ascii") for eid in sorted(removes))
                + "]}"
            )
            object.__setattr__(self, "_raw", raw)
        return raw

    @classmethod
    def from_record(cls, rec: dict, known: Optional["LwwElementSet"] = None) -> "LwwElementSet":
        """Decode a canonical record.

        Entries whose stamp matches an entry of ``known`` are reused instead
        of decoded: stamps are unique, so equal stamps mean the same write.
        """
        known_adds = known.adds if known is not None else {}
        try:
            adds = {}
            for eid, payload, stamp in rec["adds"]:
                if not isinstance(eid, str):
                    raise ValueError("element id must be a string")
                mine = known_adds.get(eid)
                if mine is not None and mine.stamp == tuple(stamp):
                    adds[eid] = mine
                else:
                    adds[eid] = LwwEntry(eid, _unb64(payload), Timestamp.from_record(stamp), payload)
            removes = {}
            for eid, stamp in rec["removes"]:
                if not isinstance(eid, str):
                    raise ValueError("element id must be a string")
                removes[eid] = Timestamp.from_record(stamp)
        except (KeyError, TypeError, ValueError, binascii.Error) as exc:
            raise ValueError(f"malformed LWW set record: {exc}") from exc
        return cls(adds, removes)


def _b64(data: bytes) -> str:
    return binascii.b2a_base64(data, newline=False).decode("ascii")


def _unb64(text: str) -> bytes:
    if not isinstance(text, str) or len(text) % 4:
        raise ValueError("payload is not canonical base64")
    return binascii.a2b_base64(text)


def lww_add(s: LwwElementSet, element_id: str, payload: bytes, stamp: Timestamp) -> LwwElementSet:
    return s.add(element_id, payload, stamp)


def lww_remove(s: LwwElementSet, element_id: str, stamp: Timestamp) -> LwwElementSet:
    return s.remove(element_id, stamp)


def lww_lookup(s: LwwElementSet, element_id: str) -> Optional[bytes]:
    return s.lookup(element_id)


def lww_merge(a: LwwElementSet, b: LwwElementSet) -> LwwElementSet:
    return a.merge(b)


def lww_members(s: LwwElementSet) -> dict:
    return s.members()


def merge_all(sets: Iterable[LwwElementSet]) -> LwwElementSet:
    out = LwwElementSet()
    for s in sets:
        out = out.merge(s)
    return out

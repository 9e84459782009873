"""Canonical text records shared by payloads, snapshots and the wire format."""

from __future__ import annotations

import json

# Stand-in emitted for a RawJson value; json escapes NUL, so the quoted
# form below is what appears in the encoder output.
_MARK = "\x00fogconf-raw\x00"
_QUOTED_MARK = json.dumps(_MARK)


class RawJson:
    """Text that is already canonical JSON, spliced into the output verbatim.

    Lets large, rarely changing records (replica state) be encoded once and
    reused across many frames.
    """

    __slots__ = ("text",)

    def __init__(self, text: str):
        self.text = text

    def __eq__(self, other):
        return isinstance(other, RawJson) and other.text == self.text

    def __repr__(self):
        return f"RawJson({self.text[:40]!r}...)"


def _dumps(obj, default=None) -> str:
    # sort_keys orders by code point, which matches UTF-8 byte order.
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False, default=default)


def canonical_json(obj) -> bytes:
    raws = []

    def stash(value):
        if isinstance(value, RawJson):
            raws.append(value.text)
            return _MARK
        raise TypeError(f"{type(value).__name__} is not JSON serializable")

    text = _dumps(obj, stash)
    if raws:
        pieces = text.split(_QUOTED_MARK)
        if len(pieces) != len(raws) + 1:
            # some ordinary string equals the marker: take the slow path
            return canonical_json(_inline(obj))
        out = [pieces[0]]
        for raw, piece in zip(raws, pieces[1:]):
            out.append(raw)
            out.append(piece)
        text = "".join(out)
    return text.encode("ascii")


def _inline(obj):
    if isinstance(obj, RawJson):
        return json.loads(obj.text)
    if isinstance(obj, dict):
        return {k: _inline(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_inline(v) for v in obj]
    return obj


def load_json(data: bytes):
    return json.loads(data.decode("utf-8"))

"""Print the worked frame examples that appear in protocol.md.

    python3 demos/protocol_examples.py

Each example shows the canonical record, its byte length and the full
frame in hex, 32 bytes per line.
"""

from fogconf.api import Envelope, encode, error_response, ok_response
from fogconf.registry import Registry

# a replica whose only content is its own node record, stamped at t=5 ms
seed = Registry("m1", clock_fn=lambda: 5)
seed.register_node("m1", "m1:7000")

EXAMPLES = [
    ("CreateKeygroup request",
     Envelope("CreateKeygroup", "1", {"config": {"mutable": True}, "creator": "alice", "keygroup_id": "kg1"})),
    ("Ok response to it", ok_response("1")),
    ("KeygroupExists error on a second identical create", error_response("2", "KeygroupExists", "kg1")),
    ("KeygroupCount request", Envelope("KeygroupCount", "3", {})),
    ("KeygroupCount answer", ok_response("3", {"count": 1})),
    ("Unknown message type", Envelope("Frobnicate", "4", {})),
    ("Its error response", error_response("4", "UnknownMessage", "unknown msg_type 'Frobnicate'")),
    ("StateExchange request carrying one node record",
     Envelope("StateExchange", "m1:7000/1", {"address": "m1:7000", "from": "m1", "state": seed.snapshot().to_record()})),
]


def hex_lines(frame: bytes, width: int = 32) -> str:
    return "\n".join(frame[i:i + width].hex() for i in range(0, len(frame), width))


def render() -> str:
    out = []
    for title, env in EXAMPLES:
        frame = encode(env)
        out.append(f"### {title}\n")
        out.append("```json\n" + frame[4:].decode("ascii") + "\n```\n")
        out.append(f"Record length {len(frame) - 4} bytes, prefix `{frame[:4].hex()}`.\n")
        out.append("```hex\n" + hex_lines(frame) + "\n```\n")
    return "\n".join(out)


if __name__ == "__main__":
    print(render())

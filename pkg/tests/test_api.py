import json
import re
import socket
import struct
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fogconf.api import (
    CLIENT_MESSAGES,
    RESPONSE,
    STATE_EXCHANGE,
    ApiClient,
    ApiError,
    CrdtService,
    Envelope,
    ProtocolError,
    decode,
    encode,
    error_response,
    ok_response,
)
from fogconf.gossip import GossipNode
from fogconf.registry import Registry
from fogconf.simnet import SimNetwork, SimScheduler, TcpTransport, read_frame

PROTOCOL_MD = Path(__file__).resolve().parents[1] / "protocol.md"


def frame_of(record: dict) -> bytes:
    """Independent encoder: sorted keys, compact, ASCII, then the u32 prefix."""
    data = json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()
    return struct.pack(">I", len(data)) + data


def service(name="m1", t=0):
    reg = Registry(name, clock_fn=lambda: t)
    return reg, CrdtService(reg)


def ask(svc, msg_type, body, request_id="r1"):
    out = []
    svc.handle(encode(Envelope(msg_type, request_id, body)), out.append)
    assert len(out) == 1
    return decode(out[0])


# -- framing -------------------------------------------------------------------

json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-2**53, 2**53) | st.text(max_size=12),
    lambda children: st.lists(children, max_size=4) | st.dictionaries(st.text(max_size=8), children, max_size=4),
    max_leaves=12,
)


@given(st.sampled_from(CLIENT_MESSAGES + (STATE_EXCHANGE, RESPONSE)), st.text(max_size=20),
       st.dictionaries(st.text(max_size=10), json_values, max_size=5))
def test_encode_decode_round_trip(msg_type, request_id, body):
    env = Envelope(msg_type, request_id, body)
    frame = encode(env)
    assert decode(frame) == env
    assert frame == frame_of({"body": body, "msg_type": msg_type, "request_id": request_id, "version": 1})


def test_length_prefix_counts_record_bytes():
    frame = encode(Envelope("KeygroupCount", "é", {}))
    (n,) = struct.unpack(">I", frame[:4])
    assert n == len(frame) - 4
    assert frame[4:].isascii()


def protocol_examples():
    text = PROTOCOL_MD.read_text()
    pairs = re.findall(r"```json\n(.*?)\n```.*?```hex\n(.*?)\n```", text, re.S)
    return [(j, bytes.fromhex(h.replace("\n", ""))) for j, h in pairs]


def test_protocol_md_has_examples():
    assert len(protocol_examples()) >= 6


@pytest.mark.parametrize("record_text, frame", protocol_examples())
def test_protocol_md_hex_examples(record_text, frame):
    rec = json.loads(record_text)
    assert frame == frame_of(rec)
    env = decode(frame)
    assert encode(env) == frame
    assert env.to_record() == rec


def test_protocol_md_create_response_matches_service():
    _, svc = service()
    out = []
    svc.handle(encode(Envelope("CreateKeygroup", "1", {"config": {"mutable": True}, "creator": "alice", "keygroup_id": "kg1"})),
               out.append)
    svc.handle(encode(Envelope("CreateKeygroup", "2", {"config": {"mutable": True}, "creator": "alice", "keygroup_id": "kg1"})),
               out.append)
    frames = [f for _, f in protocol_examples()]
    assert out[0] == frames[1]
    assert out[1] == frames[2]


@pytest.mark.parametrize("frame", [
    b"",
    b"\x00\x00",
    struct.pack(">I", 10) + b"{}",
    struct.pack(">I", 3) + b"abc",
    frame_of({"body": {}, "msg_type": "X", "request_id": "1"}),
    frame_of({"body": {}, "msg_type": "X", "request_id": "1", "version": 2}),
    frame_of({"body": [], "msg_type": "X", "request_id": "1", "version": 1}),
    frame_of({"body": {}, "msg_type": 5, "request_id": "1", "version": 1}),
    frame_of({"body": {}, "extra": 1, "msg_type": "X", "request_id": "1", "version": 1}),
])
def test_decode_rejects_bad_frames(frame):
    with pytest.raises(ProtocolError):
        decode(frame)


def test_bad_frame_gets_bad_request():
    _, svc = service()
    out = []
    svc.handle(struct.pack(">I", 3) + b"abc", out.append)
    resp = decode(out[0])
    assert resp.body["status"] == "Error" and resp.body["error"]["code"] == "BadRequest"
    assert resp.body["error"]["status_code"] == 400


# -- endpoint ------------------------------------------------------------------

def test_create_then_duplicate():
    _, svc = service()
    first = ask(svc, "CreateKeygroup", {"keygroup_id": "kg1", "creator": "alice"})
    assert first.body == {"result": {}, "status": "Ok"} and first.msg_type == RESPONSE
    second = ask(svc, "CreateKeygroup", {"keygroup_id": "kg1", "creator": "alice"})
    assert second.body["error"]["code"] == "KeygroupExists"
    assert second.body["error"]["status_code"] == 409


def test_response_echoes_request_id():
    _, svc = service()
    assert ask(svc, "KeygroupCount", {}, request_id="abc-123").request_id == "abc-123"
    assert ask(svc, "Nope", {}, request_id="zz").request_id == "zz"


@pytest.mark.parametrize("msg_type, body, code", [
    ("CreateKeygroup", {"keygroup_id": "kg1"}, "BadRequest"),
    ("CreateKeygroup", {"keygroup_id": 7, "creator": "a"}, "BadRequest"),
    ("CreateKeygroup", {"keygroup_id": "", "creator": "a"}, "InvalidArgument"),
    ("DeleteKeygroup", {"keygroup_id": "nope"}, "NoSuchKeygroup"),
    ("JoinKeygroup", {"keygroup_id": "kg0", "node_id": "ghost"}, "NoSuchNode"),
    ("RegisterNode", {"node_id": "n", "address": "nonsense"}, "MalformedAddress"),
    ("SetPermission", {"user_id": "u", "keygroup_id": "kg0", "actions": ["Fly"]}, "InvalidArgument"),
    ("GetReplicas", {"keygroup_id": "nope"}, "NoSuchKeygroup"),
    ("Frobnicate", {}, "UnknownMessage"),
])
def test_error_codes(msg_type, body, code):
    _, svc = service()
    ask(svc, "CreateKeygroup", {"keygroup_id": "kg0", "creator": "alice"})
    resp = ask(svc, msg_type, body)
    assert resp.body["status"] == "Error" and resp.body["error"]["code"] == code


def test_full_client_surface():
    _, svc = service()

    def ok(msg_type, body):
        resp = ask(svc, msg_type, body)
        assert resp.body["status"] == "Ok", resp.body
        return resp.body["result"]

    ok("RegisterNode", {"node_id": "nodeB", "address": "10.0.0.2:9001"})
    ok("CreateKeygroup", {"keygroup_id": "kg1", "creator": "alice", "config": {"mutable": True}})
    ok("JoinKeygroup", {"keygroup_id": "kg1", "node_id": "nodeB"})
    assert ok("GetReplicas", {"keygroup_id": "kg1"}) == {"replicas": [{"address": "10.0.0.2:9001", "node_id": "nodeB"}]}
    ok("SetPermission", {"user_id": "bob", "keygroup_id": "kg1", "actions": ["Read"]})
    assert ok("CheckPermission", {"user_id": "bob", "keygroup_id": "kg1", "action": "Read"}) == {"allowed": True}
    ok("RevokePermission", {"user_id": "bob", "keygroup_id": "kg1"})
    assert ok("CheckPermission", {"user_id": "bob", "keygroup_id": "kg1", "action": "Read"}) == {"allowed": False}
    ok("LeaveKeygroup", {"keygroup_id": "kg1", "node_id": "nodeB"})
    assert ok("GetReplicas", {"keygroup_id": "kg1"}) == {"replicas": []}
    assert ok("KeygroupCount", {}) == {"count": 1}
    ok("DeleteKeygroup", {"keygroup_id": "kg1"})
    assert ok("KeygroupCount", {}) == {"count": 0}


def test_state_exchange_returns_pre_merge_state_and_both_converge():
    a, svc_a = service("A", t=1)
    b, _ = service("B", t=2)
    a.create_keygroup("kg-a", {}, "alice")
    b.create_keygroup("kg-b", {}, "bob")
    a_before = a.snapshot()
    resp = ask(svc_a, STATE_EXCHANGE, {"state": b.snapshot().to_record()})
    returned = resp.body["result"]["state"]
    assert returned == a_before.to_record()
    b.merge_state(type(a_before).from_record(returned))
    assert a.state_hash() == b.state_hash()
    assert a.keygroups() == b.keygroups() == ["kg-a", "kg-b"]


def test_equal_states_encode_to_identical_bytes():
    a, b = Registry("A", clock_fn=lambda: 1), Registry("B", clock_fn=lambda: 1)
    a.create_keygroup("x", {}, "u")
    a.create_keygroup("y", {}, "u")
    b.merge_state(a.snapshot())
    c = Registry("C")
    c.merge_state(b.snapshot())
    assert a.snapshot().encode() == b.snapshot().encode() == c.snapshot().encode()


class ExplodingTransport:
    def register(self, *a, **k):
        pass

    def send_request(self, *a, **k):
        raise AssertionError("client request handler touched the network")


def test_client_handlers_never_call_the_network():
    reg = Registry("m1", clock_fn=lambda: 0)
    svc = CrdtService(reg)
    svc.gossip = GossipNode("m1", "m1:7000", reg, ExplodingTransport(), SimScheduler())
    bodies = {
        "RegisterNode": {"node_id": "n", "address": "10.0.0.1:1"},
        "CreateKeygroup": {"keygroup_id": "kg", "creator": "u"},
        "JoinKeygroup": {"keygroup_id": "kg", "node_id": "n"},
        "SetPermission": {"user_id": "v", "keygroup_id": "kg", "actions": ["Read"]},
        "CheckPermission": {"user_id": "v", "keygroup_id": "kg", "action": "Read"},
        "GetReplicas": {"keygroup_id": "kg"},
        "KeygroupCount": {},
        "RevokePermission": {"user_id": "v", "keygroup_id": "kg"},
        "LeaveKeygroup": {"keygroup_id": "kg", "node_id": "n"},
        "DeleteKeygroup": {"keygroup_id": "kg"},
    }
    assert set(bodies) == set(CLIENT_MESSAGES)
    for msg_type, body in bodies.items():
        assert ask(svc, msg_type, body).body["status"] == "Ok", msg_type


# -- client --------------------------------------------------------------------

def test_client_rejects_mismatched_request_id():
    net = SimNetwork(SimScheduler())
    net.register("srv:1", lambda frame, reply: reply(encode(ok_response("someone-else"))))
    got = []
    ApiClient(net, "cli:1").call("srv:1", "KeygroupCount", {}, lambda r, e: got.append(e))
    net.scheduler.run_until(10)
    assert isinstance(got[0], ProtocolError)


def test_client_surfaces_api_errors():
    net = SimNetwork(SimScheduler())

    def handler(frame, reply):
        reply(encode(error_response(decode(frame).request_id, "NoSuchKeygroup", "kg9")))

    net.register("srv:1", handler)
    got = []
    ApiClient(net, "cli:1").call("srv:1", "GetReplicas", {"keygroup_id": "kg9"}, lambda r, e: got.append(e))
    net.scheduler.run_until(10)
    assert isinstance(got[0], ApiError) and got[0].code == "NoSuchKeygroup"


# -- over real sockets ---------------------------------------------------------

@pytest.fixture
def tcp_server():
    reg = Registry("m1")
    svc = CrdtService(reg)
    transport = TcpTransport(timeout_ms=2000)
    address = transport.register("127.0.0.1:0", svc.handle, node="m1")
    host, _, port = address.rpartition(":")
    yield reg, (host, int(port)), transport, address
    transport.close()


def test_tcp_unknown_message_keeps_connection_open(tcp_server):
    reg, addr, _, _ = tcp_server
    with socket.create_connection(addr, timeout=5) as sock:
        rfile = sock.makefile("rb")
        sock.sendall(encode(Envelope("Frobnicate", "1", {})))
        first = decode(read_frame(rfile))
        assert first.body["error"]["code"] == "UnknownMessage"
        sock.sendall(encode(Envelope("CreateKeygroup", "2", {"keygroup_id": "kg1", "creator": "a"})))
        second = decode(read_frame(rfile))
        assert second.request_id == "2" and second.body["status"] == "Ok"
    assert reg.has_keygroup("kg1")


def test_tcp_truncated_frame_closes_connection_without_state_change(tcp_server):
    reg, addr, _, _ = tcp_server
    before = reg.state_hash()
    full = encode(Envelope("CreateKeygroup", "1", {"keygroup_id": "kg1", "creator": "a"}))
    with socket.create_connection(addr, timeout=5) as sock:
        sock.sendall(full[:-5])
        sock.shutdown(socket.SHUT_WR)
        assert sock.makefile("rb").read() == b""
    assert reg.state_hash() == before
    assert not reg.has_keygroup("kg1")


def test_tcp_pipelined_requests_answered_in_order(tcp_server):
    _, addr, _, _ = tcp_server
    with socket.create_connection(addr, timeout=5) as sock:
        rfile = sock.makefile("rb")
        sock.sendall(b"".join(encode(Envelope("CreateKeygroup", str(i), {"keygroup_id": f"kg{i}", "creator": "a"}))
                              for i in range(5)))
        ids = [decode(read_frame(rfile)).request_id for _ in range(5)]
    assert ids == ["0", "1", "2", "3", "4"]


def test_tcp_client_call_sync(tcp_server):
    reg, _, transport, address = tcp_server
    client = ApiClient(transport, "127.0.0.1:1")
    assert client.call_sync(address, "CreateKeygroup", {"keygroup_id": "kg1", "creator": "a"}) == {}
    assert client.call_sync(address, "KeygroupCount", {}) == {"count": 1}
    with pytest.raises(ApiError) as info:
        client.call_sync(address, "CreateKeygroup", {"keygroup_id": "kg1", "creator": "a"})
    assert info.value.code == "KeygroupExists"

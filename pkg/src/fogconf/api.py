"""Length-prefixed envelope protocol and the naming-service endpoint.

Frame layout: 4-byte big-endian length, then a canonical JSON record
``{"body":..., "msg_type":..., "request_id":..., "version":1}``.
See ``protocol.md`` for byte-level examples.
"""

from __future__ import annotations

import itertools
import json
import logging
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from .codec import canonical_json
from .registry import Registry, RegistryError, RegistryState

log = logging.getLogger(__name__)

VERSION = 1

CLIENT_MESSAGES = (
    "CreateKeygroup",
    "DeleteKeygroup",
    "JoinKeygroup",
    "LeaveKeygroup",
    "RegisterNode",
    "SetPermission",
    "RevokePermission",
    "CheckPermission",
    "GetReplicas",
    "KeygroupCount",
)
STATE_EXCHANGE = "StateExchange"
RESPONSE = "Response"

# Stable numeric codes travel next to the symbolic name.
ERROR_CODES = {
    "BadRequest": 400,
    "InvalidArgument": 400,
    "MalformedAddress": 400,
    "UnknownMessage": 400,
    "NoSuchKeygroup": 404,
    "NoSuchNode": 404,
    "KeygroupExists": 409,
    "Internal": 500,
    "NoQuorum": 503,
}


class ProtocolError(ValueError):
    pass


class UnknownMessage(ProtocolError):
    pass


class ApiError(Exception):
    """An Error response received by a client."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message


@dataclass(frozen=True)
class Envelope:
    msg_type: str
    request_id: str
    body: dict = field(default_factory=dict)
    version: int = VERSION

    def to_record(self) -> dict:
        return {"body": self.body, "msg_type": self.msg_type, "request_id": self.request_id, "version": self.version}


def encode(env: Envelope) -> bytes:
    record = canonical_json(env.to_record())
    return struct.pack(">I", len(record)) + record


def decode(frame: bytes) -> Envelope:
    if len(frame) < 4:
        raise ProtocolError("frame shorter than its length prefix")
    (length,) = struct.unpack(">I", frame[:4])
    if length != len(frame) - 4:
        raise ProtocolError(f"length prefix {length} != record length {len(frame) - 4}")
    try:
        rec = json.loads(frame[4:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"record is not JSON: {exc}") from exc
    if not isinstance(rec, dict) or set(rec) != {"body", "msg_type", "request_id", "version"}:
        raise ProtocolError("record must have exactly body, msg_type, request_id, version")
    if rec["version"] != VERSION:
        raise ProtocolError(f"unsupported version {rec['version']!r}")
    if not isinstance(rec["msg_type"], str) or not isinstance(rec["request_id"], str):
        raise ProtocolError("msg_type and request_id must be strings")
    if not isinstance(rec["body"], dict):
        raise ProtocolError("body must be a record")
    return Envelope(rec["msg_type"], rec["request_id"], rec["body"], rec["version"])


def ok_response(request_id: str, result: Optional[dict] = None) -> Envelope:
    return Envelope(RESPONSE, request_id, {"result": result or {}, "status": "Ok"})


def error_response(request_id: str, code: str, message: str = "") -> Envelope:
    return Envelope(
        RESPONSE,
        request_id,
        {"error": {"code": code, "message": message, "status_code": ERROR_CODES.get(code, 500)}, "status": "Error"},
    )


def parse_response(env: Envelope) -> dict:
    """Return the result record of an Ok response, raise ApiError otherwise."""
    body = env.body
    if env.msg_type != RESPONSE or body.get("status") not in ("Ok", "Error"):
        raise ProtocolError(f"not a response: {env.msg_type}")
    if body["status"] == "Error":
        err = body.get("error", {})
        raise ApiError(err.get("code", "Internal"), err.get("message", ""))
    return body.get("result", {})


def require_field(body: dict, name: str, kind=str, optional: bool = False):
    if name not in body:
        if optional:
            return None
        raise ProtocolError(f"missing field {name!r}")
    value = body[name]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ProtocolError(f"field {name!r} has the wrong type")
    return value


Reply = Callable[[bytes], None]


class Service:
    """Frame-level endpoint: decodes, dispatches, always answers once."""

    def handle(self, frame: bytes, reply: Reply) -> None:
        try:
            env = decode(frame)
        except ProtocolError as exc:
            reply(encode(error_response("", "BadRequest", str(exc))))
            return

        def respond(result: Optional[dict] = None, error: Optional[Exception] = None) -> None:
            if error is None:
                reply(encode(ok_response(env.request_id, result)))
            elif isinstance(error, ProtocolError):
                code = "UnknownMessage" if isinstance(error, UnknownMessage) else "BadRequest"
                reply(encode(error_response(env.request_id, code, str(error))))
            else:
                code = getattr(error, "code", None) or "Internal"
                reply(encode(error_response(env.request_id, code, str(error))))

        try:
            self.dispatch(env, respond)
        except (ProtocolError, RegistryError) as exc:
            respond(error=exc)
        except ValueError as exc:
            respond(error=ProtocolError(str(exc)))
        except Exception as exc:  # handler bug; never leave the caller hanging
            log.exception("handler failed for %s", env.msg_type)
            respond(error=exc)

    def dispatch(self, env: Envelope, respond) -> None:
        raise NotImplementedError


class CrdtService(Service):
    """Serves client requests from the local registry; never calls out.

    State exchanges are forwarded to ``gossip.handle_exchange`` when a gossip
    node is attached, otherwise merged directly.
    """

    def __init__(self, registry: Registry, gossip=None):
        self.registry = registry
        self.gossip = gossip

    def dispatch(self, env: Envelope, respond) -> None:
        if env.msg_type == STATE_EXCHANGE:
            if self.gossip is not None:
                respond(self.gossip.handle_exchange(env.body))
            else:
                remote = RegistryState.from_record(require_field(env.body, "state", dict))
                respond({"state": self.registry.exchange(remote).to_raw()})
            return
        op = getattr(self, "_op_" + env.msg_type, None) if env.msg_type in CLIENT_MESSAGES else None
        if op is None:
            respond(error=UnknownMessage(f"unknown msg_type {env.msg_type!r}"))
            return
        respond(op(env.body))

    def _op_CreateKeygroup(self, b):
        self.registry.create_keygroup(
            require_field(b, "keygroup_id"), require_field(b, "config", dict, optional=True), require_field(b, "creator")
        )
        return {}

    def _op_DeleteKeygroup(self, b):
        self.registry.delete_keygroup(require_field(b, "keygroup_id"))
        return {}

    def _op_JoinKeygroup(self, b):
        self.registry.join_keygroup(require_field(b, "keygroup_id"), require_field(b, "node_id"))
        return {}

    def _op_LeaveKeygroup(self, b):
        self.registry.leave_keygroup(require_field(b, "keygroup_id"), require_field(b, "node_id"))
        return {}

    def _op_RegisterNode(self, b):
        self.registry.register_node(require_field(b, "node_id"), require_field(b, "address"))
        return {}

    def _op_SetPermission(self, b):
        self.registry.set_permission(require_field(b, "user_id"), require_field(b, "keygroup_id"), require_field(b, "actions", list))
        return {}

    def _op_RevokePermission(self, b):
        self.registry.revoke_permission(require_field(b, "user_id"), require_field(b, "keygroup_id"))
        return {}

    def _op_CheckPermission(self, b):
        allowed = self.registry.check_permission(require_field(b, "user_id"), require_field(b, "keygroup_id"), require_field(b, "action"))
        return {"allowed": allowed}

    def _op_GetReplicas(self, b):
        replicas = self.registry.get_replicas(require_field(b, "keygroup_id"))
        return {"replicas": [{"address": r.address, "node_id": r.node_id} for r in replicas]}

    def _op_KeygroupCount(self, b):
        return {"count": self.registry.keygroup_count()}


class ApiClient:
    """Callback-style client over any transport.

    ``on_done(result, error)`` receives the result record or an
    :class:`ApiError` / transport error.
    """

    _ids = itertools.count(1)
    _ids_lock = threading.Lock()

    def __init__(self, transport, address: str, timeout_ms: Optional[float] = None):
        self.transport = transport
        self.address = address
        self.timeout_ms = timeout_ms

    def _next_id(self) -> str:
        with self._ids_lock:
            return f"{self.address}/{next(self._ids)}"

    def call(self, dst: str, msg_type: str, body: dict, on_done) -> None:
        env = Envelope(msg_type, self._next_id(), body)

        def finish(response, error):
            if error is not None:
                on_done(None, error)
                return
            try:
                resp = decode(response)
                if resp.request_id != env.request_id:
                    raise ProtocolError("response request_id mismatch")
                on_done(parse_response(resp), None)
            except (ProtocolError, ApiError) as exc:
                on_done(None, exc)

        self.transport.send_request(self.address, dst, encode(env), finish, timeout_ms=self.timeout_ms)

    def call_sync(self, dst: str, msg_type: str, body: dict, wait_s: float = 10.0) -> dict:
        """Blocking call for threaded transports (not the simulator)."""
        done = threading.Event()
        box = {}

        def on_done(result, error):
            box["result"], box["error"] = result, error
            done.set()

        self.call(dst, msg_type, body, on_done)
        if not done.wait(wait_s):
            raise TimeoutError(f"{msg_type} to {dst} did not complete")
        if box["error"] is not None:
            raise box["error"]
        return box["result"]

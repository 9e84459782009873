"""Transports: a deterministic discrete-event network and a TCP one.

Both expose the same callback contract::

    transport.register(address, handler, node=name)
    transport.send_request(src, dst, payload, on_done, timeout_ms=None)

``handler(payload, reply)`` may call ``reply(bytes)`` immediately or later.
``on_done(response, error)`` fires exactly once, with either the response
bytes or a :class:`TransportError`.

Endpoints are addressed by ``host:port`` strings. Each endpoint may belong
to a named node; delays and partitions are looked up by node name.
Endpoints with no node (load generators) are never partitioned.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import socket
import socketserver
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

log = logging.getLogger(__name__)

Handler = Callable[[bytes, Callable[[bytes], None]], None]
OnDone = Callable[[Optional[bytes], Optional["TransportError"]], None]

DEFAULT_TIMEOUT_MS = 500
MAX_FRAME = 64 * 1024 * 1024


class TransportError(Exception):
    pass


class Timeout(TransportError):
    pass


class Unreachable(TransportError):
    pass


class ScheduleError(ValueError):
    pass


@dataclass
class DelayMatrix:
    """One-way link delays in ms, looked up by node name."""

    default_ms: float = 0
    links: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.default_ms < 0 or any(d < 0 for d in self.links.values()):
            raise ScheduleError("delays must be non-negative")

    def get(self, src: Optional[str], dst: Optional[str]) -> float:
        if src == dst:
            return 0
        return self.links.get((src, dst), self.default_ms)

    @classmethod
    def uniform(cls, nodes: Iterable[str], delay_ms: float) -> "DelayMatrix":
        nodes = list(nodes)
        return cls(0, {(a, b): delay_ms for a in nodes for b in nodes if a != b})


@dataclass(frozen=True)
class PartitionEvent:
    at_ms: int
    groups: Optional[tuple] = None  # None means heal

    @property
    def is_heal(self) -> bool:
        return self.groups is None


def partition(at_ms: int, *groups: Iterable[str]) -> PartitionEvent:
    return PartitionEvent(at_ms, tuple(frozenset(g) for g in groups))


def heal(at_ms: int) -> PartitionEvent:
    return PartitionEvent(at_ms, None)


def validate_schedule(events: list, nodes: Optional[Iterable[str]] = None) -> None:
    nodes = set(nodes) if nodes is not None else None
    last = None
    for ev in events:
        if ev.at_ms < 0:
            raise ScheduleError(f"event time must be non-negative: {ev}")
        if last is not None and ev.at_ms < last:
            raise ScheduleError("partition events must be sorted by time")
        last = ev.at_ms
        if ev.is_heal:
            continue
        seen = set()
        for g in ev.groups:
            if seen & g:
                raise ScheduleError(f"partition groups overlap: {ev}")
            seen |= g
        if nodes is not None and seen != nodes:
            raise ScheduleError(f"partition groups must cover exactly the nodes {sorted(nodes)}")


class Connectivity:
    def __init__(self):
        self._group_of: Optional[dict] = None
        self._lock = threading.Lock()
        self.heal_listeners: list = []

    def set_partition(self, groups) -> None:
        with self._lock:
            self._group_of = {n: i for i, g in enumerate(groups) for n in g}

    def heal(self) -> None:
        with self._lock:
            was = self._group_of is not None
            self._group_of = None
        if was:
            for fn in list(self.heal_listeners):
                fn()

    @property
    def partitioned(self) -> bool:
        return self._group_of is not None

    def connected(self, a: Optional[str], b: Optional[str]) -> bool:
        with self._lock:
            groups = self._group_of
            if groups is None or a is None or b is None:
                return True
            ga, gb = groups.get(a), groups.get(b)
            return ga is None or gb is None or ga == gb


class SimScheduler:
    """Virtual clock plus an event heap; ties run in insertion order."""

    def __init__(self, start_ms: int = 0):
        self.now_ms = start_ms
        self._heap: list = []
        self._seq = itertools.count()

    def now(self) -> int:
        return self.now_ms

    def call_at(self, at_ms: float, fn: Callable[[], None]) -> None:
        if at_ms < self.now_ms:
            at_ms = self.now_ms
        heapq.heappush(self._heap, (at_ms, next(self._seq), fn))

    def call_later(self, delay_ms: float, fn: Callable[[], None]) -> None:
        self.call_at(self.now_ms + delay_ms, fn)

    def run_until(self, t_ms: float) -> None:
        while self._heap and self._heap[0][0] <= t_ms:
            at, _, fn = heapq.heappop(self._heap)
            self.now_ms = at
            fn()
        if t_ms > self.now_ms:
            self.now_ms = t_ms

    def run(self, limit_ms: Optional[float] = None) -> None:
        """Drain the queue (up to ``limit_ms`` if given)."""
        while self._heap and (limit_ms is None or self._heap[0][0] <= limit_ms):
            at, _, fn = heapq.heappop(self._heap)
            self.now_ms = at
            fn()

    @property
    def pending(self) -> int:
        return len(self._heap)


class RealScheduler:
    """Wall-clock scheduler; callbacks run on one timer thread."""

    def __init__(self):
        self._t0 = time.monotonic()
        self._cv = threading.Condition()
        self._heap: list = []
        self._seq = itertools.count()
        self._stopped = False
        self._thread = threading.Thread(target=self._loop, name="real-scheduler", daemon=True)
        self._thread.start()

    def now(self) -> float:
        return (time.monotonic() - self._t0) * 1000.0

    @property
    def now_ms(self) -> float:
        return self.now()

    def call_at(self, at_ms: float, fn: Callable[[], None]) -> None:
        with self._cv:
            heapq.heappush(self._heap, (at_ms, next(self._seq), fn))
            self._cv.notify()

    def call_later(self, delay_ms: float, fn: Callable[[], None]) -> None:
        self.call_at(self.now() + delay_ms, fn)

    def _loop(self) -> None:
        while True:
            with self._cv:
                while not self._stopped:
                    if self._heap:
                        wait = (self._heap[0][0] - self.now()) / 1000.0
                        if wait <= 0:
                            break
                        self._cv.wait(wait)
                    else:
                        self._cv.wait()
                if self._stopped:
                    return
                _, _, fn = heapq.heappop(self._heap)
            try:
                fn()
            except Exception:
                log.exception("scheduled callback failed")

    def run_until(self, t_ms: float) -> None:
        remaining = (t_ms - self.now()) / 1000.0
        if remaining > 0:
            time.sleep(remaining)

    def stop(self) -> None:
        with self._cv:
            self._stopped = True
            self._cv.notify()


def apply_schedule(events: list, scheduler, connectivity: Connectivity) -> None:
    """Queue every partition/heal event on ``scheduler``."""
    validate_schedule(events)
    for ev in events:
        if ev.is_heal:
            scheduler.call_at(ev.at_ms, connectivity.heal)
        else:
            scheduler.call_at(ev.at_ms, lambda groups=ev.groups: connectivity.set_partition(groups))


class _Once:
    """Guards an on_done callback so it fires exactly once."""

    def __init__(self, fn: OnDone):
        self._fn = fn
        self._done = False
        self._lock = threading.Lock()

    def __call__(self, response, error) -> bool:
        with self._lock:
            if self._done:
                return False
            self._done = True
        self._fn(response, error)
        return True


class SimNetwork:
    """In-process network driven by a :class:`SimScheduler`.

    A request is delivered ``delay(src, dst)`` ms after sending and the reply
    ``delay(dst, src)`` ms after the handler answers. Sends, deliveries and
    replies that cross a partition are dropped and the caller sees a
    :class:`Timeout` once ``timeout_ms`` has elapsed.
    """

    def __init__(self, scheduler: Optional[SimScheduler] = None, delays: Optional[DelayMatrix] = None,
                 timeout_ms: float = DEFAULT_TIMEOUT_MS):
        self.scheduler = scheduler or SimScheduler()
        self.delays = delays or DelayMatrix()
        self.connectivity = Connectivity()
        self.timeout_ms = timeout_ms
        self._handlers: dict = {}
        self._node_of: dict = {}
        self.sent = 0
        self.dropped = 0

    def register(self, address: str, handler: Handler, node: Optional[str] = None) -> None:
        self._handlers[address] = handler
        self._node_of[address] = node

    def unregister(self, address: str) -> None:
        self._handlers.pop(address, None)

    def node_of(self, address: str) -> Optional[str]:
        return self._node_of.get(address)

    def apply_schedule(self, events: list) -> None:
        apply_schedule(events, self.scheduler, self.connectivity)

    def _linked(self, src: str, dst: str) -> bool:
        return self.connectivity.connected(self._node_of.get(src), self._node_of.get(dst))

    def send_request(self, src: str, dst: str, payload: bytes, on_done: OnDone,
                     timeout_ms: Optional[float] = None) -> None:
        sched = self.scheduler
        done = _Once(on_done)
        timeout_ms = self.timeout_ms if timeout_ms is None else timeout_ms
        self.sent += 1
        if dst not in self._handlers:
            sched.call_later(0, lambda: done(None, Unreachable(f"no endpoint at {dst}")))
            return
        sched.call_later(timeout_ms, lambda: done(None, Timeout(f"{src} -> {dst} timed out")))
        if not self._linked(src, dst):
            self.dropped += 1
            return
        fwd = self.delays.get(self._node_of.get(src), self._node_of.get(dst))
        back = self.delays.get(self._node_of.get(dst), self._node_of.get(src))

        def deliver_reply(response: bytes) -> None:
            if not self._linked(dst, src):
                self.dropped += 1
                return
            done(response, None)

        def reply(response: bytes) -> None:
            if not self._linked(dst, src):
                self.dropped += 1
                return
            sched.call_later(back, lambda: deliver_reply(response))

        def deliver() -> None:
            handler = self._handlers.get(dst)
            if handler is None or not self._linked(src, dst):
                self.dropped += 1
                return
            handler(payload, reply)

        sched.call_later(fwd, deliver)


# -- TCP ----------------------------------------------------------------

def write_frame(sock: socket.socket, data: bytes) -> None:
    sock.sendall(data)


def read_frame(rfile) -> Optional[bytes]:
    """Read one length-prefixed frame (prefix included); None on clean EOF.

    Raises EOFError when the stream ends mid-frame.
    """
    head = rfile.read(4)
    if not head:
        return None
    if len(head) < 4:
        raise EOFError("truncated length prefix")
    (length,) = struct.unpack(">I", head)
    if length > MAX_FRAME:
        raise EOFError(f"frame too large: {length}")
    body = rfile.read(length)
    if len(body) < length:
        raise EOFError("truncated frame body")
    return head + body


class _ThreadingServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class TcpTransport:
    """Real sockets, one connection per request.

    Payloads must already be length-prefixed frames (see :mod:`fogconf.api`).
    Artificial delays and partitions from a :class:`DelayMatrix` /
    :class:`Connectivity` are applied on the sending side so a real-mode
    scenario reproduces the simulated topology.
    """

    def __init__(self, scheduler: Optional[RealScheduler] = None, delays: Optional[DelayMatrix] = None,
                 timeout_ms: float = DEFAULT_TIMEOUT_MS, workers: int = 32):
        self.scheduler = scheduler or RealScheduler()
        self.delays = delays or DelayMatrix()
        self.connectivity = Connectivity()
        self.timeout_ms = timeout_ms
        self._servers: dict = {}
        self._node_of: dict = {}
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="tcp-client")

    def register(self, address: str, handler: Handler, node: Optional[str] = None) -> str:
        """Listen on ``address``; port 0 picks a free port. Returns the bound address."""
        host, _, port = address.rpartition(":")
        transport = self

        class _Conn(socketserver.StreamRequestHandler):
            def handle(self):
                while True:
                    try:
                        frame = read_frame(self.rfile)
                    except (EOFError, OSError):
                        return
                    if frame is None:
                        return
                    answered = threading.Event()
                    box = []

                    def reply(data: bytes) -> None:
                        box.append(data)
                        answered.set()

                    handler(frame, reply)
                    if not answered.wait(transport.timeout_ms * 4 / 1000.0):
                        return
                    try:
                        self.wfile.write(box[0])
                        self.wfile.flush()
                    except OSError:
                        return

        server = _ThreadingServer((host, int(port)), _Conn)
        bound = f"{host}:{server.server_address[1]}"
        threading.Thread(target=server.serve_forever, name=f"tcp-{bound}", daemon=True).start()
        self._servers[bound] = server
        self._node_of[bound] = node
        return bound

    def node_of(self, address: str) -> Optional[str]:
        return self._node_of.get(address)

    def apply_schedule(self, events: list) -> None:
        apply_schedule(events, self.scheduler, self.connectivity)

    def _linked(self, src: str, dst: str) -> bool:
        return self.connectivity.connected(self._node_of.get(src), self._node_of.get(dst))

    def send_request(self, src: str, dst: str, payload: bytes, on_done: OnDone,
                     timeout_ms: Optional[float] = None) -> None:
        timeout_ms = self.timeout_ms if timeout_ms is None else timeout_ms
        done = _Once(on_done)
        self.scheduler.call_later(timeout_ms, lambda: done(None, Timeout(f"{src} -> {dst} timed out")))
        self._pool.submit(self._call, src, dst, payload, done, timeout_ms)

    def _call(self, src, dst, payload, done, timeout_ms) -> None:
        fwd = self.delays.get(self._node_of.get(src), self._node_of.get(dst))
        back = self.delays.get(self._node_of.get(dst), self._node_of.get(src))
        try:
            if fwd:
                time.sleep(fwd / 1000.0)
            if not self._linked(src, dst):
                return  # dropped; the timer reports Timeout
            host, _, port = dst.rpartition(":")
            with socket.create_connection((host, int(port)), timeout=timeout_ms / 1000.0) as sock:
                write_frame(sock, payload)
                response = read_frame(sock.makefile("rb"))
            if response is None:
                raise Unreachable(f"{dst} closed the connection")
            if back:
                time.sleep(back / 1000.0)
            if not self._linked(dst, src):
                return
            done(response, None)
        except socket.timeout:
            done(None, Timeout(f"{src} -> {dst} timed out"))
        except (OSError, EOFError) as exc:
            done(None, Unreachable(f"{dst}: {exc}"))
        except TransportError as exc:
            done(None, exc)

    def close(self) -> None:
        for server in self._servers.values():
            server.shutdown()
            server.server_close()
        self._servers.clear()
        self._pool.shutdown(wait=False, cancel_futures=True)
        if isinstance(self.scheduler, RealScheduler):
            self.scheduler.stop()

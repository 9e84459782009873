"""Scenario runner and load generator.

A :class:`Scenario` fixes the topology, link delays, partition schedule,
workload and RNG seed. :func:`run_scenario` boots the chosen backend on a
transport, drives an open-loop client against the first replica, and
records one latency row per request plus one keygroup-count row per
replica every ``sample_every_ms``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import random
import threading
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

from .api import ApiClient, ApiError, CrdtService
from .codec import canonical_json
from .gossip import GossipConfig, GossipNode
from .quorum import QuorumService, QuorumStore, keygroup_count
from .registry import Registry
from .simnet import (
    DelayMatrix,
    PartitionEvent,
    RealScheduler,
    ScheduleError,
    SimNetwork,
    SimScheduler,
    TcpTransport,
    validate_schedule,
)

LATENCY_HEADER = ["t_ms", "op", "latency_ms", "status"]
CONVERGENCE_HEADER = ["t_ms", "replica_id", "keygroup_count"]
BACKENDS = ("crdt", "quorum")
TIME_MODES = ("virtual", "real")
WORKLOAD_OPS = ("CreateKeygroup", "CheckPermission", "GetReplicas", "KeygroupCount")
CLIENT_ADDRESS = "loadgen:9999"
CREATOR = "loadgen"


class ScenarioInvalid(ValueError):
    exit_code = 2


class BackendBootFailure(RuntimeError):
    exit_code = 3


class MalformedCsv(ValueError):
    pass


@dataclass
class Workload:
    mix: dict = field(default_factory=lambda: {"CreateKeygroup": 1})
    interarrival_ms: int = 250
    duration_ms: int = 120_000


@dataclass
class Scenario:
    name: str
    backend: str = "crdt"
    nodes: list = field(default_factory=lambda: ["m1", "m2", "m3"])
    delays: DelayMatrix = field(default_factory=DelayMatrix)
    partition_schedule: list = field(default_factory=list)
    workload: Workload = field(default_factory=Workload)
    gossip: GossipConfig = field(default_factory=GossipConfig)
    seed: Optional[int] = 1
    time_mode: str = "virtual"
    sample_every_ms: int = 500
    recovery_backoff_ms: int = 5000

    def validate(self) -> None:
        if self.backend not in BACKENDS:
            raise ScenarioInvalid(f"backend must be one of {BACKENDS}")
        if self.time_mode not in TIME_MODES:
            raise ScenarioInvalid(f"time mode must be one of {TIME_MODES}")
        if not self.nodes or len(set(self.nodes)) != len(self.nodes):
            raise ScenarioInvalid("nodes must be a non-empty list of distinct names")
        if self.backend == "quorum" and len(self.nodes) < 3:
            raise ScenarioInvalid("the quorum backend needs at least three nodes")
        if self.time_mode == "virtual" and not isinstance(self.seed, int):
            raise ScenarioInvalid("virtual-time scenarios need an integer seed")
        wl = self.workload
        if wl.interarrival_ms <= 0 or wl.duration_ms <= 0:
            raise ScenarioInvalid("interarrival and duration must be positive")
        if not wl.mix or any(op not in WORKLOAD_OPS or w < 0 for op, w in wl.mix.items()) or sum(wl.mix.values()) <= 0:
            raise ScenarioInvalid(f"workload mix must weight ops from {WORKLOAD_OPS}")
        if self.sample_every_ms <= 0:
            raise ScenarioInvalid("sample_every_ms must be positive")
        if self.recovery_backoff_ms < 0:
            raise ScenarioInvalid("recovery_backoff_ms must be non-negative")
        for (a, b) in self.delays.links:
            if a not in self.nodes or b not in self.nodes:
                raise ScenarioInvalid(f"delay link {a}->{b} names an unknown node")
        try:
            validate_schedule(self.partition_schedule, self.nodes)
        except ScheduleError as exc:
            raise ScenarioInvalid(str(exc)) from exc
        if self.partition_schedule and self.partition_schedule[-1].at_ms > wl.duration_ms:
            raise ScenarioInvalid("workload duration must cover the partition schedule")

    # -- scenario files -----------------------------------------------

    def to_record(self) -> dict:
        return {
            "backend": self.backend,
            "delays": {
                "default_ms": self.delays.default_ms,
                "links": [[a, b, d] for (a, b), d in sorted(self.delays.links.items())],
            },
            "gossip": asdict(self.gossip),
            "name": self.name,
            "nodes": list(self.nodes),
            "partition_schedule": [
                {"action": "Heal", "at_ms": ev.at_ms}
                if ev.is_heal
                else {"action": "Partition", "at_ms": ev.at_ms, "groups": [sorted(g) for g in ev.groups]}
                for ev in self.partition_schedule
            ],
            "recovery_backoff_ms": self.recovery_backoff_ms,
            "sample_every_ms": self.sample_every_ms,
            "seed": self.seed,
            "time_mode": self.time_mode,
            "workload": asdict(self.workload),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Scenario":
        try:
            delays = rec.get("delays", {})
            events = []
            for ev in rec.get("partition_schedule", []):
                if ev["action"] == "Heal":
                    events.append(PartitionEvent(int(ev["at_ms"])))
                elif ev["action"] == "Partition":
                    events.append(PartitionEvent(int(ev["at_ms"]), tuple(frozenset(g) for g in ev["groups"])))
                else:
                    raise ScenarioInvalid(f"unknown partition action {ev['action']!r}")
            sc = cls(
                name=rec["name"],
                backend=rec.get("backend", "crdt"),
                nodes=list(rec.get("nodes", ["m1", "m2", "m3"])),
                delays=DelayMatrix(delays.get("default_ms", 0), {(a, b): d for a, b, d in delays.get("links", [])}),
                partition_schedule=events,
                workload=Workload(**rec.get("workload", {})),
                gossip=GossipConfig(**rec.get("gossip", {})),
                seed=rec.get("seed", 1),
                time_mode=rec.get("time_mode", "virtual"),
                sample_every_ms=rec.get("sample_every_ms", 500),
                recovery_backoff_ms=rec.get("recovery_backoff_ms", 5000),
            )
        except ScenarioInvalid:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioInvalid(f"malformed scenario record: {exc}") from exc
        sc.validate()
        return sc

    def dumps(self) -> bytes:
        return canonical_json(self.to_record())


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, "rb") as fh:
            rec = json.loads(fh.read().decode("utf-8"))
    except (OSError, ValueError) as exc:
        raise ScenarioInvalid(f"cannot read scenario {path}: {exc}") from exc
    return Scenario.from_record(rec)


def builtin_scenarios() -> dict:
    nodes = ["m1", "m2", "m3"]
    return {
        "baseline": Scenario("baseline", nodes=nodes, delays=DelayMatrix.uniform(nodes, 0)),
        "delay10": Scenario("delay10", nodes=nodes, delays=DelayMatrix.uniform(nodes, 10)),
        "partition": Scenario(
            "partition",
            nodes=nodes,
            delays=DelayMatrix.uniform(nodes, 0),
            partition_schedule=[
                PartitionEvent(45_000, (frozenset({"m1"}), frozenset({"m2", "m3"}))),
                PartitionEvent(80_000),
            ],
        ),
    }


def resolve_scenario(name_or_path: str) -> Scenario:
    builtin = builtin_scenarios()
    if name_or_path in builtin:
        return builtin[name_or_path]
    return load_scenario(name_or_path)


# -- samples and CSV ----------------------------------------------------------

@dataclass(frozen=True)
class LatencySample:
    t_ms: float
    op: str
    latency_ms: float
    status: str  # "Ok" or "Error(<code>)"

    @property
    def ok(self) -> bool:
        return self.status == "Ok"


@dataclass(frozen=True)
class ConvergenceSample:
    t_ms: float
    replica_id: str
    keygroup_count: int


def _num(x) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else f"{x:.3f}"


def latency_csv(samples: list, paper_zeros: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LATENCY_HEADER)
    for s in samples:
        latency = 0 if (paper_zeros and not s.ok) else s.latency_ms
        w.writerow([_num(s.t_ms), s.op, _num(latency), s.status])
    return buf.getvalue()


def convergence_csv(samples: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CONVERGENCE_HEADER)
    for s in samples:
        w.writerow([_num(s.t_ms), s.replica_id, s.keygroup_count])
    return buf.getvalue()


def read_latency_csv(text: str) -> list:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return []
    if rows[0] != LATENCY_HEADER:
        raise MalformedCsv(f"expected header {','.join(LATENCY_HEADER)}")
    out = []
    for n, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise MalformedCsv(f"line {n}: expected 4 columns")
        try:
            t, latency = float(row[0]), float(row[2])
        except ValueError as exc:
            raise MalformedCsv(f"line {n}: {exc}") from exc
        if not (row[3] == "Ok" or (row[3].startswith("Error(") and row[3].endswith(")"))):
            raise MalformedCsv(f"line {n}: bad status {row[3]!r}")
        out.append(LatencySample(t, row[1], latency, row[3]))
    return out


def read_convergence_csv(text: str) -> list:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return []
    if rows[0] != CONVERGENCE_HEADER:
        raise MalformedCsv(f"expected header {','.join(CONVERGENCE_HEADER)}")
    try:
        return [ConvergenceSample(float(r[0]), r[1], int(r[2])) for r in rows[1:] if r]
    except (ValueError, IndexError) as exc:
        raise MalformedCsv(str(exc)) from exc


def nearest_rank(sorted_values: list, pct: float) -> Optional[float]:
    if not sorted_values:
        return None
    rank = max(1, math.ceil(pct / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


def summarize(source, bucket_ms: int = 10_000) -> dict:
    """Summary of a latency CSV (path or CSV text).

    Percentiles are nearest-rank over successful requests; failures are
    counted separately.
    """
    text = source
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source, newline="") as fh:
            text = fh.read()
    samples = read_latency_csv(text)

    def stats(group: list) -> dict:
        ok = sorted(s.latency_ms for s in group if s.ok)
        return {
            "count": len(group),
            "errors": sum(1 for s in group if not s.ok),
            "p50": nearest_rank(ok, 50),
            "p95": nearest_rank(ok, 95),
            "p99": nearest_rank(ok, 99),
        }

    out = stats(samples)
    buckets: dict = {}
    for s in samples:
        buckets.setdefault(int(s.t_ms // bucket_ms) * bucket_ms, []).append(s)
    out["buckets"] = [{"start_ms": start, **stats(group)} for start, group in sorted(buckets.items())]
    return out


# -- analysis helpers ---------------------------------------------------------

def counts_by_replica(samples: list) -> dict:
    out: dict = {}
    for s in samples:
        out.setdefault(s.replica_id, []).append((s.t_ms, s.keygroup_count))
    return out


def creation_times(latency: list, op: str = "CreateKeygroup") -> list:
    """Completion time of every successful create, in issue order."""
    return sorted(s.t_ms + s.latency_ms for s in latency if s.op == op and s.ok)


def replica_lag_ms(latency: list, convergence: list, after_ms: float = 0) -> dict:
    """Worst staleness per replica: age of the oldest keygroup it is missing.

    Under a create-only workload with full-state gossip each replica always
    holds a prefix of the created keygroups, so a count of ``c`` means the
    ``c+1``-th created keygroup is the oldest one missing.
    """
    created = creation_times(latency)
    worst: dict = {}
    for s in convergence:
        if s.t_ms < after_ms:
            continue
        missing = [t for t in created[s.keygroup_count:] if t <= s.t_ms]
        lag = s.t_ms - missing[0] if missing else 0
        worst[s.replica_id] = max(worst.get(s.replica_id, 0), lag)
    return worst


# -- runner -------------------------------------------------------------------

@dataclass
class RunResult:
    scenario: Scenario
    latency: list
    convergence: list
    latency_csv: str
    convergence_csv: str
    paths: dict = field(default_factory=dict)
    replicas: dict = field(default_factory=dict)


class _Sink:
    def __init__(self):
        self._lock = threading.Lock()
        self.latency: list = []
        self.convergence: list = []

    def add_latency(self, seq: int, sample: LatencySample) -> None:
        with self._lock:
            self.latency.append((seq, sample))

    def add_convergence(self, sample: ConvergenceSample) -> None:
        with self._lock:
            self.convergence.append(sample)


def _status(error) -> str:
    if error is None:
        return "Ok"
    if isinstance(error, ApiError):
        return f"Error({error.code})"
    return f"Error({type(error).__name__})"


def _build(scenario: Scenario, transport, scheduler, rng: random.Random) -> tuple:
    """Create replicas on ``transport``; returns (addresses, replicas, count_fn)."""
    real = isinstance(transport, TcpTransport)
    addresses: dict = {}
    replicas: dict = {}
    if scenario.backend == "crdt":
        for name in scenario.nodes:
            reg = Registry(name, clock_fn=lambda: int(scheduler.now()))
            svc = CrdtService(reg)
            addr = transport.register("127.0.0.1:0" if real else f"{name}:7000", svc.handle, node=name)
            addr = addr or f"{name}:7000"
            svc.gossip = GossipNode(name, addr, reg, transport, scheduler, scenario.gossip, rng)
            addresses[name], replicas[name] = addr, svc.gossip
        return addresses, replicas, lambda name: replicas[name].registry.keygroup_count()
    services = {}
    for name in scenario.nodes:
        svc = QuorumService(None)
        addr = transport.register("127.0.0.1:0" if real else f"{name}:7000", svc.handle, node=name)
        addresses[name], services[name] = addr or f"{name}:7000", svc
    members = [addresses[n] for n in scenario.nodes]
    for name, svc in services.items():
        svc.store = QuorumStore(
            addresses[name], members, transport, scheduler,
            timeout_ms=scenario.gossip.rpc_timeout_ms, recovery_backoff_ms=scenario.recovery_backoff_ms,
        )
        replicas[name] = svc.store
    transport.connectivity.heal_listeners.append(lambda: [s.recover() for s in replicas.values()])
    return addresses, replicas, lambda name: keygroup_count(replicas[name])


def run_scenario(scenario: Scenario, out_dir: Optional[str] = None, paper_zeros: bool = False) -> RunResult:
    """Run one experiment; writes ``latency.csv`` and ``convergence.csv`` when ``out_dir`` is given."""
    scenario.validate()
    rng = random.Random(scenario.seed)
    timeout = scenario.gossip.rpc_timeout_ms
    if scenario.time_mode == "virtual":
        scheduler = SimScheduler()
        transport = SimNetwork(scheduler, scenario.delays, timeout_ms=timeout)
    else:
        scheduler = RealScheduler()
        transport = TcpTransport(scheduler, scenario.delays, timeout_ms=timeout)
    try:
        return _run(scenario, transport, scheduler, rng, out_dir, paper_zeros)
    finally:
        if isinstance(transport, TcpTransport):
            transport.close()


def _run(scenario, transport, scheduler, rng, out_dir, paper_zeros) -> RunResult:
    wl = scenario.workload
    sink = _Sink()
    addresses, replicas, count = _build(scenario, transport, scheduler, rng)
    entry = addresses[scenario.nodes[0]]
    boot_errors: list = []

    def boot():
        if scenario.backend != "crdt":
            return
        prev = None
        for name in scenario.nodes:
            node = replicas[name]
            node.bootstrap(prev, on_done=lambda err, n=name: err and boot_errors.append((n, err)))
            prev = addresses[name]
        for name in scenario.nodes:
            replicas[name].start()

    client_addr = CLIENT_ADDRESS
    if isinstance(transport, TcpTransport):
        client_addr = "127.0.0.1:1"
    # longer than the replicas' own RPC timeout, so a NoQuorum answer arrives before the client gives up
    client = ApiClient(transport, client_addr, timeout_ms=2 * scenario.gossip.rpc_timeout_ms)
    created: list = []
    ops = sorted(wl.mix)
    weights = [wl.mix[o] for o in ops]

    def issue(k: int) -> None:
        op = ops[0] if len(ops) == 1 else rng.choices(ops, weights)[0]
        if op == "CreateKeygroup":
            body = {"config": {"mutable": True}, "creator": CREATOR, "keygroup_id": f"kg-{k}"}
        elif op == "KeygroupCount" or not created:
            op, body = "KeygroupCount", {}
        else:
            kg = rng.choice(created)
            body = {"keygroup_id": kg} if op == "GetReplicas" else {"action": "Read", "keygroup_id": kg, "user_id": CREATOR}
        t0 = scheduler.now()

        def done(result, error):
            if error is None and op == "CreateKeygroup":
                created.append(body["keygroup_id"])
            sink.add_latency(k, LatencySample(t0, op, scheduler.now() - t0, _status(error)))

        client.call(entry, op, body, done)

    def sample() -> None:
        t = scheduler.now()
        for name in scenario.nodes:
            sink.add_convergence(ConvergenceSample(t, name, count(name)))

    scheduler.call_at(0, lambda: transport.apply_schedule(scenario.partition_schedule))
    scheduler.call_at(0, boot)
    n_requests = -(-wl.duration_ms // wl.interarrival_ms)
    for k in range(n_requests):
        scheduler.call_at(k * wl.interarrival_ms, lambda k=k: issue(k))
    for t in range(0, wl.duration_ms + 1, scenario.sample_every_ms):
        scheduler.call_at(t, sample)
    # let the last requests finish or time out
    scheduler.run_until(wl.duration_ms + 2 * scenario.gossip.rpc_timeout_ms)
    for node in replicas.values():
        if hasattr(node, "stop"):
            node.stop()
    if boot_errors:
        name, err = boot_errors[0]
        raise BackendBootFailure(f"replica {name} failed to join: {err}")

    latency = [s for _, s in sorted(sink.latency, key=lambda p: (p[1].t_ms, p[0]))]
    convergence = sorted(sink.convergence, key=lambda s: (s.t_ms, scenario.nodes.index(s.replica_id)))
    result = RunResult(
        scenario, latency, convergence, latency_csv(latency, paper_zeros), convergence_csv(convergence),
        replicas=replicas,
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for fname, text in (("latency.csv", result.latency_csv), ("convergence.csv", result.convergence_csv)):
            path = os.path.join(out_dir, fname)
            with open(path, "w", newline="") as fh:
                fh.write(text)
            result.paths[fname] = path
    return result


def with_backend(scenario: Scenario, backend: str) -> Scenario:
    return replace(scenario, backend=backend)

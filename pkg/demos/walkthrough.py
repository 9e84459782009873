"""A short tour: two registries diverge, merge, and agree; then the
partition scenario is run against both backends and compared.

    python3 demos/walkthrough.py

Everything runs on simulated time, so the whole script takes a few seconds.
"""

from fogconf.bench import builtin_scenarios, run_scenario, summarize, with_backend
from fogconf.registry import Registry

# -- two replicas edit independently -----------------------------------------

clock = {"t": 0}
a = Registry("A", clock_fn=lambda: clock["t"])
b = Registry("B", clock_fn=lambda: clock["t"])

a.register_node("edge-1", "10.0.0.1:7000")
a.create_keygroup("sensors", {"mutable": True}, "alice")
a.join_keygroup("sensors", "edge-1")

clock["t"] = 10
b.create_keygroup("cameras", {}, "bob")
clock["t"] = 20
b.merge_state(a.snapshot())     # b learns about sensors
b.delete_keygroup("sensors")    # ...and deletes it

print("before merge")
print("  A keygroups:", a.keygroups())
print("  B keygroups:", b.keygroups())

a.merge_state(b.snapshot())
print("after A merges B")
print("  A keygroups:", a.keygroups())
print("  same state hash:", a.state_hash() == b.state_hash())
print("  alice may still read sensors:", a.check_permission("alice", "sensors", "Read"))

# -- the partition scenario on both backends ----------------------------------

print()
print("partition scenario: m1 cut off from m2/m3 between 45 s and 80 s")
for backend in ("crdt", "quorum"):
    result = run_scenario(with_backend(builtin_scenarios()["partition"], backend))
    s = summarize(result.latency_csv)
    window = [b for b in s["buckets"] if 40_000 <= b["start_ms"] < 90_000]
    print(f"  {backend:6}  requests={s['count']}  errors={s['errors']}  p50={s['p50']} ms  p99={s['p99']} ms (successful requests only)")
    for bucket in window:
        print(f"          {bucket['start_ms'] // 1000:>3}s  errors={bucket['errors']:>2}/{bucket['count']}")

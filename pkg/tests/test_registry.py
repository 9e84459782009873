import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fogconf.registry import (
    Action,
    InvalidArgument,
    KeygroupExists,
    MalformedAddress,
    NoSuchKeygroup,
    NoSuchNode,
    NodeRecord,
    Registry,
    RegistryError,
    RegistryState,
    make_key,
    parse_address,
    split_key,
)


class Clock:
    def __init__(self, t=0):
        self.t = t

    def __call__(self):
        return self.t


def replica(name, t=0):
    clock = Clock(t)
    reg = Registry(name, clock_fn=clock)
    reg.test_clock = clock
    return reg


def converge(regs):
    changed = True
    while changed:
        changed = False
        for a, b in itertools.permutations(regs, 2):
            before = a.state_hash()
            a.merge_state(b.snapshot())
            changed |= a.state_hash() != before


# -- nodes --------------------------------------------------------------------

def test_register_node_and_lookup():
    r = replica("A")
    r.register_node("nodeB", "10.0.0.2:9001")
    assert r.get_node("nodeB") == NodeRecord("nodeB", "10.0.0.2:9001")


def test_reregistration_overwrites_address():
    r = replica("A")
    r.register_node("nodeB", "10.0.0.2:9001")
    r.test_clock.t = 5
    r.register_node("nodeB", "10.0.0.9:9001")
    assert r.get_node("nodeB").address == "10.0.0.9:9001"


def test_restart_with_stale_snapshot_is_repaired_by_merge(tmp_path):
    a = replica("A")
    a.register_node("nodeB", "10.0.0.2:9001")
    path = tmp_path / "a.snap"
    a.save_snapshot(path)
    b = replica("B", t=10)
    b.merge_state(a.snapshot())
    b.register_node("nodeB", "10.0.0.3:9001")
    restarted = Registry.load_snapshot(path, clock_fn=Clock(20))
    assert restarted.snapshot().same_data(a.snapshot())
    restarted.merge_state(b.snapshot())
    assert restarted.get_node("nodeB").address == "10.0.0.3:9001"


@pytest.mark.parametrize("bad", ["not-an-address", "host:", ":80", "host:99999", "a b:1", "host:port", "", "x/y:1"])
def test_malformed_address(bad):
    with pytest.raises(MalformedAddress):
        replica("A").register_node("nodeB", bad)


@pytest.mark.parametrize("good, expected", [("10.0.0.2:9001", ("10.0.0.2", 9001)), ("m1:7000", ("m1", 7000)),
                                            ("[::1]:80", ("::1", 80))])
def test_parse_address(good, expected):
    assert parse_address(good) == expected


# -- keygroups ----------------------------------------------------------------

def test_create_keygroup_grants_creator_everything():
    r = replica("A")
    r.create_keygroup("kg1", {"mutable": True}, "alice")
    assert r.has_keygroup("kg1")
    assert r.get_keygroup("kg1").config == {"mutable": True}
    assert all(r.check_permission("alice", "kg1", a) for a in Action)


def test_create_twice_locally_fails():
    r = replica("A")
    r.create_keygroup("kg1", {}, "alice")
    with pytest.raises(KeygroupExists):
        r.create_keygroup("kg1", {}, "bob")


def test_concurrent_create_keeps_higher_stamp():
    a, b = replica("A", t=5), replica("B", t=9)
    a.create_keygroup("kg1", {"mutable": True}, "alice")
    b.create_keygroup("kg1", {"mutable": False}, "bob")
    converge([a, b])
    # B's stamp (9, 0, "B") beats A's (5, 0, "A")
    assert a.get_keygroup("kg1") == b.get_keygroup("kg1")
    assert a.get_keygroup("kg1").config == {"mutable": False}
    assert a.keygroup_count() == 1


def test_delete_keygroup_cascades():
    r = replica("A")
    r.register_node("nodeB", "10.0.0.2:9001")
    r.create_keygroup("kg1", {}, "alice")
    r.join_keygroup("kg1", "nodeB")
    r.set_permission("bob", "kg1", ["Read"])
    r.delete_keygroup("kg1")
    assert not r.has_keygroup("kg1")
    with pytest.raises(NoSuchKeygroup):
        r.get_replicas("kg1")
    assert not r.check_permission("bob", "kg1", "Read")
    assert not r.check_permission("alice", "kg1", "Configure")
    live = r.state.keygroups.members()
    assert all(split_key(k)[0] != "kg1" for k in live)


def test_delete_then_newer_add_elsewhere_revives():
    a, b = replica("A", t=1), replica("B", t=1)
    a.create_keygroup("kg1", {}, "alice")
    converge([a, b])
    a.test_clock.t = 2
    a.delete_keygroup("kg1")
    b.test_clock.t = 3
    b.delete_keygroup("kg1")
    b.create_keygroup("kg1", {"v": 2}, "bob")
    converge([a, b])
    assert a.has_keygroup("kg1") and b.has_keygroup("kg1")
    assert a.get_keygroup("kg1").config == {"v": 2}


def test_delete_unknown():
    with pytest.raises(NoSuchKeygroup):
        replica("A").delete_keygroup("nope")


def test_keygroup_count():
    r = replica("A")
    assert r.keygroup_count() == 0
    for i in range(5):
        r.create_keygroup(f"kg{i}", {}, "alice")
    r.delete_keygroup("kg1")
    r.delete_keygroup("kg3")
    assert r.keygroup_count() == 3


def test_keygroup_ids_with_awkward_characters():
    r = replica("A")
    for kg in ['a,b', '["x"]', "ü", 'q"uote']:
        r.create_keygroup(kg, {}, "alice")
    assert r.keygroup_count() == 4
    assert sorted(r.keygroups()) == sorted(['a,b', '["x"]', "ü", 'q"uote'])


# -- membership ---------------------------------------------------------------

def test_join_and_get_replicas():
    r = replica("A")
    r.register_node("nodeC", "10.0.0.3:9001")
    r.register_node("nodeB", "10.0.0.2:9001")
    r.create_keygroup("kg1", {}, "alice")
    assert r.get_replicas("kg1") == []
    r.join_keygroup("kg1", "nodeC")
    r.join_keygroup("kg1", "nodeB")
    assert [n.node_id for n in r.get_replicas("kg1")] == ["nodeB", "nodeC"]


def test_join_preconditions():
    r = replica("A")
    with pytest.raises(NoSuchKeygroup):
        r.join_keygroup("kg1", "nodeB")
    r.create_keygroup("kg1", {}, "alice")
    with pytest.raises(NoSuchNode):
        r.join_keygroup("kg1", "nodeB")


def test_removed_node_drops_out_of_replicas():
    r = replica("A")
    r.register_node("nodeB", "10.0.0.2:9001")
    r.register_node("nodeC", "10.0.0.3:9001")
    r.create_keygroup("kg1", {}, "alice")
    r.join_keygroup("kg1", "nodeB")
    r.join_keygroup("kg1", "nodeC")
    r.remove_node("nodeB")
    assert [n.node_id for n in r.get_replicas("kg1")] == ["nodeC"]


def test_concurrent_join_and_leave_resolved_by_stamp():
    a, b = replica("A", t=1), replica("B", t=1)
    a.register_node("nodeB", "10.0.0.2:9001")
    a.create_keygroup("kg1", {}, "alice")
    converge([a, b])
    a.test_clock.t, b.test_clock.t = 10, 12
    a.join_keygroup("kg1", "nodeB")
    b.leave_keygroup("kg1", "nodeB")
    converge([a, b])
    # leave at (12, *, B) is newer than join at (10, *, A)
    assert a.get_replicas("kg1") == b.get_replicas("kg1") == []


def test_memberships_of_different_keygroups_are_independent():
    a, b = replica("A", t=1), replica("B", t=1)
    a.register_node("n", "10.0.0.2:9001")
    a.create_keygroup("kg1", {}, "alice")
    a.create_keygroup("kg2", {}, "alice")
    converge([a, b])
    a.join_keygroup("kg1", "n")
    b.test_clock.t = 50
    b.join_keygroup("kg2", "n")
    b.leave_keygroup("kg2", "n")
    converge([a, b])
    assert [r.node_id for r in a.get_replicas("kg1")] == ["n"]
    assert a.get_replicas("kg2") == []


def test_concurrent_join_newer_than_delete_is_cascaded_on_merge():
    a, b = replica("A", t=1), replica("B", t=1)
    a.register_node("n", "10.0.0.2:9001")
    a.create_keygroup("kg1", {}, "alice")
    converge([a, b])
    a.test_clock.t = 5
    a.delete_keygroup("kg1")
    b.test_clock.t = 9  # B has not seen the delete and its clock runs ahead
    b.join_keygroup("kg1", "n")
    b.set_permission("bob", "kg1", ["Read"])
    converge([a, b])
    for r in (a, b):
        assert not r.has_keygroup("kg1")
        assert not r.check_permission("bob", "kg1", "Read")
        assert all(split_key(k)[0] != "kg1" for k in r.state.keygroups.members())
    assert a.state_hash() == b.state_hash()


# -- permissions --------------------------------------------------------------

def test_permission_applies_locally_at_once():
    r = replica("A")
    r.create_keygroup("kg1", {}, "alice")
    r.set_permission("bob", "kg1", ["Read"])
    assert r.check_permission("bob", "kg1", "Read")
    r.revoke_permission("bob", "kg1")
    assert not r.check_permission("bob", "kg1", "Read")


def test_check_permission_cases():
    r = replica("A")
    r.create_keygroup("kg1", {}, "alice")
    assert not r.check_permission("nobody", "kg1", "Read")
    r.set_permission("bob", "kg1", ["Read"])
    assert not r.check_permission("bob", "kg1", "Update")
    r.set_permission("carol", "kg1", ["Read", "Update"])
    assert r.check_permission("carol", "kg1", "Read")
    assert not r.check_permission("carol", "kg1", "Fly")


def test_partitioned_replica_sees_stale_permission_until_merge():
    a, b = replica("A", t=1), replica("B", t=1)
    a.create_keygroup("kg1", {}, "alice")
    converge([a, b])
    a.set_permission("bob", "kg1", ["Read"])
    assert not b.check_permission("bob", "kg1", "Read")
    converge([a, b])
    assert b.check_permission("bob", "kg1", "Read")


def test_permission_preconditions():
    r = replica("A")
    with pytest.raises(NoSuchKeygroup):
        r.set_permission("bob", "kg1", ["Read"])
    r.create_keygroup("kg1", {}, "alice")
    with pytest.raises(InvalidArgument):
        r.set_permission("bob", "kg1", [])
    with pytest.raises(InvalidArgument):
        r.set_permission("bob", "kg1", ["Fly"])


# -- organization -------------------------------------------------------------

def test_organization_requires_known_node():
    r = replica("A")
    with pytest.raises(NoSuchNode):
        r.set_organization("n", "zone-a")
    r.register_node("n", "10.0.0.2:9001")
    r.set_organization("n", "zone-a", {"rack": 3})
    org = r.get_organization("n")
    assert (org.zone, org.metadata) == ("zone-a", {"rack": 3})


# -- merge --------------------------------------------------------------------

def test_merge_with_self_is_noop():
    r = replica("A")
    r.create_keygroup("kg1", {}, "alice")
    before = r.state_hash()
    r.merge_state(r.snapshot())
    assert r.state_hash() == before


def test_merge_disjoint_keygroups_is_union():
    a, b = replica("A"), replica("B")
    a.create_keygroup("kg1", {}, "alice")
    b.create_keygroup("kg2", {}, "bob")
    a.merge_state(b.snapshot())
    assert a.keygroups() == ["kg1", "kg2"]


def test_merge_advances_clock_past_remote_stamps():
    a, b = replica("A", t=1000), replica("B", t=5)
    a.create_keygroup("kg1", {"from": "A"}, "alice")
    b.merge_state(a.snapshot())
    b.delete_keygroup("kg1")  # B's wall clock is far behind A's
    a.merge_state(b.snapshot())
    assert not a.has_keygroup("kg1")


def test_state_record_round_trip():
    r = replica("A")
    r.register_node("n", "10.0.0.2:9001")
    r.create_keygroup("kg1", {}, "alice")
    rec = r.snapshot().to_record()
    assert RegistryState.from_record(rec).same_data(r.snapshot())
    with pytest.raises(ValueError):
        RegistryState.from_record({"nodes": rec["nodes"]})


def test_keys_are_unambiguous():
    assert split_key(make_key("a", "b")) == ("a", "b")
    assert split_key(make_key('a","b')) == ('a","b',)


# -- registry-level strong eventual consistency ---------------------------------

USERS = ["alice", "bob"]
KGS = ["kg1", "kg2", "kg3"]
NODES = ["n1", "n2"]

op_strategy = st.one_of(
    st.tuples(st.just("register"), st.sampled_from(NODES), st.sampled_from(["10.0.0.1:1", "10.0.0.2:2"])),
    st.tuples(st.just("remove_node"), st.sampled_from(NODES)),
    st.tuples(st.just("create"), st.sampled_from(KGS), st.sampled_from(USERS)),
    st.tuples(st.just("delete"), st.sampled_from(KGS)),
    st.tuples(st.just("join"), st.sampled_from(KGS), st.sampled_from(NODES)),
    st.tuples(st.just("leave"), st.sampled_from(KGS), st.sampled_from(NODES)),
    st.tuples(st.just("grant"), st.sampled_from(USERS), st.sampled_from(KGS),
              st.lists(st.sampled_from(["Read", "Update", "Delete"]), min_size=1, max_size=3)),
    st.tuples(st.just("revoke"), st.sampled_from(USERS), st.sampled_from(KGS)),
    st.tuples(st.just("merge"), st.integers(0, 4), st.integers(0, 4)),
)


def apply(reg, op):
    kind, *args = op
    fn = {
        "register": reg.register_node, "remove_node": reg.remove_node, "create": lambda kg, u: reg.create_keygroup(kg, {}, u),
        "delete": reg.delete_keygroup, "join": reg.join_keygroup, "leave": reg.leave_keygroup,
        "grant": reg.set_permission, "revoke": reg.revoke_permission,
    }[kind]
    try:
        fn(*args)
    except RegistryError:
        pass


def observable(reg):
    out = {"count": reg.keygroup_count(), "kgs": reg.keygroups(), "nodes": reg.nodes(), "hash": reg.state_hash()}
    for kg in KGS:
        try:
            out[("replicas", kg)] = reg.get_replicas(kg)
        except NoSuchKeygroup:
            out[("replicas", kg)] = None
        for u in USERS:
            out[("perm", u, kg)] = [a.value for a in Action if reg.check_permission(u, kg, a)]
    return out


@settings(max_examples=150, deadline=None)
@given(st.integers(3, 5), st.lists(st.tuples(st.integers(0, 4), st.integers(0, 3), op_strategy), max_size=40))
def test_registry_strong_eventual_consistency(n, workload):
    regs = [replica(f"R{i}") for i in range(n)]
    for who, dt, op in workload:
        for r in regs:
            r.test_clock.t += dt if r is regs[who % n] else 0
        if op[0] == "merge":
            regs[op[1] % n].merge_state(regs[op[2] % n].snapshot())
        else:
            apply(regs[who % n], op)
    converge(regs)
    views = [observable(r) for r in regs]
    assert all(v == views[0] for v in views)
    # cascade invariant: nothing live hangs off a removed keygroup
    r = regs[0]
    for key in r.state.keygroups.members():
        parts = split_key(key)
        if len(parts) == 2:
            assert r.has_keygroup(parts[0])
    for key in r.state.permissions.members():
        assert r.has_keygroup(split_key(key)[1])


def test_three_replicas_random_workload_equal_counts():
    rng = random.Random(7)
    regs = [replica(f"R{i}") for i in range(3)]
    for i in range(20):
        r = rng.choice(regs)
        r.test_clock.t += rng.randrange(3)
        if rng.random() < 0.7:
            try:
                r.create_keygroup(f"kg{rng.randrange(8)}", {}, "alice")
            except KeygroupExists:
                pass
        else:
            kgs = r.keygroups()
            if kgs:
                r.delete_keygroup(rng.choice(kgs))
    converge(regs)
    counts = {r.keygroup_count() for r in regs}
    assert len(counts) == 1

"""Embedded stores: row ops, flags, WAL discipline, bags, leases, tracking."""

import threading

import pytest

from transplant.clock import VirtualClock
from transplant.errors import InjectedCrash, LeaseDenied, NotFound, WalSealed
from transplant.model import NodeId
from transplant.store import (
    AttributeChangeRow,
    BagEntry,
    FaultPlan,
    MetadataStore,
    ReferenceRow,
)
from transplant.synthgen import make_bundle


@pytest.fixture
def store():
    return make_bundle("miniDiaspora").store


def nid(type_name, key, app="miniDiaspora"):
    return NodeId(app, type_name, (key,))


def person_row(key):
    return {"id": key, "username": f"u{key}", "bio": "b", "created_at": 1}


# -------------------------------------------------------------------- rows


def test_insert_then_read_round_trips(store):
    store.insert("people", 1, person_row(1))
    assert store.read("people", 1)["username"] == "u1"


def test_delete_returns_pre_image(store):
    store.insert("people", 1, person_row(1))
    before = dict(store.read("people", 1))
    row, flags = store.delete("people", 1)
    assert row == before
    assert flags["displayable"] is True
    with pytest.raises(NotFound):
        store.read("people", 1)


def test_migration_flag_hides_row_from_the_application(store):
    store.insert("people", 1, person_row(1))
    store.insert("people", 2, person_row(2))
    store.set_flag("people", 2, "migration_flag", True)
    assert store.app_visible_keys("people") == [1]
    assert store.keys("people") == [1, 2]
    assert not store.is_app_visible("people", 2)


def test_update_maintains_indexes(store):
    store.insert("posts", 1, {"id": 1, "author_id": 7, "text": "t", "lang": None,
                              "loc": None, "created_at": 1})
    assert store.lookup("posts", "author_id", 7) == {1}
    store.update("posts", 1, "author_id", 9)
    assert store.lookup("posts", "author_id", 7) == set()
    assert store.lookup("posts", "author_id", 9) == {1}


def test_next_id_is_monotonic_and_collision_free(store):
    store.insert("people", 10, person_row(10))
    first = store.next_id("people")
    assert first > 10
    assert store.next_id("people") > first


def test_snapshot_round_trip(store):
    store.insert("people", 1, person_row(1))
    store.set_flag("people", 1, "migrated", True)
    snap = store.snapshot()
    other = make_bundle("miniDiaspora").store
    other.load_snapshot(snap)
    assert other.snapshot() == snap


# --------------------------------------------------------------------- WAL


def test_wal_append_and_scan_are_ordered():
    meta = MetadataStore()
    for i in range(5):
        meta.wal_append("m1", "migrate_node", {"rows": [], "i": i})
    records = meta.wal_scan("m1")
    assert [r.seq for r in records] == [1, 2, 3, 4, 5]
    assert [r.payload["i"] for r in records] == list(range(5))


def test_wal_sealed_after_commit():
    meta = MetadataStore()
    meta.wal_append("m1", "commit", {})
    with pytest.raises(WalSealed):
        meta.wal_append("m1", "migrate_node", {"rows": []})


def test_crash_lands_between_journal_record_and_store_mutation(store):
    """Write-ahead discipline: the armed fault fires on the next mutation,
    so the record exists while the covered change does not."""
    meta = MetadataStore()
    plan = FaultPlan("wal:2")
    meta.fault_plan = plan
    store.guard = plan
    meta.wal_append("m1", "migrate_node", {"rows": []})
    store.insert("people", 1, person_row(1))
    meta.wal_append("m1", "migrate_node", {"rows": []})  # arms the plan
    with pytest.raises(InjectedCrash):
        store.insert("people", 2, person_row(2))
    assert len(meta.wal_scan("m1")) == 2
    assert not store.exists("people", 2)
    assert store.exists("people", 1)


# --------------------------------------------------------------------- bags


def test_bag_put_is_idempotent_per_origin():
    meta = MetadataStore()
    owner = nid("person", 1)
    entry = BagEntry(owner=owner, origin_app="miniDiaspora", origin=nid("comment", 5),
                     node_type="comment", rows={"comments": {"id": 5}}, reason="dangling_source")
    assert meta.bag_put(entry) is True
    assert meta.bag_put(entry) is False
    assert len(meta.bag_list(owner.ref())) == 1


def test_bag_take_removes_and_returns():
    meta = MetadataStore()
    owner = nid("person", 1)
    entry = BagEntry(owner=owner, origin_app="miniDiaspora", origin=nid("comment", 5),
                     node_type="comment", rows={}, reason="dangling_source")
    meta.bag_put(entry)
    got = meta.bag_take(owner.ref(), nid("comment", 5))
    assert got is entry
    assert meta.bag_list(owner.ref()) == []
    with pytest.raises(NotFound):
        meta.bag_take(owner.ref(), nid("comment", 5))


# ------------------------------------------------------------------ tracking


def test_identity_lookup_reflects_recorded_changes():
    meta = MetadataStore()
    old, new = nid("post", 2), nid("status", 12, app="miniMastodon")
    meta.record_attribute_changes([
        AttributeChangeRow("m1", "miniDiaspora", "miniMastodon", old, new,
                           "statuses.id", 2, 12)
    ])
    assert meta.lookup_new_identity(old) == new
    assert meta.lookup_new_identity(nid("post", 99)) is None
    assert meta.oldest_identity(new) == old
    assert meta.lineage(old) == {old, new}


def test_lookups_are_isolated_by_migration():
    meta = MetadataStore()
    a_old, a_new = nid("post", 1), nid("status", 11, app="miniMastodon")
    b_old, b_new = nid("post", 2), nid("status", 12, app="miniMastodon")
    meta.record_attribute_changes([
        AttributeChangeRow("m1", "miniDiaspora", "miniMastodon", a_old, a_new, "statuses.id", 1, 11),
        AttributeChangeRow("m2", "miniDiaspora", "miniMastodon", b_old, b_new, "statuses.id", 2, 12),
    ])
    assert meta.lookup_new_identity(a_old, migration_id="m1") == a_new
    assert meta.lookup_new_identity(a_old, migration_id="m2") is None


def test_identity_history_branches_without_losing_either_branch():
    meta = MetadataStore()
    old = nid("post", 1)
    m = nid("status", 11, app="miniMastodon")
    t = nid("tweet", 21, app="miniTwitter")
    meta.record_attribute_changes([
        AttributeChangeRow("m1", "miniDiaspora", "miniMastodon", old, m, "statuses.id", 1, 11),
        AttributeChangeRow("m2", "miniDiaspora", "miniTwitter", old, t, "tweets.id", 1, 21),
    ])
    assert meta.lineage(old) == {old, m, t}
    assert meta.oldest_identity(t) == old


def test_reference_rows_query_both_directions():
    meta = MetadataStore()
    row = ReferenceRow("m1", "miniDiaspora", nid("comment", 4), "comments.post_id",
                       nid("post", 3), "posts.id", "dependency")
    meta.record_references([row])
    assert meta.references_from(nid("comment", 4)) == [row]
    assert meta.references_to(nid("post", 3)) == [row]


# ------------------------------------------------------------------- leases


def test_lease_denied_while_active_then_granted_after_seal():
    meta = MetadataStore()
    lease = meta.acquire_lease("user:1", "deletion")
    with pytest.raises(LeaseDenied):
        meta.acquire_lease("user:1", "independent")
    meta.seal_lease(lease, "committed")
    again = meta.acquire_lease("user:1", "independent")
    assert again.migration_id != lease.migration_id


def test_lease_mutual_exclusion_under_contention():
    meta = MetadataStore()
    winners = []
    barrier = threading.Barrier(16)

    def attempt():
        barrier.wait()
        try:
            meta.acquire_lease("user:7", "deletion")
            winners.append(1)
        except LeaseDenied:
            pass

    threads = [threading.Thread(target=attempt) for _ in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(winners) == 1


def test_store_ops_advance_the_virtual_clock():
    clock = VirtualClock()
    bundle = make_bundle("miniDiaspora", clock)
    t0 = clock.now
    bundle.store.insert("people", 1, person_row(1))
    bundle.store.read("people", 1)
    assert clock.now > t0

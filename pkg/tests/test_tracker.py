"""Relationship tracker: re-linking, placeholders, ownership retention."""

import pytest

from transplant.errors import NotTracked
from transplant.model import PLACEHOLDER, NodeId, is_placeholder
from transplant.tracker import Tracker

from conftest import build_walkthrough


def run_walkthrough():
    wt = build_walkthrough()
    world = wt.world
    engine = world.engine(seed=1)
    report = engine.migrate_user(2, "deletion")
    return wt, world, report


def test_relink_rewrites_reference_to_regenerated_parent():
    wt, world, report = run_walkthrough()
    dst = world.dst.store
    replies = {k: dst.read("replies", k) for k in dst.keys("replies")}
    (reply_key, reply), = replies.items()
    status_keys = [k for k in dst.keys("statuses")
                   if dst.read("statuses", k)["body"] == "party post"]
    assert reply["status_id"] == status_keys[0]


def test_unmigrated_referent_leaves_a_placeholder():
    wt, world, report = run_walkthrough()
    # the shared post's owner never joined the destination
    dst = world.dst.store
    status_key = [k for k in dst.keys("statuses")
                  if dst.read("statuses", k)["body"] == "party post"][0]
    value = dst.read("statuses", status_key)["account_id"]
    assert is_placeholder(value)
    info = world.meta.placeholder_get("miniMastodon", "statuses", status_key, "account_id")
    assert info is not None
    assert info.kind == "absent_user"
    assert info.origin == wt.bob


def test_resolution_when_the_owner_joins_later():
    wt, world, report = run_walkthrough()
    dst = world.dst.store
    status_key = [k for k in dst.keys("statuses")
                  if dst.read("statuses", k)["body"] == "party post"][0]
    world.engine(seed=2).migrate_user(1, "deletion")
    value = dst.read("statuses", status_key)["account_id"]
    assert not is_placeholder(value)
    assert dst.exists("accounts", value)
    # the side row is consumed, so resolving again changes nothing
    tracker = Tracker(world.meta)
    bob_dest = [k for k in dst.keys("accounts") if dst.read("accounts", k)["acct"] == "bob"]
    node = world.dst.assemble(NodeId("miniMastodon", "account", (bob_dest[0],)))
    assert tracker.resolve_on_arrival(world.dst, node, "m9") == []
    assert dst.read("statuses", status_key)["account_id"] == value


def test_arrival_matching_no_placeholder_is_a_no_op():
    wt, world, report = run_walkthrough()
    tracker = Tracker(world.meta)
    stray = NodeId("miniMastodon", "account", (999,))
    world.dst.store.insert("accounts", 999, {"id": 999, "acct": "x", "note": None,
                                             "display_label": None, "created_at": 0})
    node = world.dst.assemble(stray)
    assert tracker.resolve_on_arrival(world.dst, node, "m9") == []


def test_ownership_survives_migration_by_someone_else():
    wt, world, report = run_walkthrough()
    dst = world.dst.store
    status_key = [k for k in dst.keys("statuses")
                  if dst.read("statuses", k)["body"] == "party post"][0]
    tracker = Tracker(world.meta)
    owner = tracker.ownership_of_migrated(NodeId("miniMastodon", "status", (status_key,)))
    assert owner == wt.bob


def test_ownership_of_own_migrated_node():
    wt, world, report = run_walkthrough()
    dst = world.dst.store
    reply_key = dst.keys("replies")[0]
    tracker = Tracker(world.meta)
    assert tracker.ownership_of_migrated(NodeId("miniMastodon", "reply", (reply_key,))) == wt.alice


def test_native_rows_are_not_tracked():
    wt, world, report = run_walkthrough()
    world.dst.store.insert("statuses", 7777, {"id": 7777, "account_id": 1, "body": "native",
                                              "visibility": "public", "spoiler_text": None,
                                              "created_at": 0})
    tracker = Tracker(world.meta)
    with pytest.raises(NotTracked):
        tracker.ownership_of_migrated(NodeId("miniMastodon", "status", (7777,)))


def test_normalize_maps_values_back_to_first_identities():
    wt, world, report = run_walkthrough()
    dst = world.dst.store
    tracker = Tracker(world.meta)
    reply_key = dst.keys("replies")[0]
    normalized = tracker.normalize_value(
        world.dst, "replies", "status_id", dst.read("replies", reply_key)["status_id"], reply_key
    )
    assert normalized == wt.post_key
    # a placeholder normalizes to the key it stands for
    status_key = [k for k in dst.keys("statuses")
                  if dst.read("statuses", k)["body"] == "party post"][0]
    normalized_owner = tracker.normalize_value(
        world.dst, "statuses", "account_id", PLACEHOLDER, status_key
    )
    assert normalized_owner == 1

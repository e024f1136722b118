"""Shared fixtures: the canonical walkthrough world and generated worlds."""

from __future__ import annotations

from dataclasses import dataclass, field

import pytest

from transplant.clock import VirtualClock
from transplant.engine import MigrationEngine
from transplant.mapping import derive_all
from transplant.model import NodeId, SharingGrant
from transplant.store import AppBundle, BagEntry, MetadataStore
from transplant.synthgen import GenConfig, fixtures, generate, make_bundle


@dataclass
class World:
    clock: VirtualClock
    bundles: dict
    meta: MetadataStore
    mappings: dict

    @property
    def src(self) -> AppBundle:
        return self.bundles["miniDiaspora"]

    @property
    def dst(self) -> AppBundle:
        return self.bundles["miniMastodon"]

    def engine(self, src_id="miniDiaspora", dst_id="miniMastodon", **kwargs) -> MigrationEngine:
        return MigrationEngine(
            self.bundles[src_id],
            self.bundles[dst_id],
            self.meta,
            self.mappings[(src_id, dst_id)],
            mappings=self.mappings,
            **kwargs,
        )


def build_world(users: int = 0, seed: int = 0, gen_config: GenConfig | None = None) -> World:
    clock = VirtualClock()
    _apps, direct = fixtures()
    bundles = {app_id: make_bundle(app_id, clock) for app_id in
               ("miniDiaspora", "miniMastodon", "miniTwitter", "miniGnuSocial")}
    meta = MetadataStore(clock)
    if users:
        cfg = gen_config or GenConfig(users=users, seed=seed)
        generate(cfg, bundles["miniDiaspora"], meta)
    return World(clock=clock, bundles=bundles, meta=meta, mappings=derive_all(direct.values()))


@dataclass
class Walkthrough:
    """Two users, a shared post with unmapped attributes, and a reply chain
    where the middle comment belongs to the non-migrating user."""

    world: World
    alice: NodeId = field(default=None)
    bob: NodeId = field(default=None)
    post_key: int = 3
    comment1_key: int = 4
    comment2_key: int = 5
    comment3_key: int = 6
    parked_status_key: int = 901


def build_walkthrough(seed_parked_status: bool = True) -> Walkthrough:
    world = build_world()
    s = world.src.store
    s.insert("people", 1, {"id": 1, "username": "bob", "bio": "bob bio", "created_at": 1})
    s.insert("people", 2, {"id": 2, "username": "alice", "bio": "alice bio", "created_at": 2})
    s.insert("posts", 3, {"id": 3, "author_id": 1, "text": "party post", "lang": "en",
                          "loc": "harbor", "created_at": 3})
    s.insert("comments", 4, {"id": 4, "author_id": 2, "post_id": 3, "reply_to": None,
                             "text": "c1", "created_at": 4})
    s.insert("comments", 5, {"id": 5, "author_id": 1, "post_id": None, "reply_to": 4,
                             "text": "c2", "created_at": 5})
    s.insert("comments", 6, {"id": 6, "author_id": 2, "post_id": None, "reply_to": 5,
                             "text": "c3", "created_at": 6})
    bob = NodeId("miniDiaspora", "person", (1,))
    alice = NodeId("miniDiaspora", "person", (2,))
    world.meta.add_grant(SharingGrant(grantor=bob, grantee=alice, node_type="post"))
    if seed_parked_status:
        world.meta.bag_put(
            BagEntry(
                owner=alice,
                origin_app="miniMastodon",
                origin=NodeId("miniMastodon", "status", (901,)),
                node_type="status",
                rows={"statuses": {"id": 901, "account_id": None, "body": "old status",
                                   "visibility": "public", "spoiler_text": None,
                                   "created_at": 9}},
                reason="no_mapping",
            )
        )
    return Walkthrough(world=world, alice=alice, bob=bob)


@pytest.fixture
def walkthrough() -> Walkthrough:
    return build_walkthrough()


@pytest.fixture
def small_world() -> World:
    return build_world(users=8, seed=11)

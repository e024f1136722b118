"""Synthetic dataset generator and the packaged application fixtures."""

import pytest

from transplant import audit as audit_mod
from transplant.mapping import derive_all
from transplant.store import MetadataStore
from transplant.synthgen import FIXTURE_APPS, GenConfig, fixtures, generate, make_bundle
from transplant.workspace import fingerprint


def generated_world(users, seed, app="miniDiaspora"):
    bundle = make_bundle(app)
    meta = MetadataStore()
    generate(GenConfig(users=users, seed=seed), bundle, meta)
    return bundle, meta


def test_same_seed_same_bytes():
    a, _ = generated_world(25, 9)
    b, _ = generated_world(25, 9)
    assert a.store.snapshot() == b.store.snapshot()
    c, _ = generated_world(25, 10)
    assert c.store.snapshot() != a.store.snapshot()


def test_generated_data_passes_the_anomaly_scan():
    bundle, meta = generated_world(60, 3)
    bundles = {app_id: make_bundle(app_id) for app_id in FIXTURE_APPS}
    bundles["miniDiaspora"] = bundle
    base = audit_mod.census(bundles)
    result = audit_mod.audit(bundles, meta, base=base)
    assert result.clean, result.findings[:5]


def test_single_user_has_only_self_content():
    bundle, _ = generated_world(1, 5)
    s = bundle.store
    assert len(s.keys("people")) == 1
    assert s.keys("conversations") == []
    assert s.keys("messages") == []
    assert s.keys("likes") == []  # nobody else around to react
    for table in ("posts", "comments", "photos"):
        for key in s.keys(table):
            assert s.read(table, key)["author_id"] == s.keys("people")[0]


def test_popularity_concentrates_content():
    bundle, _ = generated_world(300, 42)
    s = bundle.store
    counts: dict[int, int] = {}
    for table, owner_attr in (("posts", "author_id"), ("comments", "author_id"),
                              ("likes", "author_id"), ("photos", "author_id")):
        for key in s.keys(table):
            owner = s.read(table, key)[owner_attr]
            counts[owner] = counts.get(owner, 0) + 1
    total = sum(counts.values())
    top = sorted(counts.values(), reverse=True)[: max(1, len(s.keys("people")) // 100)]
    # the top 1% of users hold far more than a proportional share
    assert sum(top) / total > 0.03


@pytest.mark.slow
def test_entity_ratios_track_large_network_proportions():
    bundle, _ = generated_world(10_000, 7)
    s = bundle.store
    posts = len(s.keys("posts"))
    likes = len(s.keys("likes"))
    comments = len(s.keys("comments"))
    users = len(s.keys("people"))
    assert 2.0 <= likes / posts <= 8.0  # around 4 per post
    assert 0.9 <= comments / posts <= 3.6  # around 1.8 per post
    assert 3.75 <= posts / users <= 15.0  # within 2x of the reference corpus


def test_every_fixture_validates_and_closes_transitively():
    apps, direct = fixtures()
    for app_id, (schema, dag) in apps.items():
        dag.validate(schema)
    closure = derive_all(direct.values())
    pairs = {(a, b) for a in FIXTURE_APPS for b in FIXTURE_APPS if a != b}
    assert set(closure) == pairs


def test_generation_works_for_every_fixture_app():
    for app_id in FIXTURE_APPS:
        bundle = make_bundle(app_id)
        generate(GenConfig(users=5, seed=2), bundle)
        assert bundle.store.row_count() > 5


def test_grants_cover_friend_pairs():
    bundle, meta = generated_world(200, 8)
    assert meta.grants, "expected sharing grants between mutual followers"
    for grant in meta.grants:
        assert grant.allowed_types == frozenset({"deletion", "independent"})
        assert grant.grantor.type_name == "person"


def test_media_stubs_carry_sizes():
    bundle, _ = generated_world(20, 4)
    s = bundle.store
    keys = s.keys("photo_blobs")
    assert keys
    for key in keys:
        row = s.read("photo_blobs", key)
        assert row["byte_size"] >= 50_000
        assert len(row["stub_hash"]) == 8

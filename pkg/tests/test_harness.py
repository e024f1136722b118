"""Auditor, naive baselines, metrics, figures, and the CLI surface."""

import json

import pytest

from transplant import audit as audit_mod
from transplant import metrics
from transplant.baselines import NaiveMigrator, NaivePlusMigrator
from transplant.cli import main as cli_main
from transplant.engine import MigrationReport, NodeTimeline
from transplant.model import NodeId
from transplant.store import AttributeChangeRow, MetadataStore, MigrationLease
from transplant.synthgen import FIXTURE_APPS, make_bundle

from conftest import build_world


def naive_world(users=40, seed=7):
    world = build_world(users=users, seed=seed)
    mapping = world.mappings[("miniDiaspora", "miniMastodon")]
    return world, NaiveMigrator(world.src, world.dst, mapping, meta=world.meta)


# ------------------------------------------------------------------ auditor


def test_auditor_flags_planted_broken_reference():
    world = build_world(users=5, seed=1)
    s = world.src.store
    post_key = s.keys("posts")[0]
    s.delete("posts", post_key)  # its comments and likes now point at nothing
    result = audit_mod.audit({"miniDiaspora": world.src}, world.meta)
    assert result.count("dangling", "miniDiaspora") > 0


def test_auditor_flags_planted_data_loss():
    world = build_world(users=5, seed=1)
    bundles = {"miniDiaspora": world.src}
    base = audit_mod.census(bundles)
    s = world.src.store
    like_key = s.keys("likes")[0]
    s.delete("likes", like_key)
    result = audit_mod.audit(bundles, world.meta, base=base)
    assert result.count("data_loss", "miniDiaspora") == 1


def test_auditor_flags_unconsented_move():
    world = build_world()
    s = world.src.store
    s.insert("people", 1, {"id": 1, "username": "bob", "bio": "b", "created_at": 1})
    s.insert("people", 2, {"id": 2, "username": "alice", "bio": "b", "created_at": 2})
    s.insert("posts", 3, {"id": 3, "author_id": 1, "text": "t", "lang": None, "loc": None,
                          "created_at": 3})
    bundles = {"miniDiaspora": world.src, "miniMastodon": world.dst}
    base = audit_mod.census(bundles)
    # forge the aftermath of a migration the owner never authorized
    world.dst.store.insert("statuses", 11, {"id": 11, "account_id": None, "body": "t",
                                            "visibility": "public", "spoiler_text": None,
                                            "created_at": 3})
    world.meta.leases["miniDiaspora:person:2"] = MigrationLease(
        user_ref="miniDiaspora:person:2", migration_id="m1",
        migration_type="deletion", state="committed")
    world.meta.record_attribute_changes([
        AttributeChangeRow("m1", "miniDiaspora", "miniMastodon",
                           NodeId("miniDiaspora", "post", (3,)),
                           NodeId("miniMastodon", "status", (11,)),
                           "statuses.id", 3, 11)
    ])
    result = audit_mod.audit(bundles, world.meta, base=base)
    assert result.count("ownership", "miniMastodon") == 1


def test_auditor_flags_inverted_display_order():
    world = build_world()
    s = world.src.store
    s.insert("people", 1, {"id": 1, "username": "a", "bio": "b", "created_at": 1})
    s.insert("posts", 2, {"id": 2, "author_id": 1, "text": "t", "lang": None, "loc": None,
                          "created_at": 2})
    s.insert("likes", 3, {"id": 3, "author_id": 1, "post_id": 2, "comment_id": None,
                          "created_at": 3})
    bundles = {"miniDiaspora": world.src, "miniMastodon": world.dst}
    base = audit_mod.census(bundles)
    report = MigrationReport("m1", "miniDiaspora:person:1", "deletion",
                             "miniDiaspora", "miniMastodon")
    report.timeline["miniDiaspora:post:2"] = NodeTimeline(1, 2, displayed=90, bagged=None)
    report.timeline["miniDiaspora:like:3"] = NodeTimeline(1, 2, displayed=10, bagged=None)
    result = audit_mod.audit(bundles, world.meta, base=base, reports=[report],
                             mappings=world.mappings)
    assert result.count("premature_display", "miniMastodon") == 1


def test_untouched_world_audits_clean(small_world):
    world = small_world
    base = audit_mod.census(world.bundles)
    result = audit_mod.audit(world.bundles, world.meta, base=base)
    assert result.clean


# ------------------------------------------------------------------ baselines


def test_naive_migration_produces_growing_dangling_counts():
    world, migrator = naive_world()
    bundles = {"miniDiaspora": world.src, "miniMastodon": world.dst}
    base = audit_mod.census(bundles)
    users = sorted(world.src.store.keys("people"))
    series = []
    for user in users:
        migrator.migrate_user(user)
        series.append(dict(migrator.gc_deleted))
    src_curve = [p["miniDiaspora"] for p in series]
    dst_curve = [p["miniMastodon"] for p in series]
    assert src_curve == sorted(src_curve)
    assert dst_curve == sorted(dst_curve)
    src_pct = 100.0 * src_curve[-1] / base["totals"]["miniDiaspora"]
    dst_pct = 100.0 * dst_curve[-1] / max(audit_mod.count_nodes(world.dst), 1)
    assert src_pct > 10.0
    assert dst_pct > src_pct


def test_naive_leaves_residual_anomalies_for_the_auditor():
    world, migrator = naive_world()
    bundles = {"miniDiaspora": world.src, "miniMastodon": world.dst}
    base = audit_mod.census(bundles)
    for user in sorted(world.src.store.keys("people")):
        migrator.migrate_user(user)
    result = audit_mod.audit(bundles, world.meta, base=base)
    assert result.count("data_loss", "miniDiaspora") > 0
    assert result.count("dangling", "miniMastodon") > 0


def test_isolated_user_survives_naive_migration_clean():
    world = build_world()
    s = world.src.store
    s.insert("people", 1, {"id": 1, "username": "solo", "bio": "b", "created_at": 1})
    s.insert("posts", 2, {"id": 2, "author_id": 1, "text": "t", "lang": None, "loc": None,
                          "created_at": 2})
    s.insert("comments", 3, {"id": 3, "author_id": 1, "post_id": 2, "reply_to": None,
                             "text": "c", "created_at": 3})
    bundles = {"miniDiaspora": world.src, "miniMastodon": world.dst}
    base = audit_mod.census(bundles)
    migrator = NaiveMigrator(world.src, world.dst,
                             world.mappings[("miniDiaspora", "miniMastodon")], meta=world.meta)
    migrator.migrate_user(1)
    result = audit_mod.audit(bundles, world.meta, base=base)
    assert result.clean


def test_naive_plus_displays_everything_at_the_end():
    world = build_world(users=10, seed=3)
    migrator = NaivePlusMigrator(world.src, world.dst,
                                 world.mappings[("miniDiaspora", "miniMastodon")])
    report = migrator.migrate_user(sorted(world.src.store.keys("people"))[0])
    displays = [t.displayed for t in report.timeline.values() if t.displayed is not None]
    assert displays
    assert len(set(displays)) == 1
    assert displays[0] >= report.committed_at


# ------------------------------------------------------------------- metrics


def test_fraction_accounting_and_dominance():
    fast = MigrationReport("m1", "u", "deletion", "a", "b")
    slow = MigrationReport("m2", "u", "deletion", "a", "b")
    for i in range(10):
        fast.timeline[f"n{i}"] = NodeTimeline(src_invisible=i, dest_arrival=i,
                                              displayed=i + 1, bagged=None)
        slow.timeline[f"n{i}"] = NodeTimeline(src_invisible=i, dest_arrival=i,
                                              displayed=10, bagged=None)
    fast.finished_at = slow.finished_at = 10
    f_fast = metrics.unavailability_fractions([fast])
    f_slow = metrics.unavailability_fractions([slow])
    assert metrics.median(f_fast) < metrics.median(f_slow)
    assert metrics.first_order_dominates(f_fast, f_slow)
    assert not metrics.first_order_dominates(f_slow, f_fast)


def test_undisplayed_objects_are_reported_separately():
    report = MigrationReport("m1", "u", "deletion", "a", "b")
    report.timeline["gone"] = NodeTimeline(src_invisible=1, dest_arrival=2,
                                           displayed=None, bagged="failed_validation")
    report.timeline["ok"] = NodeTimeline(src_invisible=1, dest_arrival=2, displayed=3,
                                         bagged=None)
    report.finished_at = 10
    assert len(metrics.unavailability_fractions([report])) == 1
    assert len(metrics.unavailability_fractions([report], include_undisplayed=True)) == 2
    assert metrics.undisplayed_share([report]) == 0.5


def test_linear_fit_recovers_a_line():
    xs = list(range(10, 110, 10))
    ys = [3 * x + 17 for x in xs]
    fit = metrics.linear_fit(xs, ys)
    assert abs(fit.slope - 3) < 1e-9
    assert fit.r_squared == pytest.approx(1.0)


# ----------------------------------------------------------------------- CLI


@pytest.mark.slow
def test_cli_end_to_end(tmp_path, capsys):
    data = str(tmp_path / "ws")
    assert cli_main(["--data", data, "gen", "--users", "12", "--seed", "5"]) == 0
    assert cli_main(["--data", data, "specs", "check"]) == 0
    assert cli_main(["--data", data, "map", "derive", "--out", str(tmp_path / "derived")]) == 0
    derived = list((tmp_path / "derived").glob("*.json"))
    assert derived
    for path in derived:
        assert "derivation" in json.loads(path.read_text())

    assert cli_main([
        "--data", data, "migrate", "--type", "deletion",
        "--src", "miniDiaspora", "--dst", "miniMastodon", "--all", "--seed", "7",
    ]) == 0
    assert cli_main(["--data", data, "audit", "--strict"]) == 0
    for kind in ("continuity", "scaling", "rates"):
        assert cli_main(["--data", data, "report", kind]) == 0
    out_dir = tmp_path / "ws" / "reports-out"
    for name in ("continuity.csv", "continuity.png", "scaling.csv", "scaling.png",
                 "rates.csv", "rates.png"):
        assert (out_dir / name).exists(), name

    capsys.readouterr()
    assert cli_main(["--data", data, "bags", "list"]) == 0
    listing = capsys.readouterr().out.strip().splitlines()[:-1]  # last line is the count
    entry = json.loads(listing[0])
    assert cli_main(["--data", data, "bags", "take", "--origin", entry["origin"]]) == 0
    capsys.readouterr()
    assert cli_main(["--data", data, "bags", "list"]) == 0
    remaining = capsys.readouterr().out.strip().splitlines()[:-1]
    assert len(remaining) == len(listing) - 1

    # a fresh baseline for the naive run, then the contrast report
    assert cli_main(["--data", data, "reset"]) == 0
    assert cli_main([
        "--data", data, "migrate", "--src", "miniDiaspora", "--dst", "miniMastodon",
        "--all", "--system", "naive",
    ]) == 0
    assert cli_main(["--data", data, "audit"]) == 0
    assert cli_main(["--data", data, "report", "anomalies"]) == 0
    assert (out_dir / "anomalies.png").exists()


def test_cli_fault_injection_round_trip(tmp_path):
    data = str(tmp_path / "ws")
    assert cli_main(["--data", data, "gen", "--users", "4", "--seed", "5"]) == 0
    assert cli_main([
        "--data", data, "migrate", "--type", "deletion", "--src", "miniDiaspora",
        "--dst", "miniMastodon", "--user", "1", "--fault-inject", "wal:6",
    ]) == 0
    assert cli_main(["--data", data, "audit", "--strict"]) == 0


def test_cli_usage_errors_exit_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli_main(["--data", str(tmp_path), "migrate", "--src", "nowhere", "--dst", "miniMastodon", "--all"])
    assert exc.value.code == 2

"""Workspace persistence: stores, metadata, reports, and state fingerprints.

A workspace directory holds a generated baseline, the mutable state the
CLI migrates, and the reports experiments append. Everything is JSON so
fixtures and experiment state stay diffable.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from pathlib import Path

from transplant.engine import MigrationReport
from transplant.model import NodeId, SharingGrant
from transplant.store import (
    AppBundle,
    AttributeChangeRow,
    BagEntry,
    MetadataStore,
    MigrationLease,
    PlaceholderInfo,
    ReferenceRow,
)


def node_id_to_list(node_id: NodeId) -> list:
    return [node_id.app_id, node_id.type_name, list(node_id.keys)]


def node_id_from_list(data) -> NodeId:
    return NodeId(data[0], data[1], tuple(data[2]))


def _grant_to_dict(grant: SharingGrant) -> dict:
    return {
        "grantor": node_id_to_list(grant.grantor),
        "grantee": node_id_to_list(grant.grantee),
        "node_type": grant.node_type,
        "node_keys": list(grant.node_keys) if grant.node_keys is not None else None,
        "predicate": [list(p) for p in grant.predicate],
        "allowed_types": sorted(grant.allowed_types),
    }


def _grant_from_dict(data) -> SharingGrant:
    return SharingGrant(
        grantor=node_id_from_list(data["grantor"]),
        grantee=node_id_from_list(data["grantee"]),
        node_type=data["node_type"],
        node_keys=tuple(data["node_keys"]) if data["node_keys"] is not None else None,
        predicate=tuple(tuple(p) for p in data["predicate"]),
        allowed_types=frozenset(data["allowed_types"]),
    )


def _placeholder_to_dict(info: PlaceholderInfo) -> dict:
    return {
        "kind": info.kind,
        "origin": node_id_to_list(info.origin),
        "origin_attr": info.origin_attr,
    }


def _placeholder_from_dict(data) -> PlaceholderInfo:
    return PlaceholderInfo(
        kind=data["kind"],
        origin=node_id_from_list(data["origin"]),
        origin_attr=data["origin_attr"],
    )


def _entry_to_dict(entry: BagEntry) -> dict:
    return {
        "owner": node_id_to_list(entry.owner),
        "origin_app": entry.origin_app,
        "origin": node_id_to_list(entry.origin),
        "node_type": entry.node_type,
        "rows": entry.rows,
        "reason": entry.reason,
        "partial": entry.partial,
        "placeholders": {ref: _placeholder_to_dict(i) for ref, i in entry.placeholders.items()},
        "bagged_at": entry.bagged_at,
    }


def _entry_from_dict(data) -> BagEntry:
    return BagEntry(
        owner=node_id_from_list(data["owner"]),
        origin_app=data["origin_app"],
        origin=node_id_from_list(data["origin"]),
        node_type=data["node_type"],
        rows={t: dict(r) for t, r in data["rows"].items()},
        reason=data["reason"],
        partial=data["partial"],
        placeholders={ref: _placeholder_from_dict(i) for ref, i in data["placeholders"].items()},
        bagged_at=data["bagged_at"],
    )


def meta_to_dict(meta: MetadataStore) -> dict:
    return {
        "migration_counter": meta._migration_counter,
        "leases": {
            ref: {
                "migration_id": lease.migration_id,
                "migration_type": lease.migration_type,
                "state": lease.state,
            }
            for ref, lease in meta.leases.items()
        },
        "references": [
            {
                "migration_id": r.migration_id,
                "app_id": r.app_id,
                "from_node": node_id_to_list(r.from_node),
                "from_attr": r.from_attr,
                "to_node": node_id_to_list(r.to_node),
                "to_attr": r.to_attr,
                "kind": r.kind,
            }
            for r in meta.references
        ],
        "attribute_changes": [
            {
                "migration_id": r.migration_id,
                "from_app": r.from_app,
                "to_app": r.to_app,
                "old_node": node_id_to_list(r.old_node),
                "new_node": node_id_to_list(r.new_node),
                "attribute": r.attribute,
                "old_value": r.old_value,
                "new_value": r.new_value,
            }
            for r in meta.attribute_changes
        ],
        "bags": [_entry_to_dict(e) for _k, e in sorted(meta.bags.items())],
        "grants": [_grant_to_dict(g) for g in meta.grants],
        "placeholders": [
            {"cell": [c[0], c[1], c[2], c[3]], "info": _placeholder_to_dict(info)}
            for c, info in sorted(meta.placeholders.items(), key=lambda kv: str(kv[0]))
        ],
    }


def meta_from_dict(data: dict, clock=None) -> MetadataStore:
    meta = MetadataStore(clock)
    meta._migration_counter = data["migration_counter"]
    for ref, lease in data["leases"].items():
        meta.leases[ref] = MigrationLease(
            user_ref=ref,
            migration_id=lease["migration_id"],
            migration_type=lease["migration_type"],
            state=lease["state"],
        )
    meta.record_references(
        [
            ReferenceRow(
                migration_id=r["migration_id"],
                app_id=r["app_id"],
                from_node=node_id_from_list(r["from_node"]),
                from_attr=r["from_attr"],
                to_node=node_id_from_list(r["to_node"]),
                to_attr=r["to_attr"],
                kind=r["kind"],
            )
            for r in data["references"]
        ]
    )
    meta.record_attribute_changes(
        [
            AttributeChangeRow(
                migration_id=r["migration_id"],
                from_app=r["from_app"],
                to_app=r["to_app"],
                old_node=node_id_from_list(r["old_node"]),
                new_node=node_id_from_list(r["new_node"]),
                attribute=r["attribute"],
                old_value=r["old_value"],
                new_value=r["new_value"],
            )
            for r in data["attribute_changes"]
        ]
    )
    for entry in data["bags"]:
        meta.bag_put(_entry_from_dict(entry))
    for grant in data["grants"]:
        meta.add_grant(_grant_from_dict(grant))
    for item in data["placeholders"]:
        app_id, table, key, attr = item["cell"]
        if isinstance(key, str) and key.lstrip("-").isdigit():
            key = int(key)
        meta.placeholder_set(app_id, table, key, attr, _placeholder_from_dict(item["info"]))
    return meta


def fingerprint(bundles: dict, meta: MetadataStore) -> str:
    """Canonical digest of migratable state: rows, flags, bags, tracker.

    Id allocators, leases, and write-ahead logs are bookkeeping, not data,
    and are excluded; a rolled-back migration must fingerprint identically
    to the untouched state.
    """
    body = {
        "apps": {},
        "bags": [],
        "placeholders": [],
        "references": [],
        "attribute_changes": [],
    }
    for app_id, bundle in sorted(bundles.items()):
        snap = bundle.store.snapshot()
        snap.pop("next_id", None)
        body["apps"][app_id] = snap
    meta_dict = meta_to_dict(meta)
    body["bags"] = sorted(json.dumps(e, sort_keys=True, default=str) for e in meta_dict["bags"])
    body["placeholders"] = sorted(
        json.dumps(p, sort_keys=True, default=str) for p in meta_dict["placeholders"]
    )
    body["references"] = sorted(
        json.dumps(r, sort_keys=True, default=str) for r in meta_dict["references"]
    )
    body["attribute_changes"] = sorted(
        json.dumps(r, sort_keys=True, default=str) for r in meta_dict["attribute_changes"]
    )
    blob = json.dumps(body, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# Directory layout


class Workspace:
    """On-disk experiment state: baseline, mutable state, reports."""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def config_path(self):
        return self.root / "config.json"

    def save_config(self, config: dict):
        self.root.mkdir(parents=True, exist_ok=True)
        self.config_path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")

    def load_config(self) -> dict:
        return json.loads(self.config_path.read_text())

    def _save_state(self, directory: Path, bundles: dict, meta: MetadataStore,
                    census: dict | None, clock_now: int = 0):
        directory.mkdir(parents=True, exist_ok=True)
        for app_id, bundle in bundles.items():
            path = directory / f"{app_id}.store.json"
            path.write_text(json.dumps(bundle.store.snapshot(), sort_keys=True) + "\n")
        (directory / "meta.json").write_text(
            json.dumps({"clock": clock_now, "meta": meta_to_dict(meta)}, sort_keys=True, default=str)
            + "\n"
        )
        if census is not None:
            (directory / "census.json").write_text(json.dumps(census, sort_keys=True) + "\n")

    def _load_state(self, directory: Path, clock=None):
        from transplant.synthgen import FIXTURE_APPS, make_bundle

        bundles = {}
        for app_id in FIXTURE_APPS:
            bundle = make_bundle(app_id, clock)
            path = directory / f"{app_id}.store.json"
            if path.exists():
                bundle.store.load_snapshot(json.loads(path.read_text()))
            bundles[app_id] = bundle
        wrapper = json.loads((directory / "meta.json").read_text())
        meta = meta_from_dict(wrapper["meta"], clock)
        if clock is not None:
            # virtual time continues across CLI invocations
            clock.now = max(clock.now, wrapper.get("clock", 0))
        census_path = directory / "census.json"
        census = json.loads(census_path.read_text()) if census_path.exists() else None
        return bundles, meta, census

    def save_baseline(self, bundles, meta, census):
        self._save_state(self.root / "baseline", bundles, meta, census)
        self.reset_state()

    def reset_state(self):
        state = self.root / "state"
        if state.exists():
            shutil.rmtree(state)
        shutil.copytree(self.root / "baseline", state)
        reports = self.root / "reports"
        if reports.exists():
            shutil.rmtree(reports)

    def load_state(self, clock=None):
        return self._load_state(self.root / "state", clock)

    def save_state(self, bundles, meta, clock_now: int = 0):
        self._save_state(self.root / "state", bundles, meta, None, clock_now=clock_now)

    def load_census(self) -> dict:
        return json.loads((self.root / "baseline" / "census.json").read_text())

    def append_report(self, report: MigrationReport):
        reports = self.root / "reports"
        reports.mkdir(parents=True, exist_ok=True)
        path = reports / f"{report.migration_id}.json"
        path.write_text(json.dumps(report.to_dict(), sort_keys=True) + "\n")

    def load_reports(self) -> list[MigrationReport]:
        reports = self.root / "reports"
        if not reports.exists():
            return []
        out = []
        for path in sorted(reports.glob("*.json")):
            out.append(MigrationReport.from_dict(json.loads(path.read_text())))
        return out

    def save_extra(self, name: str, payload: dict):
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def load_extra(self, name: str) -> dict | None:
        path = self.root / name
        return json.loads(path.read_text()) if path.exists() else None

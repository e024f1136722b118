"""Independent anomaly auditor.

Recomputes every anomaly category by brute-force scans over the stores
and metadata tables. Nothing here calls into the migration engine or the
validator: the auditor reads the same persisted state those components
write, so it catches their bugs instead of inheriting them.

Categories: dangling (a displayed node referencing a missing row), data
loss (a censused node present nowhere, bags included), ownership
violation (data moved by a user its owner never authorized), and
premature display (a display event before a required parent's).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from transplant.model import DEPENDENCY, OWNERSHIP, SHARING, NodeId, is_placeholder
from transplant.store import AppBundle, MetadataStore

CATEGORIES = ("dangling", "data_loss", "ownership", "premature_display")


@dataclass
class Finding:
    app_id: str
    category: str
    node: str
    detail: str


@dataclass
class AnomalyAudit:
    totals: dict = field(default_factory=dict)  # app -> displayed object count
    findings: list = field(default_factory=list)

    def add(self, app_id: str, category: str, node: str, detail: str):
        self.findings.append(Finding(app_id, category, node, detail))

    def count(self, category: str, app_id: str | None = None) -> int:
        return sum(
            1
            for f in self.findings
            if f.category == category and (app_id is None or f.app_id == app_id)
        )

    def percentage(self, category: str, app_id: str) -> float:
        total = self.totals.get(app_id, 0)
        return 100.0 * self.count(category, app_id) / total if total else 0.0

    @property
    def clean(self) -> bool:
        return not self.findings

    def summary(self) -> dict:
        return {
            "totals": dict(self.totals),
            "counts": {
                cat: {app: self.count(cat, app) for app in self.totals}
                for cat in CATEGORIES
            },
            "clean": self.clean,
        }


def count_nodes(bundle: AppBundle) -> int:
    """Logical object count: one per node, however many member rows."""
    total = 0
    for nt in bundle.dag.node_types:
        total += len(bundle.store.keys(nt.member_tables[0]))
    return total


def census(bundles: dict) -> dict:
    """Pre-experiment inventory used later for loss and premature checks."""
    nodes = {}
    totals = {}
    for app_id, bundle in bundles.items():
        count = 0
        for node in bundle.all_nodes():
            count += 1
            parents = []
            for edge in bundle.dag.edges_from(node.type_name, DEPENDENCY):
                value = node.rows.get(edge.child_table, {}).get(edge.child_attr)
                if value is None or is_placeholder(value):
                    continue
                parents.append(
                    [NodeId(app_id, edge.parent_type, (value,)).ref(), edge.parent_type]
                )
            owner = node.owner.ref() if node.owner else None
            nodes[node.node_id.ref()] = {
                "app": app_id,
                "type": node.type_name,
                "owner": owner,
                "parents": parents,
            }
        totals[app_id] = count
    return {"nodes": nodes, "totals": totals}


def audit(
    bundles: dict,
    meta: MetadataStore,
    base: dict | None = None,
    reports: list | None = None,
    mappings: dict | None = None,
) -> AnomalyAudit:
    """Scan stores, bags, and history for anomalies; engine-independent."""
    out = AnomalyAudit()
    for app_id, bundle in bundles.items():
        out.totals[app_id] = 0
        _scan_dangling(out, bundle)
    if base is not None:
        _scan_data_loss(out, bundles, meta, base)
        _scan_ownership(out, bundles, meta, base)
    if reports and mappings is not None and base is not None:
        _scan_premature(out, bundles, reports, mappings, base)
    return out


def _scan_dangling(out: AnomalyAudit, bundle: AppBundle):
    app_id = bundle.app_id
    for node in bundle.all_nodes(visible_only=True):
        out.totals[app_id] += 1
        for kind in (DEPENDENCY, OWNERSHIP, SHARING):
            for edge in bundle.dag.edges_from(node.type_name, kind):
                value = node.rows.get(edge.child_table, {}).get(edge.child_attr)
                if value is None or is_placeholder(value):
                    continue
                if not bundle.store.exists(edge.parent_table, value):
                    out.add(
                        app_id,
                        "dangling",
                        node.node_id.ref(),
                        f"{edge.child_table}.{edge.child_attr}={value!r} has no "
                        f"{edge.parent_type} row",
                    )


def _locate(node_ref: str, info: dict, bundles: dict, meta: MetadataStore) -> str | None:
    """Where a censused node lives now: an app id, 'bag', or None (lost)."""
    app_id, type_name, raw_keys = node_ref.split(":", 2)
    keys = tuple(int(k) if k.lstrip("-").isdigit() else k for k in raw_keys.split(","))
    origin = NodeId(app_id, type_name, keys)
    for ident in meta.lineage(origin):
        bundle = bundles.get(ident.app_id)
        if bundle is None:
            continue
        if bundle.dag.has_type(ident.type_name) and bundle.node_exists(ident):
            return ident.app_id
        if (ident.app_id, ident.ref()) in meta.bags:
            return "bag"
    if (app_id, origin.ref()) in meta.bags:
        return "bag"
    return None


def _scan_data_loss(out: AnomalyAudit, bundles: dict, meta: MetadataStore, base: dict):
    for node_ref, info in base["nodes"].items():
        where = _locate(node_ref, info, bundles, meta)
        if where is None:
            out.add(info["app"], "data_loss", node_ref, "absent from every store and bag")


def _scan_ownership(out: AnomalyAudit, bundles: dict, meta: MetadataStore, base: dict):
    """Every migrated node at a destination must have had its owner's consent."""
    migrations = {}
    for lease in meta.leases.values():
        migrations[lease.migration_id] = lease
    moved = {}
    for row in meta.attribute_changes:
        moved.setdefault(row.new_node, row.migration_id)

    for new_node, migration_id in moved.items():
        bundle = bundles.get(new_node.app_id)
        if bundle is None or not bundle.dag.has_type(new_node.type_name):
            continue
        if not bundle.node_exists(new_node):
            continue
        lease = migrations.get(migration_id)
        if lease is None:
            continue
        origin = meta.oldest_identity(new_node)
        info = base["nodes"].get(origin.ref())
        if info is None or info["owner"] is None:
            continue
        owner_ref = info["owner"]
        if owner_ref == lease.user_ref:
            continue
        if _had_consent(meta, owner_ref, lease, info, origin):
            continue
        out.add(
            new_node.app_id,
            "ownership",
            new_node.ref(),
            f"owned by {owner_ref}, moved by {lease.user_ref} without a grant",
        )


def _had_consent(meta: MetadataStore, owner_ref: str, lease, info: dict, origin: NodeId) -> bool:
    for grant in meta.grants:
        if grant.grantor.ref() != owner_ref:
            if meta.oldest_identity(grant.grantor).ref() != owner_ref:
                continue
        if meta.oldest_identity(grant.grantee).ref() != lease.user_ref:
            continue
        if lease.migration_type not in grant.allowed_types:
            continue
        if grant.node_type not in ("*", info["type"]):
            continue
        if grant.node_keys is not None and tuple(grant.node_keys) != origin.keys:
            continue
        return True
    return False


def _scan_premature(out, bundles, reports, mappings, base, meta: MetadataStore | None = None):
    """A display event must not precede a required parent's display event.

    Display times are global virtual-clock values, so events pool across
    reports: a parent admitted during an earlier user's migration still
    satisfies a later child.
    """
    displays: dict[str, int] = {}
    for report in reports:
        for ref, t in report.timeline.items():
            if t.displayed is not None and (ref not in displays or t.displayed < displays[ref]):
                displays[ref] = t.displayed

    for report in reports:
        dst = bundles.get(report.dst_app)
        mapping = mappings.get((report.src_app, report.dst_app))
        if dst is None or mapping is None:
            continue
        for ref, t in report.timeline.items():
            if t.displayed is None:
                continue
            shown_at = t.displayed
            info = base["nodes"].get(ref)
            if info is None:
                continue
            nm = mapping.node_map(info["type"])
            if nm is None:
                continue
            rule = dst.dag.display_rule(nm.to_node)
            if not rule.requires_parents_displayed:
                continue
            for parent_ref, parent_type in info["parents"]:
                parent_nm = mapping.node_map(parent_type)
                dest_parent_type = parent_nm.to_node if parent_nm else parent_type
                if dest_parent_type in rule.exceptions:
                    continue
                parent_shown = displays.get(parent_ref)
                if parent_shown is not None and parent_shown > shown_at:
                    out.add(
                        report.dst_app,
                        "premature_display",
                        ref,
                        f"displayed at {shown_at} before parent {parent_ref} "
                        f"at {parent_shown}",
                    )

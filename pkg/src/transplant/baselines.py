"""Naive migration baselines.

The naive system moves a user's owned data in a fixed, intuitive entity
order using the same schema mappings, substituting regenerated ids only
for rows it has already moved in the same run. No flags, no bags, no
relationship tracking: references to anything else go stale. Dangling
rows it produces are garbage-collected (one pass) after each user, since
the naive system cannot re-integrate them.

Naive+ adds one destination-side guarantee for the continuity comparison:
migrated rows stay locked until the user's migration completes, then a
single validation pass displays what qualifies.
"""

from __future__ import annotations

from transplant.engine import MigrationReport
from transplant.mapping import SchemaMapping, apply_chain
from transplant.model import DEPENDENCY, OWNERSHIP, SHARING, NodeId
from transplant.store import FLAG_DISPLAYABLE, FLAG_MIGRATION, AppBundle
from transplant.validate import is_displayable

# posts first, then reactions and comments, threads, messages, the rest
NAIVE_ROLE_ORDER = ("post", "reaction", "comment", "thread", "thread_item", "media", "note")


class NaiveMigrator:
    """Shared machinery for the naive and naive+ baselines."""

    locked = False
    system_name = "naive"

    def __init__(self, src: AppBundle, dst: AppBundle, mapping: SchemaMapping, meta=None):
        self.src = src
        self.dst = dst
        self.mapping = mapping
        # the experiment records where objects went (for loss accounting);
        # the naive system itself never consults or re-links through it
        self.meta = meta
        self.clock = src.store.clock or dst.store.clock
        self._counter = 0
        self.gc_deleted = {src.app_id: 0, dst.app_id: 0}

    def _now(self):
        return self.clock.now if self.clock else 0

    def migrate_user(self, root_key) -> MigrationReport:
        from transplant.synthgen import _ROLES

        roles = _ROLES[self.src.app_id]
        self._counter += 1
        report = MigrationReport(
            migration_id=f"{self.system_name}{self._counter:05d}",
            user=NodeId(self.src.app_id, self.src.dag.root_type, (root_key,)).ref(),
            migration_type="deletion",
            src_app=self.src.app_id,
            dst_app=self.dst.app_id,
            system=self.system_name,
        )
        report.clock = self.clock
        report.started_at = self._now()

        id_map: dict[tuple, object] = {}
        moved: list[NodeId] = []
        removed: list[NodeId] = []
        order = [self.src.dag.root_type] + [
            roles[r] for r in NAIVE_ROLE_ORDER if r in roles
        ]
        for type_name in order:
            for node in self._owned_nodes(type_name, root_key):
                self._move_node(node, id_map, moved, removed, report)

        report.committed_at = self._now()
        report.migration_cost = report.committed_at - report.started_at
        if self.locked:
            self._unlock_and_validate(moved, id_map, report)
        report.outcome = "committed"
        self.collect_garbage(report, removed, moved)
        report.finished_at = self._now()
        return report

    def _owned_nodes(self, type_name: str, root_key):
        dag = self.src.dag
        if type_name == dag.root_type:
            nid = self.src.node_id_for(type_name, root_key)
            return [self.src.assemble(nid)] if self.src.node_exists(nid) else []
        edges = dag.edges_from(type_name, OWNERSHIP)
        if not edges:
            return []
        edge = edges[0]
        out = []
        for key in sorted(self.src.store.lookup(edge.child_table, edge.child_attr, root_key), key=str):
            if edge.child_table != dag.node_type(type_name).member_tables[0]:
                continue
            out.append(self.src.assemble(self.src.node_id_for(type_name, key)))
        return out

    def _move_node(self, node, id_map, moved, removed, report):
        nm = self.mapping.node_map(node.type_name)
        if nm is None:
            return  # no mapping: the naive system just leaves it behind
        nt_dst = self.dst.dag.node_type(nm.to_node)
        rows = {t: {a: None for a in self.dst.schema.table(t).attributes} for t in nt_dst.member_tables}
        fresh: dict = {}
        for am in nm.attributes:
            values = [node.attribute(ref) for ref in am.src]
            table, attr = am.dst.split(".", 1)
            if am.regenerates_id:
                source_value = values[0]
                if source_value is None:
                    continue
                if source_value not in fresh:
                    fresh[source_value] = self.dst.store.next_id(table)
                rows[table][attr] = fresh[source_value]
            else:
                rows[table][attr] = apply_chain(am.chain, values)
        for old_key in fresh:
            id_map[(node.type_name, old_key)] = fresh[old_key]

        # substitute ids already regenerated this run; anything else stays raw
        for kind in (DEPENDENCY, OWNERSHIP, SHARING):
            for edge in self.src.dag.edges_from(node.type_name, kind):
                src_ref = f"{edge.child_table}.{edge.child_attr}"
                am = nm.map_for_source(src_ref)
                if am is None:
                    continue
                table, attr = am.dst.split(".", 1)
                value = rows[table].get(attr)
                mapped = id_map.get((edge.parent_type, value))
                if mapped is not None:
                    rows[table][attr] = mapped

        flags = None
        if self.locked:
            flags = {FLAG_MIGRATION: True, FLAG_DISPLAYABLE: False}
        for table in nt_dst.member_tables:
            key = rows[table][self.dst.schema.table(table).key]
            self.dst.store.insert(table, key, rows[table], flags=flags)
        if self.clock is not None:
            self.clock.advance(node.size_units())

        nt_src = self.src.dag.node_type(node.type_name)
        for table, key in zip(nt_src.member_tables, node.node_id.keys):
            self.src.store.delete(table, key)
        removed.append(node.node_id)

        new_id = NodeId(
            self.dst.app_id, nm.to_node,
            tuple(rows[t][self.dst.schema.table(t).key] for t in nt_dst.member_tables),
        )
        moved.append(new_id)
        if self.meta is not None:
            from transplant.store import AttributeChangeRow

            key_attr = f"{nt_dst.member_tables[0]}.{self.dst.schema.table(nt_dst.member_tables[0]).key}"
            self.meta.record_attribute_changes([
                AttributeChangeRow(
                    migration_id=report.migration_id,
                    from_app=self.src.app_id,
                    to_app=self.dst.app_id,
                    old_node=node.node_id,
                    new_node=new_id,
                    attribute=key_attr,
                    old_value=node.node_id.keys[0],
                    new_value=new_id.keys[0],
                )
            ])
        now = self._now()
        slot = report.slot(node.node_id.ref())
        slot.src_invisible = now
        slot.dest_arrival = now
        if not self.locked:
            slot.displayed = now  # naive shows data the moment it lands
        report.bump("migrated")

    def _unlock_and_validate(self, moved, id_map, report):
        root_type = self.dst.dag.root_type
        user_root = next((n for n in moved if n.type_name == root_type), None)
        origin_by_new_key = {
            new_key: NodeId(self.src.app_id, src_type, (old_key,))
            for (src_type, old_key), new_key in id_map.items()
        }
        displayed: set = set()
        progressed = True
        while progressed:
            progressed = False
            for node_id in moved:
                if node_id in displayed or not self.dst.node_exists(node_id):
                    continue
                node = self.dst.assemble(node_id)
                if FLAG_MIGRATION not in node.flags:
                    displayed.add(node_id)
                    continue
                if is_displayable(node, self.dst, user_root):
                    self.dst.try_display(node_id)
                    displayed.add(node_id)
                    progressed = True
        now = self._now()
        for node_id in displayed:
            origin = origin_by_new_key.get(node_id.keys[0])
            if origin is not None:
                report.slot(origin.ref()).displayed = now

    def collect_garbage(self, report, removed, inserted):
        """One non-transitive pass deleting rows with broken references.

        Only rows that could have just broken are checked: source rows that
        referenced something this migration removed, and the rows it
        inserted at the destination (their copied reference values may
        point at nothing there). Second-order orphans stay behind; the
        naive system never revisits them.
        """
        src_victims: dict = {}
        for node_id in removed:
            for edge in self.src.dag.dependency_edges + self.src.dag.ownership_edges:
                if edge.parent_type != node_id.type_name:
                    continue
                nt_child = self.src.dag.node_type(edge.child_type)
                if edge.child_table != nt_child.member_tables[0]:
                    continue
                for key in self.src.store.lookup(edge.child_table, edge.child_attr, node_id.keys[0]):
                    src_victims[self.src.node_id_for(edge.child_type, key)] = True
        self._gc_pass(self.src, list(src_victims), report)
        self._gc_pass(self.dst, inserted, report)

    def _gc_pass(self, bundle: AppBundle, candidates, report):
        broken = []
        for node_id in candidates:
            if not bundle.node_exists(node_id):
                continue
            node = bundle.assemble(node_id, with_owner=False)
            if self._is_broken(bundle, node):
                broken.append(node_id)
        for node_id in broken:
            nt = bundle.dag.node_type(node_id.type_name)
            for table, key in zip(nt.member_tables, node_id.keys):
                if bundle.store.exists(table, key):
                    bundle.store.delete(table, key)
        self.gc_deleted[bundle.app_id] += len(broken)
        if report is not None:
            report.bump(f"gc_deleted_{bundle.app_id}", len(broken))

    def _is_broken(self, bundle: AppBundle, node) -> bool:
        for kind in (DEPENDENCY, OWNERSHIP):
            for edge in bundle.dag.edges_from(node.type_name, kind):
                value = node.rows.get(edge.child_table, {}).get(edge.child_attr)
                if value is None:
                    continue
                if not bundle.store.exists(edge.parent_table, value):
                    return True
        return False


class NaivePlusMigrator(NaiveMigrator):
    """Naive ordering plus a destination lock until completion."""

    locked = True
    system_name = "naive_plus"


def run_naive(src, dst, mapping, root_key, meta=None) -> MigrationReport:
    return NaiveMigrator(src, dst, mapping, meta=meta).migrate_user(root_key)


def run_naive_plus(src, dst, mapping, root_key, meta=None) -> MigrationReport:
    return NaivePlusMigrator(src, dst, mapping, meta=meta).migrate_user(root_key)

"""Relationship tracker: re-links references after identity changes.

Migrating a node regenerates its keys, so every attribute that referred
to it by the old key would point at the wrong row (or at nothing). The
tracker records each node's outgoing relationships before it moves,
rewrites reference attributes at the destination, and parks placeholders
for referents that live elsewhere, resolving them if the referent ever
arrives.
"""

from __future__ import annotations

from transplant.errors import NotTracked
from transplant.model import (
    DEPENDENCY,
    OWNERSHIP,
    PLACEHOLDER,
    SHARING,
    DataNode,
    NodeId,
    is_placeholder,
)
from transplant.store import (
    AppBundle,
    AttributeChangeRow,
    MetadataStore,
    PlaceholderInfo,
    ReferenceRow,
)


class Tracker:
    def __init__(self, meta: MetadataStore):
        self.meta = meta

    # -- recording ----------------------------------------------------------

    def record_pre_migration(self, migration_id: str, bundle: AppBundle, node: DataNode):
        """Store the node's outgoing relationships under its current identity."""
        rows = []
        for kind in (DEPENDENCY, OWNERSHIP, SHARING):
            for edge in bundle.dag.edges_from(node.type_name, kind):
                value = node.rows.get(edge.child_table, {}).get(edge.child_attr)
                if value is None or is_placeholder(value):
                    continue
                to_node = NodeId(bundle.app_id, edge.parent_type, (value,))
                rows.append(
                    ReferenceRow(
                        migration_id=migration_id,
                        app_id=bundle.app_id,
                        from_node=node.node_id,
                        from_attr=f"{edge.child_table}.{edge.child_attr}",
                        to_node=to_node,
                        to_attr=f"{edge.parent_table}.{edge.parent_attr}",
                        kind=kind,
                    )
                )
        self.meta.record_references(rows)
        return rows

    def record_identity(self, migration_id: str, src_app: str, dst_app: str,
                        old: NodeId, new: NodeId, key_attr: str, old_key, new_key):
        self.meta.record_attribute_changes(
            [
                AttributeChangeRow(
                    migration_id=migration_id,
                    from_app=src_app,
                    to_app=dst_app,
                    old_node=old,
                    new_node=new,
                    attribute=key_attr,
                    old_value=old_key,
                    new_value=new_key,
                )
            ]
        )

    # -- re-linking -----------------------------------------------------------

    def relink(self, dst: AppBundle, old_node: NodeId, new_node: DataNode,
               migration_id: str, node_map=None) -> list[tuple]:
        """Fix the reference attributes of a freshly inserted destination node.

        Each recorded reference is rewritten to the referent's new identity
        when the referent already lives at the destination, left alone when
        the raw value already resolves there, and replaced by a placeholder
        otherwise. `node_map` translates source attributes to destination
        ones; None means a same-schema re-insert. Returns (cell, old_value,
        placeholder) triples for the rollback log.
        """
        undo = []
        for ref in self.meta.references_from(old_node):
            cell = self._dest_cell(dst, new_node, ref, node_map)
            if cell is None:
                continue
            table, key, attr, edge = cell
            current = new_node.rows[table].get(attr)
            if current is None or is_placeholder(current):
                continue
            target = self._find_at(dst, ref.to_node, edge)
            if target is not None:
                if target != current:
                    old = dst.store.update(table, key, attr, target)
                    new_node.rows[table][attr] = target
                    undo.append(((dst.app_id, table, key, attr), old, None))
                    self.meta.record_attribute_changes(
                        [
                            AttributeChangeRow(
                                migration_id=migration_id,
                                from_app=ref.app_id,
                                to_app=dst.app_id,
                                old_node=old_node,
                                new_node=new_node.node_id,
                                attribute=f"{table}.{attr}",
                                old_value=current,
                                new_value=target,
                            )
                        ]
                    )
            else:
                kind = "absent_user" if edge.parent_type == dst.dag.root_type else "remote_data"
                info = PlaceholderInfo(kind=kind, origin=ref.to_node, origin_attr=ref.to_attr)
                old = dst.store.update(table, key, attr, PLACEHOLDER)
                new_node.rows[table][attr] = PLACEHOLDER
                self.meta.placeholder_set(dst.app_id, table, key, attr, info)
                undo.append(((dst.app_id, table, key, attr), old, info))
        return undo

    def _dest_cell(self, dst: AppBundle, new_node: DataNode, ref: ReferenceRow, node_map):
        """Locate the destination cell carrying this reference."""
        if node_map is None:
            dst_ref = ref.from_attr
        else:
            am = node_map.map_for_source(ref.from_attr)
            if am is None:
                return None
            dst_ref = am.dst
        table, attr = dst_ref.split(".", 1)
        if table not in new_node.rows or attr not in new_node.rows[table]:
            return None
        edge = _edge_for_cell(dst, table, attr)
        if edge is None:
            return None
        idx = list(new_node.rows).index(table)
        return table, new_node.node_id.keys[idx], attr, edge

    def _find_at(self, dst: AppBundle, referent: NodeId, edge):
        """Key value for the referent at the destination, if it lives there."""
        for candidate in sorted(self.meta.lineage(referent), key=lambda c: c.ref()):
            if candidate.app_id != dst.app_id:
                continue
            if candidate.type_name != edge.parent_type:
                continue
            if dst.node_exists(candidate):
                pidx = list(dst.dag.node_type(edge.parent_type).member_tables).index(edge.parent_table)
                return candidate.keys[pidx]
        return None

    def resolve_on_arrival(self, dst: AppBundle, arrived: DataNode,
                           migration_id: str) -> list[tuple]:
        """Rewrite placeholders waiting on any identity of the arrived node.

        Idempotent: each resolved cell's side row is consumed; calling again
        finds nothing to do.
        """
        undo = []
        lineage = self.meta.lineage(arrived.node_id)
        for app_id, table, key, attr, info in self.meta.placeholders_for_origin(lineage):
            if app_id != dst.app_id:
                continue
            if not dst.store.exists(table, key):
                continue
            edge = _edge_for_cell(dst, table, attr)
            if edge is None or edge.parent_type != arrived.type_name:
                continue
            pidx = list(dst.dag.node_type(arrived.type_name).member_tables).index(edge.parent_table)
            new_value = arrived.node_id.keys[pidx]
            old = dst.store.update(table, key, attr, new_value)
            removed = self.meta.placeholder_pop(app_id, table, key, attr)
            undo.append(((app_id, table, key, attr), old, removed))
        return undo

    # -- queries ---------------------------------------------------------------

    def ownership_of_migrated(self, node_id: NodeId) -> NodeId:
        """Original owner of a migrated node, even if the owner never moved."""
        origin = self.meta.oldest_identity(node_id)
        for ref in self.meta.references_from(origin):
            if ref.kind == OWNERSHIP:
                return ref.to_node
        for ident in sorted(self.meta.lineage(node_id), key=lambda c: c.ref()):
            for ref in self.meta.references_from(ident):
                if ref.kind == OWNERSHIP:
                    return ref.to_node
        raise NotTracked(f"{node_id.ref()} has no recorded ownership relationship")

    def normalize_value(self, dst: AppBundle, table: str, attr: str, value, key):
        """Map a reference value back to its earliest recorded identity.

        Placeholders normalize to the original remote key they stand for;
        live references normalize through the identity history. Used by
        round-trip comparisons, not by the migration path itself.
        """
        edge = _edge_for_cell(dst, table, attr)
        if edge is None:
            return value
        if is_placeholder(value):
            info = self.meta.placeholder_get(dst.app_id, table, key, attr)
            if info is None:
                return value
            origin = self.meta.oldest_identity(info.origin)
            return origin.keys[0]
        referent = NodeId(dst.app_id, edge.parent_type, (value,))
        return self.meta.oldest_identity(referent).keys[0]


def _edge_for_cell(dst: AppBundle, table: str, attr: str):
    for edges in (dst.dag.dependency_edges, dst.dag.ownership_edges, dst.dag.sharing_edges):
        for edge in edges:
            if edge.child_table == table and edge.child_attr == attr:
                return edge
    return None

"""The migration controller.

Deletion migration walks a user's portion of the source DAG children
first, parks data that would be left dangling in its owner's bag, moves
everything the user owns or was granted, and deletes the user's root
last. Independent migration copies the same data without touching the
source. Every step is journaled in a write-ahead log with enough
pre-image to roll the whole migration back to its starting snapshot.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from transplant.errors import (
    InjectedCrash,
    MigrationAborted,
    NotFound,
    SpecError,
)
from transplant.mapping import SchemaMapping, apply_chain
from transplant.model import (
    DEPENDENCY,
    OWNERSHIP,
    PLACEHOLDER,
    SHARING,
    DataNode,
    NodeId,
    deletion_order,
    is_placeholder,
)
from transplant.store import (
    FLAG_MIGRATED,
    FLAG_MIGRATION,
    AppBundle,
    BagEntry,
    MetadataStore,
    PlaceholderInfo,
)
from transplant.tracker import Tracker
from transplant.validate import Validator

NEWID_RETRY_LIMIT = 8


@dataclass
class NodeTimeline:
    src_invisible: int | None = None
    dest_arrival: int | None = None
    displayed: int | None = None
    bagged: str | None = None


@dataclass
class MigrationReport:
    migration_id: str
    user: str
    migration_type: str
    src_app: str
    dst_app: str
    system: str = "engine"  # engine | naive | naive_plus
    outcome: str = "running"
    counts: dict = field(default_factory=dict)
    timeline: dict = field(default_factory=dict)  # origin ref -> NodeTimeline
    events: list = field(default_factory=list)  # (kind, ref, virtual time)
    merge_conflicts: list = field(default_factory=list)
    started_at: int = 0
    committed_at: int | None = None
    finished_at: int | None = None
    migration_cost: int = 0
    validation_cost: int = 0
    src_nodes: int = 0
    src_edges: int = 0
    dst_nodes: int = 0
    dst_edges: int = 0
    user_dest_root: str | None = None
    clock = None  # set by the engine; not serialized

    def bump(self, key: str, by: int = 1):
        self.counts[key] = self.counts.get(key, 0) + by

    def _now(self) -> int:
        return self.clock.now if self.clock is not None else 0

    def slot(self, origin_ref: str) -> NodeTimeline:
        return self.timeline.setdefault(origin_ref, NodeTimeline())

    def note_event(self, kind: str, ref: str):
        self.events.append((kind, ref, self._now()))

    def note_display(self, meta: MetadataStore, node_id: NodeId):
        origin = meta.oldest_identity(node_id).ref()
        slot = self.slot(origin)
        if slot.displayed is None:
            slot.displayed = self._now()
        self.note_event("display", origin)

    def note_bagged(self, meta: MetadataStore, node_id: NodeId, reason: str):
        origin = meta.oldest_identity(node_id).ref()
        self.slot(origin).bagged = reason
        self.bump(f"bagged_{reason}")
        self.note_event("bag", origin)

    def to_dict(self) -> dict:
        return {
            "migration_id": self.migration_id,
            "user": self.user,
            "migration_type": self.migration_type,
            "src_app": self.src_app,
            "dst_app": self.dst_app,
            "system": self.system,
            "outcome": self.outcome,
            "counts": dict(self.counts),
            "timeline": {
                ref: [t.src_invisible, t.dest_arrival, t.displayed, t.bagged]
                for ref, t in self.timeline.items()
            },
            "events": list(self.events),
            "started_at": self.started_at,
            "committed_at": self.committed_at,
            "finished_at": self.finished_at,
            "migration_cost": self.migration_cost,
            "validation_cost": self.validation_cost,
            "src_nodes": self.src_nodes,
            "src_edges": self.src_edges,
            "dst_nodes": self.dst_nodes,
            "dst_edges": self.dst_edges,
            "user_dest_root": self.user_dest_root,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MigrationReport":
        report = cls(
            migration_id=data["migration_id"],
            user=data["user"],
            migration_type=data["migration_type"],
            src_app=data["src_app"],
            dst_app=data["dst_app"],
            system=data.get("system", "engine"),
            outcome=data["outcome"],
        )
        report.counts = dict(data["counts"])
        for ref, (a, b, c, d) in data["timeline"].items():
            report.timeline[ref] = NodeTimeline(a, b, c, d)
        report.events = [tuple(e) for e in data["events"]]
        report.started_at = data["started_at"]
        report.committed_at = data["committed_at"]
        report.finished_at = data["finished_at"]
        report.migration_cost = data["migration_cost"]
        report.validation_cost = data["validation_cost"]
        report.src_nodes = data["src_nodes"]
        report.src_edges = data["src_edges"]
        report.dst_nodes = data["dst_nodes"]
        report.dst_edges = data["dst_edges"]
        report.user_dest_root = data["user_dest_root"]
        return report


@dataclass
class _RunState:
    lease: object
    migration_id: str
    root_id: NodeId
    user_oldest: NodeId
    migration_type: str
    cutoff: int | None
    report: MigrationReport
    validator: Validator
    live: dict = field(default_factory=dict)  # NodeId -> DataNode, source view
    candidates: dict = field(default_factory=dict)
    new_root: NodeId | None = None
    bag_order_seed: int | None = None


class MigrationEngine:
    """Runs migrations of one user at a time between two applications."""

    def __init__(
        self,
        src: AppBundle,
        dst: AppBundle,
        meta: MetadataStore,
        mapping: SchemaMapping,
        mappings: dict | None = None,
        seed: int = 0,
        workers: int = 1,
        validate_inline: bool = True,
        picker=None,
    ):
        if mapping.from_app != src.app_id or mapping.to_app != dst.app_id:
            raise SpecError(
                f"mapping {mapping.from_app}->{mapping.to_app} does not connect "
                f"{src.app_id}->{dst.app_id}"
            )
        self.src = src
        self.dst = dst
        self.meta = meta
        self.mapping = mapping
        self.mappings = dict(mappings or {})
        self.mappings[(mapping.from_app, mapping.to_app)] = mapping
        self.tracker = Tracker(meta)
        self.seed = seed
        self.workers = max(1, workers)
        self.validate_inline = validate_inline
        self.picker = picker
        self.clock = src.store.clock or dst.store.clock

    # ------------------------------------------------------------------ entry

    def migrate_user(
        self,
        root_key,
        migration_type: str,
        cutoff: int | None = None,
        fault_plan=None,
        bag_order_seed: int | None = None,
    ) -> MigrationReport:
        root_id = self.src.node_id_for(self.src.dag.root_type, root_key)
        user_oldest = self.meta.oldest_identity(root_id)
        lease = self.meta.acquire_lease(user_oldest.ref(), migration_type)
        mid = lease.migration_id

        report = MigrationReport(
            migration_id=mid,
            user=user_oldest.ref(),
            migration_type=migration_type,
            src_app=self.src.app_id,
            dst_app=self.dst.app_id,
        )
        report.clock = self.clock
        report.started_at = self._now()

        validator = Validator(
            self.dst, self.meta, mid, seed=self.seed, report=report, picker=self.picker
        )
        state = _RunState(
            lease=lease,
            migration_id=mid,
            root_id=root_id,
            user_oldest=user_oldest,
            migration_type=migration_type,
            cutoff=cutoff,
            report=report,
            validator=validator,
            bag_order_seed=bag_order_seed,
        )

        val_meter_start = self.clock.meter_total("validation") if self.clock else 0
        self.meta.fault_plan = fault_plan
        self.src.store.guard = fault_plan
        self.dst.store.guard = fault_plan
        try:
            if migration_type == "deletion":
                self._run_deletion(state)
            elif migration_type == "independent":
                self._run_independent(state)
            else:
                raise SpecError(f"unknown migration type '{migration_type}'")

            if self.validate_inline:
                validator.sweep()
            self.meta.wal_append(mid, "commit", {})
            self.meta.seal_lease(lease, "committed")
            report.committed_at = self._now()
            report.migration_cost = report.committed_at - report.started_at
            displayed, _bagged = validator.finish()
            report.bump("displayed_total", len(validator.displayed))
            report.outcome = "committed"
        except InjectedCrash:
            self._clear_guards()
            self.recover(state)
        except MigrationAborted:
            self._clear_guards()
            self.rollback(state)
        finally:
            self._clear_guards()

        if self.clock is not None:
            report.validation_cost = self.clock.meter_total("validation") - val_meter_start
        report.finished_at = self._now()
        return report

    def _now(self) -> int:
        return self.clock.now if self.clock is not None else 0

    def _clear_guards(self):
        self.meta.fault_plan = None
        self.src.store.guard = None
        self.dst.store.guard = None

    # ------------------------------------------------------------ deletion run

    def _run_deletion(self, st: _RunState):
        st.candidates = self._collect_candidates(st)
        closure = self._dependents_closure(st, st.candidates)
        st.live = closure
        self._count_source_shape(st, closure)
        # non-candidates in the walk are other users' data: record why skipped
        for nid, node in closure.items():
            if nid in st.candidates or nid == st.root_id:
                continue
            verdict = self.can_migrate(node, st.user_oldest, st.migration_type)
            if verdict == "skip_not_shared":
                st.report.bump("skipped_not_shared")
            elif verdict == "skip_wrong_type":
                st.report.bump("skipped_wrong_type")

        if self.clock is not None:
            self.clock.advance(len(closure) + st.src_edges)  # plan construction

        plan = deletion_order(self.src.dag, closure.values(), migrate=st.candidates.values())
        steps = [s for s in plan if s.action == "migrate"]

        self._copy_root(st)
        if self.workers == 1:
            for step in steps:
                self._migrate_step(st, step.node_id)
        else:
            self._run_steps_parallel(st, steps)
        self._bag_phase2(st)
        self._delete_root(st)

    def _run_independent(self, st: _RunState):
        st.candidates = self._collect_candidates(st)
        st.live = dict(st.candidates)
        self._count_source_shape(st, st.candidates)
        self._copy_root(st)
        by_type: dict[str, list] = {}
        for nid in sorted(st.candidates, key=lambda n: (n.type_name, str(n.keys))):
            if nid == st.root_id:
                continue
            node = st.candidates[nid]
            if FLAG_MIGRATED in node.flags:
                st.report.bump("skipped_marked")
                continue
            by_type.setdefault(node.type_name, []).append(node)
        for type_name in sorted(by_type):
            group = by_type[type_name]
            nm = self.mapping.node_map(type_name)
            if nm is None:
                self._bag_batch(st, group)
                continue
            self._transfer_batch(st, group, nm)
        self._bag_phase2(st)

    # --------------------------------------------------------------- planning

    def _collect_candidates(self, st: _RunState) -> dict:
        """The user's migratable nodes: everything owned plus granted shares."""
        out: dict[NodeId, DataNode] = {}
        root_node = self.src.assemble(st.root_id)
        out[st.root_id] = root_node

        def add_owned(root_ident: NodeId, grant=None):
            root_key = root_ident.keys[0]
            for nt in self.src.dag.node_types:
                if nt.type_name == self.src.dag.root_type:
                    continue
                edges = self.src.dag.edges_from(nt.type_name, OWNERSHIP)
                if not edges:
                    continue
                edge = edges[0]
                if edge.child_table != nt.member_tables[0]:
                    raise SpecError(
                        f"ownership attribute of '{nt.type_name}' must live in its "
                        "first member table"
                    )
                keys = sorted(
                    self.src.store.lookup(edge.child_table, edge.child_attr, root_key), key=str
                )
                for node in self.src.assemble_many(nt.type_name, keys):
                    if node.node_id in out:
                        continue
                    if not self._within_cutoff(st, node):
                        continue
                    if grant is not None and not grant.covers(node):
                        continue
                    out[node.node_id] = node

        add_owned(st.root_id)

        user_refs = {i.ref() for i in self.meta.lineage(st.root_id)}
        for grant in self.meta.grants:
            if grant.grantee.ref() not in user_refs:
                if self.meta.oldest_identity(grant.grantee) != st.user_oldest:
                    continue
            if st.migration_type not in grant.allowed_types:
                continue
            grantor_local = self._identity_at(grant.grantor, self.src)
            if grantor_local is None:
                continue
            add_owned(grantor_local, grant=grant)
        return out

    def _within_cutoff(self, st: _RunState, node: DataNode) -> bool:
        if st.cutoff is None:
            return True
        created = None
        for row in node.rows.values():
            if "created_at" in row:
                created = row["created_at"]
                break
        return created is None or created <= st.cutoff

    def _identity_at(self, node_id: NodeId, bundle: AppBundle) -> NodeId | None:
        for ident in sorted(self.meta.lineage(node_id), key=lambda c: c.ref()):
            if ident.app_id == bundle.app_id and bundle.node_exists(ident):
                return ident
        return None

    def _dependents_closure(self, st: _RunState, seed_nodes: dict) -> dict:
        """Seed nodes plus everything transitively depending on them."""
        live = dict(seed_nodes)
        frontier = list(seed_nodes.values())
        while frontier:
            node = frontier.pop()
            for child in self._direct_dependents(node):
                if child.node_id not in live:
                    live[child.node_id] = child
                    frontier.append(child)
        return live

    def _direct_dependents(self, node: DataNode) -> list[DataNode]:
        out = []
        dag = self.src.dag
        for edge in dag.dependency_edges:
            if edge.parent_type != node.type_name:
                continue
            if edge.parent_table not in node.rows:
                continue
            parent_value = node.rows[edge.parent_table].get(edge.parent_attr)
            if parent_value is None:
                continue
            for key in sorted(self.src.store.lookup(edge.child_table, edge.child_attr, parent_value), key=str):
                child_first = self.src.dag.node_type(edge.child_type).member_tables[0]
                if edge.child_table != child_first:
                    continue
                nid = self.src.node_id_for(edge.child_type, key)
                if nid != node.node_id:
                    out.append(self.src.assemble(nid))
        return out

    def _count_source_shape(self, st: _RunState, nodes: dict):
        st.src_nodes = len(nodes)
        edges = 0
        for node in nodes.values():
            for kind in (DEPENDENCY, OWNERSHIP, SHARING):
                for edge in self.src.dag.edges_from(node.type_name, kind):
                    value = node.rows.get(edge.child_table, {}).get(edge.child_attr)
                    if value is not None and not is_placeholder(value):
                        edges += 1
        st.src_edges = edges
        st.report.src_nodes = st.src_nodes
        st.report.src_edges = st.src_edges

    # ------------------------------------------------------------ permissions

    def can_migrate(self, node: DataNode, user_oldest: NodeId, migration_type: str) -> str:
        """yes | skip_not_shared | skip_wrong_type, per ownership and grants."""
        owner = node.owner
        if owner is not None and self.meta.oldest_identity(owner) == user_oldest:
            return "yes"
        if owner is None:
            return "skip_not_shared"
        grantor_refs = {i.ref() for i in self.meta.lineage(owner)}
        wrong_type = False
        for grant in self.meta.grants_by_grantor(grantor_refs):
            if self.meta.oldest_identity(grant.grantee) != user_oldest:
                continue
            if not grant.covers(node):
                continue
            if migration_type in grant.allowed_types:
                return "yes"
            wrong_type = True
        return "skip_wrong_type" if wrong_type else "skip_not_shared"

    # -------------------------------------------------------------- steps

    def _copy_root(self, st: _RunState):
        node = st.candidates[st.root_id]
        nm = self.mapping.node_map(node.type_name)
        if nm is None:
            raise MigrationAborted(
                f"mapping {self.mapping.from_app}->{self.mapping.to_app} cannot "
                "translate the root node type"
            )
        if st.migration_type == "independent" and FLAG_MIGRATED in node.flags:
            existing = self._identity_at(st.root_id, self.dst)
            if existing is not None:
                st.new_root = existing
                st.validator.user_root = existing
                st.report.user_dest_root = existing.ref()
                return
        new_node = self._transfer_node(
            st, node, nm, delete_source=False,
            mark_source=st.migration_type == "independent", wal_kind="copy_root"
        )
        st.new_root = new_node.node_id
        st.validator.user_root = new_node.node_id
        st.report.user_dest_root = new_node.node_id.ref()

    def _migrate_step(self, st: _RunState, node_id: NodeId):
        node = st.live.get(node_id)
        if node is None or not self.src.node_exists(node_id):
            st.report.bump("skipped_gone")
            return
        # deletion moves one node at a time: claim it so workers never collide
        self.meta.claim_step(st.migration_id, node_id.ref())
        doomed = self._sole_dependents_live(st, node)
        removal_batch = {node_id} | {d.node_id for d in doomed}
        for victim in sorted(doomed, key=lambda n: str(n.node_id)):
            self._bag_whole_node(st, victim, reason="dangling_source", batch=removal_batch)
        nm = self.mapping.node_map(node.type_name)
        if nm is None:
            self._bag_whole_node(st, node, reason="no_mapping", batch=removal_batch)
            return
        self._transfer_node(st, node, nm, delete_source=True, mark_source=False,
                            batch=removal_batch)

    def _sole_dependents_live(self, st: _RunState, node: DataNode) -> list[DataNode]:
        """Live nodes whose every remaining dependency parent collapses with
        `node`: queried against the store, transitively closed."""
        candidates: dict[NodeId, DataNode] = {}
        frontier = [node]
        while frontier:
            current = frontier.pop()
            for child in self._direct_dependents(current):
                if child.node_id == node.node_id or child.node_id in candidates:
                    continue
                candidates[child.node_id] = child
                frontier.append(child)

        doomed = {node.node_id}
        changed = True
        while changed:
            changed = False
            for nid, cand in candidates.items():
                if nid in doomed:
                    continue
                present_parents = self._present_parents(cand)
                if present_parents and all(p in doomed for p in present_parents):
                    doomed.add(nid)
                    changed = True
        doomed.discard(node.node_id)
        return [candidates[nid] for nid in sorted(doomed, key=str)]

    def _present_parents(self, node: DataNode) -> list[NodeId]:
        out = []
        for edge in self.src.dag.edges_from(node.type_name, DEPENDENCY):
            value = node.rows.get(edge.child_table, {}).get(edge.child_attr)
            if value is None or is_placeholder(value):
                continue
            if self.src.store.exists(edge.parent_table, value):
                out.append(NodeId(self.src.app_id, edge.parent_type, (value,)))
        return out

    # ----------------------------------------------------- node-level actions

    def _bag_whole_node(self, st: _RunState, node: DataNode,
                        reason: str = "no_mapping", batch: set | None = None,
                        copy_only: bool = False):
        """Move an entire node into its owner's bag (removing it from the
        source unless copy_only, used by independent migration)."""
        owner = node.owner or st.root_id
        owner = self.meta.oldest_identity(owner)
        self.tracker.record_pre_migration(st.migration_id, self.src, node)

        partial_cells = [] if copy_only else self._partial_dependent_cells(
            st, node, batch or {node.node_id}
        )
        src_pre = self._node_pre_image(self.src, node)
        own_cells = self._own_placeholder_cells(self.src, node)
        already_bagged = self.meta.bag_find_origin([node.node_id]) is not None
        entry = BagEntry(
            owner=owner,
            origin_app=self.src.app_id,
            origin=node.node_id,
            node_type=node.type_name,
            rows={t: dict(r) for t, r in node.rows.items()},
            reason=reason,
            placeholders={},
            bagged_at=self._now(),
        )
        payload = {
            "node": node.node_id,
            "src_rows": src_pre if not copy_only else {},
            "entry": entry if not already_bagged else None,
            "partial_cells": partial_cells,
            "own_cells": own_cells if not copy_only else [],
            "rows": [f"{t}" for t in node.rows],
        }
        self.meta.wal_append(st.migration_id, "bag_put", payload)

        if not copy_only:
            for table, key, attr, _old, info in own_cells:
                popped = self.meta.placeholder_pop(self.src.app_id, table, key, attr)
                if popped is not None:
                    entry.placeholders[f"{table}.{attr}"] = popped
            self._apply_partial_cells(partial_cells)
            nt = self.src.dag.node_type(node.type_name)
            for table, key in zip(nt.member_tables, node.node_id.keys):
                try:
                    self.src.store.delete(table, key)
                except NotFound:
                    pass
            st.live.pop(node.node_id, None)
            st.report.slot(self.meta.oldest_identity(node.node_id).ref()).src_invisible = self._now()
        self.meta.bag_put(entry)
        st.report.note_bagged(self.meta, node.node_id, reason)

    def _bag_batch(self, st: _RunState, group: list):
        """Copy a whole unmappable type into bags as one journaled batch.

        Used by independent migration, which leaves the source untouched;
        deletion bags node by node as the ordered walk reaches them.
        """
        entries = []
        for node in group:
            owner = self.meta.oldest_identity(node.owner or st.root_id)
            if self.meta.bag_find_origin([node.node_id]) is not None:
                st.report.bump("bagged_no_mapping_repeat")
                continue
            entries.append(
                BagEntry(
                    owner=owner,
                    origin_app=self.src.app_id,
                    origin=node.node_id,
                    node_type=node.type_name,
                    rows={t: dict(r) for t, r in node.rows.items()},
                    reason="no_mapping",
                    bagged_at=self._now(),
                )
            )
        if not entries:
            return
        payload = {
            "batch": [{"entry": e, "rows": list(e.rows)} for e in entries],
            "rows": [t for e in entries for t in e.rows],
        }
        self.meta.wal_append(st.migration_id, "bag_put", payload)
        new_origins = set()
        for entry in entries:
            self.meta.bag_put(entry)
            new_origins.add(entry.origin)
        for node in group:
            self.tracker.record_pre_migration(st.migration_id, self.src, node)
            if node.node_id in new_origins:
                st.report.note_bagged(self.meta, node.node_id, "no_mapping")

    def _partial_dependent_cells(self, st: _RunState, node: DataNode, batch: set) -> list:
        """Cells of surviving nodes that reference a node being removed.

        These references would dangle; they become placeholders so the
        surviving rows stay coherent and re-linkable.
        """
        cells = []
        for child in self._direct_dependents(node):
            if child.node_id in batch:
                continue
            for edge in self.src.dag.edges_from(child.type_name, DEPENDENCY):
                if edge.parent_type != node.type_name:
                    continue
                value = child.rows.get(edge.child_table, {}).get(edge.child_attr)
                if value is None or is_placeholder(value):
                    continue
                idx = list(node.rows).index(edge.parent_table) if edge.parent_table in node.rows else 0
                if value != node.node_id.keys[idx]:
                    continue
                child_key = child.node_id.keys[
                    list(child.rows).index(edge.child_table)
                ]
                info_origin = node.node_id
                cells.append(
                    (
                        edge.child_table,
                        child_key,
                        edge.child_attr,
                        value,
                        (node.type_name, info_origin, f"{edge.parent_table}.{edge.parent_attr}"),
                    )
                )
        # sharing references to a departing root are placeholdered the same way
        if node.type_name == self.src.dag.root_type:
            for edge in self.src.dag.sharing_edges + self.src.dag.ownership_edges:
                for key in sorted(
                    self.src.store.lookup(edge.child_table, edge.child_attr, node.node_id.keys[0]),
                    key=str,
                ):
                    child_first = self.src.dag.node_type(edge.child_type).member_tables[0]
                    if edge.child_table != child_first:
                        continue
                    nid = self.src.node_id_for(edge.child_type, key)
                    if nid in batch or not self.src.node_exists(nid):
                        continue
                    cells.append(
                        (
                            edge.child_table,
                            key,
                            edge.child_attr,
                            node.node_id.keys[0],
                            (node.type_name, node.node_id, f"{edge.parent_table}.{edge.parent_attr}"),
                        )
                    )
        return cells

    def _apply_partial_cells(self, cells):
        from transplant.store import PlaceholderInfo

        for table, key, attr, _old, (ptype, origin, origin_attr) in cells:
            if not self.src.store.exists(table, key):
                continue
            kind = "absent_user" if ptype == self.src.dag.root_type else "remote_data"
            self.src.store.update(table, key, attr, PLACEHOLDER)
            self.meta.placeholder_set(
                self.src.app_id, table, key, attr,
                PlaceholderInfo(kind=kind, origin=origin, origin_attr=origin_attr),
            )

    def _node_pre_image(self, bundle: AppBundle, node: DataNode) -> dict:
        nt = bundle.dag.node_type(node.type_name)
        pre = {}
        for table, key in zip(nt.member_tables, node.node_id.keys):
            row = dict(bundle.store.read(table, key))
            flags = bundle.store.flags(table, key)
            pre[table] = (key, row, flags)
        return pre

    def _own_placeholder_cells(self, bundle: AppBundle, node: DataNode) -> list:
        cells = []
        nt = bundle.dag.node_type(node.type_name)
        for table, key in zip(nt.member_tables, node.node_id.keys):
            for attr, value in node.rows[table].items():
                if is_placeholder(value):
                    info = self.meta.placeholder_get(bundle.app_id, table, key, attr)
                    cells.append((table, key, attr, value, info))
        return cells

    def _prepare_transfer(self, st: _RunState, node: DataNode, nm,
                          delete_source: bool, mark_source: bool,
                          batch: set | None = None,
                          from_bag_entry: BagEntry | None = None) -> dict:
        """Assemble one node's transfer: destination rows, bag entries, and
        every pre-image the journal record needs before any mutation runs."""
        src_app_id = from_bag_entry.origin_app if from_bag_entry else self.src.app_id
        dest_rows, _id_map, leftover = self._apply_node_map(node, nm)
        new_node_id = self._dest_node_id(nm.to_node, dest_rows)

        # phase-1 bag merge: leftovers parked earlier for this very node
        merged_entry = None
        if from_bag_entry is None:
            candidate = self.meta.bag_find_origin(self.meta.lineage(node.node_id))
            if (
                candidate is not None
                and candidate.partial
                and candidate.origin_app == self.dst.app_id
            ):
                merged_entry = candidate
                self._merge_bag_values(st, dest_rows, merged_entry)

        leftover_entry = None
        if leftover:
            leftover_entry = BagEntry(
                owner=from_bag_entry.owner if from_bag_entry else st.user_oldest,
                origin_app=src_app_id,
                origin=node.node_id,
                node_type=node.type_name,
                rows=leftover,
                reason="no_mapping",
                partial=True,
                bagged_at=self._now(),
            )

        partial_cells = (
            self._partial_dependent_cells(st, node, batch or {node.node_id})
            if delete_source
            else []
        )
        src_pre = self._node_pre_image(self.src, node) if delete_source else {}
        own_cells = (
            self._own_placeholder_cells(self.src, node)
            if (delete_source and from_bag_entry is None)
            else []
        )
        # cells elsewhere waiting on this node's identity resolve once it lands
        resolved_cells = [
            cell
            for cell in self.meta.placeholders_for_origin(self.meta.lineage(node.node_id))
            if cell[0] == self.dst.app_id
        ]

        marks = []
        if mark_source:
            nt_src = self.src.dag.node_type(node.type_name)
            marks = list(zip(nt_src.member_tables, node.node_id.keys))

        return {
            "node": node.node_id,
            "new_node": new_node_id,
            "src_rows": src_pre,
            "delete_source": delete_source,
            "dst_rows": {t: (k, dict(r)) for t, (k, r) in dest_rows.items()},
            "leftover": leftover_entry,
            "merged": merged_entry,
            "consumed_entry": from_bag_entry,
            "partial_cells": partial_cells,
            "own_cells": own_cells,
            "resolved_cells": resolved_cells,
            "marks": marks,
            "rows": list(dest_rows),
            "_node_obj": node,
            "_nm": nm,
        }

    def _apply_transfer(self, st: _RunState, prep: dict, batched: bool = False) -> DataNode:
        """Run the store mutations a prepared transfer's record covers."""
        node: DataNode = prep["_node_obj"]
        nm = prep["_nm"]
        new_node_id: NodeId = prep["new_node"]
        merged_entry = prep["merged"]
        from_bag_entry = prep["consumed_entry"]
        leftover_entry = prep["leftover"]
        delete_source = prep["delete_source"]
        src_app_id = from_bag_entry.origin_app if from_bag_entry else self.src.app_id

        if merged_entry is not None:
            self.meta.bag_take(merged_entry.owner.ref(), merged_entry.origin)
            st.report.bump("merged_entries")
        if from_bag_entry is not None:
            self.meta.bag_take(from_bag_entry.owner.ref(), from_bag_entry.origin)

        if from_bag_entry is None:
            self.tracker.record_pre_migration(st.migration_id, self.src, node)

        nt_dst = self.dst.dag.node_type(nm.to_node)
        for table in nt_dst.member_tables:
            key, row = prep["dst_rows"][table]
            self.dst.store.insert(
                table, key, row,
                flags={FLAG_MIGRATION: True, "displayable": False},
                batched=batched,
            )
        if self.clock is not None:
            self.clock.advance(node.size_units())

        new_node = DataNode(
            node_id=new_node_id,
            rows={t: dict(r) for t, (k, r) in prep["dst_rows"].items()},
            owner=None,
            flags={FLAG_MIGRATION},
        )

        # carry placeholder side rows across, then record the identity change
        self._carry_placeholders(st, node, new_node, nm, merged_entry, from_bag_entry)
        key_attr = f"{nt_dst.member_tables[0]}.{self.dst.schema.table(nt_dst.member_tables[0]).key}"
        self.tracker.record_identity(
            st.migration_id, src_app_id, self.dst.app_id,
            node.node_id, new_node_id, key_attr, node.node_id.keys[0], new_node_id.keys[0],
        )

        if delete_source:
            for table, key, attr, _v, _info in prep["own_cells"]:
                self.meta.placeholder_pop(self.src.app_id, table, key, attr)
            self._apply_partial_cells(prep["partial_cells"])
            nt_src = self.src.dag.node_type(node.type_name)
            for table, key in zip(nt_src.member_tables, node.node_id.keys):
                try:
                    self.src.store.delete(table, key)
                except NotFound:
                    pass
            st.report.slot(self.meta.oldest_identity(node.node_id).ref()).src_invisible = self._now()
        for table, key in prep["marks"]:
            self.src.store.set_flag(table, key, FLAG_MIGRATED, True)

        if leftover_entry is not None:
            self.meta.bag_put(leftover_entry)
            st.report.bump("bagged_leftover_attrs")

        self.tracker.relink(self.dst, node.node_id, new_node, st.migration_id, node_map=nm)
        self.tracker.resolve_on_arrival(self.dst, new_node, st.migration_id)

        st.live.pop(node.node_id, None)
        origin_ref = self.meta.oldest_identity(node.node_id).ref()
        slot = st.report.slot(origin_ref)
        slot.dest_arrival = self._now()
        if slot.src_invisible is None and delete_source:
            slot.src_invisible = slot.dest_arrival
        st.report.bump("migrated")
        st.report.note_event("arrive", origin_ref)
        st.report.dst_nodes += 1
        for kind in (DEPENDENCY, OWNERSHIP, SHARING):
            for edge in self.dst.dag.edges_from(new_node.type_name, kind):
                value = new_node.rows.get(edge.child_table, {}).get(edge.child_attr)
                if value is not None:
                    st.report.dst_edges += 1
        return new_node

    def _transfer_node(self, st: _RunState, node: DataNode, nm,
                       delete_source: bool, mark_source: bool,
                       wal_kind: str = "migrate_node", batch: set | None = None,
                       from_bag_entry: BagEntry | None = None) -> DataNode:
        """Move one node as its own journaled transaction."""
        prep = self._prepare_transfer(
            st, node, nm, delete_source, mark_source,
            batch=batch, from_bag_entry=from_bag_entry,
        )
        payload = {k: v for k, v in prep.items() if not k.startswith("_")}
        self.meta.wal_append(st.migration_id, wal_kind, payload)
        new_node = self._apply_transfer(st, prep)
        st.validator.note_arrival(new_node.node_id)
        if self.validate_inline:
            st.validator.sweep([new_node.node_id])
        return new_node

    def _transfer_batch(self, st: _RunState, group: list, nm):
        """Copy one node type in bulk: a single journaled transaction.

        Independent migration is free of ordering constraints, so whole
        types move as one batch; ids still regenerate per node and the
        tracker still records every identity.
        """
        preps = [
            self._prepare_transfer(st, node, nm, delete_source=False, mark_source=True)
            for node in group
        ]
        payload = {
            "batch": [{k: v for k, v in prep.items() if not k.startswith("_")} for prep in preps],
            "rows": [t for prep in preps for t in prep["dst_rows"]],
        }
        self.meta.wal_append(st.migration_id, "migrate_node", payload)
        arrivals = []
        for i, prep in enumerate(preps):
            new_node = self._apply_transfer(st, prep, batched=i > 0)
            arrivals.append(new_node.node_id)
            st.validator.note_arrival(new_node.node_id)
        if self.validate_inline and arrivals:
            st.validator.sweep(arrivals)

    def _merge_bag_values(self, st: _RunState, dest_rows: dict, entry: BagEntry):
        for table, row in entry.rows.items():
            if table not in dest_rows:
                continue
            _key, dest = dest_rows[table]
            for attr, value in row.items():
                if attr not in dest:
                    continue
                if dest[attr] is None:
                    dest[attr] = value
                elif dest[attr] != value:
                    # the live DAG value wins; keep the losing bag value visible
                    st.report.merge_conflicts.append(
                        {"cell": f"{table}.{attr}", "kept": dest[attr], "bag": value}
                    )

    def _carry_placeholders(self, st, node, new_node, nm, merged_entry, from_bag_entry):
        """Re-register side rows for placeholder cells that moved here."""
        sources = {}
        for table, row in node.rows.items():
            for attr, value in row.items():
                if not is_placeholder(value):
                    continue
                info = None
                if from_bag_entry is not None:
                    info = from_bag_entry.placeholders.get(f"{table}.{attr}")
                else:
                    idx = list(node.rows).index(table)
                    info = self.meta.placeholder_get(
                        node.node_id.app_id, table, node.node_id.keys[idx], attr
                    )
                if info is not None:
                    sources[f"{table}.{attr}"] = info
        if merged_entry is not None:
            sources.update(merged_entry.placeholders)

        for src_ref, info in sources.items():
            am = nm.map_for_source(src_ref)
            if am is None:
                continue
            table, attr = am.dst.split(".", 1)
            if not is_placeholder(new_node.rows.get(table, {}).get(attr)):
                continue
            idx = list(new_node.rows).index(table)
            self.meta.placeholder_set(
                self.dst.app_id, table, new_node.node_id.keys[idx], attr, info
            )

    def _apply_node_map(self, node: DataNode, nm):
        """Transform one node's rows into destination rows.

        Returns (dest_rows, id_map, leftover): dest_rows maps table ->
        (key, row); id_map maps old key values to regenerated ids; leftover
        holds source attributes no mapping entry covers.
        """
        nt_dst = self.dst.dag.node_type(nm.to_node)
        rows = {t: {a: None for a in self.dst.schema.table(t).attributes} for t in nt_dst.member_tables}
        id_map: dict = {}

        for am in nm.attributes:
            values = [node.attribute(ref) for ref in am.src]
            table, attr = am.dst.split(".", 1)
            if table not in rows:
                raise SpecError(f"node map targets table '{table}' outside '{nm.to_node}'")
            if any(is_placeholder(v) for v in values):
                rows[table][attr] = PLACEHOLDER
                continue
            if am.regenerates_id:
                source_value = values[0]
                if source_value is None:
                    continue
                if source_value not in id_map:
                    id_map[source_value] = self._fresh_id(nt_dst.member_tables)
                rows[table][attr] = id_map[source_value]
            else:
                rows[table][attr] = apply_chain(am.chain, values)

        dest_rows = {}
        for table in nt_dst.member_tables:
            key_attr = self.dst.schema.table(table).key
            key = rows[table][key_attr]
            if key is None:
                raise MigrationAborted(
                    f"node map {nm.from_node}->{nm.to_node} does not produce a key "
                    f"for table '{table}'"
                )
            dest_rows[table] = (key, rows[table])

        mapped_refs = set()
        for am in nm.attributes:
            mapped_refs.update(am.src)
        leftover: dict = {}
        for table, row in node.rows.items():
            for attr, value in row.items():
                ref = f"{table}.{attr}"
                if ref in mapped_refs or value is None or is_placeholder(value):
                    continue
                leftover.setdefault(table, {})[attr] = value
        return dest_rows, id_map, leftover

    def _fresh_id(self, member_tables) -> int:
        for _ in range(NEWID_RETRY_LIMIT):
            candidate = self.dst.store.next_id(member_tables[0])
            if not any(self.dst.store.exists(t, candidate) for t in member_tables):
                return candidate
        raise MigrationAborted(
            f"could not allocate a fresh id in {self.dst.app_id} after "
            f"{NEWID_RETRY_LIMIT} attempts"
        )

    def _dest_node_id(self, type_name: str, dest_rows: dict) -> NodeId:
        keys = tuple(dest_rows[t][0] for t in self.dst.dag.node_type(type_name).member_tables)
        return NodeId(self.dst.app_id, type_name, keys)

    # ------------------------------------------------------------- bag phases

    def _bag_phase2(self, st: _RunState):
        """Move the user's remaining migratable bag entries to the destination."""
        owner_refs = sorted({i.ref() for i in self.meta.lineage(st.root_id)} | {st.user_oldest.ref()})
        entries = [e for e in self.meta.bag_list(owner_refs) if not e.partial]
        if st.bag_order_seed is not None:
            import random

            random.Random(st.bag_order_seed).shuffle(entries)
        for entry in entries:
            nm = None
            if entry.origin_app == self.dst.app_id:
                nm = self._identity_node_map(entry.node_type)
            else:
                m = self.mappings.get((entry.origin_app, self.dst.app_id))
                if m is not None:
                    nm = m.node_map(entry.node_type)
            if nm is None:
                st.report.bump("bag_entries_unroutable")
                continue
            node = self._node_from_entry(entry)
            self._transfer_node(
                st, node, nm, delete_source=False, mark_source=False,
                from_bag_entry=entry,
            )
            st.report.bump("bag_entries_migrated")

    def _identity_node_map(self, type_name: str):
        from transplant.mapping import AttributeMap, NodeMap, Transform

        nt = self.dst.dag.node_type(type_name)
        attrs = []
        for table in nt.member_tables:
            spec = self.dst.schema.table(table)
            for attr in spec.attributes:
                ref = f"{table}.{attr}"
                chain = (Transform("newID"),) if attr == spec.key else (Transform("copy"),)
                attrs.append(AttributeMap(src=(ref,), dst=ref, chain=chain))
        return NodeMap(type_name, type_name, tuple(attrs))

    def _node_from_entry(self, entry: BagEntry) -> DataNode:
        return DataNode(
            node_id=entry.origin,
            rows={t: dict(r) for t, r in entry.rows.items()},
            owner=entry.owner,
            flags=set(),
        )

    # ----------------------------------------------------------------- root end

    def _delete_root(self, st: _RunState):
        node = self.src.assemble(st.root_id)
        doomed = {d.node_id: d for d in self._sole_dependents_live(st, node)}
        # data still owned by the departing root is orphaned outright; cutoff
        # leftovers land here, keyed by their owner for later re-integration
        for edge in self.src.dag.ownership_edges:
            nt_child = self.src.dag.node_type(edge.child_type)
            if edge.child_table != nt_child.member_tables[0]:
                continue
            for key in sorted(
                self.src.store.lookup(edge.child_table, edge.child_attr, st.root_id.keys[0]),
                key=str,
            ):
                nid = self.src.node_id_for(edge.child_type, key)
                if nid in doomed or not self.src.node_exists(nid):
                    continue
                owned = self.src.assemble(nid)
                doomed[nid] = owned
                for extra in self._sole_dependents_live(st, owned):
                    doomed.setdefault(extra.node_id, extra)
        removal_batch = {st.root_id} | set(doomed)
        for victim in sorted(doomed.values(), key=lambda n: str(n.node_id)):
            self._bag_whole_node(st, victim, reason="dangling_source", batch=removal_batch)

        partial_cells = self._partial_dependent_cells(st, node, removal_batch)
        src_pre = self._node_pre_image(self.src, node)
        payload = {
            "node": node.node_id,
            "src_rows": src_pre,
            "partial_cells": partial_cells,
            "own_cells": [],
            "rows": list(node.rows),
        }
        self.meta.wal_append(st.migration_id, "delete_node", payload)
        self._apply_partial_cells(partial_cells)
        nt = self.src.dag.node_type(node.type_name)
        for table, key in zip(nt.member_tables, node.node_id.keys):
            try:
                self.src.store.delete(table, key)
            except NotFound:
                pass
        st.report.slot(self.meta.oldest_identity(st.root_id).ref()).src_invisible = self._now()
        st.report.bump("deleted_root")

    # -------------------------------------------------------------- parallelism

    def _run_steps_parallel(self, st: _RunState, steps):
        order = {s.node_id: i for i, s in enumerate(steps)}
        done = set()
        claimed = set()
        lock = threading.Lock()
        failures: list[BaseException] = []

        prereqs: dict[NodeId, set] = {}
        for step in steps:
            node = st.live.get(step.node_id)
            preds = set()
            if node is not None:
                stack = [node]
                seen = set()
                while stack:
                    current = stack.pop()
                    for child in self._direct_dependents(current):
                        if child.node_id in seen:
                            continue
                        seen.add(child.node_id)
                        if child.node_id in order and order[child.node_id] < order[step.node_id]:
                            preds.add(child.node_id)
                        stack.append(child)
            prereqs[step.node_id] = preds

        def worker():
            while True:
                with lock:
                    if failures:
                        return
                    ready = None
                    for step in steps:
                        nid = step.node_id
                        if nid in done or nid in claimed:
                            continue
                        if prereqs[nid] <= done:
                            ready = nid
                            claimed.add(nid)
                            break
                    if ready is None:
                        if len(done) == len(steps):
                            return
                        ready = "wait"
                if ready == "wait":
                    continue
                try:
                    self._migrate_step(st, ready)
                except BaseException as exc:  # propagate to the coordinator
                    with lock:
                        failures.append(exc)
                    return
                with lock:
                    done.add(ready)

        threads = [threading.Thread(target=worker) for _ in range(self.workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if failures:
            raise failures[0]

    # ------------------------------------------------------------------ rollback

    def rollback(self, st_or_mid, fault_plan=None) -> str:
        """Undo an uncommitted migration; idempotent and resumable."""
        if isinstance(st_or_mid, _RunState):
            mid = st_or_mid.migration_id
            st = st_or_mid
        else:
            mid = st_or_mid
            st = None
        seal = self.meta.wal_seal_state(mid)
        if seal == "commit":
            raise SpecError(f"{mid} committed; rollback is impossible")

        for record in reversed(self.meta.wal_scan(mid)):
            if record.kind in ("commit", "abort"):
                continue
            if fault_plan is not None:
                fault_plan.on_undo_step()
            self._undo(record)

        self.meta.drop_migration_tracking(mid)
        if self.meta.wal_seal_state(mid) is None:
            self.meta.wal_append(mid, "abort", {})
        if st is not None:
            self.meta.seal_lease(st.lease, "aborted")
            st.report.outcome = "rolled_back"
        return "rolled_back"

    def recover(self, st: _RunState):
        """Post-crash recovery: finish a committed migration, undo the rest."""
        mid = st.migration_id
        if self.meta.wal_seal_state(mid) == "commit":
            pending = self._flagged_destination_nodes()
            validator = Validator(
                self.dst, self.meta, mid, seed=self.seed, report=st.report, picker=self.picker
            )
            validator.user_root = st.new_root
            for nid in pending:
                validator.note_arrival(nid)
            validator.finish()
            self.meta.seal_lease(st.lease, "committed")
            st.report.outcome = "committed"
        else:
            self.rollback(st)

    def _flagged_destination_nodes(self) -> list[NodeId]:
        out = []
        for nt in self.dst.dag.node_types:
            first = nt.member_tables[0]
            for key in self.dst.store.keys(first):
                if self.dst.store.flags(first, key).get(FLAG_MIGRATION, False):
                    out.append(self.dst.node_id_for(nt.type_name, key))
        return out

    def _undo(self, record):
        payload = record.payload
        if record.kind == "display_node":
            return  # re-hiding is subsumed by deleting the destination rows
        for sub in reversed(payload.get("batch", [])):
            self._undo_payload(sub)
        self._undo_payload(payload)

    def _undo_payload(self, payload):
        # remove destination rows
        for table, (key, _row) in payload.get("dst_rows", {}).items():
            self.meta.drop_placeholders_for_row(self.dst.app_id, table, key)
            try:
                self.dst.store.delete(table, key)
            except NotFound:
                pass
        # put back placeholders this record resolved on other rows
        for app_id, table, key, attr, info in payload.get("resolved_cells", []):
            if app_id == self.dst.app_id and self.dst.store.exists(table, key):
                current = self.dst.store.read(table, key).get(attr)
                if not is_placeholder(current):
                    self.dst.store.update(table, key, attr, PLACEHOLDER)
                self.meta.placeholder_set(app_id, table, key, attr, info)
        # restore source rows, flags, and their placeholder side rows
        for table, (key, row, flags) in payload.get("src_rows", {}).items():
            if not self.src.store.exists(table, key):
                self.src.store.insert(table, key, row, flags=flags)
            else:
                for attr, value in row.items():
                    current = self.src.store.read(table, key).get(attr)
                    if current != value:
                        self.src.store.update(table, key, attr, value)
                for flag, value in flags.items():
                    self.src.store.set_flag(table, key, flag, value)
        for table, key, attr, _value, info in payload.get("own_cells", []):
            if info is not None and self.src.store.exists(table, key):
                self.meta.placeholder_set(self.src.app_id, table, key, attr, info)
        # un-placeholder surviving dependents
        for table, key, attr, old_value, _info in payload.get("partial_cells", []):
            if self.src.store.exists(table, key):
                current = self.src.store.read(table, key).get(attr)
                if is_placeholder(current):
                    self.src.store.update(table, key, attr, old_value)
                self.meta.placeholder_pop(self.src.app_id, table, key, attr)
        # clear independent-migration marks
        for table, key in payload.get("marks", []):
            if self.src.store.exists(table, key):
                self.src.store.set_flag(table, key, FLAG_MIGRATED, False)
        # bag entries: drop what this record created, restore what it consumed
        entry = payload.get("entry")
        if entry is not None:
            try:
                self.meta.bag_take(entry.owner.ref(), entry.origin)
            except NotFound:
                pass
        leftover = payload.get("leftover")
        if leftover is not None:
            try:
                self.meta.bag_take(leftover.owner.ref(), leftover.origin)
            except NotFound:
                pass
        for consumed_key in ("merged", "consumed_entry"):
            consumed = payload.get(consumed_key)
            if consumed is not None:
                self.meta.bag_restore(consumed)

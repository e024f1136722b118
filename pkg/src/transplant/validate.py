"""Two-phase validation of migrated data at the destination application.

Migrated rows arrive carrying a migration flag that hides them from the
application. Phase one runs alongside the migration, admitting flagged
nodes whose display rules are satisfied (a node only after the nodes it
depends on, roots before owned data); it is event-driven: a node that
fails on an undisplayed parent waits on that parent and is re-checked
when the parent is admitted. Phase two runs once after commit: anything
whose requirements can no longer be met is removed and parked in its
owner's data bag.
"""

from __future__ import annotations

import random

from transplant.errors import NotTracked
from transplant.model import DEPENDENCY, DataNode, NodeId, is_placeholder
from transplant.store import FLAG_MIGRATION, AppBundle, BagEntry, MetadataStore
from transplant.tracker import Tracker


def is_displayable(node: DataNode, dst: AppBundle, user_root: NodeId | None) -> bool:
    """Would displaying this node respect the destination's semantics now?

    The migrating user's root is always displayable. Otherwise every
    non-exempt dependency parent must already be displayed, and the node
    needs a displayed owner root, or the migrating user's displayed root
    when the sharing relationship satisfies the rule.
    """
    ok, _blocker = _check_displayable(node, dst, user_root, None)
    return ok


def _check_displayable(node: DataNode, dst: AppBundle, user_root: NodeId | None, meta):
    """(displayable, blocker) - the blocker keys the waiter index.

    Blockers are either ("row", table, key) for a present-but-undisplayed
    parent, or ("origin", ref) for a parent that is still in another
    application (its cell holds a placeholder that resolves on arrival).
    """
    if user_root is not None and node.node_id == user_root:
        return True, None
    rule = dst.dag.display_rule(node.type_name)

    if rule.requires_parents_displayed:
        for edge in dst.dag.edges_from(node.type_name, DEPENDENCY):
            if edge.parent_type in rule.exceptions:
                continue
            value = node.rows.get(edge.child_table, {}).get(edge.child_attr)
            if value is None:
                continue
            if is_placeholder(value):
                return False, _origin_blocker(node, dst, edge, meta)
            if not dst.store.exists(edge.parent_table, value):
                # a raw reference ahead of its referent: wait on that row
                return False, ("row", edge.parent_table, value)
            if not dst.store.is_app_visible(edge.parent_table, value):
                return False, ("row", edge.parent_table, value)

    root_checks = []
    blocker = None
    if rule.requires_owner_root and node.type_name != dst.dag.root_type:
        shown, cell = _owner_displayed(node, dst, meta)
        root_checks.append(shown)
        blocker = blocker or cell
    if rule.requires_sharer_root and user_root is not None:
        shown = _node_displayed(dst, user_root)
        root_checks.append(shown)
        if not shown:
            nt = dst.dag.node_type(user_root.type_name)
            blocker = blocker or ("row", nt.member_tables[0], user_root.keys[0])
    if root_checks and not any(root_checks):
        return False, blocker
    return True, None


def _origin_blocker(node: DataNode, dst: AppBundle, edge, meta):
    if meta is None:
        return None
    idx = list(node.rows).index(edge.child_table)
    info = meta.placeholder_get(
        dst.app_id, edge.child_table, node.node_id.keys[idx], edge.child_attr
    )
    if info is None:
        return None
    return ("origin", meta.oldest_identity(info.origin).ref())


def _owner_displayed(node: DataNode, dst: AppBundle, meta=None):
    for edge in dst.dag.edges_from(node.type_name, "ownership"):
        value = node.rows.get(edge.child_table, {}).get(edge.child_attr)
        if value is None:
            return False, None
        if is_placeholder(value):
            return False, _origin_blocker(node, dst, edge, meta)
        if not dst.store.exists(edge.parent_table, value):
            return False, None
        if not dst.store.is_app_visible(edge.parent_table, value):
            return False, ("row", edge.parent_table, value)
        return True, None
    return False, None


def _node_displayed(dst: AppBundle, node_id: NodeId) -> bool:
    if not dst.node_exists(node_id):
        return False
    return dst.node_visible(node_id)


class Validator:
    """Admits migrated nodes for display; phase 1 continuous, phase 2 final."""

    def __init__(
        self,
        dst: AppBundle,
        meta: MetadataStore,
        migration_id: str,
        seed: int = 0,
        report=None,
        picker=None,
    ):
        self.dst = dst
        self.meta = meta
        self.tracker = Tracker(meta)
        self.migration_id = migration_id
        self.user_root: NodeId | None = None
        self.report = report
        self._rng = random.Random(seed)
        # picking policy over the eligible set; random by default
        self._picker = picker or (lambda eligible, rng: eligible[rng.randrange(len(eligible))])
        self._pending: dict[NodeId, bool] = {}
        self._waiters: dict[tuple, set] = {}  # blocker key -> waiting node ids
        self._rearmed: list[NodeId] = []
        self.displayed: list[NodeId] = []

    def note_arrival(self, node_id: NodeId):
        self._pending[node_id] = True
        # nodes that waited on this identity (their placeholder just resolved)
        for ident in self.meta.lineage(node_id):
            key = ("origin", self.meta.oldest_identity(ident).ref())
            for waiter in sorted(self._waiters.pop(key, ()), key=str):
                self._rearmed.append(waiter)

    def pending(self) -> list[NodeId]:
        return [n for n in self._pending if self.dst.node_exists(n)]

    def sweep(self, candidates=None) -> list[NodeId]:
        """Phase-1 round: admit eligible nodes, cascading through waiters."""
        clock = self.dst.store.clock
        if clock is not None:
            clock.set_meter("validation", concurrent=True)
        try:
            return self._drain(candidates)
        finally:
            if clock is not None:
                clock.set_meter(None)

    def _drain(self, candidates=None) -> list[NodeId]:
        to_check = list(candidates) if candidates is not None else list(self._pending)
        to_check.extend(self._rearmed)
        self._rearmed = []
        eligible: list[NodeId] = []
        in_eligible: set = set()
        displayed_now: list[NodeId] = []
        while True:
            # eligibility is monotone while the migration runs, so each node
            # is classified once; failures wait on whatever blocked them
            for node_id in to_check:
                if node_id in in_eligible or node_id not in self._pending:
                    continue
                if not self.dst.node_exists(node_id):
                    self._pending.pop(node_id, None)
                    continue
                node = self.dst.assemble(node_id, with_owner=False)
                if FLAG_MIGRATION not in node.flags:
                    self._pending.pop(node_id, None)
                    continue
                ok, blocker = _check_displayable(node, self.dst, self.user_root, self.meta)
                if ok:
                    eligible.append(node_id)
                    in_eligible.add(node_id)
                elif blocker is not None:
                    self._waiters.setdefault(blocker, set()).add(node_id)
            to_check = []
            if not eligible:
                return displayed_now
            pick = self._picker(eligible, self._rng)
            eligible.remove(pick)
            in_eligible.discard(pick)
            to_check = self._display(pick)
            displayed_now.append(pick)
        return displayed_now

    def _display(self, node_id: NodeId) -> list[NodeId]:
        node = self.dst.assemble(node_id, with_owner=False)
        # late arrivals may have resolved by now; give references a second look
        self.tracker.resolve_on_arrival(self.dst, node, self.migration_id)
        if self.meta.wal_seal_state(self.migration_id) is None:
            self.meta.wal_append(
                self.migration_id, "display_node", {"node": node_id.ref(), "rows": []}
            )
        if not self.dst.try_display(node_id):
            self._pending.pop(node_id, None)
            return []
        self._pending.pop(node_id, None)
        self.displayed.append(node_id)
        if self.report is not None:
            self.report.note_display(self.meta, node_id)
        woken: list[NodeId] = []
        nt = self.dst.dag.node_type(node_id.type_name)
        for table, key in zip(nt.member_tables, node_id.keys):
            for waiter in sorted(self._waiters.pop(("row", table, key), ()), key=str):
                woken.append(waiter)
        return woken

    def finish(self) -> tuple[list[NodeId], list[BagEntry]]:
        """Phase 2: one fixpoint pass, then bag everything still undisplayed."""
        clock = self.dst.store.clock
        if clock is not None:
            clock.set_meter("validation", concurrent=True)
        try:
            displayed = self._drain()
            bagged = []
            for node_id in list(self.pending()):
                node = self.dst.assemble(node_id, with_owner=False)
                if FLAG_MIGRATION not in node.flags:
                    self._pending.pop(node_id, None)
                    continue
                bagged.append(self._bag_failed(node))
            return displayed, bagged
        finally:
            if clock is not None:
                clock.set_meter(None)

    def _bag_failed(self, node: DataNode) -> BagEntry:
        try:
            owner = self.tracker.ownership_of_migrated(node.node_id)
        except NotTracked:
            owner = node.owner or node.node_id
        owner = self.meta.oldest_identity(owner)
        # future re-integration re-links through these relationship rows
        self.tracker.record_pre_migration(self.migration_id, self.dst, node)
        placeholders = {}
        nt = self.dst.dag.node_type(node.type_name)
        rows = {}
        for table, key in zip(nt.member_tables, node.node_id.keys):
            for cell, info in self.meta.drop_placeholders_for_row(self.dst.app_id, table, key):
                placeholders[f"{cell[1]}.{cell[3]}"] = info
            row, _flags = self.dst.store.delete(table, key)
            rows[table] = row
        entry = BagEntry(
            owner=owner,
            origin_app=self.dst.app_id,
            origin=node.node_id,
            node_type=node.type_name,
            rows=rows,
            reason="failed_validation",
            placeholders=placeholders,
            bagged_at=self.dst.store.clock.now if self.dst.store.clock else 0,
        )
        self.meta.bag_put(entry)
        self._pending.pop(node.node_id, None)
        if self.report is not None:
            self.report.note_bagged(self.meta, node.node_id, "failed_validation")
        return entry

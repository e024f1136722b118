"""Embedded stores: per-application row stores plus the migration metadata store.

Every operation is individually atomic and linearizable (one lock per
store); migration and validation workers coordinate only through these
stores. Application-visible reads hide rows that carry a migration flag
or have not been admitted for display. Durability is simulated: the fault
harness can crash the process between a write-ahead record and the store
mutation it covers.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace

from transplant import clock as costs
from transplant.clock import VirtualClock
from transplant.errors import InjectedCrash, LeaseDenied, NotFound, SpecError, WalSealed
from transplant.model import AppSchema, DagSpec, DataNode, NodeId, SharingGrant, is_placeholder

FLAG_MIGRATED = "migrated"
FLAG_MIGRATION = "migration_flag"
FLAG_DISPLAYABLE = "displayable"

WAL_KINDS = (
    "copy_root",
    "migrate_node",
    "bag_put",
    "delete_node",
    "display_node",
    "commit",
    "abort",
)


class FaultPlan:
    """Crash the run at a chosen point; used to test migration atomicity.

    Points: ``wal:N`` crashes between appending record N and the store
    mutation it covers; ``mut:N`` crashes just before the N-th app-store
    mutation of the run; ``undo:N`` crashes before the N-th rollback step.
    """

    def __init__(self, point: str):
        kind, _, raw = point.partition(":")
        if kind not in ("wal", "mut", "undo") or not raw.lstrip("-").isdigit():
            raise SpecError(f"malformed fault point '{point}'")
        self.point = point
        self.kind = kind
        self.index = int(raw)
        self._mutations = 0
        self._undo_steps = 0
        self._armed = False
        self.tripped = False

    def on_wal_append(self, seq: int):
        if self.kind == "wal" and seq == self.index:
            self._armed = True

    def on_mutation(self):
        if self.tripped:
            return
        if self._armed:
            self.tripped = True
            raise InjectedCrash(self.point)
        if self.kind == "mut":
            self._mutations += 1
            if self._mutations == self.index:
                self.tripped = True
                raise InjectedCrash(self.point)

    def on_undo_step(self):
        if self.kind == "undo" and not self.tripped:
            self._undo_steps += 1
            if self._undo_steps == self.index:
                self.tripped = True
                raise InjectedCrash(self.point)


class AppStore:
    """Relational-ish row store for one application."""

    def __init__(self, schema: AppSchema, clock: VirtualClock | None = None):
        self.schema = schema
        self.app_id = schema.app_id
        self.clock = clock
        self.guard: FaultPlan | None = None
        self._lock = threading.RLock()
        self._tables: dict[str, dict] = {t.name: {} for t in schema.tables}
        self._flags: dict[tuple[str, object], dict] = {}
        self._indexes: dict[tuple[str, str], dict] = {}
        self._next_id = 1

    # -- plumbing ----------------------------------------------------------

    def _charge(self, units: int):
        if self.clock is not None:
            self.clock.advance(units)

    def _mutating(self):
        if self.guard is not None:
            self.guard.on_mutation()

    def _table(self, table: str) -> dict:
        try:
            return self._tables[table]
        except KeyError:
            raise NotFound(f"{self.app_id}: unknown table '{table}'") from None

    def ensure_index(self, table: str, attr: str):
        with self._lock:
            key = (table, attr)
            if key in self._indexes:
                return
            index: dict = {}
            for row_key, row in self._table(table).items():
                value = row.get(attr)
                if value is not None:
                    index.setdefault(value, set()).add(row_key)
            self._indexes[key] = index

    def _index_add(self, table, row_key, row):
        for (t, attr), index in self._indexes.items():
            if t != table:
                continue
            value = row.get(attr)
            if value is not None:
                index.setdefault(value, set()).add(row_key)

    def _index_remove(self, table, row_key, row):
        for (t, attr), index in self._indexes.items():
            if t != table:
                continue
            value = row.get(attr)
            if value is not None:
                bucket = index.get(value)
                if bucket:
                    bucket.discard(row_key)

    # -- row operations ----------------------------------------------------

    def insert(self, table: str, key, row: dict, flags: dict | None = None,
               batched: bool = False):
        with self._lock:
            self._mutating()
            rows = self._table(table)
            if key in rows:
                raise SpecError(f"{self.app_id}.{table}: duplicate key {key!r}")
            rows[key] = dict(row)
            self._flags[(table, key)] = dict(flags) if flags else {FLAG_DISPLAYABLE: True}
            self._index_add(table, key, row)
            if isinstance(key, int) and key >= self._next_id:
                self._next_id = key + 1
            # later rows of a bulk copy ride the same round trip
            self._charge(costs.COST_INSERT_BATCHED if batched else costs.COST_INSERT)

    def read(self, table: str, key) -> dict:
        with self._lock:
            rows = self._table(table)
            if key not in rows:
                raise NotFound(f"{self.app_id}.{table}[{key!r}]")
            self._charge(costs.COST_READ)
            return rows[key]

    def read_many(self, table: str, keys) -> dict:
        """Bulk fetch; one round trip covers several rows."""
        with self._lock:
            rows = self._table(table)
            keys = list(keys)
            self._charge(1 + len(keys) // 8)
            return {k: rows[k] for k in keys if k in rows}

    def exists_many(self, table: str, keys) -> set:
        with self._lock:
            rows = self._table(table)
            keys = list(keys)
            self._charge(1 + len(keys) // 8)
            return {k for k in keys if k in rows}

    def exists(self, table: str, key) -> bool:
        with self._lock:
            self._charge(costs.COST_LOOKUP)
            return key in self._table(table)

    def update(self, table: str, key, attr: str, value):
        """Set one attribute; returns the previous value."""
        with self._lock:
            self._mutating()
            rows = self._table(table)
            if key not in rows:
                raise NotFound(f"{self.app_id}.{table}[{key!r}]")
            row = rows[key]
            old = row.get(attr)
            self._index_remove(table, key, {attr: old})
            row[attr] = value
            self._index_add(table, key, {attr: value})
            self._charge(costs.COST_UPDATE)
            return old

    def delete(self, table: str, key) -> tuple[dict, dict]:
        """Remove a row; returns (row, flags) as the rollback pre-image."""
        with self._lock:
            self._mutating()
            rows = self._table(table)
            if key not in rows:
                raise NotFound(f"{self.app_id}.{table}[{key!r}]")
            row = rows.pop(key)
            flags = self._flags.pop((table, key), {FLAG_DISPLAYABLE: True})
            self._index_remove(table, key, row)
            self._charge(costs.COST_DELETE)
            return row, flags

    def set_flag(self, table: str, key, flag: str, value: bool) -> dict:
        return self.set_flags(table, key, {flag: value})

    def set_flags(self, table: str, key, flags: dict) -> dict:
        """Update several flags of one row in a single operation."""
        with self._lock:
            self._mutating()
            if key not in self._table(table):
                raise NotFound(f"{self.app_id}.{table}[{key!r}]")
            fkey = (table, key)
            old = dict(self._flags.get(fkey, {FLAG_DISPLAYABLE: True}))
            current = self._flags.setdefault(fkey, {FLAG_DISPLAYABLE: True})
            current.update(flags)
            self._charge(costs.COST_FLAG)
            return old

    def flags(self, table: str, key) -> dict:
        with self._lock:
            if key not in self._table(table):
                raise NotFound(f"{self.app_id}.{table}[{key!r}]")
            return dict(self._flags.get((table, key), {FLAG_DISPLAYABLE: True}))

    def is_app_visible(self, table: str, key) -> bool:
        f = self.flags(table, key)
        return not f.get(FLAG_MIGRATION, False) and f.get(FLAG_DISPLAYABLE, True)

    def keys(self, table: str) -> list:
        with self._lock:
            rows = self._table(table)
            self._charge(1 + len(rows) // costs.COST_SCAN_CHUNK)
            return list(rows)

    def app_visible_keys(self, table: str) -> list:
        """Keys the application itself would see (migrating rows hidden)."""
        with self._lock:
            rows = self._table(table)
            self._charge(1 + len(rows) // costs.COST_SCAN_CHUNK)
            out = []
            for key in rows:
                f = self._flags.get((table, key))
                if f is None or (not f.get(FLAG_MIGRATION, False) and f.get(FLAG_DISPLAYABLE, True)):
                    out.append(key)
            return out

    def lookup(self, table: str, attr: str, value) -> set:
        """Indexed reverse lookup: keys of rows whose attr equals value."""
        with self._lock:
            self.ensure_index(table, attr)
            self._charge(costs.COST_LOOKUP)
            return set(self._indexes[(table, attr)].get(value, ()))

    def next_id(self, table: str) -> int:
        with self._lock:
            value = self._next_id
            self._next_id += 1
            return value

    def row_count(self) -> int:
        with self._lock:
            return sum(len(rows) for rows in self._tables.values())

    # -- snapshots -----------------------------------------------------------

    def snapshot(self, exclude_flags: tuple = ()) -> dict:
        with self._lock:
            tables = {}
            for name, rows in self._tables.items():
                entries = {}
                for key, row in rows.items():
                    raw = self._flags.get((name, key), {FLAG_DISPLAYABLE: True})
                    # canonical form: displayable always, other flags only when set
                    flags = {FLAG_DISPLAYABLE: bool(raw.get(FLAG_DISPLAYABLE, True))}
                    for flag in (FLAG_MIGRATED, FLAG_MIGRATION):
                        if raw.get(flag):
                            flags[flag] = True
                    for flag in exclude_flags:
                        flags.pop(flag, None)
                    entries[str(key)] = {"row": dict(row), "flags": flags}
                tables[name] = entries
            return {"app": self.app_id, "next_id": self._next_id, "tables": tables}

    def load_snapshot(self, snap: dict):
        with self._lock:
            self._tables = {t.name: {} for t in self.schema.tables}
            self._flags = {}
            self._indexes = {}
            for name, entries in snap["tables"].items():
                for raw_key, entry in entries.items():
                    key = int(raw_key) if raw_key.lstrip("-").isdigit() else raw_key
                    self._tables[name][key] = dict(entry["row"])
                    self._flags[(name, key)] = dict(entry["flags"])
            self._next_id = snap.get("next_id", 1)


@dataclass
class AppBundle:
    """One application: schema, relationship DAG, and its store."""

    schema: AppSchema
    dag: DagSpec
    store: AppStore

    @property
    def app_id(self) -> str:
        return self.schema.app_id

    def node_id_for(self, type_name: str, first_key) -> NodeId:
        keys = self._member_keys(type_name, first_key)
        return NodeId(self.app_id, type_name, keys)

    def _member_keys(self, type_name: str, first_key) -> tuple:
        nt = self.dag.node_type(type_name)
        keys = [first_key]
        known = {nt.member_tables[0]: first_key}
        for table in nt.member_tables[1:]:
            key = None
            for left, right in nt.intra_node_joins:
                lt, la = left.split(".", 1)
                rt, ra = right.split(".", 1)
                if rt == table and lt in known:
                    row = self.store.read(lt, known[lt])
                    key = row.get(la)
                elif lt == table and rt in known:
                    row = self.store.read(rt, known[rt])
                    key = row.get(ra)
                if key is not None:
                    break
            if key is None:
                raise SpecError(
                    f"cannot derive key of member table '{table}' for node type "
                    f"'{type_name}'; check intra_node_joins"
                )
            keys.append(key)
            known[table] = key
        return tuple(keys)

    def assemble(self, node_id: NodeId, with_owner: bool = True) -> DataNode:
        nt = self.dag.node_type(node_id.type_name)
        rows = {}
        for table, key in zip(nt.member_tables, node_id.keys):
            rows[table] = dict(self.store.read(table, key))
        flags = self.store.flags(nt.member_tables[0], node_id.keys[0])
        owner = self._owner_of(node_id, rows) if with_owner else None
        return DataNode(
            node_id=node_id,
            rows=rows,
            owner=owner,
            flags={k for k, v in flags.items() if v},
        )

    def assemble_many(self, type_name: str, first_keys) -> list[DataNode]:
        """Bulk node assembly for planning scans; charges per round trip."""
        nt = self.dag.node_type(type_name)
        first_keys = list(first_keys)
        if not first_keys:
            return []
        node_ids = [self.node_id_for(type_name, k) for k in first_keys]
        fetched = {}
        for idx, table in enumerate(nt.member_tables):
            keys = [nid.keys[idx] for nid in node_ids]
            fetched[table] = self.store.read_many(table, keys)
        owner_edges = self.dag.edges_from(type_name, "ownership")
        owner_keys = set()
        if type_name != self.dag.root_type and owner_edges:
            edge = owner_edges[0]
            for nid in node_ids:
                idx = nt.member_tables.index(edge.child_table)
                row = fetched[edge.child_table].get(nid.keys[idx], {})
                value = row.get(edge.child_attr)
                if value is not None and not is_placeholder(value):
                    owner_keys.add(value)
            live_owners = (
                self.store.exists_many(owner_edges[0].parent_table, owner_keys)
                if owner_keys
                else set()
            )
        out = []
        for nid in node_ids:
            rows = {}
            missing = False
            for idx, table in enumerate(nt.member_tables):
                row = fetched[table].get(nid.keys[idx])
                if row is None:
                    missing = True
                    break
                rows[table] = dict(row)
            if missing:
                continue
            owner = None
            if type_name == self.dag.root_type:
                owner = nid
            elif owner_edges:
                edge = owner_edges[0]
                value = rows.get(edge.child_table, {}).get(edge.child_attr)
                if value in live_owners:
                    owner = NodeId(self.app_id, self.dag.root_type, (value,))
            flags = self.store.flags(nt.member_tables[0], nid.keys[0])
            out.append(
                DataNode(node_id=nid, rows=rows, owner=owner,
                         flags={k for k, v in flags.items() if v})
            )
        return out

    def _owner_of(self, node_id: NodeId, rows: dict) -> NodeId | None:
        if node_id.type_name == self.dag.root_type:
            return node_id
        for edge in self.dag.edges_from(node_id.type_name, "ownership"):
            value = rows.get(edge.child_table, {}).get(edge.child_attr)
            if value is None:
                continue
            if self.store.exists(edge.parent_table, value):
                return NodeId(self.app_id, self.dag.root_type, (value,))
        return None

    def node_exists(self, node_id: NodeId) -> bool:
        nt = self.dag.node_type(node_id.type_name)
        return self.store.exists(nt.member_tables[0], node_id.keys[0])

    def nodes_of_type(self, type_name: str, visible_only: bool = False) -> list[DataNode]:
        nt = self.dag.node_type(type_name)
        first = nt.member_tables[0]
        keys = (
            self.store.app_visible_keys(first) if visible_only else self.store.keys(first)
        )
        out = []
        for key in keys:
            out.append(self.assemble(self.node_id_for(type_name, key)))
        return out

    def all_nodes(self, visible_only: bool = False) -> list[DataNode]:
        out = []
        for nt in self.dag.node_types:
            out.extend(self.nodes_of_type(nt.type_name, visible_only=visible_only))
        return out

    def set_node_flag(self, node_id: NodeId, flag: str, value: bool) -> list[dict]:
        nt = self.dag.node_type(node_id.type_name)
        pre = []
        for table, key in zip(nt.member_tables, node_id.keys):
            pre.append(self.store.set_flag(table, key, flag, value))
        return pre

    def node_visible(self, node_id: NodeId) -> bool:
        nt = self.dag.node_type(node_id.type_name)
        return self.store.is_app_visible(nt.member_tables[0], node_id.keys[0])

    def try_display(self, node_id: NodeId) -> bool:
        """Atomically clear the migration flag and admit the node for display."""
        nt = self.dag.node_type(node_id.type_name)
        with self.store._lock:
            first = nt.member_tables[0]
            if not self.store.exists(first, node_id.keys[0]):
                return False
            if not self.store.flags(first, node_id.keys[0]).get(FLAG_MIGRATION, False):
                return False
            for table, key in zip(nt.member_tables, node_id.keys):
                self.store.set_flags(table, key, {FLAG_MIGRATION: False, FLAG_DISPLAYABLE: True})
            return True


# ---------------------------------------------------------------------------
# Metadata store


@dataclass(frozen=True)
class ReferenceRow:
    migration_id: str
    app_id: str
    from_node: NodeId
    from_attr: str  # "table.attr" in the source schema
    to_node: NodeId
    to_attr: str
    kind: str  # dependency | ownership | sharing


@dataclass(frozen=True)
class AttributeChangeRow:
    migration_id: str
    from_app: str
    to_app: str
    old_node: NodeId
    new_node: NodeId
    attribute: str  # destination "table.attr"
    old_value: object
    new_value: object


@dataclass
class BagEntry:
    """Dangling or unmappable data parked outside any application."""

    owner: NodeId
    origin_app: str
    origin: NodeId
    node_type: str
    rows: dict  # table -> {attr: value}; a subset of attrs when partial
    reason: str  # no_mapping | dangling_source | failed_validation
    partial: bool = False
    placeholders: dict = field(default_factory=dict)  # "table.attr" -> PlaceholderInfo
    bagged_at: int = 0


@dataclass(frozen=True)
class PlaceholderInfo:
    kind: str  # absent_user | remote_data
    origin: NodeId
    origin_attr: str  # parent's "table.attr" the reference pointed at


@dataclass
class MigrationLease:
    user_ref: str
    migration_id: str
    migration_type: str
    state: str = "active"  # active | committed | aborted


@dataclass(frozen=True)
class WalRecord:
    migration_id: str
    seq: int
    kind: str
    payload: dict


class MetadataStore:
    """Shared migration metadata: leases, WAL, tracker tables, bags, grants."""

    def __init__(self, clock: VirtualClock | None = None):
        self.clock = clock
        self._lock = threading.RLock()
        self._migration_counter = 0
        self.leases: dict[str, MigrationLease] = {}
        self._wal: dict[str, list[WalRecord]] = {}
        self._sealed: dict[str, str] = {}
        self.fault_plan: FaultPlan | None = None
        self.references: list[ReferenceRow] = []
        self._refs_to: dict[NodeId, list[ReferenceRow]] = {}
        self._refs_from: dict[NodeId, list[ReferenceRow]] = {}
        self.attribute_changes: list[AttributeChangeRow] = []
        # identity history is a tree: fresh ids are unique, so every node has
        # at most one predecessor, but may branch forward (copied twice)
        self._identity_fwd: dict[NodeId, set] = {}
        self._identity_rev: dict[NodeId, NodeId] = {}
        self.bags: dict[tuple[str, str], BagEntry] = {}
        self._bags_by_owner: dict[str, set] = {}
        self.grants: list[SharingGrant] = []
        self._grants_by_grantor: dict[str, list[SharingGrant]] = {}
        self.placeholders: dict[tuple[str, str, object, str], PlaceholderInfo] = {}
        self._placeholders_by_origin: dict[str, set] = {}
        self.claims: dict = {}

    def _charge(self, units: int):
        if self.clock is not None:
            self.clock.advance(units)

    # -- leases --------------------------------------------------------------

    def new_migration_id(self) -> str:
        with self._lock:
            self._migration_counter += 1
            return f"m{self._migration_counter:05d}"

    def claim_step(self, migration_id: str, node_ref: str) -> bool:
        """Single-writer claim mark for one ordered migration step."""
        with self._lock:
            key = (migration_id, node_ref)
            if key in self.claims:
                return False
            self.claims[key] = True
            self._charge(costs.COST_UPDATE)
            return True

    def acquire_lease(self, user_ref: str, migration_type: str) -> MigrationLease:
        with self._lock:
            current = self.leases.get(user_ref)
            if current is not None and current.state == "active":
                raise LeaseDenied(f"user {user_ref} already has migration {current.migration_id}")
            lease = MigrationLease(
                user_ref=user_ref,
                migration_id=self.new_migration_id(),
                migration_type=migration_type,
            )
            self.leases[user_ref] = lease
            self._charge(costs.COST_UPDATE)
            return lease

    def seal_lease(self, lease: MigrationLease, state: str):
        with self._lock:
            lease.state = state
            self._charge(costs.COST_UPDATE)

    # -- write-ahead log -----------------------------------------------------

    def wal_append(self, migration_id: str, kind: str, payload: dict) -> WalRecord:
        if kind not in WAL_KINDS:
            raise SpecError(f"unknown WAL kind '{kind}'")
        with self._lock:
            if migration_id in self._sealed:
                raise WalSealed(f"{migration_id} sealed with {self._sealed[migration_id]}")
            log = self._wal.setdefault(migration_id, [])
            record = WalRecord(migration_id, seq=len(log) + 1, kind=kind, payload=payload)
            log.append(record)
            if kind in ("commit", "abort"):
                self._sealed[migration_id] = kind
            base = costs.COST_WAL_LIGHT if kind == "display_node" else costs.COST_WAL_BASE
            self._charge(base + len(payload.get("rows", ())))
        if self.fault_plan is not None:
            self.fault_plan.on_wal_append(record.seq)
        return record

    def wal_scan(self, migration_id: str) -> list[WalRecord]:
        with self._lock:
            return list(self._wal.get(migration_id, ()))

    def wal_seal_state(self, migration_id: str) -> str | None:
        with self._lock:
            return self._sealed.get(migration_id)

    # -- relationship tracking -------------------------------------------------

    def record_references(self, rows):
        with self._lock:
            for row in rows:
                self.references.append(row)
                self._refs_to.setdefault(row.to_node, []).append(row)
                self._refs_from.setdefault(row.from_node, []).append(row)
                self._charge(costs.COST_TRACK_ROW)

    def references_to(self, node_id: NodeId) -> list[ReferenceRow]:
        with self._lock:
            self._charge(costs.COST_LOOKUP)
            return list(self._refs_to.get(node_id, ()))

    def references_from(self, node_id: NodeId) -> list[ReferenceRow]:
        with self._lock:
            self._charge(costs.COST_LOOKUP)
            return list(self._refs_from.get(node_id, ()))

    def record_attribute_changes(self, rows):
        with self._lock:
            for row in rows:
                self.attribute_changes.append(row)
                if row.old_node != row.new_node:
                    self._identity_fwd.setdefault(row.old_node, set()).add(row.new_node)
                    self._identity_rev.setdefault(row.new_node, row.old_node)
                self._charge(costs.COST_TRACK_ROW)

    def lookup_new_identity(self, old: NodeId, migration_id: str | None = None) -> NodeId | None:
        with self._lock:
            self._charge(costs.COST_LOOKUP)
            if migration_id is None:
                successors = self._identity_fwd.get(old)
                return min(successors, key=lambda n: n.ref()) if successors else None
            for row in self.attribute_changes:
                if row.migration_id == migration_id and row.old_node == old:
                    return row.new_node
            return None

    def lineage(self, node_id: NodeId) -> set[NodeId]:
        """All identities this node has carried, across every migration."""
        with self._lock:
            root = node_id
            seen = {root}
            while root in self._identity_rev:
                root = self._identity_rev[root]
                if root in seen:
                    break
                seen.add(root)
            out = {root}
            frontier = [root]
            while frontier:
                cursor = frontier.pop()
                for nxt in self._identity_fwd.get(cursor, ()):
                    if nxt not in out:
                        out.add(nxt)
                        frontier.append(nxt)
            out.add(node_id)
            return out

    def oldest_identity(self, node_id: NodeId) -> NodeId:
        with self._lock:
            cursor = node_id
            seen = {cursor}
            while cursor in self._identity_rev:
                cursor = self._identity_rev[cursor]
                if cursor in seen:
                    break
                seen.add(cursor)
            return cursor

    def drop_migration_tracking(self, migration_id: str):
        """Remove tracker rows written by a migration (rollback path)."""
        with self._lock:
            kept = [r for r in self.attribute_changes if r.migration_id != migration_id]
            dropped = [r for r in self.attribute_changes if r.migration_id == migration_id]
            self.attribute_changes = kept
            for row in dropped:
                successors = self._identity_fwd.get(row.old_node)
                if successors is not None:
                    successors.discard(row.new_node)
                    if not successors:
                        del self._identity_fwd[row.old_node]
                if self._identity_rev.get(row.new_node) == row.old_node:
                    del self._identity_rev[row.new_node]
            self.references = [r for r in self.references if r.migration_id != migration_id]
            self._refs_to = {}
            self._refs_from = {}
            for row in self.references:
                self._refs_to.setdefault(row.to_node, []).append(row)
                self._refs_from.setdefault(row.from_node, []).append(row)

    # -- data bags -------------------------------------------------------------

    def bag_put(self, entry: BagEntry) -> bool:
        """Idempotent on (origin_app, origin); returns True if newly stored."""
        with self._lock:
            key = (entry.origin_app, entry.origin.ref())
            if key in self.bags:
                return False
            self.bags[key] = entry
            self._bags_by_owner.setdefault(entry.owner.ref(), set()).add(key)
            self._charge(costs.COST_BAG)
            return True

    def bag_list(self, owner_refs) -> list[BagEntry]:
        if isinstance(owner_refs, str):
            owner_refs = [owner_refs]
        with self._lock:
            self._charge(costs.COST_LOOKUP)
            out = []
            for ref in owner_refs:
                for key in sorted(self._bags_by_owner.get(ref, ())):
                    out.append(self.bags[key])
            return out

    def bag_take(self, owner_ref: str, origin: NodeId) -> BagEntry:
        with self._lock:
            key = (origin.app_id, origin.ref())
            entry = self.bags.get(key)
            if entry is None or entry.owner.ref() != owner_ref:
                raise NotFound(f"no bag entry for owner {owner_ref} origin {origin.ref()}")
            del self.bags[key]
            self._bags_by_owner[owner_ref].discard(key)
            self._charge(costs.COST_BAG)
            return entry

    def bag_restore(self, entry: BagEntry):
        with self._lock:
            key = (entry.origin_app, entry.origin.ref())
            self.bags[key] = entry
            self._bags_by_owner.setdefault(entry.owner.ref(), set()).add(key)

    def bag_find_origin(self, origin_ids) -> BagEntry | None:
        with self._lock:
            self._charge(costs.COST_LOOKUP)
            for origin in origin_ids:
                entry = self.bags.get((origin.app_id, origin.ref()))
                if entry is not None:
                    return entry
            return None

    # -- sharing grants ----------------------------------------------------------

    def add_grant(self, grant: SharingGrant):
        with self._lock:
            self.grants.append(grant)
            self._grants_by_grantor.setdefault(grant.grantor.ref(), []).append(grant)

    def grants_by_grantor(self, grantor_refs) -> list[SharingGrant]:
        with self._lock:
            self._charge(costs.COST_LOOKUP)
            out = []
            for ref in grantor_refs:
                out.extend(self._grants_by_grantor.get(ref, ()))
            return out

    # -- placeholder side table ----------------------------------------------------

    def placeholder_set(self, app_id: str, table: str, key, attr: str, info: PlaceholderInfo):
        with self._lock:
            cell = (app_id, table, key, attr)
            self.placeholders[cell] = info
            self._placeholders_by_origin.setdefault(info.origin.ref(), set()).add(cell)
            self._charge(costs.COST_TRACK_ROW)

    def placeholder_get(self, app_id: str, table: str, key, attr: str) -> PlaceholderInfo | None:
        with self._lock:
            return self.placeholders.get((app_id, table, key, attr))

    def placeholder_pop(self, app_id: str, table: str, key, attr: str) -> PlaceholderInfo | None:
        with self._lock:
            cell = (app_id, table, key, attr)
            info = self.placeholders.pop(cell, None)
            if info is not None:
                self._placeholders_by_origin.get(info.origin.ref(), set()).discard(cell)
            return info

    def placeholders_for_origin(self, origin_ids) -> list[tuple]:
        """Cells waiting on any of the given identities: (app, table, key, attr, info)."""
        with self._lock:
            self._charge(costs.COST_LOOKUP)
            out = []
            for origin in origin_ids:
                for cell in sorted(self._placeholders_by_origin.get(origin.ref(), ()), key=str):
                    out.append((*cell, self.placeholders[cell]))
            return out

    def drop_placeholders_for_row(self, app_id: str, table: str, key):
        with self._lock:
            doomed = [c for c in self.placeholders if c[0] == app_id and c[1] == table and c[2] == key]
            out = []
            for cell in doomed:
                info = self.placeholders.pop(cell)
                self._placeholders_by_origin.get(info.origin.ref(), set()).discard(cell)
                out.append((cell, info))
            return out

    # -- snapshots -------------------------------------------------------------------

    def snapshot(self) -> dict:
        from transplant.workspace import meta_to_dict  # local import to avoid a cycle

        return meta_to_dict(self)

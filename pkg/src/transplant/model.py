"""Domain model: application schemas, relationship DAG specs, data nodes.

Everything in this module is a pure function over immutable snapshots of
node collections; nothing here touches a store. The migration engine, the
spec loaders, and the synthetic generator all build on these types.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace

from transplant.errors import CycleError, OwnerUnresolvable, RootMissing, SpecError

# Reserved cell value marking a reference whose target lives in another
# application (or belongs to a user who has not joined yet). The metadata
# store keeps a side row with the original identity for every occurrence.
PLACEHOLDER = "␀ref-elsewhere"

DEPENDENCY = "dependency"
OWNERSHIP = "ownership"
SHARING = "sharing"

MIGRATION_TYPES = ("deletion", "independent")


def is_placeholder(value) -> bool:
    return value == PLACEHOLDER


# ---------------------------------------------------------------------------
# Schemas


@dataclass(frozen=True)
class TableSpec:
    name: str
    attributes: tuple[str, ...]
    key: str

    def __post_init__(self):
        if len(set(self.attributes)) != len(self.attributes):
            raise SpecError(f"duplicate attribute in table '{self.name}'")
        if self.key not in self.attributes:
            raise SpecError(f"key '{self.key}' is not an attribute of table '{self.name}'")


@dataclass(frozen=True)
class AppSchema:
    app_id: str
    tables: tuple[TableSpec, ...]

    def __post_init__(self):
        names = [t.name for t in self.tables]
        if len(set(names)) != len(names):
            raise SpecError(f"duplicate table name in app '{self.app_id}'")

    def table(self, name: str) -> TableSpec:
        for t in self.tables:
            if t.name == name:
                return t
        raise SpecError(f"unknown table '{name}'", path=self.app_id)

    def has_table(self, name: str) -> bool:
        return any(t.name == name for t in self.tables)


# ---------------------------------------------------------------------------
# DAG specification


@dataclass(frozen=True)
class NodeTypeSpec:
    type_name: str
    member_tables: tuple[str, ...]
    # attribute equalities binding member tables, as (table.attr, table.attr)
    intra_node_joins: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not self.member_tables:
            raise SpecError(f"node type '{self.type_name}' has no member tables")
        for left, right in self.intra_node_joins:
            for ref in (left, right):
                table = ref.split(".", 1)[0]
                if table not in self.member_tables:
                    raise SpecError(
                        f"join '{left}={right}' references table '{table}' "
                        f"outside node type '{self.type_name}'"
                    )


@dataclass(frozen=True)
class Edge:
    """A typed relationship edge: child attribute refers to a parent key."""

    kind: str  # dependency | ownership | sharing
    child_type: str
    child_table: str
    child_attr: str
    parent_type: str
    parent_table: str
    parent_attr: str

    def __str__(self):
        return (
            f"{self.child_type}.{self.child_table}.{self.child_attr}"
            f" -> {self.parent_type}.{self.parent_table}.{self.parent_attr}"
        )


@dataclass(frozen=True)
class DisplayRule:
    node_type: str
    requires_parents_displayed: bool = True
    exceptions: tuple[str, ...] = ()
    requires_owner_root: bool = True
    requires_sharer_root: bool = True


@dataclass(frozen=True)
class DagSpec:
    app_id: str
    node_types: tuple[NodeTypeSpec, ...]
    root_type: str
    dependency_edges: tuple[Edge, ...] = ()
    ownership_edges: tuple[Edge, ...] = ()
    sharing_edges: tuple[Edge, ...] = ()
    display_rules: tuple[DisplayRule, ...] = ()

    def node_type(self, name: str) -> NodeTypeSpec:
        for nt in self.node_types:
            if nt.type_name == name:
                return nt
        raise SpecError(f"unknown node type '{name}'", path=self.app_id)

    def has_type(self, name: str) -> bool:
        return any(nt.type_name == name for nt in self.node_types)

    def edges_from(self, type_name: str, kind: str) -> list[Edge]:
        pools = {
            DEPENDENCY: self.dependency_edges,
            OWNERSHIP: self.ownership_edges,
            SHARING: self.sharing_edges,
        }
        return [e for e in pools[kind] if e.child_type == type_name]

    def display_rule(self, type_name: str) -> DisplayRule:
        for rule in self.display_rules:
            if rule.node_type == type_name:
                return rule
        # No declared rule: be conservative, require everything.
        return DisplayRule(node_type=type_name)

    def dependency_parents_of_type(self, type_name: str) -> set[str]:
        return {e.parent_type for e in self.dependency_edges if e.child_type == type_name}

    def validate(self, schema: AppSchema) -> None:
        """Check every invariant against the concrete application schema."""
        if self.app_id != schema.app_id:
            raise SpecError(f"DAG is for '{self.app_id}' but schema is '{schema.app_id}'")
        names = [nt.type_name for nt in self.node_types]
        if len(set(names)) != len(names):
            raise SpecError("duplicate node type name", path=self.app_id)
        if self.root_type not in names:
            raise RootMissing(f"root type '{self.root_type}' is not a declared node type")

        for nt in self.node_types:
            for table in nt.member_tables:
                if not schema.has_table(table):
                    raise SpecError(
                        f"unknown table '{table}'", path=f"{self.app_id}.{nt.type_name}"
                    )
            for left, right in nt.intra_node_joins:
                for ref in (left, right):
                    table, attr = _split_ref(ref, f"{self.app_id}.{nt.type_name}")
                    if attr not in schema.table(table).attributes:
                        raise SpecError(
                            f"unknown attribute '{ref}'", path=f"{self.app_id}.{nt.type_name}"
                        )

        for edge in self.dependency_edges + self.ownership_edges + self.sharing_edges:
            self._validate_edge(edge, schema)

        for edge in self.ownership_edges + self.sharing_edges:
            if edge.parent_type != self.root_type:
                raise SpecError(
                    f"{edge.kind} edge must target the root type, got '{edge.parent_type}'",
                    path=self.app_id,
                )

        for nt in self.node_types:
            if nt.type_name == self.root_type:
                continue
            if not self.edges_from(nt.type_name, OWNERSHIP):
                raise SpecError(
                    f"non-root node type '{nt.type_name}' has no ownership edge",
                    path=self.app_id,
                )

        for rule in self.display_rules:
            if rule.node_type not in names:
                raise SpecError(f"display rule for unknown type '{rule.node_type}'")
            parents = self.dependency_parents_of_type(rule.node_type)
            extra = set(rule.exceptions) - parents
            if extra:
                raise SpecError(
                    f"display rule exceptions {sorted(extra)} are not dependency "
                    f"parents of '{rule.node_type}'"
                )

        self._check_type_cycles()

    def _validate_edge(self, edge: Edge, schema: AppSchema) -> None:
        path = f"{self.app_id}.{edge.child_type}"
        if not self.has_type(edge.child_type):
            raise SpecError(f"edge from unknown node type '{edge.child_type}'", path=path)
        if not self.has_type(edge.parent_type):
            raise SpecError(f"edge to unknown node type '{edge.parent_type}'", path=path)
        child = self.node_type(edge.child_type)
        parent = self.node_type(edge.parent_type)
        if edge.child_table not in child.member_tables:
            raise SpecError(f"edge attribute table '{edge.child_table}' outside node", path=path)
        if edge.parent_table not in parent.member_tables:
            raise SpecError(f"edge target table '{edge.parent_table}' outside node", path=path)
        for table, attr in ((edge.child_table, edge.child_attr), (edge.parent_table, edge.parent_attr)):
            if not schema.has_table(table):
                raise SpecError(f"unknown table '{table}'", path=path)
            if attr not in schema.table(table).attributes:
                raise SpecError(f"unknown attribute '{table}.{attr}'", path=path)
        # References resolve by key lookup, so the target must be the key.
        if edge.parent_attr != schema.table(edge.parent_table).key:
            raise SpecError(
                f"edge target '{edge.parent_table}.{edge.parent_attr}' is not the table key",
                path=path,
            )

    def _check_type_cycles(self) -> None:
        # Self-referential types (reply chains) are allowed: instances must
        # still form a DAG, which deletion planning enforces per instance.
        # Cycles across distinct types are modeling errors and rejected here.
        adjacency: dict[str, list[str]] = {nt.type_name: [] for nt in self.node_types}
        for edge in self.dependency_edges:
            if edge.child_type != edge.parent_type:
                adjacency[edge.child_type].append(edge.parent_type)
        state: dict[str, int] = {}  # 0 visiting, 1 done
        stack: list[str] = []

        def visit(name: str):
            state[name] = 0
            stack.append(name)
            for nxt in adjacency[name]:
                if state.get(nxt) == 0:
                    cycle = stack[stack.index(nxt):] + [nxt]
                    raise CycleError(cycle, path=self.app_id)
                if nxt not in state:
                    visit(nxt)
            stack.pop()
            state[name] = 1

        for name in adjacency:
            if name not in state:
                visit(name)


def _split_ref(ref: str, path: str) -> tuple[str, str]:
    if "." not in ref:
        raise SpecError(f"attribute reference '{ref}' must be 'table.attr'", path)
    table, attr = ref.split(".", 1)
    return table, attr


# ---------------------------------------------------------------------------
# Data instances


@dataclass(frozen=True, order=True)
class NodeId:
    """Stable identity of a node: app, type, and member-row key values."""

    app_id: str
    type_name: str
    keys: tuple

    def ref(self) -> str:
        return f"{self.app_id}:{self.type_name}:" + ",".join(str(k) for k in self.keys)

    @property
    def key(self):
        """Key value of the first member table; the usual single-table case."""
        return self.keys[0]


@dataclass(frozen=True)
class SharingGrant:
    """Owner-issued permission for another user to migrate covered nodes."""

    grantor: NodeId
    grantee: NodeId
    node_type: str = "*"  # type selector; "*" covers all of the grantor's data
    node_keys: tuple | None = None  # concrete node keys, or None for all of the type
    predicate: tuple[tuple[str, object], ...] = ()  # attr == value conjunctions
    allowed_types: frozenset[str] = frozenset(MIGRATION_TYPES)

    def __post_init__(self):
        if not self.allowed_types:
            raise SpecError("sharing grant with empty allowed_types")
        bad = set(self.allowed_types) - set(MIGRATION_TYPES)
        if bad:
            raise SpecError(f"unknown migration types in grant: {sorted(bad)}")

    def covers(self, node: "DataNode") -> bool:
        if self.node_type not in ("*", node.node_id.type_name):
            return False
        if self.node_keys is not None and tuple(self.node_keys) != node.node_id.keys:
            return False
        for attr, value in self.predicate:
            if node.attribute(attr) != value:
                return False
        return True


@dataclass
class DataNode:
    """One instance of a DAG node: member rows plus resolved context."""

    node_id: NodeId
    rows: dict[str, dict]  # table name -> row attribute values
    owner: NodeId | None = None
    shared_with: set = field(default_factory=set)  # {(root NodeId, frozenset of types)}
    flags: set = field(default_factory=set)

    @property
    def type_name(self) -> str:
        return self.node_id.type_name

    def attribute(self, ref: str):
        table, attr = ref.split(".", 1)
        return self.rows.get(table, {}).get(attr)

    def size_units(self) -> int:
        """Rough transfer size: text payload plus any declared stub byte size."""
        units = 0
        for row in self.rows.values():
            for attr, value in row.items():
                if attr == "byte_size" and isinstance(value, int):
                    units += min(value // 250_000, 20)
                elif isinstance(value, str):
                    units += len(value) // 120
        return 1 + units


@dataclass(frozen=True)
class PlanStep:
    """One entry of a deletion-migration plan."""

    node_id: NodeId
    action: str  # copy_root | migrate | delete_root


class InstanceIndex:
    """Lookup structures over a snapshot of nodes from one application."""

    def __init__(self, nodes):
        self.by_id: dict[NodeId, DataNode] = {}
        self.by_row: dict[tuple[str, object], NodeId] = {}
        for node in nodes:
            self.by_id[node.node_id] = node
            # rows are kept in member-table order, aligned with node_id.keys,
            # so every member row is addressable by (table, key value)
            for idx, table in enumerate(node.rows):
                self.by_row[(table, node.node_id.keys[idx])] = node.node_id

    def __contains__(self, node_id: NodeId) -> bool:
        return node_id in self.by_id

    def node(self, node_id: NodeId) -> DataNode:
        return self.by_id[node_id]

    def resolve_row(self, table: str, value) -> NodeId | None:
        return self.by_row.get((table, value))


def edge_values(dag: DagSpec, node: DataNode, kind: str) -> list[tuple[Edge, object]]:
    """Non-null, non-placeholder values of the node's outgoing edges."""
    out = []
    for edge in dag.edges_from(node.type_name, kind):
        value = node.rows.get(edge.child_table, {}).get(edge.child_attr)
        if value is None or is_placeholder(value):
            continue
        out.append((edge, value))
    return out


def dependency_parents(dag: DagSpec, index: InstanceIndex, node: DataNode) -> list[NodeId]:
    """Parents of `node` that are present in the indexed snapshot."""
    parents = []
    for edge, value in edge_values(dag, node, DEPENDENCY):
        parent = index.resolve_row(edge.parent_table, value)
        if parent is not None and parent != node.node_id:
            parents.append(parent)
    return parents


def resolve_owner(dag: DagSpec, index: InstanceIndex, node: DataNode) -> NodeId:
    """Follow the ownership edge to the owning root node's identity."""
    if node.type_name == dag.root_type:
        return node.node_id
    values = edge_values(dag, node, OWNERSHIP)
    if not values:
        raise OwnerUnresolvable(f"{node.node_id.ref()}: ownership attribute is null")
    edge, value = values[0]
    owner = index.resolve_row(edge.parent_table, value)
    if owner is None:
        raise OwnerUnresolvable(
            f"{node.node_id.ref()}: owner {edge.parent_table}.{edge.parent_attr}={value!r} "
            "does not resolve to a live root"
        )
    return owner


def deletion_order(dag: DagSpec, nodes, migrate=None) -> list[PlanStep]:
    """Plan a deletion migration over an instance snapshot.

    `nodes` is the full traversal context (the migrating user's reachable
    subgraph, including nodes that will not move); `migrate` optionally
    restricts which nodes are emitted. The walk is depth-first: each
    subtree is drained leaves-up before its parent moves, so a node is
    always emitted after everything that depends on it, and whole trees
    arrive contiguously at the destination. The root is copied first and
    deleted last. Sibling ties break by ascending node key, making plans
    reproducible without any seed.
    """
    nodes = list(nodes)
    index = InstanceIndex(nodes)
    migrate_ids = (
        {n.node_id for n in nodes} if migrate is None else {n.node_id for n in migrate}
    )

    roots = [n for n in nodes if n.type_name == dag.root_type and n.node_id in migrate_ids]
    if len(roots) != 1:
        raise SpecError(
            f"deletion plan needs exactly one migrating root, found {len(roots)}",
            path=dag.app_id,
        )
    root = roots[0]

    dependents: dict[NodeId, list[NodeId]] = {n.node_id: [] for n in nodes}
    parent_count: dict[NodeId, int] = {n.node_id: 0 for n in nodes}
    for node in nodes:
        for parent in dependency_parents(dag, index, node):
            dependents[parent].append(node.node_id)
            # the root is handled by the copy/delete bookends, so edges into
            # it do not gate the walk
            if parent != root.node_id:
                parent_count[node.node_id] += 1

    top_level = sorted(
        (nid for nid, count in parent_count.items() if count == 0 and nid != root.node_id),
        key=_order_key,
    )

    emitted: list[NodeId] = []
    done: set[NodeId] = set()
    visiting: set[NodeId] = set()

    def drain(nid: NodeId):
        # iterative post-order: children of a subtree land before its parent
        stack = [(nid, False)]
        while stack:
            current, expanded = stack.pop()
            if current in done:
                continue
            if expanded:
                visiting.discard(current)
                done.add(current)
                emitted.append(current)
                continue
            if current in visiting:
                raise CycleError(
                    _find_instance_cycle(dag, index, list(visiting)), path=dag.app_id
                )
            visiting.add(current)
            stack.append((current, True))
            for child in sorted(dependents[current], key=_order_key, reverse=True):
                if child not in done and child != root.node_id:
                    stack.append((child, False))

    for nid in top_level:
        drain(nid)

    leftover = sorted(
        (n.node_id for n in nodes if n.node_id not in done and n.node_id != root.node_id),
        key=_order_key,
    )
    if leftover:
        # only reachable when every path upward loops back into the set
        raise CycleError(_find_instance_cycle(dag, index, leftover), path=dag.app_id)

    steps = [PlanStep(root.node_id, "copy_root")]
    steps += [PlanStep(nid, "migrate") for nid in emitted if nid in migrate_ids]
    steps.append(PlanStep(root.node_id, "delete_root"))
    return steps


def _order_key(node_id: NodeId):
    return (node_id.type_name, tuple(str(k) for k in node_id.keys))


def _find_instance_cycle(dag, index, candidates) -> list[NodeId]:
    seen: dict[NodeId, int] = {}
    stack: list[NodeId] = []
    candidate_set = set(candidates)

    def visit(nid):
        seen[nid] = 0
        stack.append(nid)
        for parent in dependency_parents(dag, index, index.node(nid)):
            if parent not in candidate_set:
                continue
            if seen.get(parent) == 0:
                return stack[stack.index(parent):] + [parent]
            if parent not in seen:
                found = visit(parent)
                if found:
                    return found
        stack.pop()
        seen[nid] = 1
        return None

    for nid in candidates:
        if nid not in seen:
            found = visit(nid)
            if found:
                return found
    return candidates  # unreachable in practice


def sole_dependents(dag: DagSpec, nodes, target: NodeId) -> set[NodeId]:
    """Nodes left dangling if `target` is removed from the snapshot.

    A node qualifies when every dependency parent still live in the
    snapshot is the target or another qualifying node; the result is the
    transitive closure, so chains collapse together.
    """
    nodes = list(nodes)
    index = InstanceIndex(nodes)
    if target not in index:
        raise SpecError(f"target {target.ref()} is not in the instance snapshot")

    doomed: set[NodeId] = {target}
    changed = True
    while changed:
        changed = False
        for node in nodes:
            if node.node_id in doomed:
                continue
            parents = [p for p in dependency_parents(dag, index, node) if p in index]
            if parents and all(p in doomed for p in parents):
                doomed.add(node.node_id)
                changed = True
    doomed.discard(target)
    return doomed


def replace_attribute(node: DataNode, ref: str, value) -> DataNode:
    """Functional attribute update used by pure callers (tests, planners)."""
    table, attr = ref.split(".", 1)
    rows = {t: dict(r) for t, r in node.rows.items()}
    rows[table][attr] = value
    return replace(node, rows=rows)

"""Schema mapping algebra: pairwise mappings, transitive composition, coverage.

A mapping translates nodes of one application's schema into another's,
attribute by attribute. Mappings compose: given a->b and b->c, an a->c
mapping is derived by chaining attribute transforms, and an attribute
survives only if both legs map it. Derived mappings record the full app
path they were composed through.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from transplant.errors import CompositionDomainError, CompositionError, SpecError
from transplant.model import PLACEHOLDER, AppSchema, DagSpec

TRANSFORM_NAMES = ("copy", "constant", "newID", "concat", "truncate", "placeholder")

_TRANSFORM_RE = re.compile(r"^([A-Za-z_]+)(?:\((.*)\))?$")


@dataclass(frozen=True)
class Transform:
    name: str
    arg: object = None

    def __str__(self):
        if self.arg is None:
            return self.name
        return f"{self.name}({self.arg})"

    @classmethod
    def parse(cls, text: str) -> "Transform":
        m = _TRANSFORM_RE.match(text.strip())
        if not m:
            raise SpecError(f"malformed transform '{text}'")
        name, raw_arg = m.group(1), m.group(2)
        if name not in TRANSFORM_NAMES:
            raise SpecError(
                f"unknown transform '{name}' (registered: {', '.join(TRANSFORM_NAMES)})"
            )
        if name == "truncate":
            if raw_arg is None or not raw_arg.isdigit():
                raise SpecError(f"truncate needs an integer length, got '{text}'")
            return cls(name, int(raw_arg))
        if name == "constant":
            if raw_arg is None:
                raise SpecError("constant needs a value, e.g. constant(public)")
            return cls(name, raw_arg)
        if raw_arg is not None:
            raise SpecError(f"transform '{name}' takes no argument")
        return cls(name)


COPY = Transform("copy")
NEW_ID = Transform("newID")


@dataclass(frozen=True)
class AttributeMap:
    """Maps one (or several, for concat) source attributes to one target."""

    src: tuple[str, ...]  # "table.attr" references in the source schema
    dst: str  # "table.attr" reference in the destination schema
    chain: tuple[Transform, ...] = (COPY,)

    def __post_init__(self):
        if not self.src:
            raise SpecError(f"attribute map to '{self.dst}' has no source")
        if len(self.src) > 1 and self.chain[0].name != "concat":
            raise SpecError(f"multiple sources for '{self.dst}' require concat")

    @property
    def regenerates_id(self) -> bool:
        return any(t.name == "newID" for t in self.chain)


@dataclass(frozen=True)
class NodeMap:
    from_node: str
    to_node: str
    attributes: tuple[AttributeMap, ...]

    def __post_init__(self):
        seen = set()
        for am in self.attributes:
            if am.dst in seen:
                raise SpecError(
                    f"duplicate destination attribute '{am.dst}' in node map "
                    f"{self.from_node}->{self.to_node}"
                )
            seen.add(am.dst)

    def map_for_source(self, ref: str) -> AttributeMap | None:
        for am in self.attributes:
            if am.src == (ref,):
                return am
        return None


@dataclass(frozen=True)
class SchemaMapping:
    from_app: str
    to_app: str
    node_maps: tuple[NodeMap, ...]
    # App ids this mapping was derived through; a direct mapping's path is
    # just (from_app, to_app).
    path: tuple[str, ...] = ()

    def __post_init__(self):
        pairs = [(nm.from_node, nm.to_node) for nm in self.node_maps]
        if len(set(pairs)) != len(pairs):
            raise SpecError(
                f"duplicate node map pair in mapping {self.from_app}->{self.to_app}"
            )
        if not self.path:
            object.__setattr__(self, "path", (self.from_app, self.to_app))

    @property
    def is_direct(self) -> bool:
        return len(self.path) == 2

    def node_map(self, from_node: str) -> NodeMap | None:
        for nm in self.node_maps:
            if nm.from_node == from_node:
                return nm
        return None

    def mapped_attr_count(self) -> int:
        return sum(len(nm.attributes) for nm in self.node_maps)


def apply_chain(chain, values: list):
    """Run a transform chain over source values; newID is the caller's job."""
    value = values[0] if values else None
    for i, t in enumerate(chain):
        if t.name == "copy":
            pass
        elif t.name == "constant":
            value = t.arg
        elif t.name == "concat":
            if i != 0:
                raise SpecError("concat is only valid as the first transform")
            present = [str(v) for v in values if v is not None]
            value = " ".join(present)
        elif t.name == "truncate":
            if value is not None:
                value = str(value)[: t.arg]
        elif t.name == "placeholder":
            value = PLACEHOLDER
        elif t.name == "newID":
            raise SpecError("newID must be applied by the migration engine")
        else:  # pragma: no cover - parse() blocks unknown names
            raise SpecError(f"unknown transform '{t.name}'")
    return value


def compose(m_ab: SchemaMapping, m_bc: SchemaMapping) -> SchemaMapping:
    """Chain two mappings into one that skips the intermediate application.

    An attribute survives only when mapped by both legs. Any newID in the
    combined chain collapses to a single terminal newID (only the final
    regenerated identity matters); other transforms stay explicit so loss
    provenance remains inspectable. Multi-source (concat) second-leg
    entries compose only when every feeding first-leg chain is a plain
    copy.
    """
    if m_ab.to_app != m_bc.from_app:
        raise CompositionDomainError(
            f"cannot compose {m_ab.from_app}->{m_ab.to_app} with "
            f"{m_bc.from_app}->{m_bc.to_app}"
        )

    composed: dict[tuple[str, str], NodeMap] = {}
    for nm_ab in m_ab.node_maps:
        nm_bc = m_bc.node_map(nm_ab.to_node)
        if nm_bc is None:
            continue
        pair = (nm_ab.from_node, nm_bc.to_node)
        if pair in composed:
            raise CompositionError(
                f"conflicting composed node maps for {pair[0]}->{pair[1]} "
                f"(via {m_ab.to_app}); refusing to merge"
            )
        attrs = []
        produced = {am.dst: am for am in nm_ab.attributes}
        for am_bc in nm_bc.attributes:
            if len(am_bc.src) == 1:
                am_ab = produced.get(am_bc.src[0])
                if am_ab is None:
                    continue
                chain = _merge_chains(am_ab.chain, am_bc.chain)
                attrs.append(AttributeMap(src=am_ab.src, dst=am_bc.dst, chain=chain))
            else:
                feeders = [produced.get(ref) for ref in am_bc.src]
                if any(f is None for f in feeders):
                    continue
                if any(f.chain != (COPY,) or len(f.src) != 1 for f in feeders):
                    continue  # per-input transforms are inexpressible; drop
                src = tuple(f.src[0] for f in feeders)
                attrs.append(AttributeMap(src=src, dst=am_bc.dst, chain=am_bc.chain))
        if attrs:
            composed[pair] = NodeMap(pair[0], pair[1], tuple(attrs))

    return SchemaMapping(
        from_app=m_ab.from_app,
        to_app=m_bc.to_app,
        node_maps=tuple(composed.values()),
        path=m_ab.path + m_bc.path[1:],
    )


def _merge_chains(first, second) -> tuple[Transform, ...]:
    combined = tuple(first) + tuple(second)
    if any(t.name == "newID" for t in combined):
        return (NEW_ID,)
    merged = [t for t in combined if t.name != "copy"]
    return tuple(merged) or (COPY,)


def derive_all(direct) -> dict[tuple[str, str], SchemaMapping]:
    """Close a set of direct mappings under composition.

    For every ordered app pair reachable in the direct-mapping digraph the
    best mapping is emitted: direct ones always win; among composed
    candidates the one preserving the most attributes is chosen, ties
    broken by shortest then lexicographically smallest path.
    """
    direct = list(direct)
    by_pair: dict[tuple[str, str], SchemaMapping] = {}
    for m in direct:
        key = (m.from_app, m.to_app)
        if key in by_pair:
            raise SpecError(f"two direct mappings declared for {key[0]}->{key[1]}")
        by_pair[key] = m

    out_edges: dict[str, list[SchemaMapping]] = {}
    apps = set()
    for m in direct:
        out_edges.setdefault(m.from_app, []).append(m)
        apps.update((m.from_app, m.to_app))

    result = dict(by_pair)
    for start in sorted(apps):
        candidates: dict[str, list[SchemaMapping]] = {}

        def walk(mapping: SchemaMapping, visited: frozenset):
            candidates.setdefault(mapping.to_app, []).append(mapping)
            for nxt in out_edges.get(mapping.to_app, []):
                if nxt.to_app in visited or nxt.to_app == start:
                    continue
                try:
                    walk(compose(mapping, nxt), visited | {nxt.to_app})
                except CompositionError:
                    continue

        for first in out_edges.get(start, []):
            walk(first, frozenset((start, first.to_app)))

        for target, found in candidates.items():
            key = (start, target)
            if key in by_pair:
                continue  # a direct mapping always wins
            best = min(
                found,
                key=lambda m: (-m.mapped_attr_count(), len(m.path), m.path),
            )
            result[key] = best
    return result


@dataclass(frozen=True)
class NodeCoverage:
    node_type: str
    mapped: int
    total: int
    unmapped: tuple[str, ...]

    @property
    def fraction(self) -> float:
        return self.mapped / self.total if self.total else 1.0


@dataclass(frozen=True)
class CoverageReport:
    mapping_pair: tuple[str, str]
    per_node: tuple[NodeCoverage, ...] = field(default_factory=tuple)

    @property
    def aggregate(self) -> float:
        total = sum(nc.total for nc in self.per_node)
        mapped = sum(nc.mapped for nc in self.per_node)
        return mapped / total if total else 1.0

    def node(self, type_name: str) -> NodeCoverage:
        for nc in self.per_node:
            if nc.node_type == type_name:
                return nc
        raise KeyError(type_name)

    def unmapped_for(self, type_name: str) -> tuple[str, ...]:
        return self.node(type_name).unmapped


def coverage(m: SchemaMapping, src_schema: AppSchema, src_dag: DagSpec) -> CoverageReport:
    """Enumerate, per node type, the source attributes the mapping drops.

    These are exactly the attributes that end up in data bags when nodes
    of that type migrate under the mapping.
    """
    if m.from_app != src_schema.app_id:
        raise SpecError(
            f"mapping is from '{m.from_app}' but schema is '{src_schema.app_id}'"
        )
    per_node = []
    for nt in src_dag.node_types:
        nm = m.node_map(nt.type_name)
        mapped_refs: set[str] = set()
        if nm is not None:
            for am in nm.attributes:
                mapped_refs.update(am.src)
        all_refs = []
        for table in nt.member_tables:
            for attr in src_schema.table(table).attributes:
                all_refs.append(f"{table}.{attr}")
        unmapped = tuple(ref for ref in all_refs if ref not in mapped_refs)
        per_node.append(
            NodeCoverage(
                node_type=nt.type_name,
                mapped=len(all_refs) - len(unmapped),
                total=len(all_refs),
                unmapped=unmapped,
            )
        )
    return CoverageReport(mapping_pair=(m.from_app, m.to_app), per_node=tuple(per_node))


def identity_mapping(schema: AppSchema, dag: DagSpec) -> SchemaMapping:
    """Self-mapping that copies every attribute and regenerates keys."""
    node_maps = []
    for nt in dag.node_types:
        attrs = []
        for table in nt.member_tables:
            spec = schema.table(table)
            for attr in spec.attributes:
                ref = f"{table}.{attr}"
                chain = (NEW_ID,) if attr == spec.key else (COPY,)
                attrs.append(AttributeMap(src=(ref,), dst=ref, chain=chain))
        node_maps.append(NodeMap(nt.type_name, nt.type_name, tuple(attrs)))
    return SchemaMapping(schema.app_id, schema.app_id, tuple(node_maps))

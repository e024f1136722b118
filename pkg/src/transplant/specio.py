"""Load, validate, and serialize schemas, DAG specs, and schema mappings.

Documents are JSON with a mandatory integer "version" key; unversioned
documents are rejected outright. Malformed documents always produce a
SpecError diagnostic naming the offending path, never a crash. Saving and
reloading any valid spec is a structural identity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from transplant.errors import SpecError
from transplant.mapping import AttributeMap, NodeMap, SchemaMapping, Transform
from transplant.model import (
    AppSchema,
    DagSpec,
    DisplayRule,
    Edge,
    NodeTypeSpec,
    TableSpec,
    _split_ref,
)

FORMAT_VERSION = 1


@dataclass
class SpecDocument:
    content: dict
    source: str = "<memory>"

    @property
    def version(self) -> int:
        return self.content["version"]

    @property
    def kind(self) -> str:
        if "node_maps" in self.content:
            return "mapping"
        if "nodes" in self.content:
            return "dag"
        if "tables" in self.content:
            return "schema"
        raise SpecError("document is not a schema, dag, or mapping", self.source)

    def serialize(self) -> str:
        return json.dumps(self.content, indent=2, sort_keys=True) + "\n"


def parse_document(text: str, source: str = "<memory>") -> SpecDocument:
    try:
        content = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"invalid JSON: {exc}", source) from exc
    if not isinstance(content, dict):
        raise SpecError("top level must be an object", source)
    version = content.get("version")
    if not isinstance(version, int):
        raise SpecError("missing or non-integer 'version' (unversioned documents rejected)", source)
    if version != FORMAT_VERSION:
        raise SpecError(f"unsupported format version {version}", source)
    return SpecDocument(content=content, source=source)


def read_document(path) -> SpecDocument:
    path = Path(path)
    return parse_document(path.read_text(), source=str(path))


def _require(doc_part: dict, key: str, path: str):
    if key not in doc_part:
        raise SpecError(f"missing key '{key}'", path)
    return doc_part[key]


# ---------------------------------------------------------------------------
# Schemas


def load_app_schema(doc: SpecDocument) -> AppSchema:
    c = doc.content
    app = _require(c, "app", doc.source)
    tables = []
    for i, entry in enumerate(_require(c, "tables", doc.source)):
        path = f"{doc.source}:tables[{i}]"
        tables.append(
            TableSpec(
                name=_require(entry, "name", path),
                attributes=tuple(_require(entry, "attributes", path)),
                key=_require(entry, "key", path),
            )
        )
    return AppSchema(app_id=app, tables=tuple(tables))


def save_app_schema(schema: AppSchema) -> SpecDocument:
    content = {
        "version": FORMAT_VERSION,
        "app": schema.app_id,
        "tables": [
            {"name": t.name, "attributes": list(t.attributes), "key": t.key}
            for t in schema.tables
        ],
    }
    return SpecDocument(content=content)


# ---------------------------------------------------------------------------
# DAG specs


def load_dag_spec(doc: SpecDocument, schema: AppSchema) -> DagSpec:
    c = doc.content
    app = _require(c, "app", doc.source)
    root = _require(c, "root", doc.source)

    node_types, dep_edges, own_edges, share_edges, rules = [], [], [], [], []
    for i, entry in enumerate(_require(c, "nodes", doc.source)):
        path = f"{doc.source}:nodes[{i}]"
        name = _require(entry, "name", path)
        tables = tuple(_require(entry, "tables", path))
        joins = tuple(tuple(j) for j in entry.get("joins", []))
        node_types.append(NodeTypeSpec(type_name=name, member_tables=tables, intra_node_joins=joins))

        for j, dep in enumerate(entry.get("depends_on", [])):
            dep_edges.append(_load_edge("dependency", name, dep, f"{path}.depends_on[{j}]", c))
        owned = entry.get("owned_by")
        if owned:
            own_edges.append(_load_edge("ownership", name, owned, f"{path}.owned_by", c))
        for j, share in enumerate(entry.get("shared_with", [])):
            share_edges.append(_load_edge("sharing", name, share, f"{path}.shared_with[{j}]", c))

        rule = entry.get("display_rule")
        if rule is not None:
            rules.append(
                DisplayRule(
                    node_type=name,
                    requires_parents_displayed=rule.get("requires_parents_displayed", True),
                    exceptions=tuple(rule.get("exceptions", [])),
                    requires_owner_root=rule.get("requires_owner_root", True),
                    requires_sharer_root=rule.get("requires_sharer_root", True),
                )
            )

    dag = DagSpec(
        app_id=app,
        node_types=tuple(node_types),
        root_type=root,
        dependency_edges=tuple(dep_edges),
        ownership_edges=tuple(own_edges),
        sharing_edges=tuple(share_edges),
        display_rules=tuple(rules),
    )
    dag.validate(schema)
    return dag


def _load_edge(kind: str, child_type: str, entry: dict, path: str, doc_content: dict) -> Edge:
    attr_ref = _require(entry, "attr", path)
    target_ref = _require(entry, "target", path)
    child_table, child_attr = _split_ref(attr_ref, path)
    parent_table, parent_attr = _split_ref(target_ref, path)
    if kind == "dependency":
        parent_type = _require(entry, "node", path)
    else:
        parent_type = _require(doc_content, "root", path)
    return Edge(
        kind=kind,
        child_type=child_type,
        child_table=child_table,
        child_attr=child_attr,
        parent_type=parent_type,
        parent_table=parent_table,
        parent_attr=parent_attr,
    )


def save_dag_spec(dag: DagSpec) -> SpecDocument:
    if not dag.node_types:
        raise SpecError("refusing to save a DAG spec with no node types", dag.app_id)
    nodes = []
    for nt in dag.node_types:
        entry: dict = {
            "name": nt.type_name,
            "tables": list(nt.member_tables),
            "joins": [list(j) for j in nt.intra_node_joins],
        }
        deps = [
            {
                "attr": f"{e.child_table}.{e.child_attr}",
                "node": e.parent_type,
                "target": f"{e.parent_table}.{e.parent_attr}",
            }
            for e in dag.dependency_edges
            if e.child_type == nt.type_name
        ]
        if deps:
            entry["depends_on"] = deps
        owns = [e for e in dag.ownership_edges if e.child_type == nt.type_name]
        if owns:
            e = owns[0]
            entry["owned_by"] = {
                "attr": f"{e.child_table}.{e.child_attr}",
                "target": f"{e.parent_table}.{e.parent_attr}",
            }
        shares = [
            {
                "attr": f"{e.child_table}.{e.child_attr}",
                "target": f"{e.parent_table}.{e.parent_attr}",
            }
            for e in dag.sharing_edges
            if e.child_type == nt.type_name
        ]
        if shares:
            entry["shared_with"] = shares
        for rule in dag.display_rules:
            if rule.node_type == nt.type_name:
                entry["display_rule"] = {
                    "requires_parents_displayed": rule.requires_parents_displayed,
                    "exceptions": list(rule.exceptions),
                    "requires_owner_root": rule.requires_owner_root,
                    "requires_sharer_root": rule.requires_sharer_root,
                }
        nodes.append(entry)
    content = {
        "version": FORMAT_VERSION,
        "app": dag.app_id,
        "root": dag.root_type,
        "nodes": nodes,
    }
    return SpecDocument(content=content)


# ---------------------------------------------------------------------------
# Schema mappings


def load_mapping(doc: SpecDocument, src: AppSchema, dst: AppSchema) -> SchemaMapping:
    c = doc.content
    from_app = _require(c, "from_app", doc.source)
    to_app = _require(c, "to_app", doc.source)
    if from_app != src.app_id or to_app != dst.app_id:
        raise SpecError(
            f"mapping {from_app}->{to_app} does not match schemas "
            f"{src.app_id}->{dst.app_id}",
            doc.source,
        )

    node_maps = []
    for i, entry in enumerate(_require(c, "node_maps", doc.source)):
        path = f"{doc.source}:node_maps[{i}]"
        attrs = []
        for j, am in enumerate(_require(entry, "attributes", path)):
            apath = f"{path}.attributes[{j}]"
            raw_src = _require(am, "from", apath)
            src_refs = tuple(raw_src) if isinstance(raw_src, list) else (raw_src,)
            dst_ref = _require(am, "to", apath)
            raw_chain = am.get("transform", "copy")
            chain_texts = raw_chain if isinstance(raw_chain, list) else [raw_chain]
            try:
                chain = tuple(Transform.parse(t) for t in chain_texts)
            except SpecError as exc:
                raise SpecError(str(exc), apath) from exc
            for ref in src_refs:
                _check_ref(ref, src, apath)
            _check_ref(dst_ref, dst, apath)
            attrs.append(AttributeMap(src=src_refs, dst=dst_ref, chain=chain))
        node_maps.append(
            NodeMap(
                from_node=_require(entry, "from_node", path),
                to_node=_require(entry, "to_node", path),
                attributes=tuple(attrs),
            )
        )

    path_key = tuple(c.get("derivation", (from_app, to_app)))
    return SchemaMapping(
        from_app=from_app, to_app=to_app, node_maps=tuple(node_maps), path=path_key
    )


def _check_ref(ref: str, schema: AppSchema, path: str):
    table, attr = _split_ref(ref, path)
    if not schema.has_table(table):
        raise SpecError(f"unknown table '{table}' in app '{schema.app_id}'", path)
    if attr not in schema.table(table).attributes:
        raise SpecError(f"unknown attribute '{ref}' in app '{schema.app_id}'", path)


def save_mapping(m: SchemaMapping) -> SpecDocument:
    node_maps = []
    for nm in m.node_maps:
        attrs = []
        for am in nm.attributes:
            chain_texts = [str(t) for t in am.chain]
            attrs.append(
                {
                    "from": list(am.src) if len(am.src) > 1 else am.src[0],
                    "to": am.dst,
                    "transform": chain_texts if len(chain_texts) > 1 else chain_texts[0],
                }
            )
        node_maps.append(
            {"from_node": nm.from_node, "to_node": nm.to_node, "attributes": attrs}
        )
    content = {
        "version": FORMAT_VERSION,
        "from_app": m.from_app,
        "to_app": m.to_app,
        "node_maps": node_maps,
    }
    if not m.is_direct:
        content["derivation"] = list(m.path)
    return SpecDocument(content=content)


def save_spec(spec) -> SpecDocument:
    """Serialize any supported spec object; load(save(x)) == x."""
    if isinstance(spec, DagSpec):
        return save_dag_spec(spec)
    if isinstance(spec, SchemaMapping):
        return save_mapping(spec)
    if isinstance(spec, AppSchema):
        return save_app_schema(spec)
    raise SpecError(f"cannot serialize object of type {type(spec).__name__}")

"""Mapping algebra: composition, transitive derivation, coverage accounting."""

import pytest

from transplant.errors import CompositionDomainError, CompositionError, SpecError
from transplant.mapping import (
    AttributeMap,
    NodeMap,
    SchemaMapping,
    Transform,
    apply_chain,
    compose,
    coverage,
    derive_all,
    identity_mapping,
)
from transplant.synthgen import fixtures

COPY = (Transform("copy"),)
NEWID = (Transform("newID"),)


def simple_mapping(from_app, to_app, triples):
    """triples: (from_node, to_node, [(src, dst, chain), ...])"""
    node_maps = []
    for from_node, to_node, attrs in triples:
        node_maps.append(
            NodeMap(
                from_node,
                to_node,
                tuple(AttributeMap(src=(s,), dst=d, chain=c) for s, d, c in attrs),
            )
        )
    return SchemaMapping(from_app, to_app, tuple(node_maps))


def test_compose_collapses_regenerated_ids():
    ab = simple_mapping("a", "b", [("x", "y", [("xs.id", "ys.id", NEWID)])])
    bc = simple_mapping("b", "c", [("y", "z", [("ys.id", "zs.id", NEWID)])])
    ac = compose(ab, bc)
    am = ac.node_maps[0].attributes[0]
    assert am.chain == NEWID
    assert ac.path == ("a", "b", "c")


def test_compose_chains_values_like_the_two_hop_route():
    ab = simple_mapping("a", "b", [("x", "y", [("xs.t", "ys.t", COPY)])])
    bc = simple_mapping("b", "c", [("y", "z", [("ys.t", "zs.t", (Transform("truncate", 5),))])])
    ac = compose(ab, bc)
    chain = ac.node_maps[0].attributes[0].chain
    two_hop = apply_chain(bc.node_maps[0].attributes[0].chain,
                          [apply_chain(ab.node_maps[0].attributes[0].chain, ["hello world"])])
    assert apply_chain(chain, ["hello world"]) == two_hop == "hello"


def test_compose_domain_mismatch():
    ab = simple_mapping("a", "b", [("x", "y", [("xs.id", "ys.id", NEWID)])])
    with pytest.raises(CompositionDomainError):
        compose(ab, ab)


def test_attribute_survives_only_when_mapped_in_both_legs():
    apps, mappings = fixtures()
    d_schema, d_dag = apps["miniDiaspora"]
    composed = compose(mappings[("miniDiaspora", "miniMastodon")],
                       mappings[("miniMastodon", "miniGnuSocial")])
    report = coverage(composed, d_schema, d_dag)
    # the second leg never maps the person's long-form text, so it drops
    assert "people.bio" in report.unmapped_for("person")
    direct_report = coverage(mappings[("miniDiaspora", "miniMastodon")], d_schema, d_dag)
    assert "people.bio" not in direct_report.unmapped_for("person")


def test_compose_rejects_conflicting_node_maps():
    ab = simple_mapping("a", "b", [
        ("x", "y1", [("xs.id", "y1s.id", NEWID)]),
        ("x", "y2", [("xs.id", "y2s.id", NEWID)]),
    ])
    bc = simple_mapping("b", "c", [
        ("y1", "z", [("y1s.id", "zs.id", NEWID)]),
        ("y2", "z", [("y2s.id", "zs.id", NEWID)]),
    ])
    with pytest.raises(CompositionError):
        compose(ab, bc)


def test_coverage_reports_bag_bound_attributes():
    apps, mappings = fixtures()
    d_schema, d_dag = apps["miniDiaspora"]
    report = coverage(mappings[("miniDiaspora", "miniMastodon")], d_schema, d_dag)
    assert set(report.unmapped_for("post")) == {"posts.lang", "posts.loc"}
    # no node map for notifications at all: everything is listed
    assert report.node("notification").mapped == 0


def test_identity_mapping_is_lossless():
    apps, _ = fixtures()
    schema, dag = apps["miniTwitter"]
    report = coverage(identity_mapping(schema, dag), schema, dag)
    assert report.aggregate == 1.0


def test_empty_mapping_coverage_is_zero():
    apps, _ = fixtures()
    schema, dag = apps["miniDiaspora"]
    empty = SchemaMapping("miniDiaspora", "miniMastodon", ())
    report = coverage(empty, schema, dag)
    assert report.aggregate == 0.0
    assert all(nc.mapped == 0 for nc in report.per_node)


def test_monotone_loss_attribute_wise():
    apps, mappings = fixtures()
    d_schema, d_dag = apps["miniDiaspora"]
    ab = mappings[("miniDiaspora", "miniMastodon")]
    bc = mappings[("miniMastodon", "miniGnuSocial")]
    composed = compose(ab, bc)

    def mapped_refs(m, node):
        nm = m.node_map(node)
        return set().union(*[am.src for am in nm.attributes]) if nm else set()

    for nt in d_dag.node_types:
        assert mapped_refs(composed, nt.type_name) <= mapped_refs(ab, nt.type_name)


def test_derive_all_reaches_every_ordered_pair():
    _apps, direct = fixtures()
    closure = derive_all(direct.values())
    apps = {"miniDiaspora", "miniMastodon", "miniTwitter", "miniGnuSocial"}
    expected = {(a, b) for a in apps for b in apps if a != b}
    assert set(closure) == expected
    for pair, mapping in closure.items():
        assert (mapping.path[0], mapping.path[-1]) == pair


def test_direct_mappings_always_win():
    _apps, direct = fixtures()
    closure = derive_all(direct.values())
    for pair, m in direct.items():
        assert closure[pair] is m


def test_derivation_prefers_higher_coverage_paths():
    # two composed routes to the same pair; the one keeping more attributes wins
    ab = simple_mapping("a", "b", [("x", "y", [
        ("xs.id", "ys.id", NEWID), ("xs.t", "ys.t", COPY), ("xs.u", "ys.u", COPY)])])
    bd = simple_mapping("b", "d", [("y", "w", [
        ("ys.id", "ws.id", NEWID), ("ys.t", "ws.t", COPY), ("ys.u", "ws.u", COPY)])])
    ac = simple_mapping("a", "c", [("x", "z", [
        ("xs.id", "zs.id", NEWID), ("xs.t", "zs.t", COPY)])])
    cd = simple_mapping("c", "d", [("z", "w", [
        ("zs.id", "ws.id", NEWID), ("zs.t", "ws.t", COPY)])])
    closure = derive_all([ab, bd, ac, cd])
    assert closure[("a", "d")].path == ("a", "b", "d")
    assert closure[("a", "d")].mapped_attr_count() == 3


def test_fixture_derivation_picks_the_lossier_hop_last():
    # the route that preserves the account's long-form text is selected
    _apps, direct = fixtures()
    closure = derive_all(direct.values())
    m = closure[("miniMastodon", "miniTwitter")]
    assert m.path == ("miniMastodon", "miniDiaspora", "miniTwitter")
    srcs = set().union(*[am.src for am in m.node_map("account").attributes])
    assert "accounts.note" in srcs


def test_derive_all_empty_input():
    assert derive_all([]) == {}


def test_transform_parse_errors():
    with pytest.raises(SpecError):
        Transform.parse("truncate")
    with pytest.raises(SpecError):
        Transform.parse("copy(3)")
    with pytest.raises(SpecError):
        Transform.parse("constant")


def test_concat_only_first():
    with pytest.raises(SpecError):
        apply_chain((Transform("copy"), Transform("concat")), ["a"])
    assert apply_chain((Transform("concat"),), ["a", None, "b"]) == "a b"

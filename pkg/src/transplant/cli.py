"""Command-line harness for generating datasets, running migrations,
auditing the results, and emitting reports with figures.

Exit codes: 0 clean, 1 audit findings under --strict, 2 usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from transplant import audit as audit_mod
from transplant import metrics, plots
from transplant.clock import VirtualClock
from transplant.engine import MigrationEngine
from transplant.errors import LeaseDenied, SpecError, TransplantError
from transplant.mapping import derive_all
from transplant.model import NodeId
from transplant.specio import (
    load_app_schema,
    load_dag_spec,
    load_mapping,
    read_document,
    save_mapping,
)
from transplant.store import FaultPlan, MetadataStore
from transplant.synthgen import FIXTURE_APPS, GenConfig, fixtures, generate, make_bundle
from transplant.workspace import Workspace, node_id_from_list


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transplant",
        description="Cross-application data migration engine and experiment harness.",
    )
    parser.add_argument("--data", default="./workspace", help="workspace directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset into the workspace")
    p.add_argument("--users", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--app", default="miniDiaspora", choices=FIXTURE_APPS)

    p = sub.add_parser("specs", help="spec document utilities")
    spec_sub = p.add_subparsers(dest="specs_command", required=True)
    pc = spec_sub.add_parser("check", help="validate DAG/mapping documents")
    pc.add_argument("--dir", default=None, help="directory of documents (default: packaged fixtures)")

    p = sub.add_parser("map", help="schema mapping utilities")
    map_sub = p.add_subparsers(dest="map_command", required=True)
    pd = map_sub.add_parser("derive", help="derive transitive mappings")
    pd.add_argument("--mappings", default=None, help="directory of direct mapping documents")
    pd.add_argument("--out", default=None, help="where to write derived mapping documents")

    p = sub.add_parser("migrate", help="run migrations")
    p.add_argument("--type", dest="migration_type", choices=["deletion", "independent"], default="deletion")
    p.add_argument("--src", required=True, choices=FIXTURE_APPS)
    p.add_argument("--dst", required=True, choices=FIXTURE_APPS)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--user", type=int, help="root key of one user")
    group.add_argument("--all", action="store_true", help="migrate every user, one at a time")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cutoff", type=int, default=None, help="only data created at or before this time")
    p.add_argument("--fault-inject", default=None, metavar="POINT", help="e.g. wal:17 or mut:230")
    p.add_argument("--system", choices=["engine", "naive", "naive-plus"], default="engine")

    p = sub.add_parser("reset", help="restore workspace state from the generated baseline")

    p = sub.add_parser("audit", help="scan for migration anomalies")
    p.add_argument("--strict", action="store_true", help="exit 1 on any finding")

    p = sub.add_parser("report", help="emit metric reports (CSV + figure)")
    p.add_argument("kind", choices=["continuity", "scaling", "rates", "anomalies"])
    p.add_argument("--out", default=None, help="output directory (default: <data>/reports-out)")

    p = sub.add_parser("bags", help="inspect or drain data bags")
    bag_sub = p.add_subparsers(dest="bags_command", required=True)
    pl = bag_sub.add_parser("list")
    pl.add_argument("--owner", default=None, help="owner node ref app:type:key")
    pt = bag_sub.add_parser("take")
    pt.add_argument("--origin", required=True, help="origin node ref app:type:key")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except (SpecError, TransplantError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    ws = Workspace(args.data)
    if args.command == "gen":
        return cmd_gen(ws, args)
    if args.command == "specs":
        return cmd_specs_check(args)
    if args.command == "map":
        return cmd_map_derive(args)
    if args.command == "migrate":
        return cmd_migrate(ws, args)
    if args.command == "reset":
        ws.reset_state()
        print("state restored from baseline")
        return 0
    if args.command == "audit":
        return cmd_audit(ws, args)
    if args.command == "report":
        return cmd_report(ws, args)
    if args.command == "bags":
        return cmd_bags(ws, args)
    raise SpecError(f"unknown command {args.command}")


def cmd_gen(ws: Workspace, args) -> int:
    clock = VirtualClock()
    bundles = {app_id: make_bundle(app_id, clock) for app_id in FIXTURE_APPS}
    meta = MetadataStore(clock)
    cfg = GenConfig(users=args.users, seed=args.seed)
    generate(cfg, bundles[args.app], meta)
    census = audit_mod.census(bundles)
    ws.save_config({"users": args.users, "seed": args.seed, "app": args.app})
    ws.save_baseline(bundles, meta, census)
    total = sum(b.store.row_count() for b in bundles.values())
    print(f"generated {args.users} users, {total} rows into {ws.root}")
    return 0


def cmd_specs_check(args) -> int:
    failures = 0
    if args.dir is None:
        apps, mappings = fixtures()
        for app_id, (schema, dag) in apps.items():
            dag.validate(schema)
            print(f"ok: {app_id} ({len(dag.node_types)} node types)")
        for (src, dst), m in sorted(mappings.items()):
            print(f"ok: mapping {src} -> {dst} ({len(m.node_maps)} node maps)")
        return 0

    directory = Path(args.dir)
    docs = sorted(directory.glob("*.json"))
    schemas = {}
    for path in docs:
        try:
            doc = read_document(path)
            if doc.kind == "schema":
                schema = load_app_schema(doc)
                schemas[schema.app_id] = schema
        except SpecError as exc:
            print(f"fail: {path.name}: {exc}")
            failures += 1
    fixture_apps, _ = fixtures()
    for app_id, (schema, _dag) in fixture_apps.items():
        schemas.setdefault(app_id, schema)
    for path in docs:
        try:
            doc = read_document(path)
            if doc.kind == "dag":
                app = doc.content.get("app")
                if app not in schemas:
                    raise SpecError(f"no schema available for app '{app}'", str(path))
                load_dag_spec(doc, schemas[app])
            elif doc.kind == "mapping":
                src = doc.content.get("from_app")
                dst = doc.content.get("to_app")
                if src not in schemas or dst not in schemas:
                    raise SpecError(f"no schema for {src} or {dst}", str(path))
                load_mapping(doc, schemas[src], schemas[dst])
            elif doc.kind == "schema":
                continue
            print(f"ok: {path.name}")
        except SpecError as exc:
            print(f"fail: {path.name}: {exc}")
            failures += 1
    return 1 if failures else 0


def cmd_map_derive(args) -> int:
    if args.mappings is None:
        _apps, direct = fixtures()
        direct_list = list(direct.values())
    else:
        directory = Path(args.mappings)
        apps, _ = fixtures()
        schemas = {app_id: schema for app_id, (schema, _d) in apps.items()}
        direct_list = []
        for path in sorted(directory.glob("*.json")):
            doc = read_document(path)
            if doc.kind != "mapping":
                continue
            src = doc.content["from_app"]
            dst = doc.content["to_app"]
            direct_list.append(load_mapping(doc, schemas[src], schemas[dst]))

    closure = derive_all(direct_list)
    derived = {pair: m for pair, m in sorted(closure.items()) if not m.is_direct}
    for (src, dst), m in derived.items():
        print(f"{src} -> {dst} via {' -> '.join(m.path)} ({m.mapped_attr_count()} attrs)")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for (src, dst), m in derived.items():
            (out / f"{src}__to__{dst}.json").write_text(save_mapping(m).serialize())
        print(f"wrote {len(derived)} derived mappings to {out}")
    return 0


def _engine_for(bundles, meta, src, dst, seed, workers):
    _apps, direct = fixtures()
    closure = derive_all(direct.values())
    mapping = closure.get((src, dst))
    if mapping is None:
        raise SpecError(f"no mapping route from {src} to {dst}")
    return MigrationEngine(
        bundles[src],
        bundles[dst],
        meta,
        mapping,
        mappings=closure,
        seed=seed,
        workers=workers,
    )


def cmd_migrate(ws: Workspace, args) -> int:
    clock = VirtualClock()
    bundles, meta, _census = ws.load_state(clock)
    src = bundles[args.src]
    if args.all:
        user_keys = sorted(src.store.keys(src.dag.node_type(src.dag.root_type).member_tables[0]))
    else:
        user_keys = [args.user]

    reports = []
    if args.system == "engine":
        engine = _engine_for(bundles, meta, args.src, args.dst, args.seed, args.workers)
        fault_plan = FaultPlan(args.fault_inject) if args.fault_inject else None
        for key in user_keys:
            try:
                report = engine.migrate_user(
                    key, args.migration_type, cutoff=args.cutoff, fault_plan=fault_plan
                )
            except LeaseDenied as exc:
                print(f"user {key}: lease denied ({exc})")
                continue
            reports.append(report)
            fault_plan = None  # a single injection point applies to the first run
    else:
        from transplant.baselines import NaiveMigrator, NaivePlusMigrator

        _apps, direct = fixtures()
        closure = derive_all(direct.values())
        mapping = closure[(args.src, args.dst)]
        cls = NaiveMigrator if args.system == "naive" else NaivePlusMigrator
        migrator = cls(bundles[args.src], bundles[args.dst], mapping, meta=meta)
        census = ws.load_census()
        curves = {args.src: [], args.dst: []}
        for i, key in enumerate(user_keys, start=1):
            reports.append(migrator.migrate_user(key))
            for app_id in (args.src, args.dst):
                curves[app_id].append([i, migrator.gc_deleted[app_id]])
        ws.save_extra(
            "naive_curves.json",
            {"system": args.system, "curves": curves, "src_total": census["totals"][args.src]},
        )

    for report in reports:
        ws.append_report(report)
    ws.save_state(bundles, meta, clock_now=clock.now)

    committed = sum(1 for r in reports if r.outcome == "committed")
    rolled = sum(1 for r in reports if r.outcome == "rolled_back")
    moved = sum(r.counts.get("migrated", 0) for r in reports)
    print(
        f"{args.system}: {len(reports)} migrations ({committed} committed, "
        f"{rolled} rolled back), {moved} nodes moved, virtual cost {clock.now}"
    )
    return 0


def cmd_audit(ws: Workspace, args) -> int:
    bundles, meta, _ = ws.load_state()
    census = ws.load_census()
    reports = ws.load_reports()
    _apps, direct = fixtures()
    closure = derive_all(direct.values())
    result = audit_mod.audit(bundles, meta, base=census, reports=reports, mappings=closure)
    summary = result.summary()
    print(json.dumps(summary, indent=2, sort_keys=True))
    for finding in result.findings[:20]:
        print(f"  {finding.category}: {finding.app_id} {finding.node}: {finding.detail}")
    if len(result.findings) > 20:
        print(f"  ... and {len(result.findings) - 20} more")
    if args.strict and not result.clean:
        return 1
    return 0


def cmd_report(ws: Workspace, args) -> int:
    out_dir = Path(args.out) if args.out else ws.root / "reports-out"
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = ws.load_reports()
    if args.kind == "continuity":
        series = {}
        for system in ("engine", "naive_plus"):
            batch = [r for r in reports if r.system == system and r.migration_type == "deletion"]
            if batch:
                series[system] = metrics.unavailability_fractions(batch)
        csv_path = out_dir / "continuity.csv"
        with csv_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["system", "fraction"])
            for system, fractions in series.items():
                for value in fractions:
                    writer.writerow([system, f"{value:.6f}"])
        figure = plots.continuity_figure(series, out_dir / "continuity.png")
        for system, fractions in series.items():
            print(f"{system}: {len(fractions)} objects, median {metrics.median(fractions):.3f}")
        print(f"wrote {csv_path} and {figure}")
    elif args.kind == "scaling":
        engine_reports = [r for r in reports if r.system == "engine"]
        series = metrics.scaling_series(engine_reports)
        csv_path = out_dir / "scaling.csv"
        with csv_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["algorithm", "size", "virtual_cost"])
            for name, (xs, ys) in series.items():
                for x, y in zip(xs, ys):
                    writer.writerow([name, x, y])
        for name, fit in metrics.scaling_fits(engine_reports).items():
            print(f"{name}: slope {fit.slope:.2f}, intercept {fit.intercept:.1f}, R² {fit.r_squared:.3f} (n={fit.n})")
        figure = plots.scaling_figure(engine_reports, out_dir / "scaling.png")
        print(f"wrote {csv_path} and {figure}")
    elif args.kind == "rates":
        engine_reports = [r for r in reports if r.system == "engine"]
        summary = metrics.rates_summary(engine_reports)
        csv_path = out_dir / "rates.csv"
        with csv_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["type", "migrations", "nodes", "total_cost", "cost_per_node"])
            for name, bucket in sorted(summary.items()):
                writer.writerow(
                    [name, bucket["migrations"], bucket["nodes"], bucket["total_cost"],
                     f"{bucket['cost_per_node']:.2f}"]
                )
        for name, bucket in sorted(summary.items()):
            print(f"{name}: {bucket['nodes']} nodes, cost/node {bucket['cost_per_node']:.1f}")
        figure = plots.rates_figure(summary, out_dir / "rates.png")
        print(f"wrote {csv_path} and {figure}")
    elif args.kind == "anomalies":
        payload = ws.load_extra("naive_curves.json")
        if payload is None:
            print("no baseline curves recorded; run `migrate --system naive` first")
            return 0
        census = ws.load_census()
        bundles, _meta, _ = ws.load_state()
        curves = {}
        for app_id, points in payload["curves"].items():
            base_total = census["totals"].get(app_id)
            if not base_total:
                # destination totals are only known after all migrations ran
                base_total = audit_mod.count_nodes(bundles[app_id]) or 1
            curves[app_id] = [[i, 100.0 * b / base_total] for i, b in points]
        csv_path = out_dir / "anomalies.csv"
        with csv_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["app", "users_migrated", "dangling_pct"])
            for app_id, points in curves.items():
                for i, pct in points:
                    writer.writerow([app_id, i, f"{pct:.3f}"])
        figure = plots.anomalies_figure(curves, out_dir / "anomalies.png")
        for app_id, points in curves.items():
            final = points[-1][1] if points else 0.0
            print(f"{app_id}: final dangling {final:.1f}%")
        print(f"wrote {csv_path} and {figure}")
    return 0


def cmd_bags(ws: Workspace, args) -> int:
    bundles, meta, _ = ws.load_state()
    if args.bags_command == "list":
        entries = list(meta.bags.values())
        if args.owner:
            entries = [e for e in entries if e.owner.ref() == args.owner]
        for entry in sorted(entries, key=lambda e: e.origin.ref()):
            print(
                json.dumps(
                    {
                        "owner": entry.owner.ref(),
                        "origin": entry.origin.ref(),
                        "type": entry.node_type,
                        "reason": entry.reason,
                        "partial": entry.partial,
                        "rows": entry.rows,
                    },
                    sort_keys=True,
                )
            )
        print(f"{len(entries)} entries")
        return 0
    if args.bags_command == "take":
        app_id, type_name, raw = args.origin.split(":", 2)
        keys = tuple(int(k) if k.lstrip("-").isdigit() else k for k in raw.split(","))
        origin = NodeId(app_id, type_name, keys)
        entry = meta.bags.get((origin.app_id, origin.ref()))
        if entry is None:
            print(f"no bag entry with origin {args.origin}", file=sys.stderr)
            return 2
        taken = meta.bag_take(entry.owner.ref(), origin)
        print(json.dumps({"owner": taken.owner.ref(), "rows": taken.rows}, sort_keys=True))
        ws.save_state(bundles, meta)
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())

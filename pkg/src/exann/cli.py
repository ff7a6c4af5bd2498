"""Command-line interface. One subcommand per pipeline stage plus `run`
for whole experiments; see README for walkthroughs."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("exann")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    handler = args.handler
    return handler(args) or 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="exann", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-synthetic", help="generate a synthetic database (fvecs)")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--dim", type=int, required=True)
    s.add_argument("--decay", type=float, default=0.95)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--queries", type=int, default=0, help="also emit this many queries + ground truth")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--metric", choices=["l2", "ip"], default="l2")
    s.add_argument("--output", required=True, help="output prefix (writes <prefix>_base.fvecs ...)")
    s.set_defaults(handler=cmd_make_synthetic)

    s = sub.add_parser("preprocess", help="fit the PCA early-exit model")
    s.add_argument("--input", required=True, help="base vectors (fvecs)")
    s.add_argument("--queries", help="probe pool for variance estimation (fvecs)")
    s.add_argument("--metric", choices=["l2", "ip"], default="l2")
    s.add_argument("--target-prob", type=float, default=0.9)
    s.add_argument("--samples", type=int, default=10000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", required=True)
    s.set_defaults(handler=cmd_preprocess)

    s = sub.add_parser("build-index", help="build the navigable graph")
    s.add_argument("--input", required=True)
    s.add_argument("--pca", help="transform inputs with this model before building")
    s.add_argument("--metric", choices=["l2", "ip"], default="l2")
    s.add_argument("--M", type=int, default=16)
    s.add_argument("--ef-construction", type=int, default=150)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", required=True)
    s.set_defaults(handler=cmd_build_index)

    s = sub.add_parser("import-index", help="convert a node,layer,neighbor edge CSV")
    s.add_argument("--edges", required=True)
    s.add_argument("--dim", type=int, default=0)
    s.add_argument("--M", type=int)
    s.add_argument("--output", required=True)
    s.set_defaults(handler=cmd_import_index)

    s = sub.add_parser("tune-dfloat", help="search for a compressed vector layout")
    s.add_argument("--input", required=True, help="base vectors (fvecs)")
    s.add_argument("--index", required=True)
    s.add_argument("--pca", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--target-recall", type=float, required=True)
    s.add_argument("--burst-bits", type=int, default=128)
    s.add_argument("--devices", type=int, default=4)
    s.add_argument("--ef-search", type=int, default=64)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--metric", choices=["l2", "ip"], default="l2")
    s.add_argument("--output", required=True)
    s.set_defaults(handler=cmd_tune_dfloat)

    s = sub.add_parser("search", help="run queries against an index")
    s.add_argument("--input", required=True, help="base vectors (fvecs)")
    s.add_argument("--index", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--pca")
    s.add_argument("--dfloat-config")
    s.add_argument("--mode", choices=["exact", "fee-partial", "fee-spca"], default="exact")
    s.add_argument("--metric", choices=["l2", "ip"], default="l2")
    s.add_argument("--ef-search", type=int, default=64)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--gt", help="ground-truth ivecs for recall reporting")
    s.add_argument("--trace-out")
    s.add_argument("--results-out", help="write result ids as ivecs")
    s.set_defaults(handler=cmd_search)

    s = sub.add_parser("map-layout", help="place vectors + neighbor lists on sub-channels")
    s.add_argument("--index", required=True)
    s.add_argument("--dim", type=int, required=True)
    s.add_argument("--dfloat-config")
    s.add_argument("--topology")
    s.add_argument("--policy", choices=["round_robin", "block"], default="round_robin")
    s.add_argument("--no-shuffle", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", required=True)
    s.set_defaults(handler=cmd_map_layout)

    s = sub.add_parser("simulate", help="replay a trace through the cost model")
    s.add_argument("--trace", required=True)
    s.add_argument("--layout", required=True)
    s.add_argument("--topology")
    s.add_argument("--enable", default="dam,lnc,prefetch", help="comma list of dam,lnc,prefetch (empty for baseline)")
    s.add_argument("--out", required=True, help="stats CSV path")
    s.set_defaults(handler=cmd_simulate)

    s = sub.add_parser("sweep", help="sweep a parameter and simulate each point")
    s.add_argument("--param", required=True, choices=["efSearch", "lncd_capacity", "batch", "M"])
    s.add_argument("--values", required=True, help="comma-separated integers")
    s.add_argument("--input", required=True)
    s.add_argument("--index", required=True)
    s.add_argument("--pca", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--metric", choices=["l2", "ip"], default="l2")
    s.add_argument("--mode", choices=["exact", "fee-partial", "fee-spca"], default="fee-spca")
    s.add_argument("--ef-search", type=int, default=64)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--topology")
    s.add_argument("--enable", default="dam,lnc,prefetch")
    s.add_argument("--out", required=True)
    s.set_defaults(handler=cmd_sweep)

    s = sub.add_parser("run", help="run a whole experiment spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", help="override the spec's output directory")
    s.set_defaults(handler=cmd_run)

    s = sub.add_parser("report", help="render a bundle (csv listing or plots)")
    s.add_argument("--bundle", required=True)
    s.add_argument("--format", choices=["csv", "plot"], default="csv")
    s.set_defaults(handler=cmd_report)

    return p


def _load_db(path, metric):
    from exann.vecdb import Metric, VectorDatabase, load_xvecs

    return VectorDatabase(load_xvecs(path, "fvecs"), metric=Metric(metric))


def _enable_list(raw):
    return tuple(x.strip() for x in raw.split(",") if x.strip())


def cmd_make_synthetic(args):
    from exann.vecdb import Metric, make_synthetic_with_queries, save_xvecs

    n_q = max(args.queries, 1)
    db, qs = make_synthetic_with_queries(
        args.n, n_q, args.dim, args.decay, seed=args.seed, k=min(args.k, args.n), metric=Metric(args.metric)
    )
    prefix = args.output
    save_xvecs(f"{prefix}_base.fvecs", db.vectors, "fvecs")
    if args.queries > 0:
        save_xvecs(f"{prefix}_query.fvecs", qs.queries, "fvecs")
        save_xvecs(f"{prefix}_groundtruth.ivecs", qs.ground_truth, "ivecs")
    print(f"wrote {prefix}_base.fvecs ({args.n} x {args.dim})")


def cmd_preprocess(args):
    from exann.pca import estimate_variance, fit_pca, save_model, transform, transform_database, with_statistics
    from exann.vecdb import load_xvecs

    db = _load_db(args.input, args.metric)
    model = fit_pca(db)
    tdb = transform_database(model, db)
    probes = None
    if args.queries:
        probes = transform(model, load_xvecs(args.queries, "fvecs"))
    var = estimate_variance(model, tdb, args.samples, args.seed, probes=probes)
    model = with_statistics(model, var, args.target_prob)
    save_model(model, args.output)
    print(f"wrote {args.output} (D={model.dim}, p={args.target_prob})")


def cmd_build_index(args):
    from exann.graph import build, export_index
    from exann.pca import load_model, transform_database

    db = _load_db(args.input, args.metric)
    if args.pca:
        db = transform_database(load_model(args.pca), db)
    idx = build(db, m=args.M, ef_construction=args.ef_construction, seed=args.seed)
    export_index(idx, args.output)
    print(f"wrote {args.output} (n={idx.n}, layers={len(idx.layers)}, entry={idx.entry_point})")


def cmd_import_index(args):
    from exann.graph import export_index, import_edge_csv

    idx = import_edge_csv(args.edges, m=args.M, dim=args.dim)
    export_index(idx, args.output)
    print(f"wrote {args.output} (n={idx.n}, layers={len(idx.layers)})")


def cmd_tune_dfloat(args):
    from exann.dfloat import save_config, search_config
    from exann.graph import import_index
    from exann.pca import load_model, transform, transform_database
    from exann.vecdb import load_xvecs

    db = _load_db(args.input, args.metric)
    model = load_model(args.pca)
    tdb = transform_database(model, db)
    tq = transform(model, load_xvecs(args.queries, "fvecs"))
    idx = import_index(args.index)
    cfg, recall = search_config(
        tdb,
        idx,
        tq,
        args.target_recall,
        args.burst_bits,
        args.devices,
        model=model,
        ef_search=args.ef_search,
        k=args.k,
    )
    save_config(cfg, args.output)
    widths = "/".join(str(s.width) for s in cfg.segments)
    print(f"wrote {args.output} (widths {widths}, bursts {cfg.n_burst_total}, recall {recall:.4f})")


def cmd_search(args):
    from exann.dfloat import load_config, mask_emulate
    from exann.engine import EvalMode, SearchContext, batch_search, results_matrix, save_traces
    from exann.graph import import_index
    from exann.pca import load_model, transform, transform_database
    from exann.vecdb import load_xvecs, recall_at_k, save_xvecs

    db = _load_db(args.input, args.metric)
    queries = load_xvecs(args.queries, "fvecs")
    model = load_model(args.pca) if args.pca else None
    mode = EvalMode(args.mode)
    if mode is EvalMode.FEE_SPCA and model is None:
        raise SystemExit("--mode fee-spca requires --pca")
    vectors = db.vectors
    if model is not None:
        vectors = transform_database(model, db).vectors
        queries = transform(model, queries)
    cfg = load_config(args.dfloat_config) if args.dfloat_config else None
    if cfg is not None:
        vectors = mask_emulate(vectors, cfg)
    ctx = SearchContext.for_mode(mode, db.metric, vectors, model=model, config=cfg)
    idx = import_index(args.index)
    ts = batch_search(idx, queries, args.batch, args.ef_search, args.k, ctx, workers=args.workers)
    if args.trace_out:
        save_traces(args.trace_out, ts)
    if args.results_out:
        save_xvecs(args.results_out, results_matrix(ts), "ivecs")
    if args.gt:
        gt = load_xvecs(args.gt, "ivecs")
        recall = float(np.mean([recall_at_k(tr.result_ids, gt[i][: args.k]) for i, tr in enumerate(ts.traces)]))
        print(f"recall@{args.k} = {recall:.4f} over {len(ts.traces)} queries")
    print(f"searched {len(ts.traces)} queries (mode={args.mode}, ef={args.ef_search})")


def _topology(args):
    from exann.ndp import NdpTopology, load_topology

    return load_topology(args.topology) if args.topology else NdpTopology()


def cmd_map_layout(args):
    from exann.dfloat import PackedDatabase, all32_config, load_config
    from exann.graph import import_index
    from exann.ndp import map_database, save_layout

    idx = import_index(args.index)
    topo = _topology(args)
    cfg = load_config(args.dfloat_config) if args.dfloat_config else all32_config(
        args.dim, topo.burst_bits_per_device, topo.devices_per_subchannel
    )
    layout = map_database(
        PackedDatabase(n=idx.n, config=cfg),
        idx,
        topo,
        policy=args.policy,
        shuffle=not args.no_shuffle,
        seed=args.seed,
    )
    save_layout(layout, args.output)
    print(f"wrote {args.output} ({idx.n} nodes over {topo.n_subchannels} sub-channels)")


def cmd_simulate(args):
    from exann.engine import load_traces
    from exann.ndp import latency_breakdown, load_layout, simulate
    from exann.pipeline import write_csv

    topo = _topology(args)
    ts = load_traces(args.trace)
    layout = load_layout(args.layout, topo)
    stats = simulate(ts, layout, topo, enable=_enable_list(args.enable))
    row = dict(stats.counters())
    row.update(latency_breakdown(stats))
    write_csv(args.out, list(row.keys()), [row])
    print(
        f"simulated {stats.n_queries} queries: latency={stats.latency:.0f} cycles, "
        f"qps={stats.qps:.0f}, lncd_hit={stats.lncd_hit_rate():.3f}, "
        f"prefetch_hit={stats.prefetch_hit_rate():.3f}"
    )


def cmd_sweep(args):
    from exann.engine import EvalMode
    from exann.ndp.sweep import SweepConfig, sweep
    from exann.graph import import_index
    from exann.pca import load_model, transform, transform_database
    from exann.pipeline import write_csv
    from exann.vecdb import load_xvecs

    db = _load_db(args.input, args.metric)
    model = load_model(args.pca)
    tdb = transform_database(model, db)
    tq = transform(model, load_xvecs(args.queries, "fvecs"))
    cfg = SweepConfig(
        db=tdb,
        queries=tq,
        index=import_index(args.index),
        topology=_topology(args),
        model=model,
        mode=EvalMode(args.mode),
        ef_search=args.ef_search,
        k=args.k,
        batch=args.batch,
        enable=_enable_list(args.enable),
    )
    rows, hop_rows = sweep(args.param, [int(v) for v in args.values.split(",")], cfg)
    write_csv(args.out, list(rows[0].keys()), rows)
    if hop_rows:
        hop_path = Path(args.out).with_suffix(".hops.csv")
        write_csv(hop_path, ["param", "value", "hop", "layer", "hit_rate", "opportunities"], hop_rows)
        print(f"wrote {args.out} and {hop_path}")
    else:
        print(f"wrote {args.out}")


def cmd_run(args):
    from exann.pipeline import run_experiment

    bundle = run_experiment(args.spec, out_dir=args.out)
    print(f"bundle written to {bundle}")


def cmd_report(args):
    bundle = Path(args.bundle)
    csvs = sorted(bundle.glob("*.csv"))
    if not csvs:
        raise SystemExit(f"no CSV files in {bundle}")
    if args.format == "csv":
        for path in csvs:
            print(path)
        return
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:  # pragma: no cover
        raise SystemExit("plot output needs matplotlib (pip install exann[plot])") from exc
    for path in csvs:
        rows = _read_csv(path)
        if not rows:
            continue
        fig, ax = plt.subplots(figsize=(6, 4))
        _plot_rows(ax, path.stem, rows)
        fig.tight_layout()
        out = path.with_suffix(".png")
        fig.savefig(out, dpi=120)
        plt.close(fig)
        print(out)


def _read_csv(path):
    with open(path) as f:
        header = f.readline().strip().split(",")
        return [dict(zip(header, line.strip().split(","))) for line in f if line.strip()]


def _plot_rows(ax, name, rows):
    cols = list(rows[0].keys())
    numeric = [c for c in cols if _is_num(rows[0][c])]
    if name == "latency_breakdown":
        labels = [r[cols[0]] for r in rows]
        bottom = np.zeros(len(rows))
        for c in numeric:
            vals = np.array([float(r[c]) for r in rows])
            ax.bar(labels, vals, bottom=bottom, label=c)
            bottom += vals
        ax.set_ylabel("% of time")
        ax.legend(fontsize=7)
    elif name.startswith("sweep") or name == "recall_vs_efsearch":
        x = numeric[0]
        series_key = cols[0] if not _is_num(rows[0][cols[0]]) else None
        groups = {}
        for r in rows:
            groups.setdefault(r[series_key] if series_key else "", []).append(r)
        for label, grp in groups.items():
            for y in numeric[1:3]:
                ax.plot(
                    [float(r[x]) for r in grp],
                    [float(r[y]) for r in grp],
                    marker="o",
                    label=f"{label} {y}".strip(),
                )
        ax.set_xlabel(x)
        ax.legend(fontsize=7)
    else:
        x = cols[0]
        for y in numeric[:3]:
            if y == x:
                continue
            ax.plot(range(len(rows)), [float(r[y]) for r in rows], marker="o", label=y)
        ax.set_xticks(range(len(rows)), [r[x] for r in rows], rotation=30, fontsize=7)
        ax.legend(fontsize=7)
    ax.set_title(name)


def _is_num(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


if __name__ == "__main__":
    sys.exit(main())

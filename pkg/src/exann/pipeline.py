"""End-to-end experiment orchestration.

A text spec (ini-style sections, key=value lines) drives the stage graph:

    dataset -> preprocess -> build-index -> search (per mode/ef)
            -> tune-dfloat -> map -> simulate (ablation steps) -> sweeps
            -> report bundle (CSV files + summary)

Stage outputs are cached under <out>/cache keyed by a content hash of the
stage parameters and its dependencies' keys, so a rerun with an identical
spec reuses everything and the report is regenerable without recomputation.
Running a stage whose dependency is neither cached nor selected raises a
dependency error naming the missing stage. All floats are written with one
fixed format so reruns produce byte-identical CSVs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from exann import engine
from exann.datasets import load_named
from exann.dfloat import PackedDatabase, all32_config, load_config, save_config, search_config
from exann.engine import EvalMode, SearchContext, batch_search
from exann.graph import build, export_index, import_index
from exann.ndp import (
    NdpTopology,
    load_layout,
    map_database,
    latency_breakdown,
    save_layout,
    simulate,
)
from exann.ndp.sweep import SweepConfig, sweep
from exann.pca import (
    estimate_variance,
    fit_pca,
    load_model,
    save_model,
    transform,
    transform_database,
    with_statistics,
)
from exann.vecdb import (
    Metric,
    QuerySet,
    VectorDatabase,
    load_xvecs,
    make_synthetic_with_queries,
    recall_at_k,
    save_xvecs,
)

ALL_STAGES = (
    "dataset",
    "preprocess",
    "build-index",
    "tune-dfloat",
    "search",
    "map",
    "simulate",
    "sweep",
    "report",
)

ABLATION_STEPS = (
    ("baseline", "exact", False, ()),
    ("+fee-spca", "fee-spca", False, ()),
    ("+dfloat", "fee-spca", True, ()),
    ("+dam", "fee-spca", True, ("dam",)),
    ("+lnc", "fee-spca", True, ("dam", "lnc")),
    ("+prefetch", "fee-spca", True, ("dam", "lnc", "prefetch")),
)

MODE_LABELS = {
    "exact": (EvalMode.EXACT, False),
    "fee-partial": (EvalMode.FEE_PARTIAL, False),
    "fee-spca": (EvalMode.FEE_SPCA, False),
    "fee-spca+dfloat": (EvalMode.FEE_SPCA, True),
}


class PipelineError(RuntimeError):
    pass


def fmt(value) -> str:
    """One canonical number format for every CSV cell."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.10g}"
    return str(value)


def write_csv(path, header, rows) -> None:
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(fmt(row[h]) for h in header) + "\n")


def parse_spec(path) -> dict:
    """Sections of key=value pairs; '#' starts a comment."""
    sections: dict[str, dict[str, str]] = {}
    current = None
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip()
                sections.setdefault(current, {})
            elif "=" in line and current is not None:
                key, value = (part.strip() for part in line.split("=", 1))
                sections[current][key] = value
            else:
                raise PipelineError(f"{path}:{lineno}: expected [section] or key=value")
    return sections


def _get(spec, section, key, default=None, cast=str):
    raw = spec.get(section, {}).get(key)
    if raw is None:
        if default is None:
            raise PipelineError(f"spec is missing [{section}] {key}")
        return default
    if cast is bool:
        return raw.lower() in ("1", "true", "yes")
    return cast(raw)


def _int_list(raw: str):
    return [int(x) for x in raw.split(",") if x.strip()]


class Pipeline:
    def __init__(self, spec: dict, out_dir):
        self.spec = spec
        self.out = Path(out_dir)
        self.cache = self.out / "cache"
        self.bundle = self.out / "bundle"
        self.cache.mkdir(parents=True, exist_ok=True)
        self.seed = _get(spec, "output", "seed", 42, int)
        raw_stages = _get(spec, "pipeline", "stages", ",".join(ALL_STAGES), str)
        self.stages = {s.strip() for s in raw_stages.split(",") if s.strip()}
        unknown = self.stages - set(ALL_STAGES)
        if unknown:
            raise PipelineError(f"unknown stages {sorted(unknown)}")
        self._mem: dict[str, object] = {}

    # -- caching machinery -------------------------------------------------

    def _dir(self, stage: str, params: dict, dep_keys: list[str]):
        blob = json.dumps({"stage": stage, "params": params, "deps": dep_keys}, sort_keys=True)
        key = hashlib.sha256(blob.encode()).hexdigest()[:16]
        return key, self.cache / f"{stage.replace(':', '_')}-{key}"

    def _ensure(self, stage_family: str, stage: str, params: dict, dep_keys: list[str], builder):
        key, path = self._dir(stage, params, dep_keys)
        if not path.exists():
            if stage_family not in self.stages:
                raise PipelineError(
                    f"stage {stage!r} needs to run but {stage_family!r} is not selected "
                    f"and no cached output exists"
                )
            tmp = path.with_suffix(".tmp")
            tmp.mkdir(parents=True, exist_ok=True)
            builder(tmp)
            tmp.rename(path)
        return key, path

    # -- stages ------------------------------------------------------------

    def dataset(self):
        if "dataset" in self._mem:
            return self._mem["dataset"]
        sec = self.spec.get("dataset", {})
        k = int(sec.get("k", "10"))
        params = dict(sec)
        params["k"] = str(k)

        def builder(path):
            if "name" in sec:
                db, qs = load_named(sec["name"], k=k)
            elif "path_base" in sec:
                vectors = load_xvecs(sec["path_base"], "fvecs")
                queries = load_xvecs(sec["path_query"], "fvecs")
                metric = Metric(sec.get("metric", "l2"))
                db = VectorDatabase(vectors, metric=metric)
                from exann.vecdb import compute_ground_truth

                qs = QuerySet(queries, compute_ground_truth(db, queries, k))
            else:
                db, qs = make_synthetic_with_queries(
                    int(sec["n"]),
                    int(sec.get("queries", "100")),
                    int(sec["dim"]),
                    float(sec.get("decay", "0.95")),
                    seed=int(sec.get("seed", str(self.seed))),
                    k=k,
                    metric=Metric(sec.get("metric", "l2")),
                )
            save_xvecs(path / "base.fvecs", db.vectors, "fvecs")
            save_xvecs(path / "query.fvecs", qs.queries, "fvecs")
            save_xvecs(path / "gt.ivecs", qs.ground_truth, "ivecs")
            (path / "metric.txt").write_text(db.metric.value + "\n")

        key, path = self._ensure("dataset", "dataset", params, [], builder)
        metric = Metric((path / "metric.txt").read_text().strip())
        db = VectorDatabase(load_xvecs(path / "base.fvecs", "fvecs"), metric=metric)
        qs = QuerySet(load_xvecs(path / "query.fvecs", "fvecs"), load_xvecs(path / "gt.ivecs", "ivecs"))
        out = (key, db, qs)
        self._mem["dataset"] = out
        return out

    def preprocess(self):
        if "preprocess" in self._mem:
            return self._mem["preprocess"]
        dkey, db, qs = self.dataset()
        params = {
            "target_prob": _get(self.spec, "preprocess", "target_prob", 0.9, float),
            "samples": _get(self.spec, "preprocess", "samples", 10000, int),
            "seed": self.seed + 1,
        }

        def builder(path):
            model = fit_pca(db)
            tdb = transform_database(model, db)
            tq = transform(model, qs.queries)
            var = estimate_variance(model, tdb, params["samples"], params["seed"], probes=tq)
            model = with_statistics(model, var, params["target_prob"])
            save_model(model, path / "model.bin")

        key, path = self._ensure("preprocess", "preprocess", params, [dkey], builder)
        model = load_model(path / "model.bin")
        out = (key, model)
        self._mem["preprocess"] = out
        return out

    def index(self):
        if "index" in self._mem:
            return self._mem["index"]
        dkey, db, qs = self.dataset()
        pkey, model = self.preprocess()
        params = {
            "M": _get(self.spec, "index", "M", 16, int),
            "ef_construction": _get(self.spec, "index", "ef_construction", 150, int),
            "seed": self.seed + 2,
        }

        def builder(path):
            tdb = transform_database(model, db)
            idx = build(tdb, m=params["M"], ef_construction=params["ef_construction"], seed=params["seed"])
            export_index(idx, path / "graph.idx")

        key, path = self._ensure("build-index", "build-index", params, [dkey, pkey], builder)
        idx = import_index(path / "graph.idx")
        out = (key, idx)
        self._mem["index"] = out
        return out

    def _context(self, mode: EvalMode, dfloat_cfg=None):
        _, db, _ = self.dataset()
        _, model = self.preprocess()
        tdb = transform_database(model, db)
        return SearchContext.for_mode(
            mode,
            db.metric,
            dfloat_masked(tdb.vectors, dfloat_cfg) if dfloat_cfg else tdb.vectors,
            model=model if mode is EvalMode.FEE_SPCA else None,
            config=dfloat_cfg,
            burst_bits=_get(self.spec, "dfloat", "burst_bits", 128, int),
            devices=_get(self.spec, "dfloat", "devices", 4, int),
        )

    def search(self, mode_label: str, ef_search: int):
        mem_key = f"search:{mode_label}:{ef_search}"
        if mem_key in self._mem:
            return self._mem[mem_key]
        mode, uses_dfloat = MODE_LABELS[mode_label]
        dkey, db, qs = self.dataset()
        pkey, model = self.preprocess()
        ikey, idx = self.index()
        deps = [dkey, pkey, ikey]
        dcfg = None
        if uses_dfloat:
            tkey, dcfg, _ = self.tune_dfloat()
            deps.append(tkey)
        params = {
            "mode": mode_label,
            "ef_search": ef_search,
            "k": _get(self.spec, "search", "k", 10, int),
            "batch": _get(self.spec, "search", "batch", 16, int),
        }

        def builder(path):
            ctx = self._context(mode, dcfg)
            tq = transform(model, qs.queries)
            workers = _get(self.spec, "search", "workers", 1, int)
            ts = batch_search(idx, tq, params["batch"], ef_search, params["k"], ctx, workers=workers)
            engine.save_traces(path / "trace.bin", ts)
            recall = float(
                np.mean([recall_at_k(tr.result_ids, qs.ground_truth[i]) for i, tr in enumerate(ts.traces)])
            )
            try:
                mean_dims = engine.mean_dims_per_evaluation(ts)
                _, _, p80 = engine.feature_usage_histogram(ts)
            except ValueError:
                mean_dims, p80 = float(ts.dim), ts.dim
            (path / "metrics.txt").write_text(
                f"recall={fmt(recall)}\nmean_dims={fmt(mean_dims)}\np80={p80}\n"
            )

        key, path = self._ensure("search", f"search:{mode_label}:{ef_search}", params, deps, builder)
        ts = engine.load_traces(path / "trace.bin")
        metrics = dict(
            line.split("=", 1) for line in (path / "metrics.txt").read_text().splitlines() if line
        )
        out = (key, ts, {k: float(v) for k, v in metrics.items()})
        self._mem[mem_key] = out
        return out

    def tune_dfloat(self):
        if "tune-dfloat" in self._mem:
            return self._mem["tune-dfloat"]
        dkey, db, qs = self.dataset()
        pkey, model = self.preprocess()
        ikey, idx = self.index()
        ef = _get(self.spec, "search", "ef_search", 64, int)
        skey, _, base_metrics = self.search("fee-spca", ef)
        drop = _get(self.spec, "dfloat", "target_recall_drop", 0.01, float)
        params = {
            "target_recall_drop": drop,
            "burst_bits": _get(self.spec, "dfloat", "burst_bits", 128, int),
            "devices": _get(self.spec, "dfloat", "devices", 4, int),
            "tune_queries": _get(self.spec, "dfloat", "tune_queries", 200, int),
            "max_configs": _get(self.spec, "dfloat", "max_configs", 8, int),
            "ef_search": ef,
        }

        def builder(path):
            tdb = transform_database(model, db)
            tq = transform(model, qs.queries)
            sample = tq[: params["tune_queries"]]
            gt = qs.ground_truth[: params["tune_queries"]]
            r_target = base_metrics["recall"] - drop
            cfg, measured = search_config(
                tdb,
                idx,
                sample,
                r_target,
                params["burst_bits"],
                params["devices"],
                model=model,
                ef_search=ef,
                k=_get(self.spec, "search", "k", 10, int),
                ground_truth=gt,
                max_configs_per_step=params["max_configs"],
            )
            save_config(cfg, path / "dfloat.txt")
            (path / "metrics.txt").write_text(
                f"recall={fmt(measured)}\nr_target={fmt(r_target)}\n"
            )

        key, path = self._ensure("tune-dfloat", "tune-dfloat", params, [dkey, pkey, ikey, skey], builder)
        cfg = load_config(path / "dfloat.txt")
        metrics = dict(
            line.split("=", 1) for line in (path / "metrics.txt").read_text().splitlines() if line
        )
        out = (key, cfg, {k: float(v) for k, v in metrics.items()})
        self._mem["tune-dfloat"] = out
        return out

    def topology(self) -> NdpTopology:
        sec = self.spec.get("simulate", {})
        topo = NdpTopology()
        overrides = {}
        for key in sec:
            if hasattr(topo, key) and key not in ("enable", "policy", "shuffle"):
                val = sec[key]
                overrides[key] = int(val) if isinstance(getattr(topo, key), int) else float(val)
        return replace(topo, **overrides) if overrides else topo

    def layout(self, dfloat_cfg=None):
        mem_key = f"map:{'dfloat' if dfloat_cfg else 'raw'}"
        if mem_key in self._mem:
            return self._mem[mem_key]
        dkey, db, qs = self.dataset()
        ikey, idx = self.index()
        topo = self.topology()
        cfg = dfloat_cfg or all32_config(
            db.dim,
            _get(self.spec, "dfloat", "burst_bits", 128, int),
            _get(self.spec, "dfloat", "devices", 4, int),
        )
        params = {
            "policy": _get(self.spec, "simulate", "policy", "round_robin", str),
            "shuffle": _get(self.spec, "simulate", "shuffle", True, bool),
            "seed": self.seed + 3,
            "config": [(s.dim_start, s.dim_end, s.n_exp, s.n_man) for s in cfg.segments],
            "topology": topo.n_subchannels,
        }

        def builder(path):
            layout = map_database(
                PackedDatabase(n=db.n, config=cfg),
                idx,
                topo,
                policy=params["policy"],
                shuffle=params["shuffle"],
                seed=params["seed"],
            )
            save_layout(layout, path / "layout.bin")

        key, path = self._ensure("map", f"map:{'dfloat' if dfloat_cfg else 'raw'}", params, [dkey, ikey], builder)
        layout = load_layout(path / "layout.bin", topo)
        out = (key, layout)
        self._mem[mem_key] = out
        return out

    def simulate_step(self, label: str, search_label: str, uses_dfloat: bool, enable, ef_search: int):
        mem_key = f"simulate:{label}:{ef_search}"
        if mem_key in self._mem:
            return self._mem[mem_key]
        skey, ts, metrics = self.search(search_label, ef_search)
        dcfg = self.tune_dfloat()[1] if uses_dfloat else None
        lkey, layout = self.layout(dcfg)
        topo = self.topology()
        params = {"label": label, "enable": list(enable), "ef": ef_search}

        def builder(path):
            stats = simulate(ts, layout, topo, enable=enable)
            rows = [dict(stats.counters(), label=label, **latency_breakdown(stats))]
            header = ["label"] + list(stats.counters().keys()) + list(latency_breakdown(stats).keys())
            write_csv(path / "stats.csv", header, rows)

        key, path = self._ensure("simulate", f"simulate:{label}:{ef_search}", params, [skey, lkey], builder)
        with open(path / "stats.csv") as f:
            header = f.readline().strip().split(",")
            values = f.readline().strip().split(",")
        row = dict(zip(header, values))
        out = (key, row)
        self._mem[mem_key] = out
        return out

    def tuned_ef(self, mode_label: str, ef_grid, floor: float) -> int:
        """Smallest grid efSearch meeting the recall floor (largest if none)."""
        for ef in sorted(ef_grid):
            _, _, metrics = self.search(mode_label, ef)
            if metrics["recall"] >= floor:
                return ef
        return max(ef_grid)

    # -- experiment driver ---------------------------------------------------

    def run(self) -> Path:
        self.bundle.mkdir(parents=True, exist_ok=True)
        sec = self.spec.get("search", {})
        modes = [m.strip() for m in sec.get("modes", "exact,fee-partial,fee-spca,fee-spca+dfloat").split(",")]
        for m in modes:
            if m not in MODE_LABELS:
                raise PipelineError(f"unknown mode {m!r}")
        ef_main = _get(self.spec, "search", "ef_search", 64, int)
        ef_grid = _int_list(sec.get("ef_grid", str(ef_main)))
        k = _get(self.spec, "search", "k", 10, int)
        topo = self.topology()

        # recall/QPS vs efSearch, per mode
        recall_rows = []
        for mode_label in modes:
            for ef in ef_grid:
                skey, ts, metrics = self.search(mode_label, ef)
                uses_dfloat = MODE_LABELS[mode_label][1]
                dcfg = self.tune_dfloat()[1] if uses_dfloat else None
                _, layout = self.layout(dcfg)
                stats = simulate(ts, layout, topo, enable=("dam", "lnc", "prefetch"))
                recall_rows.append(
                    {
                        "mode": mode_label,
                        "ef_search": ef,
                        "recall": metrics["recall"],
                        "mean_dims": metrics["mean_dims"],
                        "qps_proxy": stats.qps,
                        "bytes_per_query": stats.bytes_fetched(topo) / stats.n_queries,
                    }
                )
        write_csv(
            self.bundle / "recall_vs_efsearch.csv",
            ["mode", "ef_search", "recall", "mean_dims", "qps_proxy", "bytes_per_query"],
            recall_rows,
        )

        # feature-usage histogram for the estimated-exit mode
        _, ts_spca, _ = self.search("fee-spca", ef_main)
        grid, cum, p80 = engine.feature_usage_histogram(ts_spca)
        write_csv(
            self.bundle / "feature_usage.csv",
            ["checkpoint_dim", "cumulative_exit_fraction"],
            [{"checkpoint_dim": int(g), "cumulative_exit_fraction": c} for g, c in zip(grid, cum)],
        )

        # traffic at a matched recall floor: efSearch tuned per mode
        floor = _get(self.spec, "search", "recall_floor", 0.9, float)
        traffic_rows = []
        for mode_label in modes:
            ef = self.tuned_ef(mode_label, ef_grid, floor)
            _, ts, metrics = self.search(mode_label, ef)
            uses_dfloat = MODE_LABELS[mode_label][1]
            dcfg = self.tune_dfloat()[1] if uses_dfloat else None
            _, layout = self.layout(dcfg)
            stats = simulate(ts, layout, topo, enable=("dam", "lnc", "prefetch"))
            traffic_rows.append(
                {
                    "mode": mode_label,
                    "ef_search": ef,
                    "recall": metrics["recall"],
                    "bytes_per_query": stats.bytes_fetched(topo) / stats.n_queries,
                }
            )
        tol = _get(self.spec, "search", "traffic_tolerance", 0.05, float)
        traffic_table = compare_traffic(traffic_rows, floor_tolerance=tol)
        write_csv(
            self.bundle / "traffic.csv",
            ["mode", "ef_search", "recall", "bytes_per_query", "normalized"],
            traffic_table,
        )

        # ablation ladder + latency breakdown
        ablation_rows = []
        breakdown_rows = []
        for label, mode_label, uses_dfloat, enable in ABLATION_STEPS:
            full = "fee-spca+dfloat" if uses_dfloat else mode_label
            _, row = self.simulate_step(label, full, uses_dfloat, enable, ef_main)
            ablation_rows.append(
                {
                    "step": label,
                    "latency_cycles": float(row["latency_cycles"]),
                    "qps_proxy": float(row["qps"]),
                    "vector_bursts": int(row["vector_bursts"]),
                    "cross_channel_bursts": int(row["cross_channel_bursts"]),
                }
            )
            breakdown_rows.append(
                {
                    "step": label,
                    "neighbor_retrieval": float(row["neighbor_retrieval"]),
                    "distance_compute": float(row["distance_compute"]),
                    "partial_result_processing": float(row["partial_result_processing"]),
                }
            )
        write_csv(
            self.bundle / "ablation.csv",
            ["step", "latency_cycles", "qps_proxy", "vector_bursts", "cross_channel_bursts"],
            ablation_rows,
        )
        write_csv(
            self.bundle / "latency_breakdown.csv",
            ["step", "neighbor_retrieval", "distance_compute", "partial_result_processing"],
            breakdown_rows,
        )

        # optional sweeps
        if "sweep" in self.spec and "sweep" in self.stages:
            self._run_sweeps(ef_main, k)

        # summary
        lines = ["experiment summary", "=================="]
        tune = self.tune_dfloat() if any(MODE_LABELS[m][1] for m in modes) else None
        for row in traffic_table:
            lines.append(
                f"{row['mode']:>16s}: recall={fmt(row['recall'])} bytes/query={fmt(row['bytes_per_query'])} (x{fmt(row['normalized'])})"
            )
        lines.append(f"feature-usage p80 exit dimension: {p80}")
        if tune:
            cfg = tune[1]
            widths = "/".join(str(s.width) for s in cfg.segments)
            lines.append(f"dfloat config: widths {widths}, bursts {cfg.n_burst_total}, recall {fmt(tune[2]['recall'])}")
        for row in ablation_rows:
            lines.append(f"ablation {row['step']:>10s}: latency={fmt(row['latency_cycles'])} qps={fmt(row['qps_proxy'])}")
        (self.bundle / "summary.txt").write_text("\n".join(lines) + "\n")
        return self.bundle

    def _run_sweeps(self, ef_main, k):
        _, db, qs = self.dataset()
        _, model = self.preprocess()
        _, idx = self.index()
        tdb = transform_database(model, db)
        tq = transform(model, qs.queries)
        topo = self.topology()
        base = SweepConfig(
            db=tdb,
            queries=tq,
            index=idx,
            topology=topo,
            model=model,
            mode=EvalMode.FEE_SPCA,
            ef_search=ef_main,
            k=k,
            batch=_get(self.spec, "search", "batch", 16, int),
        )
        sec = self.spec["sweep"]
        plans = {
            "lncd_capacity": sec.get("lncd_capacity"),
            "efSearch": sec.get("ef_values"),
            "batch": sec.get("batch_values"),
            "M": sec.get("m_values"),
        }
        for param, raw in plans.items():
            if not raw:
                continue
            rows, hop_rows = sweep(param, _int_list(raw), base)
            header = list(rows[0].keys())
            write_csv(self.bundle / f"sweep_{param}.csv", header, rows)
            if hop_rows:
                write_csv(
                    self.bundle / f"sweep_{param}_prefetch_hops.csv",
                    ["param", "value", "hop", "layer", "hit_rate", "opportunities"],
                    hop_rows,
                )


def dfloat_masked(vectors, cfg):
    from exann.dfloat import mask_emulate

    return mask_emulate(vectors, cfg)


def compare_traffic(rows, floor_tolerance: float = 0.01):
    """Normalize bytes/query to the first row (the exact/raw baseline).

    Rows must share a recall floor: spreads beyond the tolerance make the
    comparison unfair and raise.
    """
    if not rows:
        raise ValueError("no runs to compare")
    recalls = [row["recall"] for row in rows]
    if max(recalls) - min(recalls) > floor_tolerance:
        raise ValueError(
            f"recall floors differ by more than {floor_tolerance}: {recalls} (unfair comparison)"
        )
    base = rows[0]["bytes_per_query"]
    out = []
    for row in rows:
        r = dict(row)
        r["normalized"] = row["bytes_per_query"] / base
        out.append(r)
    return out


def run_experiment(spec_path, out_dir=None) -> Path:
    spec = parse_spec(spec_path)
    out = Path(out_dir) if out_dir else Path(_get(spec, "output", "dir", "runs/experiment", str))
    return Pipeline(spec, out).run()

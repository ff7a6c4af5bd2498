"""Parameter sweeps over the search/simulation stack.

One simulate run per grid point. efSearch and batch sweeps re-run the
search (traces change); lncd_capacity replays one trace set under resized
caches; M rebuilds the graph per value. Emits flat result rows plus
per-hop prefetch hit rates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from exann.dfloat import DfloatConfig, PackedDatabase
from exann.engine import EvalMode, SearchContext, batch_search
from exann.graph import GraphIndex, build
from exann.ndp.layout import map_database
from exann.ndp.sim import simulate
from exann.ndp.topology import NdpTopology
from exann.pca import PcaModel
from exann.vecdb import VectorDatabase

SWEEP_PARAMS = ("efSearch", "lncd_capacity", "batch", "M")


@dataclass
class SweepConfig:
    db: VectorDatabase  # evaluation-space database (transformed when using the model)
    queries: np.ndarray
    index: GraphIndex
    topology: NdpTopology
    mode: EvalMode = EvalMode.FEE_SPCA
    model: PcaModel | None = None
    dfloat: DfloatConfig | None = None
    ef_search: int = 64
    k: int = 10
    batch: int = 16
    ef_construction: int = 200
    build_seed: int = 0
    enable: tuple = ("dam", "lnc", "prefetch")
    placement_policy: str = "round_robin"
    shuffle: bool = True
    layout_seed: int = 0

    def context(self) -> SearchContext:
        return SearchContext.for_mode(
            self.mode,
            self.db.metric,
            self.db.vectors,
            model=self.model,
            config=self.dfloat,
            devices=self.topology.devices_per_subchannel,
            burst_bits=self.topology.burst_bits_per_device,
        )


def _layout_for(cfg: SweepConfig, index: GraphIndex, ctx: SearchContext):
    packed = PackedDatabase(n=cfg.db.n, config=ctx.config)
    return map_database(
        packed,
        index,
        cfg.topology,
        policy=cfg.placement_policy,
        shuffle=cfg.shuffle,
        seed=cfg.layout_seed,
    )


def sweep(param: str, values, cfg: SweepConfig):
    """Returns (rows, hop_rows): one summary row per grid point and one
    row per (grid point, base hop) with the prefetch hit rate there."""
    if param not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {param!r}; valid: {SWEEP_PARAMS}")
    rows = []
    hop_rows = []
    ctx = cfg.context()
    base_index = cfg.index
    cached_traces = None
    cached_layout = None
    for value in values:
        topo = cfg.topology
        index = base_index
        if param == "lncd_capacity":
            topo = replace(topo, lncd_bytes=int(value))
            if cached_traces is None:
                cached_traces = batch_search(
                    index, cfg.queries, cfg.batch, cfg.ef_search, cfg.k, ctx
                )
                cached_layout = _layout_for(cfg, index, ctx)
            ts, layout = cached_traces, cached_layout
        elif param == "efSearch":
            ts = batch_search(index, cfg.queries, cfg.batch, int(value), max(cfg.k, 1), ctx)
            layout = _layout_for(cfg, index, ctx)
        elif param == "batch":
            ts = batch_search(index, cfg.queries, int(value), cfg.ef_search, cfg.k, ctx)
            layout = _layout_for(cfg, index, ctx)
        else:  # M
            index = build(cfg.db, m=int(value), ef_construction=cfg.ef_construction, seed=cfg.build_seed)
            ts = batch_search(index, cfg.queries, cfg.batch, cfg.ef_search, cfg.k, ctx)
            layout = _layout_for(cfg, index, ctx)
        stats = simulate(ts, layout, topo, enable=cfg.enable)
        row = {"param": param, "value": value}
        row.update(stats.counters())
        rows.append(row)
        for hop in sorted(stats.prefetch_by_hop):
            hits, total = stats.prefetch_by_hop[hop]
            if total:
                hop_rows.append(
                    {
                        "param": param,
                        "value": value,
                        "hop": hop,
                        "layer": 0,
                        "hit_rate": hits / total,
                        "opportunities": total,
                    }
                )
    return rows, hop_rows

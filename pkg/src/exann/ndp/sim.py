"""Trace-driven cost model of the DIMM near-data system.

Replays batch-aligned search traces hop by hop. Per hop: the host launches
one command per active query; each sub-channel consults its NLT slice for
the hop node (through LNC-T/LNC-D when caching is on) and fetches its
partition of the neighbor list; vector evaluations charge one synchronized
access per checkpoint step reached plus feature-compute time; a host merge
window closes the hop, during which each sub-channel may prefetch the
neighbor list of its current best local candidate per query.

With data-aware mapping off, neighbor lookup serializes on the host and all
of a hop's evaluations run in the hop node's home sub-channel, paying the
cross-channel penalty for every remote vector burst.

The simulator only reads traces; it can never change search results.
Counters are in per-device burst units (one synchronized access = one burst
on each of the sub-channel's devices).
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from exann.engine import TraceSet
from exann.ndp.caches import make_caches
from exann.ndp.layout import NdpLayout
from exann.ndp.topology import NdpTopology

VALID_FEATURES = ("dam", "lnc", "prefetch")


@dataclass
class SimStats:
    n_subchannels: int
    n_queries: int = 0
    n_hops: int = 0
    vector_bursts: int = 0
    nlt_bursts: int = 0
    nbrlist_bursts: int = 0
    cross_channel_bursts: int = 0
    prefetch_bursts: int = 0
    lnct_hits: int = 0
    lnct_misses: int = 0
    lncd_hits: int = 0
    lncd_misses: int = 0
    prefetch_issued: int = 0
    prefetch_hits: int = 0
    prefetch_opportunities: int = 0
    busy: np.ndarray = None
    time_neighbor: float = 0.0
    time_distance: float = 0.0
    time_result: float = 0.0
    latency: float = 0.0
    batch_latencies: list = field(default_factory=list)
    # round index -> [hits, opportunities] for base-layer expansions
    prefetch_by_hop: dict = field(default_factory=dict)
    qps: float = 0.0

    def __post_init__(self):
        if self.busy is None:
            self.busy = np.zeros(self.n_subchannels)

    @property
    def lnct_lookups(self) -> int:
        return self.lnct_hits + self.lnct_misses

    @property
    def lncd_lookups(self) -> int:
        return self.lncd_hits + self.lncd_misses

    def lncd_hit_rate(self) -> float:
        total = self.lncd_lookups
        return self.lncd_hits / total if total else 0.0

    def lnct_hit_rate(self) -> float:
        total = self.lnct_lookups
        return self.lnct_hits / total if total else 0.0

    def prefetch_hit_rate(self) -> float:
        """Mean per-hop hit rate over base-layer hops with opportunities."""
        rates = [h / t for h, t in self.prefetch_by_hop.values() if t]
        return float(np.mean(rates)) if rates else 0.0

    def total_bursts(self) -> int:
        return self.vector_bursts + self.nlt_bursts + self.nbrlist_bursts

    def bytes_fetched(self, topology: NdpTopology) -> int:
        return self.total_bursts() * topology.burst_bits_per_device // 8

    def idle_ratios(self) -> np.ndarray:
        if self.latency <= 0:
            return np.zeros(self.n_subchannels)
        return 1.0 - self.busy / self.latency

    def min_idle_ratio(self) -> float:
        """Idle share of the least-loaded (earliest finishing) sub-channel."""
        return float(self.idle_ratios().max())

    def counters(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "n_hops": self.n_hops,
            "vector_bursts": self.vector_bursts,
            "nlt_bursts": self.nlt_bursts,
            "nbrlist_bursts": self.nbrlist_bursts,
            "cross_channel_bursts": self.cross_channel_bursts,
            "prefetch_bursts": self.prefetch_bursts,
            "lnct_hits": self.lnct_hits,
            "lnct_misses": self.lnct_misses,
            "lncd_hits": self.lncd_hits,
            "lncd_misses": self.lncd_misses,
            "lncd_hit_rate": self.lncd_hit_rate(),
            "prefetch_issued": self.prefetch_issued,
            "prefetch_hits": self.prefetch_hits,
            "prefetch_opportunities": self.prefetch_opportunities,
            "prefetch_hit_rate": self.prefetch_hit_rate(),
            "time_neighbor": self.time_neighbor,
            "time_distance": self.time_distance,
            "time_result": self.time_result,
            "latency_cycles": self.latency,
            "qps": self.qps,
            "min_idle_ratio": self.min_idle_ratio(),
        }


def latency_breakdown(stats: SimStats) -> dict:
    """Shares of attributed machine time across the three categories."""
    total = stats.time_neighbor + stats.time_distance + stats.time_result
    if total <= 0:
        return {"neighbor_retrieval": 0.0, "distance_compute": 0.0, "partial_result_processing": 0.0}
    return {
        "neighbor_retrieval": 100.0 * stats.time_neighbor / total,
        "distance_compute": 100.0 * stats.time_distance / total,
        "partial_result_processing": 100.0 * stats.time_result / total,
    }


class _SubchannelQueues:
    """One bounded priority queue per sub-channel, shared by every query in
    the batch (the hardware structure that feeds the prefetcher). Accepted
    candidates accumulate across hops; when a queue overflows, the globally
    worst entry is evicted, so larger batches contend for slots and the
    prefetcher's view of each query degrades -- the mechanism behind rising
    prefetch misses at large batch sizes."""

    def __init__(self, n_sub: int, depth: int):
        self.depth = depth
        self._q: list[list[tuple[float, int, int]]] = [[] for _ in range(n_sub)]

    def push(self, sub: int, dist: float, node: int, qid: int):
        q = self._q[sub]
        bisect.insort(q, (dist, node, qid))
        if len(q) > self.depth:
            q.pop()

    def consume(self, sub: int, node: int, qid: int):
        q = self._q[sub]
        for i, (_, nd, qq) in enumerate(q):
            if nd == node and qq == qid:
                q.pop(i)
                return

    def head(self, sub: int, qid: int):
        for _, node, qq in self._q[sub]:
            if qq == qid:
                return node
        return None

    def drop_query(self, qid: int):
        for sub in range(len(self._q)):
            self._q[sub] = [e for e in self._q[sub] if e[2] != qid]


def simulate(ts: TraceSet, layout: NdpLayout, topology: NdpTopology, enable=("dam", "lnc", "prefetch")) -> SimStats:
    """Replay traces under the given feature set; deterministic."""
    enable = set(enable)
    unknown = enable - set(VALID_FEATURES)
    if unknown:
        raise ValueError(f"unknown features {sorted(unknown)}; valid: {VALID_FEATURES}")
    dam = "dam" in enable
    lnc = "lnc" in enable
    prefetch = "prefetch" in enable
    if lnc and not dam:
        raise ValueError("lnc requires dam (caches live on the NDP lookup path)")
    if prefetch and not lnc:
        raise ValueError("prefetch requires lnc (prefetched lists land in LNC-D)")
    step_grid = layout.step_dims()
    if not np.array_equal(step_grid, ts.ckpt_dims):
        raise ValueError("trace checkpoint grid does not match the layout's packing geometry")
    topo = topology
    n_sub = topo.n_subchannels
    devices = topo.devices_per_subchannel
    home = layout.home
    line = topo.line_bytes
    stats = SimStats(n_subchannels=n_sub, n_queries=len(ts.traces))
    lnct, lncd = make_caches(topo) if lnc else (None, None)
    localq = _SubchannelQueues(n_sub, topo.pf_queue_depth)
    preds: dict[tuple[int, int], int | None] = {}
    pred_round: dict[int, int] = {}

    grid_list = step_grid.tolist()

    def steps_of(dims: int) -> int:
        return bisect.bisect_left(grid_list, dims) + 1

    def feature_cycles(dims: int) -> float:
        return -(-dims // devices) * topo.t_feature

    def seg_lines(addr: int, nbytes: int) -> int:
        first = addr // line
        last = (addr + nbytes - 1) // line
        return last - first + 1

    batches: dict[int, list] = {}
    for tr in ts.traces:
        batches.setdefault(tr.batch_id, []).append(tr)

    for bid in sorted(batches):
        group = batches[bid]
        batch_latency = 0.0
        max_rounds = max(len(tr.hops) for tr in group)
        for r in range(max_rounds):
            active = [tr for tr in group if r < len(tr.hops)]
            if not active:
                break
            hop_busy = np.zeros(n_sub)
            pf_busy = np.zeros(n_sub)
            host_serial = 0.0
            for tr in active:
                hop = tr.hops[r]
                qid = tr.query_id
                stats.n_hops += 1
                host_serial += topo.t_hop_launch
                stats.time_result += topo.t_hop_launch
                if r == 0:
                    steps = steps_of(tr.entry_dims)
                    stats.vector_bursts += steps * devices
                    t = steps * topo.t_burst + feature_cycles(tr.entry_dims)
                    hop_busy[home[tr.entry_node]] += t
                    stats.time_distance += t
                node = hop.node
                if hop.layer == 0:
                    if prefetch and pred_round.get(qid) == r - 1:
                        s_star = int(home[node])
                        addr, length = layout.nlt_entry(s_star, node)
                        if length:
                            stats.prefetch_opportunities += 1
                            cell = stats.prefetch_by_hop.setdefault(r, [0, 0])
                            cell[1] += 1
                            if preds.get((qid, s_star)) == node and lncd[s_star].covers_segment(addr, length * 4):
                                stats.prefetch_hits += 1
                                cell[0] += 1
                    if dam:
                        for s in range(n_sub):
                            addr, length = layout.nlt_entry(s, node)
                            if lnc:
                                if not lnct[s].lookup(node):
                                    stats.nlt_bursts += devices
                                    hop_busy[s] += topo.t_burst
                                    stats.time_neighbor += topo.t_burst
                            else:
                                stats.nlt_bursts += devices
                                hop_busy[s] += topo.t_burst
                                stats.time_neighbor += topo.t_burst
                            if not length:
                                continue
                            nbytes = length * 4
                            if lnc:
                                _, missing = lncd[s].lookup_segment(addr, nbytes)
                                if missing:
                                    stats.nbrlist_bursts += missing * devices
                                    hop_busy[s] += missing * topo.t_burst
                                    stats.time_neighbor += missing * topo.t_burst
                            else:
                                lines = seg_lines(addr, nbytes)
                                stats.nbrlist_bursts += lines * devices
                                hop_busy[s] += lines * topo.t_burst
                                stats.time_neighbor += lines * topo.t_burst
                    else:
                        deg = len(hop.neighbor_ids)
                        if deg:
                            lines = seg_lines(0, deg * 4)
                            stats.nbrlist_bursts += lines * devices
                            t = lines * (topo.t_burst + topo.t_cross)
                            host_serial += t
                            stats.time_neighbor += t
                # vector evaluations
                evaluated = hop.evaluated()
                eval_home = int(home[node])
                for j in np.nonzero(evaluated)[0]:
                    nb = int(hop.neighbor_ids[j])
                    dims = int(hop.dims[j])
                    steps = steps_of(dims)
                    vb = steps * devices
                    stats.vector_bursts += vb
                    t = steps * topo.t_burst + feature_cycles(dims)
                    if dam or hop.layer != 0:
                        hop_busy[home[nb]] += t
                        stats.time_distance += t
                    else:
                        if int(home[nb]) != eval_home:
                            stats.cross_channel_bursts += vb
                            t += steps * topo.t_cross
                        hop_busy[eval_home] += t
                        stats.time_distance += t
                # prefetcher staging: consume the expanded node, add the
                # hop's accepted candidates
                if prefetch and hop.layer == 0:
                    localq.consume(eval_home, node, qid)
                    acc = hop.accepted()
                    for j in np.nonzero(acc)[0]:
                        nb = int(hop.neighbor_ids[j])
                        localq.push(int(home[nb]), float(hop.dist[j]), nb, qid)
            # merge window; sub-channels prefetch their local best per query
            if prefetch:
                for tr in active:
                    qid = tr.query_id
                    if tr.hops[r].layer != 0:
                        continue
                    if r + 1 >= len(tr.hops):
                        localq.drop_query(qid)  # finished: release queue slots
                        continue
                    pred_round[qid] = r
                    for s in range(n_sub):
                        target = localq.head(s, qid)
                        preds[(qid, s)] = target
                        if target is None:
                            continue
                        stats.prefetch_issued += 1
                        addr, length = layout.nlt_entry(s, target)
                        if not lnct[s].lookup(target):
                            stats.nlt_bursts += devices
                            pf_busy[s] += topo.t_burst
                            stats.time_neighbor += topo.t_burst
                        if not length:
                            continue
                        fetched = lncd[s].insert_segment(addr, length * 4)
                        if fetched:
                            stats.nbrlist_bursts += fetched * devices
                            stats.prefetch_bursts += fetched * devices
                            pf_busy[s] += fetched * topo.t_burst
                            stats.time_neighbor += fetched * topo.t_burst
            window = max(topo.t_merge, float(pf_busy.max()) if prefetch else 0.0)
            stats.time_result += topo.t_merge
            stats.busy += hop_busy + pf_busy
            batch_latency += host_serial + float(hop_busy.max()) + window
        stats.batch_latencies.append(batch_latency)
        stats.latency += batch_latency
    if lnc:
        stats.lnct_hits = sum(c.hits for c in lnct)
        stats.lnct_misses = sum(c.misses for c in lnct)
        stats.lncd_hits = sum(c.hits for c in lncd)
        stats.lncd_misses = sum(c.misses for c in lncd)
    if stats.latency > 0:
        stats.qps = stats.n_queries / topo.cycles_to_seconds(stats.latency)
    return stats


def expected_vector_bursts(ts: TraceSet, layout: NdpLayout) -> int:
    """Conservation oracle: bursts follow from exit checkpoints alone."""
    grid = layout.step_dims().tolist()
    devices = layout.config.devices
    total = 0
    for tr in ts.traces:
        total += (bisect.bisect_left(grid, tr.entry_dims) + 1) * devices
        for hop in tr.hops:
            for dims in hop.dims[hop.evaluated()]:
                total += (bisect.bisect_left(grid, int(dims)) + 1) * devices
    return total

"""Online best-first graph search with pluggable distance evaluation.

Modes: exact, partial-distance early exit (the conservative prior-art
comparator), and estimated early exit (alpha/beta-scaled partial distance).
Estimation is only ever used to REJECT a neighbor; anything inserted into
the candidate queue carries its exact full distance, so returned distances
always equal brute-force distances for the returned ids.

Upper layers are navigated greedily with exact evaluation; the configured
mode applies on the base layer. Every evaluation is recorded in a trace the
memory-system simulator replays.
"""

from __future__ import annotations

import enum
import heapq
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from exann import _kernels as kern
from exann.dfloat import DfloatConfig, all32_config
from exann.graph import GraphIndex
from exann.pca import PcaModel
from exann.vecdb import Metric

INF = float("inf")
NO_ID = np.iinfo(np.int32).max

TRACE_MAGIC = b"EXTR"
TRACE_VERSION = 1

FLAG_EVALUATED = 1
FLAG_EXITED = 2
FLAG_ACCEPTED = 4


class EvalMode(enum.Enum):
    EXACT = "exact"
    FEE_PARTIAL = "fee-partial"
    FEE_SPCA = "fee-spca"


_FEE_CODE = {
    EvalMode.EXACT: kern.FEE_NONE,
    EvalMode.FEE_PARTIAL: kern.FEE_PARTIAL,
    EvalMode.FEE_SPCA: kern.FEE_ESTIMATED,
}


class CandidateQueue:
    """Bounded worst-out queue of (distance, id); threshold is the current
    worst entry once full, +inf before that. Ties order by id."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._heap: list[tuple[float, int]] = []  # max-heap via negation

    def __len__(self) -> int:
        return len(self._heap)

    @property
    def full(self) -> bool:
        return len(self._heap) >= self.capacity

    def threshold(self) -> tuple[float, int]:
        if not self.full:
            return INF, NO_ID
        d, i = self._heap[0]
        return -d, i

    def offer(self, dist: float, node: int) -> bool:
        """Insert if the queue has room or (dist, node) beats the worst."""
        if not self.full:
            heapq.heappush(self._heap, (-dist, node))
            return True
        worst_d, worst_i = self.threshold()
        if (dist, node) < (worst_d, worst_i):
            heapq.heapreplace(self._heap, (-dist, node))
            return True
        return False

    def sorted_items(self) -> list[tuple[float, int]]:
        return sorted((-d, i) for d, i in self._heap)


@dataclass(frozen=True)
class SearchContext:
    """Everything a search needs besides the graph: the evaluation matrix
    (raw or precision-masked), metric, mode, and checkpoint parameters."""

    vectors: np.ndarray
    metric: Metric
    mode: EvalMode
    ckpt_dims: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    config: DfloatConfig

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def metric_code(self) -> int:
        return kern.METRIC_L2 if self.metric is Metric.L2 else kern.METRIC_IP

    @property
    def fee_code(self) -> int:
        return _FEE_CODE[self.mode]

    @classmethod
    def for_mode(
        cls,
        mode: EvalMode,
        metric: Metric,
        vectors: np.ndarray,
        *,
        model: PcaModel | None = None,
        config: DfloatConfig | None = None,
        burst_bits: int = 128,
        devices: int = 4,
    ) -> "SearchContext":
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        dim = vectors.shape[1]
        cfg = config if config is not None else all32_config(dim, burst_bits, devices)
        if cfg.dim != dim:
            raise ValueError(f"config dimension {cfg.dim} != vectors dimension {dim}")
        grid = cfg.step_dims()
        if mode is EvalMode.FEE_SPCA:
            if model is None:
                raise ValueError("fee-spca mode requires a PCA model")
            view = model.at_checkpoints(grid)
            dims, alpha, beta = view.checkpoint_params()
        else:
            dims = grid
            alpha = np.ones(len(grid))
            beta = np.ones(len(grid))
        return cls(
            vectors=vectors,
            metric=metric,
            mode=mode,
            ckpt_dims=np.ascontiguousarray(dims, dtype=np.int32),
            alpha=np.ascontiguousarray(alpha, dtype=np.float64),
            beta=np.ascontiguousarray(beta, dtype=np.float64),
            config=cfg,
        )


def evaluate_distance(ctx: SearchContext, q: np.ndarray, node: int, threshold: float):
    """(value, dims_computed, exited) for one neighbor under the context's
    mode. threshold=+inf disables early exit."""
    return kern.eval_earlyexit(
        q, ctx.vectors[node], ctx.ckpt_dims, ctx.alpha, ctx.beta, threshold, ctx.metric_code, ctx.fee_code
    )


@dataclass
class HopRecord:
    layer: int
    node: int
    neighbor_ids: np.ndarray  # int32
    flags: np.ndarray  # uint8 bit0 evaluated, bit1 exited, bit2 accepted
    dims: np.ndarray  # int32, 0 when not evaluated
    dist: np.ndarray  # float32, NaN unless accepted

    def evaluated(self) -> np.ndarray:
        return (self.flags & FLAG_EVALUATED) != 0

    def exited(self) -> np.ndarray:
        return (self.flags & FLAG_EXITED) != 0

    def accepted(self) -> np.ndarray:
        return (self.flags & FLAG_ACCEPTED) != 0


@dataclass
class QueryTrace:
    query_id: int
    batch_id: int
    entry_node: int
    entry_dims: int
    hops: list[HopRecord] = field(default_factory=list)
    result_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int32))
    result_dists: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.float64))


@dataclass
class TraceSet:
    """Batch-aligned traces plus the run configuration needed to replay."""

    mode: EvalMode
    metric: Metric
    dim: int
    ef_search: int
    k: int
    batch: int
    ckpt_dims: np.ndarray
    traces: list[QueryTrace]

    def base_eval_mask_arrays(self):
        """(dims, exited) arrays over every evaluated base-layer neighbor."""
        dims, exited = [], []
        for tr in self.traces:
            for hop in tr.hops:
                if hop.layer != 0:
                    continue
                ev = hop.evaluated()
                dims.append(hop.dims[ev])
                exited.append(hop.exited()[ev])
        if not dims:
            raise ValueError("traces contain no base-layer evaluations")
        return np.concatenate(dims), np.concatenate(exited)


class _QueryState:
    """One query's traversal, advanced one hop at a time for batch sync."""

    def __init__(self, index: GraphIndex, q: np.ndarray, ef: int, k: int, ctx: SearchContext, query_id: int, batch_id: int):
        self.index = index
        self.q = np.ascontiguousarray(q, dtype=np.float32)
        self.ef = ef
        self.k = k
        self.ctx = ctx
        self.trace = QueryTrace(query_id, batch_id, index.entry_point, ctx.dim)
        self.cur = index.entry_point
        self.cur_d = float(kern.dist_full(self.q, ctx.vectors[self.cur], ctx.metric_code))
        self.layer = index.max_layer
        self.seen = {self.cur}
        self.queue: CandidateQueue | None = None
        self.cands: list[tuple[float, int]] = []
        self.done = False
        if self.layer == 0:
            self._enter_base()

    def _enter_base(self):
        self.layer = 0
        self.queue = CandidateQueue(self.ef)
        self.queue.offer(self.cur_d, self.cur)
        self.seen = {self.cur}
        self.cands = [(self.cur_d, self.cur)]

    def _record(self, layer, node, ids, flags, dims, dist):
        self.trace.hops.append(
            HopRecord(
                layer=layer,
                node=node,
                neighbor_ids=np.asarray(ids, dtype=np.int32),
                flags=np.asarray(flags, dtype=np.uint8),
                dims=np.asarray(dims, dtype=np.int32),
                dist=np.asarray(dist, dtype=np.float32),
            )
        )

    def step(self) -> bool:
        """Advance one hop; returns False once the query is finished."""
        if self.done:
            return False
        if self.queue is None and self._step_upper():
            return True
        self._step_base()
        return True

    def _step_upper(self) -> bool:
        # greedy descent: expand, move to the best improving neighbor, and
        # drop a layer when no neighbor improves; returns False when the
        # search reached the base layer without recording a hop
        while True:
            nbrs = self.index.layers[self.layer][self.cur]
            fresh = {nb for nb in nbrs if nb not in self.seen}
            if not fresh:
                if not self._descend():
                    return False
                continue
            self.seen.update(fresh)
            flags = np.zeros(len(nbrs), dtype=np.uint8)
            dims = np.zeros(len(nbrs), dtype=np.int32)
            dist = np.full(len(nbrs), np.nan, dtype=np.float32)
            best = (self.cur_d, self.cur)
            for j, nb in enumerate(nbrs):
                if nb not in fresh:
                    continue
                d = float(kern.dist_full(self.q, self.ctx.vectors[nb], self.ctx.metric_code))
                flags[j] = FLAG_EVALUATED
                dims[j] = self.ctx.dim
                if (d, nb) < best:
                    best = (d, nb)
                    flags[j] |= FLAG_ACCEPTED
                    dist[j] = d
            self._record(self.layer, self.cur, nbrs, flags, dims, dist)
            if best < (self.cur_d, self.cur):
                self.cur_d, self.cur = best
            else:
                self._descend()
            return True

    def _descend(self) -> bool:
        """Move one layer down; returns False when entering the base layer."""
        self.layer -= 1
        self.seen = {self.cur}
        if self.layer <= 0:
            self._enter_base()
            return False
        return True

    def _step_base(self):
        queue = self.queue
        while True:
            if not self.cands:
                self._finish()
                return
            d_c, c = heapq.heappop(self.cands)
            if queue.full and (d_c, c) > queue.threshold():
                self._finish()
                return
            break
        nbrs = self.index.layers[0][c]
        flags = np.zeros(len(nbrs), dtype=np.uint8)
        dims = np.zeros(len(nbrs), dtype=np.int32)
        dist = np.full(len(nbrs), np.nan, dtype=np.float32)
        ctx = self.ctx
        for j, nb in enumerate(nbrs):
            if nb in self.seen:
                continue
            self.seen.add(nb)
            thr, _ = queue.threshold()
            val, used, exited = kern.eval_earlyexit(
                self.q, ctx.vectors[nb], ctx.ckpt_dims, ctx.alpha, ctx.beta, thr, ctx.metric_code, ctx.fee_code
            )
            flags[j] = FLAG_EVALUATED
            dims[j] = used
            if exited:
                flags[j] |= FLAG_EXITED
                continue
            if queue.offer(val, nb):
                flags[j] |= FLAG_ACCEPTED
                dist[j] = val
                heapq.heappush(self.cands, (val, nb))
        self._record(0, c, nbrs, flags, dims, dist)

    def _finish(self):
        self.done = True
        items = self.queue.sorted_items()[: self.k]
        self.trace.result_ids = np.array([i for _, i in items], dtype=np.int32)
        self.trace.result_dists = np.array([d for d, _ in items], dtype=np.float64)


def search(index: GraphIndex, q: np.ndarray, ef_search: int, k: int, ctx: SearchContext):
    """Single-query search; returns (ids, trace)."""
    if k > ef_search:
        raise ValueError("k must not exceed ef_search")
    state = _QueryState(index, q, ef_search, k, ctx, query_id=0, batch_id=0)
    while state.step():
        pass
    return state.trace.result_ids, state.trace


def batch_search(
    index: GraphIndex,
    queries: np.ndarray,
    batch: int,
    ef_search: int,
    k: int,
    ctx: SearchContext,
    workers: int = 1,
) -> TraceSet:
    """Hop-synchronized batches: every active query in a batch advances one
    hop per round. Results are identical to per-query search; only the
    trace's round alignment (hop list positions) reflects the batching."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if k > ef_search:
        raise ValueError("k must not exceed ef_search")
    queries = np.ascontiguousarray(queries, dtype=np.float32)
    n = queries.shape[0]
    spans = [(lo, min(lo + batch, n)) for lo in range(0, n, batch)]

    def run_span(span_idx):
        lo, hi = spans[span_idx]
        states = [
            _QueryState(index, queries[i], ef_search, k, ctx, query_id=i, batch_id=span_idx)
            for i in range(lo, hi)
        ]
        active = list(states)
        while active:
            active = [s for s in active if s.step()]
        return [s.trace for s in states]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run_span, range(len(spans))))
    else:
        chunks = [run_span(i) for i in range(len(spans))]
    traces = [tr for chunk in chunks for tr in chunk]
    return TraceSet(
        mode=ctx.mode,
        metric=ctx.metric,
        dim=ctx.dim,
        ef_search=ef_search,
        k=k,
        batch=batch,
        ckpt_dims=ctx.ckpt_dims.copy(),
        traces=traces,
    )


def results_matrix(ts: TraceSet) -> np.ndarray:
    """(n_queries, k) id matrix, padded with -1 for short result lists."""
    out = np.full((len(ts.traces), ts.k), -1, dtype=np.int32)
    for i, tr in enumerate(ts.traces):
        out[i, : len(tr.result_ids)] = tr.result_ids
    return out


def mean_dims_per_evaluation(ts: TraceSet) -> float:
    """Average dimensions touched per base-layer evaluation."""
    dims, _ = ts.base_eval_mask_arrays()
    return float(dims.mean())


def feature_usage_histogram(ts: TraceSet):
    """Cumulative early-exit fraction per checkpoint, plus the dimension by
    which 80% of base-layer evaluations have terminated (D if they never
    reach 80%)."""
    dims, exited = ts.base_eval_mask_arrays()
    total = len(dims)
    grid = ts.ckpt_dims
    cum = np.empty(len(grid), dtype=np.float64)
    exit_dims = dims[exited]
    for i, kdim in enumerate(grid):
        cum[i] = np.count_nonzero(exit_dims <= kdim) / total
    p80_idx = np.nonzero(cum >= 0.8)[0]
    p80 = int(grid[p80_idx[0]]) if len(p80_idx) else int(ts.dim)
    return grid.copy(), cum, p80


def save_traces(path, ts: TraceSet) -> None:
    """Binary trace file; layout documented in load_traces."""
    with open(path, "wb") as f:
        f.write(TRACE_MAGIC)
        mode_code = list(EvalMode).index(ts.mode)
        metric_code = 0 if ts.metric is Metric.L2 else 1
        f.write(
            struct.pack(
                "<IIBBIIII",
                TRACE_VERSION,
                len(ts.traces),
                mode_code,
                metric_code,
                ts.dim,
                ts.ef_search,
                ts.k,
                ts.batch,
            )
        )
        f.write(struct.pack("<I", len(ts.ckpt_dims)))
        f.write(ts.ckpt_dims.astype("<i4").tobytes())
        for tr in ts.traces:
            f.write(
                struct.pack(
                    "<IIiiII",
                    tr.query_id,
                    tr.batch_id,
                    tr.entry_node,
                    tr.entry_dims,
                    len(tr.result_ids),
                    len(tr.hops),
                )
            )
            f.write(tr.result_ids.astype("<i4").tobytes())
            f.write(tr.result_dists.astype("<f8").tobytes())
            for hop in tr.hops:
                f.write(struct.pack("<iiI", hop.layer, hop.node, len(hop.neighbor_ids)))
                f.write(hop.neighbor_ids.astype("<i4").tobytes())
                f.write(hop.flags.astype("<u1").tobytes())
                f.write(hop.dims.astype("<i4").tobytes())
                f.write(hop.dist.astype("<f4").tobytes())


def load_traces(path) -> TraceSet:
    """Header: magic, version, n_queries, mode, metric, D, efSearch, k,
    batch, checkpoint grid. Per query: ids/batch/entry/result block then
    hop records (layer, node, ids, flags, dims, dist)."""
    with open(path, "rb") as f:
        if f.read(4) != TRACE_MAGIC:
            raise ValueError(f"{path}: not a trace file")
        version, n_q, mode_code, metric_code, dim, ef, k, batch = struct.unpack(
            "<IIBBIIII", f.read(26)
        )
        if version != TRACE_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        (n_ck,) = struct.unpack("<I", f.read(4))
        ckpt = np.frombuffer(f.read(4 * n_ck), dtype="<i4").copy()
        traces = []
        for _ in range(n_q):
            qid, bid, entry, entry_dims, n_res, n_hops = struct.unpack("<IIiiII", f.read(24))
            rids = np.frombuffer(f.read(4 * n_res), dtype="<i4").copy()
            rdists = np.frombuffer(f.read(8 * n_res), dtype="<f8").copy()
            hops = []
            for _ in range(n_hops):
                layer, node, n_nb = struct.unpack("<iiI", f.read(12))
                ids = np.frombuffer(f.read(4 * n_nb), dtype="<i4").copy()
                flags = np.frombuffer(f.read(n_nb), dtype="<u1").copy()
                dims = np.frombuffer(f.read(4 * n_nb), dtype="<i4").copy()
                dist = np.frombuffer(f.read(4 * n_nb), dtype="<f4").copy()
                hops.append(HopRecord(layer, node, ids, flags, dims, dist))
            traces.append(
                QueryTrace(qid, bid, entry, entry_dims, hops, rids, rdists)
            )
    return TraceSet(
        mode=list(EvalMode)[mode_code],
        metric=Metric.L2 if metric_code == 0 else Metric.IP,
        dim=dim,
        ef_search=ef,
        k=k,
        batch=batch,
        ckpt_dims=ckpt,
        traces=traces,
    )

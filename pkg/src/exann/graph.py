"""Multi-layer navigable graph: construction, validation, import/export.

Standard HNSW insertion: geometric layer assignment floor(-ln(U)/ln(m)),
best-first layer search with beam ef_construction, and diversity-based
neighbor selection (a candidate joins the neighbor set only if it is closer
to the inserted point than to every already-selected neighbor; pruned
candidates backfill up to the cap). Construction uses exact distances on
whatever vectors the caller passes (raw or PCA-transformed) and is
deterministic for a fixed seed.
"""

from __future__ import annotations

import heapq
import logging
import struct
from dataclasses import dataclass

import numpy as np

from exann import _kernels as kern
from exann.vecdb import Metric, VectorDatabase

log = logging.getLogger(__name__)

MAX_LEVEL = 48

MAGIC = b"EXGI"
FORMAT_VERSION = 1


@dataclass
class GraphIndex:
    """Adjacency per layer; layer 0 holds every node."""

    layers: list[dict[int, list[int]]]
    entry_point: int
    m: int
    ef_construction: int
    dim: int
    build_seed: int = 0

    @property
    def n(self) -> int:
        return len(self.layers[0])

    @property
    def max_layer(self) -> int:
        return len(self.layers) - 1

    def max_degree(self, layer: int) -> int:
        return 2 * self.m if layer == 0 else self.m

    def neighbors(self, node: int, layer: int) -> list[int]:
        if layer < 0 or layer > self.max_layer or node not in self.layers[layer]:
            raise KeyError(f"node {node} absent at layer {layer}")
        return self.layers[layer][node]

    def node_level(self, node: int) -> int:
        lvl = -1
        for layer, adj in enumerate(self.layers):
            if node in adj:
                lvl = layer
        return lvl

    def validate(self) -> None:
        if not self.layers or not self.layers[0]:
            raise ValueError("graph has no base layer nodes")
        n = self.n
        base_ids = set(self.layers[0])
        if base_ids != set(range(n)):
            raise ValueError("base layer must contain exactly ids 0..n-1")
        for layer in range(1, len(self.layers)):
            for node in self.layers[layer]:
                if node not in self.layers[layer - 1]:
                    raise ValueError(f"node {node} at layer {layer} missing from layer {layer - 1}")
        for layer, adj in enumerate(self.layers):
            cap = self.max_degree(layer)
            for node, nbrs in adj.items():
                if len(nbrs) > cap:
                    raise ValueError(f"node {node} at layer {layer} exceeds degree cap {cap}")
                for nb in nbrs:
                    if nb == node:
                        raise ValueError(f"self-loop on node {node} at layer {layer}")
                    if nb not in adj:
                        raise ValueError(f"node {node} at layer {layer} links to absent node {nb}")
        if self.entry_point not in self.layers[-1]:
            raise ValueError("entry point missing from the top layer")

    def base_reachable_fraction(self) -> float:
        """BFS reachability from the entry point over layer 0 (diagnostic)."""
        adj = self.layers[0]
        seen = {self.entry_point}
        frontier = [self.entry_point]
        while frontier:
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if v not in seen:
                        seen.add(v)
                        nxt.append(v)
            frontier = nxt
        return len(seen) / self.n


def _search_layer(vecs, metric_code, q, entry_points, ef, adj):
    """Best-first beam search over one layer; returns [(dist, id)] ascending."""
    visited = set(entry_points)
    ids = np.fromiter(entry_points, dtype=np.int32)
    dists = kern.dist_to_many(q, vecs, ids, metric_code)
    cand = [(float(d), int(i)) for d, i in zip(dists, ids)]
    heapq.heapify(cand)
    results = [(-d, i) for d, i in cand]
    heapq.heapify(results)
    while len(results) > ef:
        heapq.heappop(results)
    while cand:
        d_c, c = heapq.heappop(cand)
        if len(results) >= ef and d_c > -results[0][0]:
            break
        fresh = [nb for nb in adj[c] if nb not in visited]
        if not fresh:
            continue
        visited.update(fresh)
        ids = np.asarray(fresh, dtype=np.int32)
        dists = kern.dist_to_many(q, vecs, ids, metric_code)
        for d, nb in zip(dists, fresh):
            d = float(d)
            if len(results) < ef or (d, nb) < (-results[0][0], results[0][1]):
                heapq.heappush(cand, (d, nb))
                heapq.heappush(results, (-d, nb))
                if len(results) > ef:
                    heapq.heappop(results)
    out = sorted((-nd, i) for nd, i in results)
    return out


def _select_neighbors(vecs, metric_code, candidates, m, keep_pruned=True):
    """Diversity heuristic: keep a candidate only if it is closer to the
    query point than to every kept neighbor; backfill from pruned."""
    selected: list[tuple[float, int]] = []
    pruned: list[tuple[float, int]] = []
    for d, e in candidates:
        if len(selected) >= m:
            break
        if selected:
            sel_ids = np.fromiter((i for _, i in selected), dtype=np.int32)
            to_sel = kern.dist_to_many(vecs[e], vecs, sel_ids, metric_code)
            if float(to_sel.min()) < d:
                pruned.append((d, e))
                continue
        selected.append((d, e))
    if keep_pruned:
        for d, e in pruned:
            if len(selected) >= m:
                break
            selected.append((d, e))
    return [e for _, e in selected]


def build(db: VectorDatabase, m: int = 16, ef_construction: int = 200, seed: int = 0) -> GraphIndex:
    """Insert every row in id order; deterministic for a fixed seed."""
    if m < 2:
        raise ValueError("m must be >= 2")
    vecs = db.vectors
    metric_code = kern.METRIC_L2 if db.metric is Metric.L2 else kern.METRIC_IP
    rng = np.random.default_rng(seed)
    ml = 1.0 / np.log(m)
    levels = np.minimum(
        np.floor(-np.log(1.0 - rng.random(db.n)) * ml).astype(np.int64), MAX_LEVEL
    )
    layers: list[dict[int, list[int]]] = [dict() for _ in range(int(levels.max()) + 1)]
    entry = 0
    top = int(levels[0])
    for lc in range(top + 1):
        layers[lc][0] = []
    for node in range(1, db.n):
        lvl = int(levels[node])
        q = vecs[node]
        cur = entry
        cur_d = float(kern.dist_full(q, vecs[cur], metric_code))
        for lc in range(top, lvl, -1):
            changed = True
            while changed:
                changed = False
                nbrs = [nb for nb in layers[lc][cur]]
                if not nbrs:
                    break
                ids = np.asarray(nbrs, dtype=np.int32)
                dists = kern.dist_to_many(q, vecs, ids, metric_code)
                j = int(np.lexsort((ids, dists))[0])
                if (float(dists[j]), int(ids[j])) < (cur_d, cur):
                    cur_d, cur = float(dists[j]), int(ids[j])
                    changed = True
        eps = [cur]
        for lc in range(min(lvl, top), -1, -1):
            found = _search_layer(vecs, metric_code, q, eps, ef_construction, layers[lc])
            cap = 2 * m if lc == 0 else m
            chosen = _select_neighbors(vecs, metric_code, found, m)
            layers[lc][node] = list(chosen)
            for nb in chosen:
                nb_list = layers[lc][nb]
                nb_list.append(node)
                if len(nb_list) > cap:
                    ids = np.asarray(nb_list, dtype=np.int32)
                    dists = kern.dist_to_many(vecs[nb], vecs, ids, metric_code)
                    ranked = [(float(dists[i]), int(ids[i])) for i in np.lexsort((ids, dists))]
                    layers[lc][nb] = _select_neighbors(vecs, metric_code, ranked, cap)
            eps = [i for _, i in found]
        if lvl > top:
            for lc in range(top + 1, lvl + 1):
                layers[lc][node] = []
            entry = node
            top = lvl
    index = GraphIndex(
        layers=layers[: top + 1],
        entry_point=entry,
        m=m,
        ef_construction=ef_construction,
        dim=db.dim,
        build_seed=seed,
    )
    frac = index.base_reachable_fraction()
    if frac < 1.0:
        log.warning("base layer only %.2f%% reachable from entry point", 100.0 * frac)
    return index


def export_index(index: GraphIndex, path) -> None:
    """Little-endian binary: header then per-layer adjacency."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(
            struct.pack(
                "<IIIIIIi",
                FORMAT_VERSION,
                index.n,
                index.dim,
                index.m,
                index.ef_construction,
                len(index.layers),
                index.entry_point,
            )
        )
        for adj in index.layers:
            f.write(struct.pack("<I", len(adj)))
            for node in sorted(adj):
                nbrs = adj[node]
                f.write(struct.pack("<ii", node, len(nbrs)))
                f.write(np.asarray(nbrs, dtype="<i4").tobytes())


def import_index(path) -> GraphIndex:
    """Read + fully validate an index file; errors name the node/layer."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not an index file")
        version, n, dim, m, efc, n_layers, entry = struct.unpack("<IIIIIIi", f.read(28))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        layers = []
        for _ in range(n_layers):
            (count,) = struct.unpack("<I", f.read(4))
            adj = {}
            for _ in range(count):
                node, deg = struct.unpack("<ii", f.read(8))
                nbrs = np.frombuffer(f.read(4 * deg), dtype="<i4")
                adj[node] = [int(x) for x in nbrs]
            layers.append(adj)
    index = GraphIndex(
        layers=layers, entry_point=entry, m=m, ef_construction=efc, dim=dim
    )
    index.validate()
    return index


def import_edge_csv(path, m: int | None = None, dim: int = 0) -> GraphIndex:
    """Adapter for externally built graphs: one `node,layer,neighbor` row per
    directed edge (a header line is skipped if present)."""
    layers: list[dict[int, list[int]]] = []
    with open(path) as f:
        for lineno, raw in enumerate(f):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if lineno == 0 and not parts[0].strip().lstrip("-").isdigit():
                continue
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno + 1}: expected node,layer,neighbor")
            node, layer, nb = (int(p) for p in parts)
            while layer >= len(layers):
                layers.append({})
            layers[layer].setdefault(node, []).append(nb)
            layers[layer].setdefault(nb, [])
    if not layers:
        raise ValueError(f"{path}: no edges")
    # make membership hierarchical: every node present above exists below
    for layer in range(len(layers) - 1, 0, -1):
        for node in layers[layer]:
            for below in range(layer):
                layers[below].setdefault(node, [])
    if m is None:
        upper = [len(v) for adj in layers[1:] for v in adj.values()]
        base = max(len(v) for v in layers[0].values())
        m = max(upper) if upper else -(-base // 2)
        m = max(m, -(-base // 2), 2)
    entry = min(layers[-1])
    index = GraphIndex(
        layers=layers, entry_point=entry, m=m, ef_construction=0, dim=dim
    )
    index.validate()
    return index

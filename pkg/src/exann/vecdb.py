"""Vector corpora: xvecs file IO, brute-force ground truth, recall, and
synthetic dataset generation.

Distance convention used across the whole package: distances are squared L2,
or negated inner product for IP databases, so smaller is always better and a
single ordering works for every queue and threshold. Ties break toward the
smaller id.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

GT_CHUNK = 256  # queries per ground-truth block


class Metric(enum.Enum):
    L2 = "l2"
    IP = "ip"


class XvecsFormatError(ValueError):
    """Malformed .fvecs/.ivecs/.bvecs content."""


_XVECS_DTYPES = {
    "fvecs": np.dtype("<f4"),
    "ivecs": np.dtype("<i4"),
    "bvecs": np.dtype("<u1"),
}


@dataclass(frozen=True)
class VectorDatabase:
    """Immutable dense vector corpus; ids are implicitly 0..n-1."""

    vectors: np.ndarray
    metric: Metric = Metric.L2

    def __post_init__(self):
        v = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"vectors must be a non-empty 2-D matrix, got shape {self.vectors.shape}")
        if not np.isfinite(v).all():
            raise ValueError("vectors contain non-finite entries")
        object.__setattr__(self, "vectors", v)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def ids(self) -> np.ndarray:
        return np.arange(self.n, dtype=np.int32)


@dataclass(frozen=True)
class QuerySet:
    """Query matrix plus (optionally) exact top-k ids per query."""

    queries: np.ndarray
    ground_truth: np.ndarray | None = field(default=None)

    def __post_init__(self):
        q = np.ascontiguousarray(self.queries, dtype=np.float32)
        if q.ndim != 2 or q.shape[0] < 1:
            raise ValueError("queries must be a non-empty 2-D matrix")
        object.__setattr__(self, "queries", q)
        if self.ground_truth is not None:
            gt = np.ascontiguousarray(self.ground_truth, dtype=np.int32)
            if gt.ndim != 2 or gt.shape[0] != q.shape[0]:
                raise ValueError("ground_truth must have one row per query")
            object.__setattr__(self, "ground_truth", gt)

    @property
    def m(self) -> int:
        return self.queries.shape[0]

    @property
    def k(self) -> int:
        if self.ground_truth is None:
            raise ValueError("query set has no ground truth")
        return self.ground_truth.shape[1]


def load_xvecs(path, kind: str) -> np.ndarray:
    """Read an fvecs/ivecs/bvecs file into an (n, d) matrix.

    Each record is a little-endian int32 dimension followed by that many
    payload elements. bvecs payloads are widened to float32.
    """
    if kind not in _XVECS_DTYPES:
        raise ValueError(f"unknown xvecs kind {kind!r}")
    dtype = _XVECS_DTYPES[kind]
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        raise XvecsFormatError(f"{path}: empty file")
    if raw.size < 4:
        raise XvecsFormatError(f"{path}: truncated record at byte offset 0")
    d = int(raw[:4].view("<i4")[0])
    if d < 1:
        raise XvecsFormatError(f"{path}: record 0 declares non-positive dimension {d}")
    rec_bytes = 4 + d * dtype.itemsize
    if raw.size % rec_bytes != 0:
        _scan_xvecs_error(path, raw, dtype)
    n = raw.size // rec_bytes
    recs = raw.reshape(n, rec_bytes)
    dims = recs[:, :4].copy().view("<i4").ravel()
    bad = np.nonzero(dims != d)[0]
    if bad.size:
        raise XvecsFormatError(
            f"{path}: record {int(bad[0])} declares dimension {int(dims[bad[0]])}, expected {d}"
        )
    payload = recs[:, 4:].copy().view(dtype).reshape(n, d)
    if kind == "fvecs":
        return np.ascontiguousarray(payload, dtype=np.float32)
    if kind == "bvecs":
        return payload.astype(np.float32)
    return np.ascontiguousarray(payload, dtype=np.int32)


def _scan_xvecs_error(path, raw, dtype):
    """Walk records to pinpoint whether the file is truncated or has a
    mismatched dimension header, and raise accordingly."""
    off = 0
    idx = 0
    d0 = None
    total = raw.size
    while off < total:
        if total - off < 4:
            raise XvecsFormatError(f"{path}: truncated record at byte offset {off}")
        d = int(raw[off : off + 4].view("<i4")[0])
        if d < 1:
            raise XvecsFormatError(f"{path}: record {idx} declares non-positive dimension {d}")
        if d0 is None:
            d0 = d
        elif d != d0:
            raise XvecsFormatError(f"{path}: record {idx} declares dimension {d}, expected {d0}")
        need = 4 + d * dtype.itemsize
        if total - off < need:
            raise XvecsFormatError(f"{path}: truncated record at byte offset {off}")
        off += need
        idx += 1
    raise XvecsFormatError(f"{path}: inconsistent record layout")  # pragma: no cover


def save_xvecs(path, data: np.ndarray, kind: str) -> None:
    """Write a matrix as fvecs/ivecs/bvecs (bit-exact round trip)."""
    if kind not in _XVECS_DTYPES:
        raise ValueError(f"unknown xvecs kind {kind!r}")
    dtype = _XVECS_DTYPES[kind]
    mat = np.ascontiguousarray(data, dtype=dtype)
    if mat.ndim != 2:
        raise ValueError("data must be 2-D")
    n, d = mat.shape
    dims = np.full((n, 1), d, dtype="<i4")
    with open(path, "wb") as f:
        out = np.hstack([dims.view(np.uint8).reshape(n, 4), mat.view(np.uint8).reshape(n, -1)])
        out.tofile(f)


def all_distances(db: VectorDatabase, q: np.ndarray) -> np.ndarray:
    """Exact distance from q to every database row, float64."""
    if q.shape[-1] != db.dim:
        raise ValueError(f"query dimension {q.shape[-1]} != database dimension {db.dim}")
    x = db.vectors.astype(np.float64)
    q64 = q.astype(np.float64)
    if db.metric is Metric.L2:
        diff = x - q64[None, :]
        return np.einsum("ij,ij->i", diff, diff)
    return -(x @ q64)


def brute_force_knn(db: VectorDatabase, q: np.ndarray, k: int) -> np.ndarray:
    """Exact top-k ids under the database metric; ties go to the smaller id.

    This is the oracle behind every recall number in the repo.
    """
    if k > db.n:
        raise ValueError(f"k={k} exceeds database size {db.n}")
    dist = all_distances(db, q)
    order = np.lexsort((np.arange(db.n), dist))
    return order[:k].astype(np.int32)


def compute_ground_truth(db: VectorDatabase, queries: np.ndarray, k: int) -> np.ndarray:
    """Exact top-k ids for each query row (chunked brute force, ties by id)."""
    if k > db.n:
        raise ValueError(f"k={k} exceeds database size {db.n}")
    queries = np.asarray(queries, dtype=np.float32)
    if queries.shape[1] != db.dim:
        raise ValueError(f"query dimension {queries.shape[1]} != database dimension {db.dim}")
    x = db.vectors.astype(np.float64)
    sq_norms = np.sum(x * x, axis=1)
    out = np.empty((queries.shape[0], k), dtype=np.int32)
    for lo in range(0, queries.shape[0], GT_CHUNK):
        hi = min(lo + GT_CHUNK, queries.shape[0])
        block = queries[lo:hi].astype(np.float64)
        if db.metric is Metric.L2:
            d = np.sum(block * block, axis=1)[:, None] - 2.0 * (block @ x.T) + sq_norms[None, :]
        else:
            d = -(block @ x.T)
        for i in range(hi - lo):
            di = d[i]
            bound = np.partition(di, k - 1)[k - 1]
            cand = np.nonzero(di <= bound)[0]  # superset of top-k incl. boundary ties
            order = np.lexsort((cand, di[cand]))
            out[lo + i] = cand[order][:k]
    return out


def recall_at_k(found, truth) -> float:
    """|found ∩ truth| / |truth|."""
    truth = list(truth)
    k = len(truth)
    if k == 0:
        raise ValueError("truth list is empty")
    found = list(found)
    if len(found) > k:
        raise ValueError(f"found list longer than k={k}")
    return len(set(found) & set(truth)) / k


def make_synthetic(n: int, dim: int, decay: float, seed: int, metric: Metric = Metric.L2) -> VectorDatabase:
    """Zero-mean Gaussian rows with per-axis variance decay**i, randomly
    rotated; deterministic for a fixed seed."""
    rows, _ = _synthetic_rows(n, 0, dim, decay, seed)
    return VectorDatabase(rows, metric=metric)


def make_synthetic_with_queries(
    n: int,
    m: int,
    dim: int,
    decay: float,
    seed: int,
    k: int = 10,
    metric: Metric = Metric.L2,
) -> tuple[VectorDatabase, QuerySet]:
    """Database plus in-distribution queries (same rotation) with exact
    ground truth attached."""
    rows, extra = _synthetic_rows(n, m, dim, decay, seed)
    db = VectorDatabase(rows, metric=metric)
    gt = compute_ground_truth(db, extra, k)
    return db, QuerySet(extra, gt)


def _synthetic_rows(n, m, dim, decay, seed):
    if n < 1 or dim < 1:
        raise ValueError("n and dim must be >= 1")
    if decay <= 0:
        raise ValueError("decay must be positive")
    rng = np.random.default_rng(seed)
    stds = decay ** (np.arange(dim) / 2.0)
    z = rng.standard_normal((n + m, dim)) * stds
    basis = rng.standard_normal((dim, dim))
    qmat, r = np.linalg.qr(basis)
    qmat = qmat * np.sign(np.diag(r))  # canonical rotation for determinism
    rotated = (z @ qmat.T).astype(np.float32)
    return rotated[:n], rotated[n:]

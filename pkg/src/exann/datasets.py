"""Named benchmark datasets with deterministic synthetic stand-ins.

When EXANN_DATA_DIR holds the real fvecs/ivecs files (texmex layout:
<prefix>_base.fvecs, <prefix>_query.fvecs, <prefix>_groundtruth.ivecs) they
are used, truncated to the configured desk-scale sizes; otherwise an
anisotropic Gaussian stand-in with a comparable spectrum profile is
generated. Ground truth is always recomputed after truncation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from exann.vecdb import (
    Metric,
    QuerySet,
    VectorDatabase,
    compute_ground_truth,
    load_xvecs,
    make_synthetic_with_queries,
)

DATA_DIR_ENV = "EXANN_DATA_DIR"


@dataclass(frozen=True)
class DatasetSpec:
    prefix: str
    n: int
    n_queries: int
    dim: int
    decay: float
    seed: int
    metric: Metric = Metric.L2


NAMED_DATASETS = {
    # 10K slice of the 128-dim descriptor benchmark
    "sift-small": DatasetSpec(prefix="siftsmall", n=10_000, n_queries=1000, dim=128, decay=0.95, seed=101),
    # 50K x 960 slice standing in for the high-dimensional image benchmark
    "gist-small": DatasetSpec(prefix="gist", n=50_000, n_queries=500, dim=960, decay=0.985, seed=202),
}


def dataset_names():
    return sorted(NAMED_DATASETS)


def load_named(name: str, k: int = 10, data_dir: str | None = None) -> tuple[VectorDatabase, QuerySet]:
    """Real files when available, synthetic stand-in otherwise."""
    if name not in NAMED_DATASETS:
        raise ValueError(f"unknown dataset {name!r}; known: {dataset_names()}")
    spec = NAMED_DATASETS[name]
    root = data_dir if data_dir is not None else os.environ.get(DATA_DIR_ENV)
    if root:
        base = Path(root) / f"{spec.prefix}_base.fvecs"
        query = Path(root) / f"{spec.prefix}_query.fvecs"
        if base.exists() and query.exists():
            vectors = load_xvecs(base, "fvecs")[: spec.n]
            queries = load_xvecs(query, "fvecs")[: spec.n_queries]
            db = VectorDatabase(vectors, metric=spec.metric)
            gt = compute_ground_truth(db, queries, k)
            return db, QuerySet(queries, gt)
    db, qs = make_synthetic_with_queries(
        spec.n, spec.n_queries, spec.dim, spec.decay, seed=spec.seed, k=k, metric=spec.metric
    )
    return db, qs

"""Early-exit graph ANN search with dynamic-float compression and a
trace-driven near-memory cost-model simulator."""

from exann._kernels import BACKEND as kernel_backend
from exann.engine import EvalMode, SearchContext, batch_search, search
from exann.graph import GraphIndex, build
from exann.pca import PcaModel, fit_pca
from exann.vecdb import Metric, QuerySet, VectorDatabase, brute_force_knn, recall_at_k

__version__ = "0.1.0"

__all__ = [
    "EvalMode",
    "GraphIndex",
    "Metric",
    "PcaModel",
    "QuerySet",
    "SearchContext",
    "VectorDatabase",
    "batch_search",
    "brute_force_knn",
    "build",
    "fit_pca",
    "kernel_backend",
    "recall_at_k",
    "search",
    "__version__",
]

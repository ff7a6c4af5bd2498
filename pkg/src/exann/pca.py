"""Offline preprocessing for estimated-distance early exit.

Fits a PCA basis so leading dimensions carry the most variance, then derives
per-checkpoint parameters: alpha scales a partial distance up to a full
distance estimate (eigenvalue mass ratio), Var is the observed spread of that
estimate, and beta = 1 + sqrt(Var / (2*(1-p))) shrinks the estimate so that
the probability of rejecting a true candidate stays below 1-p (Chebyshev
argument). The online trigger is: alpha_k * d_part / beta_k >= threshold.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from exann.vecdb import Metric, VectorDatabase

PAIR_CHUNK = 2048

MAGIC = b"EXPC"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class PcaModel:
    """Orthonormal basis plus per-checkpoint early-exit parameters.

    basis columns are eigenvectors sorted by descending eigenvalue; the sign
    convention makes each column's largest-magnitude entry positive.
    checkpoints are ascending dimension counts, the last always equals D.
    """

    mean: np.ndarray  # float32[D]
    basis: np.ndarray  # float32[D, D]
    eigenvalues: np.ndarray  # float64[D], descending
    checkpoints: np.ndarray  # int32[C], ascending, last == D
    alpha: np.ndarray  # float64[C]
    var: np.ndarray  # float64[C]
    beta: np.ndarray  # float64[C]
    target_prob: float = 0.9
    metric: Metric = Metric.L2

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    def validate(self) -> None:
        d = self.dim
        gram = self.basis.astype(np.float64).T @ self.basis.astype(np.float64)
        if not np.allclose(gram, np.eye(d), atol=1e-5):
            raise ValueError("basis is not orthonormal within 1e-5")
        if np.any(np.diff(self.eigenvalues) > 1e-9) or np.any(self.eigenvalues < -1e-9):
            raise ValueError("eigenvalues must be non-negative and descending")
        if self.checkpoints[-1] != d:
            raise ValueError("last checkpoint must equal D")
        if np.any(np.diff(self.checkpoints) <= 0):
            raise ValueError("checkpoints must be strictly ascending")
        if np.any(self.alpha < 1.0 - 1e-12) or np.any(np.diff(self.alpha) > 1e-12):
            raise ValueError("alpha must be >= 1 and non-increasing")
        if abs(self.alpha[-1] - 1.0) > 1e-12:
            raise ValueError("alpha at D must equal 1")
        if np.any(self.beta < 1.0 - 1e-12):
            raise ValueError("beta must be >= 1")
        if not 0.0 < self.target_prob < 1.0:
            raise ValueError("target_prob must lie in (0, 1)")

    def at_checkpoints(self, dims) -> "PcaModel":
        """Restrict the model to a subset of its registered checkpoints."""
        dims = np.asarray(dims, dtype=np.int32)
        if dims[-1] != self.dim:
            raise ValueError("last checkpoint must equal D")
        pos = np.searchsorted(self.checkpoints, dims)
        if np.any(pos >= len(self.checkpoints)) or np.any(self.checkpoints[pos] != dims):
            missing = dims[(pos >= len(self.checkpoints)) | (self.checkpoints[np.minimum(pos, len(self.checkpoints) - 1)] != dims)]
            raise ValueError(f"checkpoints {missing.tolist()} are not registered in this model")
        return replace(
            self,
            checkpoints=dims,
            alpha=self.alpha[pos].copy(),
            var=self.var[pos].copy(),
            beta=self.beta[pos].copy(),
        )

    def checkpoint_params(self):
        """(dims, alpha, beta) arrays in the layout the kernels expect."""
        return (
            np.ascontiguousarray(self.checkpoints, dtype=np.int32),
            np.ascontiguousarray(self.alpha, dtype=np.float64),
            np.ascontiguousarray(self.beta, dtype=np.float64),
        )


def fit_pca(db: VectorDatabase) -> PcaModel:
    """Mean-centered covariance eigendecomposition (stats left trivial).

    Returns a model whose only checkpoint is D; attach Var/beta with
    with_statistics() after estimating variances.

    For inner-product databases the stored mean is zero: subtracting a mean
    shifts scores by a vector-dependent term and corrupts IP rankings, so
    the transform applies the rotation only (the basis still comes from the
    centered covariance).
    """
    x = db.vectors
    if x.shape[0] < 2:
        raise ValueError("PCA requires at least 2 rows")
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=0)
    xc = x64 - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    if db.metric is Metric.IP:
        mean = np.zeros_like(mean)
    w, v = np.linalg.eigh(cov)
    w = np.clip(w[::-1], 0.0, None)
    v = v[:, ::-1]
    # deterministic sign: largest-magnitude entry of each eigenvector positive
    flip = v[np.argmax(np.abs(v), axis=0), np.arange(v.shape[1])] < 0
    v = np.where(flip[None, :], -v, v)
    d = x.shape[1]
    return PcaModel(
        mean=mean.astype(np.float32),
        basis=np.ascontiguousarray(v, dtype=np.float32),
        eigenvalues=w,
        checkpoints=np.array([d], dtype=np.int32),
        alpha=np.array([1.0]),
        var=np.array([0.0]),
        beta=np.array([1.0]),
        metric=db.metric,
    )


def transform(model: PcaModel, v: np.ndarray) -> np.ndarray:
    """Project one vector or a matrix of rows onto the basis (float32)."""
    v = np.asarray(v)
    if v.shape[-1] != model.dim:
        raise ValueError(f"dimension {v.shape[-1]} != model dimension {model.dim}")
    centered = v.astype(np.float64) - model.mean.astype(np.float64)
    return (centered @ model.basis.astype(np.float64)).astype(np.float32)


def transform_database(model: PcaModel, db: VectorDatabase) -> VectorDatabase:
    return VectorDatabase(transform(model, db.vectors), metric=db.metric)


def compute_alpha(eigenvalues, checkpoints) -> np.ndarray:
    """alpha_k = (sum of all eigenvalues) / (sum of the first k)."""
    w = np.asarray(eigenvalues, dtype=np.float64)
    ks = np.asarray(checkpoints, dtype=np.int64)
    csum = np.cumsum(w)
    partial = csum[ks - 1]
    if np.any(partial <= 0.0):
        raise ValueError("degenerate spectrum: zero eigenvalue mass at a checkpoint")
    return csum[-1] / partial


def estimate_variance(
    model: PcaModel,
    db: VectorDatabase,
    sample_pairs: int,
    seed: int,
    probes: np.ndarray | None = None,
    checkpoints=None,
) -> np.ndarray:
    """Sample variance of alpha_k * d_part^k / d_all over random pairs.

    Probes default to database rows; pass the train/query pool when one
    exists. Pairs with zero full distance are skipped. Deterministic for a
    fixed seed.
    """
    if sample_pairs < 100:
        raise ValueError("sample_pairs must be >= 100")
    x = db.vectors
    pool = np.asarray(probes, dtype=np.float32) if probes is not None else x
    rng = np.random.default_rng(seed)
    pi = rng.integers(0, pool.shape[0], size=sample_pairs)
    ti = rng.integers(0, x.shape[0], size=sample_pairs)
    d = model.dim
    alpha_all = compute_alpha(model.eigenvalues, np.arange(1, d + 1))
    sum_r = np.zeros(d)
    sum_r2 = np.zeros(d)
    count = 0
    for lo in range(0, sample_pairs, PAIR_CHUNK):
        hi = min(lo + PAIR_CHUNK, sample_pairs)
        p64 = pool[pi[lo:hi]].astype(np.float64)
        t64 = x[ti[lo:hi]].astype(np.float64)
        if model.metric is Metric.L2:
            diff = p64 - t64
            part = np.cumsum(diff * diff, axis=1)
        else:
            part = -np.cumsum(p64 * t64, axis=1)
        d_all = part[:, -1]
        valid = d_all != 0.0
        if not valid.any():
            continue
        r = alpha_all[None, :] * part[valid] / d_all[valid, None]
        sum_r += r.sum(axis=0)
        sum_r2 += (r * r).sum(axis=0)
        count += int(valid.sum())
    if count < 2:
        raise ValueError("all sampled pairs were degenerate")
    var = (sum_r2 - sum_r * sum_r / count) / (count - 1)
    var = np.clip(var, 0.0, None)
    if checkpoints is None:
        return var
    ks = np.asarray(checkpoints, dtype=np.int64)
    return var[ks - 1]


def compute_beta(var, target_prob: float) -> np.ndarray:
    """beta_k = 1 + sqrt(Var_k / (2*(1 - p))); beta = 1 where Var = 0."""
    if not 0.0 < target_prob < 1.0:
        raise ValueError("target_prob must lie in (0, 1)")
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < 0):
        raise ValueError("variances must be non-negative")
    eps = np.sqrt(var / (2.0 * (1.0 - target_prob)))
    return 1.0 + eps


def with_statistics(model: PcaModel, var_all: np.ndarray, target_prob: float) -> PcaModel:
    """Attach full-resolution alpha/Var/beta (checkpoints become 1..D)."""
    d = model.dim
    var_all = np.asarray(var_all, dtype=np.float64)
    if var_all.shape != (d,):
        raise ValueError("var_all must have one entry per dimension")
    ks = np.arange(1, d + 1, dtype=np.int32)
    return replace(
        model,
        checkpoints=ks,
        alpha=compute_alpha(model.eigenvalues, ks),
        var=var_all.copy(),
        beta=compute_beta(var_all, target_prob),
        target_prob=target_prob,
    )


def estimate_distance(model: PcaModel, d_part: float, k: int) -> float:
    """alpha_k * d_part / beta_k at a registered checkpoint."""
    pos = np.searchsorted(model.checkpoints, k)
    if pos >= len(model.checkpoints) or model.checkpoints[pos] != k:
        raise ValueError(f"k={k} is not a registered checkpoint")
    return float(model.alpha[pos] * d_part / model.beta[pos])


def save_model(model: PcaModel, path) -> None:
    """Versioned little-endian binary; see load_model for the layout."""
    d = model.dim
    metric_code = 0 if model.metric is Metric.L2 else 1
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIBdI", FORMAT_VERSION, d, metric_code, model.target_prob, len(model.checkpoints)))
        f.write(model.mean.astype("<f4").tobytes())
        f.write(np.ascontiguousarray(model.basis, dtype="<f4").tobytes())
        f.write(model.eigenvalues.astype("<f8").tobytes())
        for i, k in enumerate(model.checkpoints):
            f.write(struct.pack("<Iddd", int(k), model.alpha[i], model.var[i], model.beta[i]))


def load_model(path) -> PcaModel:
    """Header: magic, version, D, metric, target_prob, checkpoint count.
    Body: mean f32[D], basis f32[D*D] row-major, eigenvalues f64[D], then
    (k u32, alpha f64, var f64, beta f64) per checkpoint."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a PCA model file")
        version, d, metric_code, prob, n_ckpt = struct.unpack("<IIBdI", f.read(21))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        mean = np.frombuffer(f.read(4 * d), dtype="<f4").copy()
        basis = np.frombuffer(f.read(4 * d * d), dtype="<f4").reshape(d, d).copy()
        eig = np.frombuffer(f.read(8 * d), dtype="<f8").copy()
        ks = np.empty(n_ckpt, dtype=np.int32)
        alpha = np.empty(n_ckpt)
        var = np.empty(n_ckpt)
        beta = np.empty(n_ckpt)
        for i in range(n_ckpt):
            ks[i], alpha[i], var[i], beta[i] = struct.unpack("<Iddd", f.read(28))
    model = PcaModel(
        mean=mean,
        basis=basis,
        eigenvalues=eig,
        checkpoints=ks,
        alpha=alpha,
        var=var,
        beta=beta,
        target_prob=prob,
        metric=Metric.L2 if metric_code == 0 else Metric.IP,
    )
    model.validate()
    return model

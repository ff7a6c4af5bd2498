"""Pure-numpy implementations of the hot distance kernels.

Contract shared with the compiled backend (``_core``): all accumulation is
sequential in float64, left to right over dimensions, with no FMA or
reassociation, so results are bit-identical between backends.

Metric codes: 0 = squared L2, 1 = negated inner product (smaller is better
for both). FEE codes: 0 = none, 1 = partial-distance exit, 2 = estimated
(alpha/beta scaled) exit.
"""

import numpy as np

BACKEND = "python"

METRIC_L2 = 0
METRIC_IP = 1
FEE_NONE = 0
FEE_PARTIAL = 1
FEE_ESTIMATED = 2


def _terms(q, v):
    # exact in f64: q, v are float32, so differences/products round once
    q64 = q.astype(np.float64)
    v64 = v.astype(np.float64)
    d = q64 - v64
    return d * d


def dist_full(q, v, metric):
    """Full distance between two vectors (squared L2 or negated IP)."""
    if metric == METRIC_L2:
        return float(np.cumsum(_terms(q, v))[-1])
    acc = np.cumsum(q.astype(np.float64) * v.astype(np.float64))[-1]
    return float(-acc)


def dist_to_many(q, vecs, ids, metric):
    """Distances from q to vecs[ids], one float64 per id."""
    rows = vecs[ids]
    q64 = q.astype(np.float64)
    r64 = rows.astype(np.float64)
    if metric == METRIC_L2:
        d = q64[None, :] - r64
        return np.cumsum(d * d, axis=1)[:, -1]
    return -np.cumsum(q64[None, :] * r64, axis=1)[:, -1]


def eval_earlyexit(q, v, ckpt_dims, alpha, beta, threshold, metric, fee):
    """Checkpointed distance evaluation with optional early exit.

    Returns (value, dims_computed, exited). When exited, value is the
    quantity that crossed the threshold (partial or estimated distance) and
    dims_computed is the checkpoint dimension; otherwise value is the full
    distance and dims_computed is D. Checkpoints at k == D never trigger.
    """
    if metric == METRIC_L2:
        cs = np.cumsum(_terms(q, v))
        sign = 1.0
    else:
        cs = np.cumsum(q.astype(np.float64) * v.astype(np.float64))
        sign = -1.0
    ndim = q.shape[0]
    if fee != FEE_NONE and threshold != np.inf:
        part = sign * cs[ckpt_dims - 1]
        if fee == FEE_PARTIAL:
            trig = part
        else:
            trig = alpha * part / beta
        hit = (trig >= threshold) & (ckpt_dims < ndim)
        if hit.any():
            c = int(np.argmax(hit))
            return float(trig[c]), int(ckpt_dims[c]), True
    return float(sign * cs[-1]), ndim, False

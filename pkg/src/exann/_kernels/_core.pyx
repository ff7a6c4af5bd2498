# Compiled distance kernels. Must match _fallback bit-for-bit: sequential
# float64 accumulation, one rounding per multiply/add, no FMA (built with
# -ffp-contract=off).

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"

METRIC_L2 = 0
METRIC_IP = 1
FEE_NONE = 0
FEE_PARTIAL = 1
FEE_ESTIMATED = 2

cdef double INF = float("inf")


cdef inline double _accum_l2(const float[::1] q, const float[::1] v,
                             Py_ssize_t lo, Py_ssize_t hi, double acc) noexcept nogil:
    cdef Py_ssize_t i
    cdef double d
    for i in range(lo, hi):
        d = <double> q[i] - <double> v[i]
        acc = acc + d * d
    return acc


cdef inline double _accum_ip(const float[::1] q, const float[::1] v,
                             Py_ssize_t lo, Py_ssize_t hi, double acc) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(lo, hi):
        acc = acc + <double> q[i] * <double> v[i]
    return acc


def dist_full(const float[::1] q, const float[::1] v, int metric):
    """Full distance between two vectors (squared L2 or negated IP)."""
    cdef double acc = 0.0
    cdef Py_ssize_t n = q.shape[0]
    if metric == 0:
        return _accum_l2(q, v, 0, n, 0.0)
    acc = _accum_ip(q, v, 0, n, 0.0)
    return -acc


def dist_to_many(const float[::1] q, const float[:, ::1] vecs,
                 const int[::1] ids, int metric):
    """Distances from q to vecs[ids], one float64 per id."""
    cdef Py_ssize_t m = ids.shape[0]
    cdef Py_ssize_t ndim = q.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(m, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t j, row
    with nogil:
        for j in range(m):
            row = ids[j]
            if metric == 0:
                o[j] = _accum_l2(q, vecs[row], 0, ndim, 0.0)
            else:
                o[j] = -_accum_ip(q, vecs[row], 0, ndim, 0.0)
    return out


def eval_earlyexit(const float[::1] q, const float[::1] v,
                   const int[::1] ckpt_dims, const double[::1] alpha,
                   const double[::1] beta, double threshold, int metric, int fee):
    """Checkpointed distance evaluation with optional early exit.

    Returns (value, dims_computed, exited); see the fallback docstring.
    """
    cdef Py_ssize_t ndim = q.shape[0]
    cdef Py_ssize_t nck = ckpt_dims.shape[0]
    cdef double acc = 0.0
    cdef double part, trig
    cdef Py_ssize_t c, lo = 0, k
    cdef bint check = fee != 0 and threshold != INF
    if not check:
        if metric == 0:
            return _accum_l2(q, v, 0, ndim, 0.0), ndim, False
        return -_accum_ip(q, v, 0, ndim, 0.0), ndim, False
    for c in range(nck):
        k = ckpt_dims[c]
        if metric == 0:
            acc = _accum_l2(q, v, lo, k, acc)
            part = acc
        else:
            acc = _accum_ip(q, v, lo, k, acc)
            part = -acc
        lo = k
        if k < ndim:
            if fee == 1:
                trig = part
            else:
                trig = alpha[c] * part / beta[c]
            if trig >= threshold:
                return trig, k, True
    if metric == 0:
        acc = _accum_l2(q, v, lo, ndim, acc)
        return acc, ndim, False
    acc = _accum_ip(q, v, lo, ndim, acc)
    return -acc, ndim, False

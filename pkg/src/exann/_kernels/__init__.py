"""Kernel backend selection.

Imports the compiled Cython core when available, otherwise the numpy
fallback. Both expose the same functions and produce bit-identical float64
results. Override with EXANN_KERNELS=python|compiled (``compiled`` raises if
the extension is missing).
"""

import os

_requested = os.environ.get("EXANN_KERNELS", "").strip().lower()

if _requested == "python":
    from . import _fallback as _impl
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _requested == "compiled":
            raise
        from . import _fallback as _impl

BACKEND = _impl.BACKEND
METRIC_L2 = _impl.METRIC_L2
METRIC_IP = _impl.METRIC_IP
FEE_NONE = _impl.FEE_NONE
FEE_PARTIAL = _impl.FEE_PARTIAL
FEE_ESTIMATED = _impl.FEE_ESTIMATED

dist_full = _impl.dist_full
dist_to_many = _impl.dist_to_many
eval_earlyexit = _impl.eval_earlyexit


def backends():
    """Return the available backend modules keyed by name (for benchmarks)."""
    from . import _fallback

    found = {"python": _fallback}
    try:
        from . import _core

        found["compiled"] = _core
    except ImportError:
        pass
    return found

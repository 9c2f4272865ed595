"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba versions are used when numba imports cleanly and the environment
variable ``SPANBANDIT_DISABLE_NUMBA`` is unset (or ``"0"``).  Both paths share
signatures so callers never branch.  ``NUMPY_KERNELS`` and ``NUMBA_KERNELS``
expose each implementation explicitly for tests and benchmarks.
"""
import os
from types import SimpleNamespace

import numpy as np

__all__ = [
    "USING_NUMBA",
    "csr_rowdot",
    "csr_scatter_add",
    "best_span",
    "NUMPY_KERNELS",
    "NUMBA_KERNELS",
]


# ---------------------------------------------------------------------------
# numpy
# ---------------------------------------------------------------------------


def _np_csr_rowdot(indptr, indices, values, rows, w, offset):
    n = indptr.shape[0] - 1
    return np.bincount(rows, weights=w[indices + offset] * values, minlength=n)


def _np_csr_scatter_add(indptr, indices, values, rows, coef, out, offset):
    np.add.at(out, indices + offset, coef[rows] * values)


def _np_best_span(log_start, log_end, max_len):
    # band[i, d] scores span (i, i + d); row-major argmax keeps the smallest i, then j
    n = log_start.shape[0]
    width = min(max_len, n)
    padded = np.full(n + width - 1, -np.inf)
    padded[:n] = log_end
    band = log_start[:, None] + np.lib.stride_tricks.sliding_window_view(padded, width)
    i, d = divmod(int(np.argmax(band)), width)
    return i, i + d


NUMPY_KERNELS = SimpleNamespace(
    csr_rowdot=_np_csr_rowdot,
    csr_scatter_add=_np_csr_scatter_add,
    best_span=_np_best_span,
)


# ---------------------------------------------------------------------------
# numba
# ---------------------------------------------------------------------------


def _loop_csr_rowdot(indptr, indices, values, rows, w, offset):
    n = indptr.shape[0] - 1
    out = np.zeros(n)
    for r in range(n):
        acc = 0.0
        for k in range(indptr[r], indptr[r + 1]):
            acc += w[indices[k] + offset] * values[k]
        out[r] = acc
    return out


def _loop_csr_scatter_add(indptr, indices, values, rows, coef, out, offset):
    n = indptr.shape[0] - 1
    for r in range(n):
        c = coef[r]
        if c == 0.0:
            continue
        for k in range(indptr[r], indptr[r + 1]):
            out[indices[k] + offset] += c * values[k]


def _loop_best_span(log_start, log_end, max_len):
    n = log_start.shape[0]
    best = -np.inf
    bi = 0
    bj = 0
    for i in range(n):
        stop = min(n, i + max_len)
        for j in range(i, stop):
            s = log_start[i] + log_end[j]
            if s > best:
                best = s
                bi = i
                bj = j
    return bi, bj


try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_KERNELS = None
else:
    NUMBA_KERNELS = SimpleNamespace(
        csr_rowdot=njit(cache=True)(_loop_csr_rowdot),
        csr_scatter_add=njit(cache=True)(_loop_csr_scatter_add),
        best_span=njit(cache=True)(_loop_best_span),
    )

USING_NUMBA = NUMBA_KERNELS is not None and os.environ.get(
    "SPANBANDIT_DISABLE_NUMBA", "0"
) in ("", "0")

_active = NUMBA_KERNELS if USING_NUMBA else NUMPY_KERNELS

csr_rowdot = _active.csr_rowdot
csr_scatter_add = _active.csr_scatter_add
best_span = _active.best_span

"""Backend dispatch for the hot kernels.

The compiled extension is preferred when importable; the NumPy fallback
implements the same contracts. ``AREIL_BACKEND=numpy`` forces the fallback
(useful for benchmarking and debugging).
"""

import os

import numpy as np

from areil.errors import ShapeError

try:
    from areil.numcore import _ckernels
except ImportError:
    _ckernels = None

_FORCED = os.environ.get("AREIL_BACKEND", "auto")
HAVE_COMPILED = _ckernels is not None
USE_COMPILED = HAVE_COMPILED and _FORCED != "numpy"


def backend_name():
    return "compiled" if USE_COMPILED else "numpy"


def spmm_numpy(indptr, indices, data, x, out=None):
    """NumPy fallback for CSR * dense. Rows with no entries come out zero."""
    n_rows = indptr.shape[0] - 1
    if out is None:
        out = np.zeros((n_rows, x.shape[1]), dtype=x.dtype)
    else:
        out[:] = 0.0
    if data.shape[0] == 0:
        return out
    degrees = np.diff(indptr)
    occupied = np.flatnonzero(degrees > 0)
    prod = data[:, None] * x[indices]
    # reduceat boundaries restricted to occupied rows are strictly increasing
    # and in range, so each segment covers exactly one row's entries.
    out[occupied] = np.add.reduceat(prod, indptr[occupied], axis=0)
    return out


def spmm_compiled(indptr, indices, data, x, out=None):
    if out is None:
        out = np.empty((indptr.shape[0] - 1, x.shape[1]))
    _ckernels.csr_spmm(indptr, indices, data, x, out)
    return out


def spmm(graph, x, out=None):
    """Propagate node features through a normalized adjacency.

    ``graph`` supplies CSR arrays (indptr, indices, data) over
    num_users + num_items nodes; ``x`` is (num_nodes, width) real-valued.
    Non-float64 inputs (extended-precision verification) take the NumPy path.
    """
    x = np.ascontiguousarray(x)
    n_nodes = graph.indptr.shape[0] - 1
    if x.shape[0] != n_nodes:
        raise ShapeError(
            f"node feature rows {x.shape} do not match graph nodes ({n_nodes},)"
        )
    if USE_COMPILED and x.dtype == np.float64:
        return spmm_compiled(graph.indptr, graph.indices, graph.data, x, out)
    return spmm_numpy(graph.indptr, graph.indices, graph.data, x, out)


def adam_update_numpy(value, grad, m, v, lr, beta1, beta2, eps, bias1, bias2):
    """NumPy fallback for the fused Adam step (flat arrays, in place)."""
    np.multiply(m, beta1, out=m)
    m += (1.0 - beta1) * grad
    np.multiply(v, beta2, out=v)
    v += (1.0 - beta2) * (grad * grad)
    value -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)


def adam_update(value, grad, m, v, lr, beta1, beta2, eps, bias1, bias2):
    if USE_COMPILED:
        _ckernels.adam_update(value, grad, m, v, lr, beta1, beta2, eps, bias1, bias2)
    else:
        adam_update_numpy(value, grad, m, v, lr, beta1, beta2, eps, bias1, bias2)


def scatter_add_rows(out, rows, scale, vals):
    """out[rows[k]] += scale[k] * vals[k]; duplicate rows accumulate."""
    if USE_COMPILED:
        _ckernels.scatter_add_rows(out, rows, scale, np.ascontiguousarray(vals))
    else:
        np.add.at(out, rows, scale[:, None] * vals)

# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: CSR-times-dense propagation and fused Adam updates.

The pure-NumPy fallbacks in kernels.py compute the same quantities; the
Adam kernel mirrors the fallback's per-element operation order exactly so
both backends produce bit-identical parameter trajectories.
"""

from libc.math cimport sqrt


def csr_spmm(const long long[::1] indptr,
             const long long[::1] indices,
             const double[::1] data,
             const double[:, ::1] x,
             double[:, ::1] out):
    """out[row] = sum over stored entries (row, col): data * x[col].

    Summation runs in column-index order within each row (CSR order).
    """
    cdef Py_ssize_t n_rows = out.shape[0]
    cdef Py_ssize_t width = out.shape[1]
    cdef Py_ssize_t row, jj, col, c
    cdef double w
    for row in range(n_rows):
        for c in range(width):
            out[row, c] = 0.0
        for jj in range(indptr[row], indptr[row + 1]):
            col = indices[jj]
            w = data[jj]
            for c in range(width):
                out[row, c] += w * x[col, c]


def adam_update(double[::1] value,
                const double[::1] grad,
                double[::1] m,
                double[::1] v,
                double lr, double beta1, double beta2, double eps,
                double bias1, double bias2):
    """In-place Adam step on flat arrays; bias1/bias2 are 1 - beta**t."""
    cdef Py_ssize_t i, n = value.shape[0]
    cdef double g, mi, vi
    for i in range(n):
        g = grad[i]
        mi = beta1 * m[i] + (1.0 - beta1) * g
        vi = beta2 * v[i] + (1.0 - beta2) * (g * g)
        m[i] = mi
        v[i] = vi
        value[i] -= lr * (mi / bias1) / (sqrt(vi / bias2) + eps)


def scatter_add_rows(double[:, ::1] out,
                     const long long[::1] rows,
                     const double[::1] scale,
                     const double[:, ::1] vals):
    """out[rows[k]] += scale[k] * vals[k] for each k, in k order."""
    cdef Py_ssize_t k, c, r
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t width = out.shape[1]
    cdef double s
    for k in range(n):
        r = rows[k]
        s = scale[k]
        for c in range(width):
            out[r, c] += s * vals[k, c]

"""Pure numpy/scipy implementations of the gather/scatter kernels.

The scatter adjoint goes through a CSR sparse matmul: building the matrix
is vectorized and the product runs in C, which keeps the fallback usable
(just slower than the compiled core; see benchmarks/bench_kernels.py).
"""

import numpy as np
from scipy import sparse


def gather(values, idx, weights):
    p, k = idx.shape
    out = np.zeros((p, values.shape[0]))
    for j in range(k):
        out += values[:, idx[:, j]].T * weights[:, j : j + 1]
    return out


def scatter(grad_out, idx, weights, table_size):
    p, k = idx.shape
    rows = np.repeat(np.arange(p, dtype=np.int64), k)
    mat = sparse.csr_matrix(
        (weights.ravel(), (rows, idx.ravel())), shape=(p, table_size)
    )
    return np.ascontiguousarray((mat.T @ grad_out).T)


def gather_dot(values, idx, grad_out):
    p, k = idx.shape
    out = np.empty((p, k))
    for j in range(k):
        out[:, j] = np.einsum("cp,pc->p", values[:, idx[:, j]], grad_out)
    return out

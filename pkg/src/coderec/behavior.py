"""Multi-behavioral propagation: symmetric-normalized bipartite adjacency and
LightGCN-style light convolution with layer mean-pooling.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .dataset import SparseBinary


def normalize_adjacency(m: SparseBinary, dtype=np.float32) -> ad.SparseMatrix:
    """Build the symmetric-normalized block adjacency for a bipartite incidence.

    For an incidence matrix M (rows x cols) the full adjacency is
    [[0, M], [M^T, 0]] of size (rows+cols)^2 and each nonzero (i, j) becomes
    1/sqrt(deg_i * deg_j). Isolated nodes yield all-zero rows.
    """
    n = m.rows + m.cols
    deg = np.zeros(n, dtype=np.float64)
    np.add.at(deg, m.row_idx, 1.0)
    np.add.at(deg, m.rows + m.col_idx, 1.0)
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)

    rows = np.concatenate([m.row_idx, m.rows + m.col_idx])
    cols = np.concatenate([m.rows + m.col_idx, m.row_idx])
    vals = (inv_sqrt[rows] * inv_sqrt[cols]).astype(dtype)
    return ad.SparseMatrix.from_coo(n, n, rows, cols, vals)


def propagate(e0: ad.Tensor, a_hat: ad.SparseMatrix, layers: int) -> list:
    """E^(l) = A_hat @ E^(l-1), no weights or nonlinearity; returns [E^(0)..E^(L)]."""
    if layers < 0:
        raise ValueError(f"layer count must be >= 0, got {layers}")
    stack = [e0]
    for _ in range(layers):
        stack.append(ad.sparse_dense_matmul(a_hat, stack[-1]))
    return stack


def pool_layers(stack) -> ad.Tensor:
    """Mean over all propagation layers."""
    if not stack:
        raise ValueError("cannot pool an empty layer stack")
    return ad.mean_over(stack)

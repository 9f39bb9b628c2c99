"""Input feature handling shared by every model: optional row normalization,
a sparse fast path for high-dimensional bag-of-words features, and input
dropout that works in either representation."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import tensor as T

# Bag-of-words matrices (Citeseer-like) are ~1% dense; below this density the
# first-layer product goes through CSR.
_SPARSE_DENSITY = 0.05
_SPARSE_MIN_DIM = 256


class FeatureMatrix:
    """N x d input features, stored dense or CSR, constant w.r.t. gradients."""

    def __init__(self, dense: np.ndarray | None = None, csr: sp.csr_matrix | None = None):
        if (dense is None) == (csr is None):
            raise ValueError("exactly one of dense/csr required")
        self._dense = dense
        self._csr = csr

    @staticmethod
    def from_array(x: np.ndarray, row_normalize: bool = False) -> "FeatureMatrix":
        x = np.asarray(x, dtype=np.float64)
        if row_normalize:
            sums = np.abs(x).sum(axis=1, keepdims=True)
            x = np.divide(x, sums, out=np.zeros_like(x), where=sums > 0)
        density = np.count_nonzero(x) / max(x.size, 1)
        if x.shape[1] >= _SPARSE_MIN_DIM and density < _SPARSE_DENSITY:
            return FeatureMatrix(csr=sp.csr_matrix(x))
        return FeatureMatrix(dense=x)

    @property
    def shape(self) -> tuple[int, int]:
        return self._dense.shape if self._dense is not None else self._csr.shape

    @property
    def is_sparse(self) -> bool:
        return self._csr is not None

    def to_dense(self) -> np.ndarray:
        return self._dense if self._dense is not None else np.asarray(self._csr.todense())

    def matmul(self, w: T.Tensor) -> T.Tensor:
        """X @ W as a recorded op (gradient flows to W only)."""
        if self._csr is not None:
            return T.spmm(self._csr, w)
        return T.matmul(T.Tensor(self._dense), w)

    def premultiply(self, m: sp.csr_matrix) -> "FeatureMatrix":
        """Constant M @ X, preserving the representation."""
        if self._csr is not None:
            out = (m @ self._csr).tocsr()
            return FeatureMatrix(csr=out)
        return FeatureMatrix(dense=np.asarray(m @ self._dense))

    def dropout(self, rate: float, rng: np.random.Generator) -> "FeatureMatrix":
        """Inverted dropout on the input; zeros stay zero, so CSR drops nonzeros only."""
        if rate <= 0.0:
            return self
        keep = 1.0 - rate
        if self._csr is not None:
            dropped = self._csr.copy()
            mask = (rng.random(dropped.data.shape[0]) >= rate) / keep
            dropped.data = dropped.data * mask
            return FeatureMatrix(csr=dropped)
        mask = (rng.random(self._dense.shape) >= rate) / keep
        return FeatureMatrix(dense=self._dense * mask)

"""Complex-cell pooling: squared sparse coefficients averaged across patches."""

from __future__ import annotations

import numpy as np

from .sparsecode import SparseCode

__all__ = ["pool_features"]


def pool_features(
    codes: SparseCode, n_atoms: int, divisive_norm: bool = False
) -> np.ndarray:
    """Per-atom motion-energy feature vector: f_n = (1/P) * sum_i a_in^2.

    Absent coefficients count as zero, so the result is non-negative with one
    entry per dictionary atom. `divisive_norm` optionally rescales the vector
    to unit sum (off by default; the raw energies are the learning state).
    """
    P = codes.count
    idx = codes.indices.ravel()
    valid = idx >= 0
    f = np.bincount(
        idx[valid], weights=codes.coeffs.ravel()[valid] ** 2, minlength=n_atoms
    ) / P
    if divisive_norm:
        total = f.sum()
        if total > 0:
            f = f / total
    return f

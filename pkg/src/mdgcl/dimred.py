"""Truncated-SVD projection that unifies feature widths across graphs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True, eq=False)
class DimMap:
    """Projection onto the top right singular vectors of a feature matrix.

    ``projection`` is ``source_dim x target_dim``. Columns past the numerical
    rank (or past ``source_dim``) are zero.
    """

    projection: np.ndarray
    singular_values: np.ndarray

    @property
    def source_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def target_dim(self) -> int:
        return self.projection.shape[1]

    @property
    def rank(self) -> int:
        return int(np.count_nonzero(self.singular_values))


def _fix_signs(v: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column made nonnegative; first index wins ties
    pivot = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[pivot, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return v * signs


def fit_map(x: np.ndarray, target_dim: int) -> DimMap:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValidationError(f"feature matrix must be nonempty 2-D, got shape {x.shape}")
    if target_dim < 1:
        raise ValidationError("target dimension must be positive")
    n, d = x.shape
    proj = np.zeros((d, target_dim))
    svals = np.zeros(target_dim)
    if not np.any(x):
        return DimMap(proj, svals)

    _, s, vt = np.linalg.svd(x, full_matrices=False)
    tol = max(n, d) * np.finfo(np.float64).eps * s[0]
    keep = s > tol
    s, v = s[keep], _fix_signs(vt[keep].T)
    # descending singular value, ties broken by the column index the vector is anchored on
    anchor = np.argmax(np.abs(v), axis=0)
    order = np.lexsort((anchor, -s))
    k = min(target_dim, order.size)
    order = order[:k]
    proj[:, :k] = v[:, order]
    svals[:k] = s[order]
    return DimMap(proj, svals)


def apply_map(x: np.ndarray, dim_map: DimMap) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dim_map.source_dim:
        raise ValidationError(
            f"feature width {x.shape[-1] if x.ndim else 0} does not match map source width {dim_map.source_dim}"
        )
    return x @ dim_map.projection

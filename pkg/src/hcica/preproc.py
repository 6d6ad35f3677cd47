"""Centering, dimension reduction, and whitening of raw subject data.

A raw recording is a T x V matrix (one concatenated image per row).
``center`` removes means, ``reduce_whiten`` projects onto the leading
q-dimensional signal subspace and rescales it so the retained signal has
identity covariance after subtracting the residual eigenvalue average.
"""

from __future__ import annotations

import numpy as np

from .types import SubjectData

__all__ = ["center", "reduce_whiten", "preprocess_subject"]


def center(raw: np.ndarray, voxel_center: bool = True) -> np.ndarray:
    """Center a T x V matrix.

    Removes each row's mean across voxels so every image is centered.
    By default each voxel's time series (column) is centered first,
    which makes the downstream whitening invariant to adding a constant
    image to every time point; both row and column means are zero in
    the result. Pass ``voxel_center=False`` for row-centering only.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2:
        raise ValueError("expected a 2-D T x V matrix")
    out = raw - raw.mean(axis=0, keepdims=True) if voxel_center else raw
    return out - out.mean(axis=1, keepdims=True)


def reduce_whiten(y_tilde: np.ndarray, q: int) -> SubjectData:
    """Project centered data onto its top-q eigenspace and whiten it.

    The sample covariance Y Y'/V is eigendecomposed; with U_q, L_q the
    leading eigenpairs and r2 the average of the T-q trailing
    eigenvalues, the whitened data is (L_q - r2 I)^(-1/2) U_q' Y.
    Eigenvector signs are fixed by making each vector's first
    non-negligible entry positive, so the output is deterministic.
    """
    y_tilde = np.asarray(y_tilde, dtype=float)
    T, V = y_tilde.shape
    if q >= T:
        raise ValueError(f"q={q} must be smaller than T={T}")
    cov = y_tilde @ y_tilde.T / V
    evals, evecs = np.linalg.eigh(cov)  # ascending
    evals = evals[::-1]
    evecs = evecs[:, ::-1]
    top = evals[:q].copy()
    rest = evals[q:]
    resid = float(np.clip(rest.mean(), 0.0, None))
    if top[-1] <= resid:
        raise ValueError(
            "insufficient signal subspace: smallest retained eigenvalue "
            f"{top[-1]:.3e} does not exceed the residual average {resid:.3e}"
        )
    U = evecs[:, :q]
    # Deterministic sign: first entry clearly away from zero goes positive.
    for k in range(q):
        col = U[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12 * np.abs(col).max())
        if nz.size and col[nz[0]] < 0:
            U[:, k] = -col
    whitener = np.diag((top - resid) ** -0.5) @ U.T
    return SubjectData(Y=whitener @ y_tilde, residual_var=resid, whitener=whitener)


def preprocess_subject(raw: np.ndarray, q: int) -> SubjectData:
    """Center then reduce/whiten one subject's raw T x V recording."""
    return reduce_whiten(center(raw), q)

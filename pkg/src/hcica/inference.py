"""Voxel-wise tests of covariate effects and activation maps.

After fitting, each voxel is treated as a multivariate linear model in
the projected data A_i'y_i(v): its residual covariance around the
fitted effects yields a plug-in variance for vec[beta(v)'], from which
Z-statistics, p-values, dependency-robust FDR adjustments, and
posterior-probability activation maps are derived.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .types import CovariateSet, ModelParams, SubjectData

__all__ = [
    "InferenceMaps",
    "residual_covariance",
    "beta_variance",
    "z_and_p",
    "fdr_adjust",
    "activation_map",
    "run_inference",
]

RIDGE_SCALE = 1e-8


@dataclass(frozen=True)
class InferenceMaps:
    """Per-voxel inference outputs.

    var_beta: (V, pq, pq) plug-in covariances of vec[beta(v)'].
    z_stats, p_values, fdr_adjusted: (V, p, q).
    activation_prob: (V, q, m-1) marginal probabilities of the
    non-background states.
    ridge_flag: voxels where the residual covariance needed a ridge.
    """

    var_beta: np.ndarray
    z_stats: np.ndarray
    p_values: np.ndarray
    fdr_adjusted: np.ndarray
    activation_prob: np.ndarray
    ridge_flag: np.ndarray


def _projected_residuals(data, X, params, s0_hat, v):
    """A_i'y_i(v) - s0_hat(v) - beta(v)'x_i for every subject, (N, q)."""
    N = params.N
    W = np.stack([params.A[i].T @ data[i].Y[:, v] for i in range(N)])
    return W - s0_hat[None, :] - X.X @ params.beta[v]


def residual_covariance(
    data: list[SubjectData],
    X: CovariateSet,
    params: ModelParams,
    s0_hat: np.ndarray,
    v: int,
) -> tuple[np.ndarray, bool]:
    """Empirical residual covariance at voxel ``v``.

    Averages the outer products of the per-subject residuals around the
    fitted covariate effects. A numerically singular result gets a
    trace-scaled ridge; the second return value flags that path.
    ``s0_hat`` is the posterior-mean population map, (q, V).
    """
    resid = _projected_residuals(data, X, params, s0_hat[:, v], v)
    W = resid.T @ resid / params.N
    ridged = False
    q = W.shape[0]
    # Cholesky doubles as the positive-definiteness probe.
    try:
        np.linalg.cholesky(W)
    except np.linalg.LinAlgError:
        W = W + (RIDGE_SCALE * np.trace(W) / q) * np.eye(q)
        ridged = True
    return W, ridged


def beta_variance(X: CovariateSet, W: np.ndarray) -> np.ndarray:
    """Plug-in covariance of vec[beta(v)'] for one voxel.

    Inverse of the total information sum_i X_i' W^-1 X_i with
    X_i = x_i' (x) I_q; the Kronecker structure reduces it to
    (X'X)^-1 (x) W. Raises on collinear covariates or a singular W.
    """
    q = W.shape[0]
    xtx = X.X.T @ X.X
    try:
        xtx_inv = np.linalg.inv(xtx)
    except np.linalg.LinAlgError as err:
        raise ValueError("collinear covariates: X'X singular") from err
    try:
        np.linalg.cholesky(W)
    except np.linalg.LinAlgError as err:
        raise ValueError("residual covariance not positive definite") from err
    return np.kron(xtx_inv, W)


def z_and_p(beta_hat: np.ndarray, var_beta: np.ndarray):
    """Two-sided normal tests for every effect entry.

    beta_hat: (V, p, q); var_beta: (V, pq, pq) with the vec[beta']
    ordering (covariate-major). Zero-variance entries get p = 0 when
    the estimate is nonzero and p = 1 otherwise.
    """
    V, p, q = beta_hat.shape
    diag = np.einsum("vii->vi", var_beta).reshape(V, p, q)
    z = np.zeros_like(beta_hat)
    pos = diag > 0
    z[pos] = beta_hat[pos] / np.sqrt(diag[pos])
    pvals = erfc(np.abs(z) / np.sqrt(2.0))
    zero_var = ~pos
    pvals[zero_var] = np.where(beta_hat[zero_var] != 0.0, 0.0, 1.0)
    return z, pvals


def _by_adjust(p: np.ndarray) -> np.ndarray:
    """Benjamini-Yekutieli step-up adjustment for one family."""
    M = p.size
    if M == 0:
        return p.copy()
    c = np.sum(1.0 / np.arange(1, M + 1))
    order = np.argsort(p, kind="stable")
    ranked = p[order] * c * M / np.arange(1, M + 1)
    adjusted = np.minimum.accumulate(ranked[::-1])[::-1]
    adjusted = np.minimum(adjusted, 1.0)
    out = np.empty_like(p)
    out[order] = adjusted
    return out


def fdr_adjust(p_values: np.ndarray, per_ic: bool = True) -> np.ndarray:
    """Dependency-robust FDR adjustment of (V, p, q) p-value maps.

    Families are the voxel sets of each (covariate, component) map by
    default; ``per_ic=False`` pools everything into one family.
    """
    p_values = np.asarray(p_values, dtype=float)
    if not per_ic:
        return _by_adjust(p_values.ravel()).reshape(p_values.shape)
    out = np.empty_like(p_values)
    V, p, q = p_values.shape
    for k in range(p):
        for l in range(q):
            out[:, k, l] = _by_adjust(p_values[:, k, l])
    return out


def activation_map(
    activation_prob: np.ndarray, l: int, j: int, threshold: float
) -> np.ndarray:
    """Voxels whose posterior probability of state (l, j) exceeds the cut.

    ``activation_prob`` is (V, q, m-1); indices are 1-based and j must
    name a non-background state.
    """
    if j == 1:
        raise ValueError("background state (j=1) is not an activation state")
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie strictly between 0 and 1")
    q, mm1 = activation_prob.shape[1], activation_prob.shape[2]
    if not 1 <= l <= q:
        raise ValueError(f"component index {l} out of range 1..{q}")
    if not 2 <= j <= mm1 + 1:
        raise ValueError(f"state label {j} out of range 2..{mm1 + 1}")
    return activation_prob[:, l - 1, j - 2] > threshold


def run_inference(
    data: list[SubjectData],
    X: CovariateSet,
    params: ModelParams,
    s0_hat: np.ndarray,
    marginal_probs: np.ndarray,
    per_ic_fdr: bool = True,
) -> InferenceMaps:
    """Full inference pass over all voxels.

    ``marginal_probs`` is the (V, q, m) array of posterior state
    probabilities from the final E-step.
    """
    V, p, q = params.V, params.p, params.q
    var_beta = np.empty((V, p * q, p * q))
    ridge_flag = np.zeros(V, dtype=bool)
    xtx_inv = np.linalg.inv(X.X.T @ X.X)

    # Residuals for every voxel at once; per-voxel outer-product average.
    W_all = np.einsum(
        "iab,iav->vib", params.A, np.stack([d.Y for d in data])
    )  # (V, N, q)
    bx = np.einsum("np,vpq->vnq", X.X, params.beta)
    resid = W_all - s0_hat.T[:, None, :] - bx
    for v in range(V):
        Wv = resid[v].T @ resid[v] / params.N
        try:
            np.linalg.cholesky(Wv)
        except np.linalg.LinAlgError:
            Wv = Wv + (RIDGE_SCALE * np.trace(Wv) / q) * np.eye(q)
            ridge_flag[v] = True
        var_beta[v] = np.kron(xtx_inv, Wv)

    z, pvals = z_and_p(params.beta, var_beta)
    adj = fdr_adjust(pvals, per_ic=per_ic_fdr)
    return InferenceMaps(
        var_beta=var_beta,
        z_stats=z,
        p_values=pvals,
        fdr_adjusted=adj,
        activation_prob=marginal_probs[:, :, 1:].copy(),
        ridge_flag=ridge_flag,
    )

"""Core model quantities shared across the pipeline.

All containers are immutable value objects: arrays are copied on
construction and marked read-only, so instances can be shared freely
across threads. Structural problems (wrong shapes) raise at
construction; numerical invariants are checked by :func:`validate`,
which reports violations instead of raising.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "Dimensions",
    "SubjectData",
    "CovariateSet",
    "MoGParams",
    "ModelParams",
    "LatentStateVector",
    "VoxelPosterior",
    "CollapsedModel",
    "validate",
    "ORTHO_TOL",
    "PROB_TOL",
]

# Tolerances used by invariant checks.
ORTHO_TOL = 1e-8
PROB_TOL = 1e-10

#: A latent state assigns each component one mixture label in {1..m}.
#: Plain tuples give the hashing/equality needed for enumeration keys.
LatentStateVector = tuple[int, ...]


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dimensions:
    """Problem sizes.

    N subjects, T pre-whitening time points, V voxels, q components,
    p covariates, m mixture components per source (m >= 2).
    """

    N: int
    T: int
    V: int
    q: int
    p: int
    m: int

    def __post_init__(self):
        for name in ("N", "T", "V", "q", "p", "m"):
            if getattr(self, name) < 1:
                raise ValueError(f"dimension {name} must be positive")
        if self.q > self.T:
            raise ValueError("q must not exceed T")
        if self.m < 2:
            raise ValueError("m must be at least 2")


@dataclass(frozen=True)
class SubjectData:
    """One subject's whitened observation matrix plus whitening metadata.

    Y is q x V. ``residual_var`` is the average of the eigenvalues
    discarded by the dimension reduction; ``whitener`` is the q x T
    projection that produced Y from the centered time series.
    """

    Y: np.ndarray
    residual_var: float
    whitener: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Y", _frozen(self.Y))
        object.__setattr__(self, "whitener", _frozen(self.whitener))
        if self.Y.ndim != 2:
            raise ValueError("Y must be 2-D (q x V)")
        if self.whitener.ndim != 2 or self.whitener.shape[0] != self.Y.shape[0]:
            raise ValueError("whitener must be q x T")
        if self.residual_var < 0:
            raise ValueError("residual_var must be nonnegative")

    @property
    def q(self) -> int:
        return self.Y.shape[0]

    @property
    def V(self) -> int:
        return self.Y.shape[1]


@dataclass(frozen=True)
class CovariateSet:
    """Subject covariates, one row per subject."""

    X: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "X", _frozen(np.atleast_2d(self.X)))
        N, p = self.X.shape
        if N < p:
            raise ValueError("need at least as many subjects as covariates")
        if np.linalg.matrix_rank(self.X) < p:
            raise ValueError("covariate matrix is rank deficient (X'X singular)")

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class MoGParams:
    """Mixture-of-Gaussians parameters for one component's source map.

    Index j=1 (array position 0) is the background state by convention.
    """

    pi: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pi", _frozen(self.pi))
        object.__setattr__(self, "mu", _frozen(self.mu))
        object.__setattr__(self, "sigma2", _frozen(self.sigma2))
        m = self.pi.shape[0]
        if self.mu.shape != (m,) or self.sigma2.shape != (m,):
            raise ValueError("pi, mu, sigma2 must share a common length m")
        if m < 2:
            raise ValueError("need at least two mixture components")

    @property
    def m(self) -> int:
        return self.pi.shape[0]


@dataclass(frozen=True)
class ModelParams:
    """Full parameter set of the hierarchical model.

    beta: (V, p, q) voxel-wise covariate effects.
    A:    (N, q, q) per-subject orthogonal mixing matrices.
    nu0_sq: isotropic first-level noise variance.
    D:    (q,) diagonal of the random-effect covariance.
    mog:  length-q sequence of per-component MoG parameters.
    """

    beta: np.ndarray
    A: np.ndarray
    nu0_sq: float
    D: np.ndarray
    mog: tuple[MoGParams, ...]

    def __post_init__(self):
        object.__setattr__(self, "beta", _frozen(self.beta))
        object.__setattr__(self, "A", _frozen(self.A))
        object.__setattr__(self, "D", _frozen(self.D))
        object.__setattr__(self, "mog", tuple(self.mog))
        if self.beta.ndim != 3:
            raise ValueError("beta must be (V, p, q)")
        if self.A.ndim != 3 or self.A.shape[1] != self.A.shape[2]:
            raise ValueError("A must be (N, q, q)")
        q = self.A.shape[1]
        if self.beta.shape[2] != q or self.D.shape != (q,) or len(self.mog) != q:
            raise ValueError("inconsistent component count across beta/A/D/mog")
        m = self.mog[0].m
        if any(g.m != m for g in self.mog):
            raise ValueError("all components must share the same mixture size m")

    @property
    def q(self) -> int:
        return self.A.shape[1]

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def V(self) -> int:
        return self.beta.shape[0]

    @property
    def p(self) -> int:
        return self.beta.shape[1]

    @property
    def m(self) -> int:
        return self.mog[0].m

    # (q, m) views used throughout the estimation code.
    def pi_matrix(self) -> np.ndarray:
        return np.stack([g.pi for g in self.mog])

    def mu_matrix(self) -> np.ndarray:
        return np.stack([g.mu for g in self.mog])

    def sigma2_matrix(self) -> np.ndarray:
        return np.stack([g.sigma2 for g in self.mog])

    def flatten(self) -> np.ndarray:
        """Concatenate all free parameters into one vector (for norms)."""
        return np.concatenate(
            [
                self.beta.ravel(),
                self.A.ravel(),
                [self.nu0_sq],
                self.D,
                self.pi_matrix().ravel(),
                self.mu_matrix().ravel(),
                self.sigma2_matrix().ravel(),
            ]
        )


class VoxelPosterior:
    """Conditional posterior at one voxel.

    Stores the compact per-component tables produced by the E-step and
    assembles the publicly documented quantities on demand:

    - ``state_probs``: dict mapping latent state -> posterior probability
    - ``s_mean``: E[s(v)|y(v)], length (N+1)q, subjects first then s0
    - ``s_second``: E[s(v)s(v)'|y(v)], ((N+1)q, (N+1)q)
    - ``marginal_ic``: (q, m, 3) array of
      (p[z_l=j|y], E[s0_l|z_l=j,y], E[s0_l^2|z_l=j,y])
    """

    def __init__(
        self,
        states: Sequence[LatentStateVector],
        probs: np.ndarray,
        marg: np.ndarray,
        pair_marg: np.ndarray,
        mean_table: np.ndarray,
        cond_mean_s0: np.ndarray,
        cond_second_s0: np.ndarray,
        var_psi: np.ndarray,
        var_si: np.ndarray,
        cov_si_si: np.ndarray,
        cov_si_s0: np.ndarray,
    ):
        self._states = tuple(states)
        self.probs = probs                  # (|space|,)
        self.marg = marg                    # (q, m) p[z_l = j | y]
        self.pair_marg = pair_marg          # (q, m, q, m) joint marginals
        self.mean_table = mean_table        # (N+1, q, m); row N is s0
        self.cond_mean_s0 = cond_mean_s0    # (q, m)
        self.cond_second_s0 = cond_second_s0
        self.var_psi = var_psi              # (q, m) Var[s0_l | z_l=j, y]
        self.var_si = var_si                # (q, m) Var[s_il | z_l=j, y]
        self.cov_si_si = cov_si_si          # (q, m) Cov[s_il, s_i'l | z, y]
        self.cov_si_s0 = cov_si_s0          # (q, m) Cov[s_il, s0_l | z, y]

    @property
    def N(self) -> int:
        return self.mean_table.shape[0] - 1

    @property
    def q(self) -> int:
        return self.mean_table.shape[1]

    @property
    def m(self) -> int:
        return self.mean_table.shape[2]

    @property
    def state_probs(self) -> dict[LatentStateVector, float]:
        return {z: float(pr) for z, pr in zip(self._states, self.probs)}

    @property
    def marginal_ic(self) -> np.ndarray:
        return np.stack([self.marg, self.cond_mean_s0, self.cond_second_s0], axis=-1)

    @property
    def s_mean(self) -> np.ndarray:
        # E[s_il | y] = sum_j p[z_l=j|y] E[s_il | z_l=j, y]
        return np.einsum("lj,ilj->il", self.marg, self.mean_table).ravel()

    def subject_mean(self) -> np.ndarray:
        """E[s_i(v)|y] for i = 1..N, shape (N, q)."""
        return np.einsum("lj,ilj->il", self.marg, self.mean_table[:-1])

    def s0_mean(self) -> np.ndarray:
        """E[s_0(v)|y], shape (q,)."""
        return np.einsum("lj,lj->l", self.marg, self.mean_table[-1])

    def subject_second(self) -> np.ndarray:
        """E[s_i s_i' | y] for each subject, shape (N, q, q)."""
        N, q, m = self.N, self.q, self.m
        M = self.mean_table[:-1]  # (N, q, m)
        out = np.einsum("ljkn,ilj,ikn->ilk", self.pair_marg, M, M)
        diag = np.einsum("lj,ilj->il", self.marg, self.var_si + M**2)
        out[:, np.arange(q), np.arange(q)] = diag
        return out

    def cross_si_s0(self) -> np.ndarray:
        """E[s_il s_0l | y] per subject and component, shape (N, q)."""
        M = self.mean_table
        return np.einsum(
            "lj,ilj->il", self.marg, self.cov_si_s0 + M[:-1] * M[-1][None]
        )

    def s0_second_diag(self) -> np.ndarray:
        """E[s_0l^2 | y], shape (q,)."""
        return np.einsum("lj,lj->l", self.marg, self.cond_second_s0)

    @property
    def s_second(self) -> np.ndarray:
        """Full mixture second moment over the stacked source vector."""
        N, q, m = self.N, self.q, self.m
        n = (N + 1) * q
        M = self.mean_table  # (N+1, q, m)
        # Cross-component part from pairwise state marginals.
        out = np.einsum("ljkn,alj,bkn->albk", self.pair_marg, M, M).reshape(n, n)
        # Same-component blocks: replace with exact within-l mixture moments.
        for l in range(q):
            pr = self.marg[l]
            mcol = M[:, l, :]  # (N+1, m)
            blk = np.einsum("j,aj,bj->ab", pr, mcol, mcol)
            cov = np.full((N + 1, N + 1), 0.0)
            cov[:N, :N] = self.cov_si_si[l] @ pr
            np.fill_diagonal(cov[:N, :N], self.var_si[l] @ pr)
            cov[:N, N] = cov[N, :N] = self.cov_si_s0[l] @ pr
            cov[N, N] = self.var_psi[l] @ pr
            idx = np.arange(N + 1) * q + l
            out[np.ix_(idx, idx)] = blk + cov
        return out


class CollapsedModel:
    """Per-voxel stacked form of the two-level model.

    Collapsing the hierarchy across subjects turns the model into a
    Bayesian linear model in the stacked latent vector
    r_z = (gamma_1..gamma_N, psi_z). This object holds the voxel's
    covariate offsets plus references to the shared parameters, and
    materializes the dense operators on demand (they are only needed by
    the reference path and tests; production E-steps use the diagonal
    structure directly).
    """

    def __init__(self, params: ModelParams, X: np.ndarray, v: int):
        self.params = params
        self.X = np.atleast_2d(X)
        self.v = v
        self.N = params.N
        self.q = params.q
        self.beta_v = params.beta[v]                    # (p, q)
        self.bx = self.X @ self.beta_v                  # (N, q) rows beta' x_i

    @property
    def A_blk(self) -> np.ndarray:
        """Block-diagonal orthogonal mixing matrix, (Nq, Nq)."""
        N, q = self.N, self.q
        out = np.zeros((N * q, N * q))
        for i in range(N):
            out[i * q:(i + 1) * q, i * q:(i + 1) * q] = self.params.A[i]
        return out

    @property
    def B(self) -> np.ndarray:
        """I_N (x) beta(v)', applied to the stacked covariate vector."""
        return np.kron(np.eye(self.N), self.beta_v.T)

    @property
    def U(self) -> np.ndarray:
        """Replication operator 1_N (x) I_q."""
        return np.tile(np.eye(self.q), (self.N, 1))

    @property
    def stacked_design(self) -> np.ndarray:
        """[I_Nq, 1_N (x) I_q] mapping r_z into the observation space."""
        return np.hstack([np.eye(self.N * self.q), self.U])

    @property
    def upsilon(self) -> np.ndarray:
        """First-level noise covariance of the stacked observations."""
        return self.params.nu0_sq * np.eye(self.N * self.q)

    def gamma_z(self, z: LatentStateVector) -> np.ndarray:
        """blockdiag(I_N (x) D, Sigma_z), the prior covariance of r_z."""
        sig = np.array(
            [self.params.mog[l].sigma2[z[l] - 1] for l in range(self.q)]
        )
        return np.diag(np.concatenate([np.tile(self.params.D, self.N), sig]))

    def mu_z(self, z: LatentStateVector) -> np.ndarray:
        return np.array([self.params.mog[l].mu[z[l] - 1] for l in range(self.q)])

    @property
    def P(self) -> np.ndarray:
        """Affine map from r_z to the stacked sources (linear part)."""
        N, q = self.N, self.q
        out = np.eye((N + 1) * q)
        out[: N * q, N * q:] = self.U
        return out

    def Q_z(self, z: LatentStateVector) -> np.ndarray:
        """Affine map from r_z to the stacked sources (offset part)."""
        muz = self.mu_z(z)
        return np.concatenate([(self.bx + muz[None, :]).ravel(), muz])


def validate(params: ModelParams, dims: Dimensions) -> list[str]:
    """Check numerical invariants; return human-readable violations.

    Empty list means every invariant holds within tolerance. Never
    raises: validation is a report, not a gate.
    """
    out: list[str] = []
    if params.N != dims.N:
        out.append(f"A has {params.N} subjects, dims say {dims.N}")
    if params.q != dims.q:
        out.append(f"params use q={params.q}, dims say {dims.q}")
    if params.V != dims.V:
        out.append(f"beta covers {params.V} voxels, dims say {dims.V}")
    if params.p != dims.p:
        out.append(f"beta has p={params.p} covariates, dims say {dims.p}")
    if params.m != dims.m:
        out.append(f"mixtures have m={params.m} components, dims say {dims.m}")

    for i, Ai in enumerate(params.A):
        dev = np.linalg.norm(Ai.T @ Ai - np.eye(params.q))
        if dev > ORTHO_TOL:
            out.append(f"A[{i}] not orthogonal: ||A'A - I||_F = {dev:.3e}")
    if not params.nu0_sq > 0:
        out.append(f"nu0_sq must be positive, got {params.nu0_sq}")
    for l, d in enumerate(params.D):
        if not d > 0:
            out.append(f"D[{l}] must be positive, got {d}")
    for l, g in enumerate(params.mog):
        ssum = g.pi.sum()
        if abs(ssum - 1.0) > PROB_TOL:
            out.append(f"mog[{l}]: pi sums to {ssum:.6g}")
        if (g.pi < 0).any():
            out.append(f"mog[{l}]: negative mixing proportion")
        if (g.sigma2 <= 0).any():
            out.append(f"mog[{l}]: nonpositive mixture variance")
    return out

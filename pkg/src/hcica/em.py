"""Exact and subspace-approximate EM for the hierarchical covariate model.

The per-voxel model, collapsed across subjects, factorizes over
components once a latent state is fixed: every covariance involved
(first-level noise, random effects, mixture variances) is diagonal, so
each state's Gaussian density and conditional source posterior decompose
into q independent one-dimensional random-effect problems. The E-step
exploits this: it tabulates per-(component, label) log densities and
conditional moments once per voxel, then combines them over whichever
state space is in use. The exact mode enumerates all m^q states; the
subspace mode renormalizes the same quantities over the reduced space.

All mixture combination happens in log space with log-sum-exp.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .latent import SpaceKind, StateSpace, enumerate_full, enumerate_subspace
from .types import (
    CollapsedModel,
    CovariateSet,
    Dimensions,
    LatentStateVector,
    ModelParams,
    MoGParams,
    SubjectData,
    VoxelPosterior,
)

__all__ = [
    "EMConfig",
    "EMTrace",
    "EMDivergenceError",
    "EStepResult",
    "initialize",
    "posterior_s_given_z",
    "posterior_z",
    "e_step",
    "m_step",
    "q_function",
    "observed_loglik",
    "fit",
    "estimate_sources",
    "mode_space",
]

VAR_FLOOR = 1e-10
_CHUNK = 512  # fixed chunk size keeps reductions deterministic across thread counts


@dataclass(frozen=True)
class EMConfig:
    """Settings for one EM run."""

    mode: str = "subspace"          # "exact" | "subspace"
    max_iters: int = 500
    rel_tol: float = 1e-4
    seed: int = 0
    loglik_monitor: bool = True
    threads: int = 1
    nu0_denominator: str = "q"      # "q" (consistent) | "T" (legacy compat)

    def __post_init__(self):
        if self.mode not in ("exact", "subspace"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.nu0_denominator not in ("q", "T"):
            raise ValueError("nu0_denominator must be 'q' or 'T'")


@dataclass
class EMTrace:
    """Per-iteration diagnostics.

    ``loglik[k]`` is the observed-data log likelihood of the parameters
    the k-th E-step was run with. Wall times are informational only and
    excluded from any determinism comparison.
    """

    rel_change: list[float] = field(default_factory=list)
    loglik: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.rel_change)


class EMDivergenceError(RuntimeError):
    """Raised when non-finite values appear; carries the trace so far."""

    def __init__(self, message: str, trace: EMTrace):
        super().__init__(message)
        self.trace = trace


def mode_space(mode: str, q: int, m: int) -> StateSpace:
    if mode == "exact":
        return enumerate_full(q, m)
    return enumerate_subspace(q, m)


# ---------------------------------------------------------------------------
# E-step core
# ---------------------------------------------------------------------------


def _shared_cov_tables(params: ModelParams):
    """Voxel-independent conditional covariance scalars, each (q, m).

    Conditional on z_l = j, the l-th coordinates of (s_1..s_N, s_0) have
    an exchangeable Gaussian posterior whose covariance depends only on
    (D_l, nu0^2, sigma2_lj); these are its distinct entries.
    """
    D = params.D
    nu0 = params.nu0_sq
    sig2 = params.sigma2_matrix()
    dn = (D + nu0)[:, None]
    var_psi = 1.0 / (1.0 / sig2 + params.N / dn)
    shrink = (nu0 / (D + nu0))[:, None]      # posterior weight of the noise path
    var_si = (D * nu0 / (D + nu0))[:, None] + shrink**2 * var_psi
    cov_si_si = shrink**2 * var_psi
    cov_si_s0 = shrink * var_psi
    return var_psi, var_si, cov_si_si, cov_si_s0


def _component_tables(W, bx, params: ModelParams):
    """Per-(voxel, component, label) density and moment tables.

    W, bx: (Vc, N, q) projected data and covariate offsets.
    Returns log densities L (Vc, q, m), centered sums S1, and the
    conditional mean tables for s_0 and each subject's source.
    """
    mu = params.mu_matrix()
    sig2 = params.sigma2_matrix()
    D, nu0, N = params.D, params.nu0_sq, params.N
    dn = (D + nu0)[:, None]                       # (q, 1)

    u = W[:, :, :, None] - bx[:, :, :, None] - mu[None, None]   # (Vc, N, q, m)
    S1 = u.sum(axis=1)                            # (Vc, q, m)
    S2 = (u**2).sum(axis=1)
    denom = dn + N * sig2
    logdet = (N - 1) * np.log(dn) + np.log(denom)
    quad = S2 / dn - sig2 * S1**2 / (dn * denom)
    L = -0.5 * (N * np.log(2 * np.pi) + logdet + quad)

    var_psi = 1.0 / (1.0 / sig2 + N / dn)
    mean_psi = S1 / dn * var_psi[None]            # (Vc, q, m)
    mean_s0 = mu[None] + mean_psi
    shrink_d = (D / (D + nu0))[None, None, :, None]
    mean_si = (
        mu[None, None]
        + bx[:, :, :, None]
        + mean_psi[:, None]
        + shrink_d * (u - mean_psi[:, None])
    )                                             # (Vc, N, q, m)
    mean_table = np.concatenate([mean_si, mean_s0[:, None]], axis=1)
    second_s0 = mean_s0**2 + var_psi[None]
    return L, mean_table, mean_s0, second_s0


def _state_scores(L, logpi, Zarr):
    """Log posterior over the given states from per-(l, j) tables."""
    Vc = L.shape[0]
    T = L + logpi[None]
    G = np.zeros((Vc, Zarr.shape[0]))
    for l in range(Zarr.shape[1]):
        G += T[:, l, :][:, Zarr[:, l] - 1]
    return G


def _estep_chunk(W, bx, params, Zarr, onehot):
    q, m = params.q, params.m
    logpi = np.log(np.clip(params.pi_matrix(), 1e-300, None))
    L, mean_table, mean_s0, second_s0 = _component_tables(W, bx, params)
    G = _state_scores(L, logpi, Zarr)
    logz = logsumexp(G, axis=1)
    if not np.isfinite(logz).all():
        raise ValueError("posterior underflow: non-finite state posterior")
    probs = np.exp(G - logz[:, None])

    marg = np.empty((W.shape[0], q, m))
    for l in range(q):
        marg[:, l, :] = probs @ onehot[l]
    flat = onehot.transpose(1, 0, 2).reshape(-1, q * m)   # (R, q*m)
    pair = np.matmul(flat.T[None], probs[:, :, None] * flat[None])
    pair = pair.reshape(-1, q, m, q, m)
    return {
        "loglik": logz,
        "probs": probs,
        "marg": marg,
        "pair": pair,
        "mean_table": mean_table,
        "cond_mean_s0": mean_s0,
        "cond_second_s0": second_s0,
    }


def _run_chunks(V, threads, fn):
    """Apply ``fn`` to fixed-size voxel chunks; combine in chunk order.

    Chunk boundaries never depend on the thread count, so reductions
    are bit-stable no matter how the work is scheduled.
    """
    bounds = [(a, min(a + _CHUNK, V)) for a in range(0, V, _CHUNK)]
    if threads <= 1 or len(bounds) == 1:
        parts = [fn(a, b) for a, b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda ab: fn(*ab), bounds))
    return {k: np.concatenate([p[k] for p in parts], axis=0) for k in parts[0]}


class EStepResult:
    """Voxel posteriors in batched form.

    Behaves as a sequence of :class:`VoxelPosterior` (one per voxel)
    while keeping the dense per-voxel tables available for the M-step.
    """

    def __init__(self, space: StateSpace, arrays: dict, cov_tables):
        self.space = space
        self._a = arrays
        self.var_psi, self.var_si, self.cov_si_si, self.cov_si_s0 = cov_tables

    def __len__(self) -> int:
        return self._a["probs"].shape[0]

    def __getitem__(self, v: int) -> VoxelPosterior:
        a = self._a
        return VoxelPosterior(
            states=self.space.states,
            probs=a["probs"][v],
            marg=a["marg"][v],
            pair_marg=a["pair"][v],
            mean_table=a["mean_table"][v],
            cond_mean_s0=a["cond_mean_s0"][v],
            cond_second_s0=a["cond_second_s0"][v],
            var_psi=self.var_psi,
            var_si=self.var_si,
            cov_si_si=self.cov_si_si,
            cov_si_s0=self.cov_si_s0,
        )

    def __iter__(self):
        return (self[v] for v in range(len(self)))

    @property
    def loglik(self) -> float:
        return float(self._a["loglik"].sum())

    # Batched accessors used by the M-step.
    def subject_means(self) -> np.ndarray:
        """E[s_i(v)|y] for all voxels, (V, N, q)."""
        a = self._a
        return np.einsum("vlj,vilj->vil", a["marg"], a["mean_table"][:, :-1])

    def s0_means(self) -> np.ndarray:
        a = self._a
        return np.einsum("vlj,vlj->vl", a["marg"], a["mean_table"][:, -1])

    def subject_second_sum(self) -> np.ndarray:
        """sum_v E[s_i s_i'|y], (N, q, q)."""
        a = self._a
        M = a["mean_table"][:, :-1]
        out = np.einsum("vljkn,vilj,vikn->ilk", a["pair"], M, M, optimize=True)
        diag = np.einsum("vlj,vilj->il", a["marg"], self.var_si[None, None] + M**2)
        q = M.shape[2]
        out[:, np.arange(q), np.arange(q)] = diag
        return out

    def subject_second_diag(self) -> np.ndarray:
        """E[s_il^2|y] per voxel, (V, N, q)."""
        a = self._a
        M = a["mean_table"][:, :-1]
        return np.einsum("vlj,vilj->vil", a["marg"], self.var_si[None, None] + M**2)

    def cross_si_s0(self) -> np.ndarray:
        """E[s_il s_0l|y] per voxel, (V, N, q)."""
        a = self._a
        M = a["mean_table"]
        prod = self.cov_si_s0[None, None] + M[:, :-1] * M[:, -1][:, None]
        return np.einsum("vlj,vilj->vil", a["marg"], prod)

    def s0_second_diag(self) -> np.ndarray:
        """E[s_0l^2|y] per voxel, (V, q)."""
        a = self._a
        return np.einsum("vlj,vlj->vl", a["marg"], a["cond_second_s0"])

    def marg_all(self) -> np.ndarray:
        return self._a["marg"]

    def cond_mean_s0_all(self) -> np.ndarray:
        return self._a["cond_mean_s0"]

    def cond_second_s0_all(self) -> np.ndarray:
        return self._a["cond_second_s0"]


def _as_batch(posteriors, space: StateSpace | None = None) -> EStepResult:
    if isinstance(posteriors, EStepResult):
        return posteriors
    post = list(posteriors)
    first = post[0]
    arrays = {
        "probs": np.stack([p.probs for p in post]),
        "marg": np.stack([p.marg for p in post]),
        "pair": np.stack([p.pair_marg for p in post]),
        "mean_table": np.stack([p.mean_table for p in post]),
        "cond_mean_s0": np.stack([p.cond_mean_s0 for p in post]),
        "cond_second_s0": np.stack([p.cond_second_s0 for p in post]),
        "loglik": np.zeros(len(post)),
    }
    if space is None:
        space = StateSpace(
            SpaceKind.FULL if len(first._states) == first.m**first.q else SpaceKind.SUBSPACE,
            first.q,
            first.m,
            first._states,
        )
    return EStepResult(
        space,
        arrays,
        (first.var_psi, first.var_si, first.cov_si_si, first.cov_si_s0),
    )


def _projected_data(data: list[SubjectData], params: ModelParams) -> np.ndarray:
    """A_i' y_i(v) for all subjects, (V, N, q)."""
    Y = np.stack([d.Y for d in data])
    return np.einsum("iab,iav->vib", params.A, Y)


def e_step(
    data: list[SubjectData],
    X: CovariateSet,
    params: ModelParams,
    space: StateSpace,
    threads: int = 1,
) -> EStepResult:
    """Posterior state probabilities and source moments at every voxel."""
    W = _projected_data(data, params)
    bx = np.einsum("np,vpq->vnq", X.X, params.beta)
    Zarr = space.as_array()
    q, m = params.q, params.m
    onehot = np.stack(
        [(Zarr[:, l] - 1)[:, None] == np.arange(m)[None] for l in range(q)]
    ).astype(float)                                # (q, R, m)

    def work(a, b):
        return _estep_chunk(W[a:b], bx[a:b], params, Zarr, onehot)

    arrays = _run_chunks(W.shape[0], threads, work)
    return EStepResult(space, arrays, _shared_cov_tables(params))


def observed_loglik(
    data: list[SubjectData],
    X: CovariateSet,
    params: ModelParams,
    space: StateSpace,
    threads: int = 1,
) -> float:
    """Log of the mixture marginal density, summed over voxels."""
    W = _projected_data(data, params)
    bx = np.einsum("np,vpq->vnq", X.X, params.beta)
    Zarr = space.as_array()
    logpi = np.log(np.clip(params.pi_matrix(), 1e-300, None))

    def work(a, b):
        L, _, _, _ = _component_tables(W[a:b], bx[a:b], params)
        return {"loglik": logsumexp(_state_scores(L, logpi, Zarr), axis=1)}

    arrays = _run_chunks(W.shape[0], threads, work)
    return float(arrays["loglik"].sum())


# ---------------------------------------------------------------------------
# Reference (non-batched) posterior operations
# ---------------------------------------------------------------------------


def posterior_s_given_z(
    model: CollapsedModel, y_stack: np.ndarray, z: LatentStateVector
):
    """Gaussian posterior of the stacked sources given one latent state.

    Returns (mean, covariance) over (s_1..s_N, s_0) of sizes (N+1)q and
    ((N+1)q, (N+1)q). Solved per component through the diagonal
    random-effect structure rather than by inverting the (N+1)q system.
    """
    params = model.params
    N, q = model.N, model.q
    D, nu0 = params.D, params.nu0_sq
    sig_z = np.array([params.mog[l].sigma2[z[l] - 1] for l in range(q)])
    if (D <= 0).any() or (sig_z <= 0).any() or nu0 <= 0:
        raise ValueError("singular prior covariance: zero variance component")
    mu_z = model.mu_z(z)

    W = np.stack([params.A[i].T @ y_stack[i * q:(i + 1) * q] for i in range(N)])
    u = W - model.bx - mu_z[None]                  # (N, q)
    dn = D + nu0
    var_psi = 1.0 / (1.0 / sig_z + N / dn)
    mean_psi = u.sum(axis=0) / dn * var_psi
    shrink = D / dn
    mean_si = mu_z[None] + model.bx + mean_psi[None] + shrink[None] * (u - mean_psi[None])
    mean = np.concatenate([mean_si.ravel(), mu_z + mean_psi])

    cov = np.zeros(((N + 1) * q, (N + 1) * q))
    noise_w = nu0 / dn
    for l in range(q):
        idx = np.arange(N) * q + l
        blk = np.full((N, N), noise_w[l] ** 2 * var_psi[l])
        np.fill_diagonal(blk, D[l] * nu0 / dn[l] + noise_w[l] ** 2 * var_psi[l])
        cov[np.ix_(idx, idx)] = blk
        cov[idx, N * q + l] = cov[N * q + l, idx] = noise_w[l] * var_psi[l]
        cov[N * q + l, N * q + l] = var_psi[l]
    return mean, cov


def posterior_z(
    model: CollapsedModel, y_stack: np.ndarray, space: StateSpace
) -> dict[LatentStateVector, float]:
    """Posterior over latent states at one voxel, normalized on ``space``."""
    if len(space) == 0:
        raise ValueError("empty state space")
    params = model.params
    N, q = model.N, model.q
    W = np.stack(
        [params.A[i].T @ y_stack[i * q:(i + 1) * q] for i in range(N)]
    )[None]                                        # (1, N, q)
    L, _, _, _ = _component_tables(W, model.bx[None], params)
    logpi = np.log(np.clip(params.pi_matrix(), 1e-300, None))
    G = _state_scores(L, logpi, space.as_array())[0]
    logz = logsumexp(G)
    if not np.isfinite(logz):
        raise ValueError("posterior underflow: non-finite state posterior")
    pr = np.exp(G - logz)
    return {z: float(p) for z, p in zip(space.states, pr)}


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------


def _orthogonalize(M: np.ndarray) -> np.ndarray:
    """Nearest orthogonal matrix in Frobenius norm (polar factor)."""
    U, _, Vt = np.linalg.svd(M)
    return U @ Vt


def _floored(value, name):
    arr = np.asarray(value, dtype=float)
    if (arr < VAR_FLOOR).any():
        warnings.warn(f"{name} update hit the variance floor", RuntimeWarning)
        arr = np.maximum(arr, VAR_FLOOR)
    return arr


def _resort_mog(pi, mu, sig2):
    """Background first: within each component, order labels by |mu|."""
    order = np.argsort(np.abs(mu), axis=1, kind="stable")
    take = np.take_along_axis
    return take(pi, order, 1), take(mu, order, 1), take(sig2, order, 1)


def m_step(
    data: list[SubjectData],
    X: CovariateSet,
    posteriors,
    params_prev: ModelParams,
    resort: bool = True,
    nu0_denominator: str = "q",
) -> ModelParams:
    """One full parameter update from the current posteriors.

    Updates, in order: covariate effects, mixing matrices (least-squares
    then polar orthogonalization), first-level noise, random-effect
    variances, and the mixture parameters from the marginal moments.
    """
    batch = _as_batch(posteriors)
    N, q, m, V = params_prev.N, params_prev.q, params_prev.m, len(batch)
    Y = np.stack([d.Y for d in data])

    SM = batch.subject_means()                     # (V, N, q)
    S0 = batch.s0_means()                          # (V, q)

    # Covariate effects: per-voxel least squares of E[s_i - s_0] on x_i.
    xtx = X.X.T @ X.X
    try:
        solver = np.linalg.solve(xtx, X.X.T)       # (p, N)
    except np.linalg.LinAlgError as err:
        raise ValueError("collinear covariates: sum x_i x_i' is singular") from err
    beta = np.einsum("pn,vnq->vpq", solver, SM - S0[:, None])

    # Mixing matrices.
    SS = batch.subject_second_sum()                # (N, q, q)
    C = np.einsum("iav,vil->ial", Y, SM)           # (N, q, q), sum_v y E[s_i]'
    A = np.empty_like(params_prev.A)
    for i in range(N):
        A[i] = _orthogonalize(C[i] @ np.linalg.inv(SS[i]))

    # First-level noise variance.
    total = 0.0
    for i in range(N):
        total += (
            np.sum(Y[i] ** 2)
            - 2.0 * np.trace(A[i] @ C[i].T)
            + np.trace(A[i].T @ A[i] @ SS[i])
        )
    if nu0_denominator == "T":
        dim = data[0].whitener.shape[1]
    else:
        dim = q
    nu0_sq = float(_floored(total / (dim * N * V), "nu0_sq"))

    # Random-effect variances from the level-two expected squared residual.
    bx = np.einsum("np,vpq->vnq", X.X, beta)
    si2 = batch.subject_second_diag()              # (V, N, q)
    s02 = batch.s0_second_diag()                   # (V, q)
    cross = batch.cross_si_s0()                    # (V, N, q)
    resid = si2 + s02[:, None] - 2 * cross + bx**2 + 2 * (S0[:, None] - SM) * bx
    D = _floored(resid.sum(axis=(0, 1)) / (N * V), "D")

    # Mixture parameters from marginal conditional moments.
    marg = batch.marg_all()
    mass = marg.sum(axis=0)                        # (q, m)
    pi = mass / V
    safe = np.maximum(mass, 1e-12)
    mu = np.einsum("vlj,vlj->lj", marg, batch.cond_mean_s0_all()) / safe
    second = np.einsum("vlj,vlj->lj", marg, batch.cond_second_s0_all()) / safe
    dead = mass < 1e-12
    if dead.any():
        mu = np.where(dead, params_prev.mu_matrix(), mu)
        second = np.where(dead, params_prev.sigma2_matrix() + mu**2, second)
    sig2 = _floored(second - mu**2, "sigma2")

    if resort:
        pi, mu, sig2 = _resort_mog(pi, mu, sig2)

    mog = tuple(MoGParams(pi=pi[l], mu=mu[l], sigma2=sig2[l]) for l in range(q))
    return ModelParams(beta=beta, A=A, nu0_sq=nu0_sq, D=D, mog=mog)


# ---------------------------------------------------------------------------
# Q-function
# ---------------------------------------------------------------------------


def q_function(
    params: ModelParams,
    posteriors,
    data: list[SubjectData],
    X: CovariateSet,
) -> float:
    """Expected complete-data log likelihood under the given posteriors.

    Sum of the data term, the random-effect term, the mixture term, and
    the mixing-proportion term; additive constants independent of the
    parameters are dropped.
    """
    batch = _as_batch(posteriors)
    N, q, V = params.N, params.q, len(batch)
    Y = np.stack([d.Y for d in data])
    nu0, D = params.nu0_sq, params.D

    SM = batch.subject_means()
    S0 = batch.s0_means()
    SS = batch.subject_second_sum()
    C = np.einsum("iav,vil->ial", Y, SM)

    total = 0.0
    for i in range(N):
        total += (
            np.sum(Y[i] ** 2)
            - 2.0 * np.trace(params.A[i] @ C[i].T)
            + np.trace(params.A[i].T @ params.A[i] @ SS[i])
        )
    q1 = -0.5 * N * V * q * np.log(nu0) - 0.5 * total / nu0

    bx = np.einsum("np,vpq->vnq", X.X, params.beta)
    resid = (
        batch.subject_second_diag()
        + batch.s0_second_diag()[:, None]
        - 2 * batch.cross_si_s0()
        + bx**2
        + 2 * (S0[:, None] - SM) * bx
    )
    q2 = -0.5 * N * V * np.log(D).sum() - 0.5 * (resid.sum(axis=(0, 1)) / D).sum()

    marg = batch.marg_all()
    mu, sig2 = params.mu_matrix(), params.sigma2_matrix()
    inner = (
        np.log(sig2)[None]
        + (
            mu[None] ** 2
            + batch.cond_second_s0_all()
            - 2 * mu[None] * batch.cond_mean_s0_all()
        )
        / sig2[None]
    )
    q3 = -0.5 * float(np.einsum("vlj,vlj->", marg, inner))

    logpi = np.log(np.clip(params.pi_matrix(), 1e-300, None))
    q4 = float(np.einsum("vlj,lj->", marg, logpi))
    return float(q1 + q2 + q3 + q4)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _symmetric_fastica(Yw: np.ndarray, rng: np.random.Generator, max_iter=200, tol=1e-6):
    """Fixed-point ICA with tanh contrast and symmetric decorrelation.

    ``Yw`` must be whitened (identity covariance). Returns the unmixing
    matrix and a convergence flag.
    """
    q, V = Yw.shape
    Wm = np.linalg.qr(rng.standard_normal((q, q)))[0]
    for _ in range(max_iter):
        proj = Wm @ Yw
        g = np.tanh(proj)
        gprime = 1.0 - g**2
        Wnew = g @ Yw.T / V - np.diag(gprime.mean(axis=1)) @ Wm
        # symmetric decorrelation: W <- (W W')^(-1/2) W
        evals, evecs = np.linalg.eigh(Wnew @ Wnew.T)
        Wnew = evecs @ np.diag(evals**-0.5) @ evecs.T @ Wnew
        delta = np.max(np.abs(np.abs(np.sum(Wnew * Wm, axis=1)) - 1.0))
        Wm = Wnew
        if delta < tol:
            return Wm, True
    return Wm, False


def initialize(
    data: list[SubjectData],
    X: CovariateSet,
    dims: Dimensions,
    seed: int = 0,
) -> ModelParams:
    """Starting values from a group decomposition of the stacked data.

    The whitened subject matrices are concatenated, reduced to q group
    directions, and unmixed with fixed-point ICA; subject mixing
    matrices come from back-projecting the group maps and
    orthogonalizing. Mixture parameters start from tail quantiles of the
    initial maps; covariate effects start at zero; the noise and
    random-effect variances come from back-projection residuals.
    """
    rng = np.random.default_rng(seed)
    N, q, V, m = dims.N, dims.q, dims.V, dims.m
    cat = np.concatenate([d.Y for d in data], axis=0)        # (N q, V)
    cov = cat @ cat.T / V
    evals, evecs = np.linalg.eigh(cov)
    top = evals[-q:][::-1]
    U = evecs[:, -q:][:, ::-1]
    for k in range(q):
        nz = np.flatnonzero(np.abs(U[:, k]) > 1e-12 * np.abs(U[:, k]).max())
        if nz.size and U[nz[0], k] < 0:
            U[:, k] = -U[:, k]
    Yg = np.diag(top**-0.5) @ U.T @ cat                      # (q, V), white

    Wica, ok = _symmetric_fastica(Yg, rng)
    if ok:
        s0 = Wica @ Yg
        A = np.empty((N, q, q))
        gram = np.linalg.inv(s0 @ s0.T)
        for i in range(N):
            A[i] = _orthogonalize(data[i].Y @ s0.T @ gram)
    else:
        warnings.warn(
            "fixed-point ICA did not converge; falling back to random "
            "orthogonal mixing matrices",
            RuntimeWarning,
        )
        s0 = Yg
        A = np.stack(
            [np.linalg.qr(rng.standard_normal((q, q)))[0] for _ in range(N)]
        )

    # Mixture starting values from the empirical tails of the maps.
    pi = np.empty((q, m))
    mu = np.zeros((q, m))
    sig2 = np.ones((q, m))
    pi[:, 0] = 0.9
    pi[:, 1:] = 0.1 / (m - 1)
    for l in range(q):
        row = s0[l]
        hi, lo = np.quantile(row, 0.95), np.quantile(row, 0.05)
        if m == 2:
            mu[l, 1] = hi if abs(hi) >= abs(lo) else lo
        else:
            mu[l, 1] = hi
            mu[l, 2] = lo
            for j in range(3, m):
                mu[l, j] = hi * (j - 1)
        # group voxels by the nearest starting mean
        assign = np.argmin(np.abs(row[:, None] - mu[l][None]), axis=1)
        base = max(float(np.var(row)), 1e-6)
        for j in range(m):
            grp = row[assign == j]
            sig2[l, j] = max(float(np.var(grp)) if grp.size > 1 else base, 0.05 * base)

    resid = np.stack([A[i].T @ data[i].Y - s0 for i in range(N)])
    per_comp = resid.var(axis=(0, 2))
    nu0_sq = float(np.clip(0.5 * per_comp.min(), 1e-8, None))
    D = np.clip(per_comp - nu0_sq, 1e-8, None)

    mog = tuple(MoGParams(pi=pi[l], mu=mu[l], sigma2=sig2[l]) for l in range(q))
    beta = np.zeros((V, dims.p, q))
    return ModelParams(beta=beta, A=A, nu0_sq=nu0_sq, D=D, mog=mog)


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------


def fit(
    data: list[SubjectData],
    X: CovariateSet,
    dims: Dimensions,
    config: EMConfig,
    init_params: ModelParams | None = None,
) -> tuple[ModelParams, EMTrace, EStepResult]:
    """Alternate E- and M-steps until the parameters stabilize.

    Stops when the relative change of the stacked parameter vector
    drops below ``config.rel_tol`` or ``config.max_iters`` is reached.
    Returns the final parameters, the iteration trace, and posteriors
    recomputed at the final parameters.
    """
    params = init_params if init_params is not None else initialize(
        data, X, dims, config.seed
    )
    space = mode_space(config.mode, dims.q, dims.m)
    trace = EMTrace()
    for _ in range(config.max_iters):
        t0 = time.perf_counter()
        post = e_step(data, X, params, space, threads=config.threads)
        new_params = m_step(
            data, X, post, params, nu0_denominator=config.nu0_denominator
        )
        old_vec = params.flatten()
        new_vec = new_params.flatten()
        rel = float(
            np.linalg.norm(new_vec - old_vec) / max(np.linalg.norm(old_vec), 1e-300)
        )
        trace.rel_change.append(rel)
        trace.loglik.append(post.loglik if config.loglik_monitor else np.nan)
        trace.seconds.append(time.perf_counter() - t0)
        if not np.isfinite(new_vec).all() or (
            config.loglik_monitor and not np.isfinite(post.loglik)
        ):
            raise EMDivergenceError("non-finite values during EM", trace)
        params = new_params
        if rel < config.rel_tol:
            trace.converged = True
            break
    final_post = e_step(data, X, params, space, threads=config.threads)
    return params, trace, final_post


def estimate_sources(posteriors) -> tuple[np.ndarray, np.ndarray]:
    """Posterior-mean source maps: population (q, V) and subject (N, q, V)."""
    batch = _as_batch(posteriors)
    pop = batch.s0_means().T
    subj = np.transpose(batch.subject_means(), (1, 2, 0))
    return pop, subj

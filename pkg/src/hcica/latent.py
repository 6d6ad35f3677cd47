"""Latent state spaces for the mixture source model.

Each voxel carries a state vector z in {1..m}^q assigning every
component a mixture label. The full space has m^q states; the reduced
space keeps the all-background state plus the states with exactly one
non-background entry, (m-1)q + 1 in total. With background weights
close to one, the prior mass of the reduced space approaches one; the
exact mass has the closed form implemented by :func:`subspace_mass`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .types import LatentStateVector, ModelParams

__all__ = [
    "SpaceKind",
    "StateSpace",
    "OddsVector",
    "enumerate_full",
    "enumerate_subspace",
    "restricted_subspace",
    "subspace_mass",
    "theorem1_threshold",
    "odds_from_params",
    "FULL_SPACE_CAP",
]

FULL_SPACE_CAP = 2**24


class SpaceKind(Enum):
    FULL = "full"
    SUBSPACE = "subspace"


@dataclass(frozen=True)
class StateSpace:
    """Ordered collection of latent state vectors."""

    kind: SpaceKind
    q: int
    m: int
    states: tuple[LatentStateVector, ...]

    def __post_init__(self):
        for z in self.states:
            if len(z) != self.q or any(not 1 <= e <= self.m for e in z):
                raise ValueError(f"state {z} outside {{1..{self.m}}}^{self.q}")
        if len(set(self.states)) != len(self.states):
            raise ValueError("duplicate states")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def index(self) -> dict[LatentStateVector, int]:
        return {z: r for r, z in enumerate(self.states)}

    def as_array(self) -> np.ndarray:
        """States as an (|space|, q) int array of labels in {1..m}."""
        return np.array(self.states, dtype=np.int64)


@dataclass(frozen=True)
class OddsVector:
    """Per-component odds of leaving the background state.

    kappa_l = (1 - pi_l1) / pi_l1; requires pi_l1 > 0.
    """

    kappa: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.kappa, dtype=float)
        k.setflags(write=False)
        object.__setattr__(self, "kappa", k)
        if (k < 0).any() or not np.isfinite(k).all():
            raise ValueError("odds must be finite and nonnegative")


def odds_from_params(params: ModelParams) -> OddsVector:
    pi1 = np.array([g.pi[0] for g in params.mog])
    return OddsVector((1.0 - pi1) / pi1)


def enumerate_full(q: int, m: int, cap: int = FULL_SPACE_CAP) -> StateSpace:
    """All states in {1..m}^q in lexicographic order."""
    n = m**q
    if n > cap:
        raise ValueError(
            f"full state space has {n} > {cap} states; "
            "use enumerate_subspace for large q"
        )
    states = tuple(itertools.product(range(1, m + 1), repeat=q))
    return StateSpace(SpaceKind.FULL, q, m, states)


def enumerate_subspace(q: int, m: int) -> StateSpace:
    """The all-background state plus every single-activation state.

    Ordered background-first, then grouped by component position and
    mixture label, so posteriors over the space are reproducible.
    """
    states: list[LatentStateVector] = [tuple([1] * q)]
    for l in range(q):
        for j in range(2, m + 1):
            z = [1] * q
            z[l] = j
            states.append(tuple(z))
    return StateSpace(SpaceKind.SUBSPACE, q, m, tuple(states))


def restricted_subspace(space: StateSpace, l: int, j: int) -> list[LatentStateVector]:
    """States in ``space`` whose component ``l`` (1-based) has label ``j``."""
    if not 1 <= l <= space.q:
        raise ValueError(f"component index {l} out of range 1..{space.q}")
    if not 1 <= j <= space.m:
        raise ValueError(f"mixture label {j} out of range 1..{space.m}")
    return [z for z in space.states if z[l - 1] == j]


def subspace_mass(kappa: OddsVector) -> float:
    """Exact prior probability that z lies in the reduced space.

    For independent entries with per-component background odds kappa,
    P[z in subspace] = (1 + sum kappa) / prod(1 + kappa).
    """
    k = kappa.kappa
    return float((1.0 + k.sum()) / np.prod(1.0 + k))


def theorem1_threshold(q: int, epsilon: float) -> float:
    """Background weight above which the reduced space holds mass > 1-eps.

    Returns q / (q + sqrt(eps)). If every component's background
    probability exceeds this value, subspace_mass exceeds 1 - eps.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie strictly between 0 and 1")
    return q / (q + np.sqrt(epsilon))

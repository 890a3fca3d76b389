"""Gaussian belief tracking from incomplete, noisy observations.

The filter alternates two moves per timestep:

* ``propagate`` pushes the posterior through the (learned) transition model,
  evaluating both the mean and covariance heads at the posterior mean.  Note
  this deliberately does NOT add the classical A Sigma A^T spread term: the
  transition covariance is whatever the model emits at the point estimate.
* ``posterior_update`` conditions on the observed coordinates only, selected
  by a sub-permutation of the observation vector.  Missing coordinates never
  enter the update, so two mechanisms producing the same mask produce the
  same posterior.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .linalg import Gaussian, cholesky, solve_psd, symmetrize

__all__ = [
    "MaskedObservation",
    "SubPermutation",
    "BeliefState",
    "build_sub_permutation",
    "gain_matrix",
    "propagate",
    "posterior_update",
    "belief_features",
    "filter_trajectory",
]


@dataclass(frozen=True)
class MaskedObservation:
    """Observation vector with a per-coordinate present/missing flag.

    values[i] must be finite exactly where mask[i] is True; missing entries
    are stored as NaN.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        mask = np.asarray(self.mask, dtype=bool).reshape(-1)
        if values.shape != mask.shape:
            raise ValueError("values and mask must have the same length")
        finite = np.isfinite(values)
        if not np.array_equal(finite, mask):
            raise ValueError("values must be finite exactly at observed entries")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_dense(cls, values, mask) -> "MaskedObservation":
        """Build from a dense vector, NaN-ing out the masked entries."""
        values = np.asarray(values, dtype=np.float64).copy()
        mask = np.asarray(mask, dtype=bool)
        values[~mask] = np.nan
        return cls(values, mask)

    @classmethod
    def full(cls, values) -> "MaskedObservation":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, dtype=bool))

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def n_missing(self) -> int:
        return int(np.sum(~self.mask))

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Dense copy with missing entries replaced by `fill`."""
        out = self.values.copy()
        out[~self.mask] = fill
        return out


@dataclass(frozen=True)
class SubPermutation:
    """Row selector for the observed coordinates of a length-`dim` vector."""

    observed_indices: np.ndarray
    dim: int

    def __post_init__(self):
        idx = np.asarray(self.observed_indices, dtype=np.intp).reshape(-1)
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.dim):
            raise ValueError("observed indices must be strictly ascending and in range")
        object.__setattr__(self, "observed_indices", idx)

    @property
    def n_observed(self) -> int:
        return self.observed_indices.size

    @property
    def matrix(self) -> np.ndarray:
        """Dense (n_observed x dim) 0/1 selector; one 1 per row."""
        w = np.zeros((self.n_observed, self.dim))
        w[np.arange(self.n_observed), self.observed_indices] = 1.0
        return w


def build_sub_permutation(mask) -> SubPermutation:
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    return SubPermutation(np.flatnonzero(mask), mask.size)


Kind = Literal["posterior", "intermediate"]


@dataclass(frozen=True)
class BeliefState:
    gaussian: Gaussian
    kind: Kind

    def __post_init__(self):
        if self.kind not in ("posterior", "intermediate"):
            raise ValueError(f"unknown belief kind {self.kind!r}")

    @property
    def mean(self) -> np.ndarray:
        return self.gaussian.mean

    @property
    def cov(self) -> np.ndarray:
        return self.gaussian.cov


def propagate(prev: BeliefState, action, model) -> BeliefState:
    """Push a posterior belief through the transition model.

    Both the next mean and next covariance come from evaluating the model at
    the posterior mean; the previous covariance does not spread through the
    dynamics (the model's covariance head is trusted to carry all transition
    uncertainty).
    """
    if prev.kind != "posterior":
        raise ValueError("propagate expects a posterior belief")
    gaussian = model.transition(prev.mean, np.asarray(action, dtype=np.float64))
    return BeliefState(gaussian, "intermediate")


def gain_matrix(prior_cov, noise_cov, sub: SubPermutation) -> np.ndarray:
    """Full (dim x dim) update gain  Sigma W^T [W (Sigma + R) W^T]^-1 W."""
    prior_cov = np.asarray(prior_cov, dtype=np.float64)
    noise_cov = np.asarray(noise_cov, dtype=np.float64)
    idx = sub.observed_indices
    if idx.size == 0:
        return np.zeros_like(prior_cov)
    cols = prior_cov[:, idx]
    innov = prior_cov[np.ix_(idx, idx)] + noise_cov[np.ix_(idx, idx)]
    gain = np.zeros_like(prior_cov)
    gain[:, idx] = solve_psd(innov, cols.T).T
    return gain


def posterior_update(inter: BeliefState, obs: MaskedObservation,
                     noise_cov) -> BeliefState:
    """Condition an intermediate belief on the observed coordinates.

    With nothing observed the belief is returned unchanged (relabelled
    posterior): conditioning on empty evidence is the prior.  When the
    observation noise on the observed block is exactly zero the update is an
    exact measurement, so the observed coordinates are snapped to the data
    and their covariance rows/columns to zero (the dense formula gives the
    same values up to roundoff).
    """
    if inter.kind != "intermediate":
        raise ValueError("posterior_update expects an intermediate belief")
    noise_cov = np.asarray(noise_cov, dtype=np.float64)
    if obs.dim != inter.mean.shape[0]:
        raise ValueError("observation dim does not match belief dim")
    idx = np.flatnonzero(obs.mask)
    if idx.size == 0:
        return BeliefState(inter.gaussian, "posterior")

    prior_mean = inter.mean
    prior_cov = inter.cov
    col_sel = idx[:, None]
    cols = prior_cov[:, idx]                       # Sigma W^T
    noise_block = noise_cov[col_sel, idx]
    innov = prior_cov[col_sel, idx] + noise_block
    residual = obs.values[idx] - prior_mean[idx]   # missing entries dropped
    rhs = np.concatenate([residual[:, None], cols.T], axis=1)
    try:
        low = np.linalg.cholesky(innov)
    except np.linalg.LinAlgError:
        low = cholesky(innov)                      # jitter escalation path
    solved = np.linalg.solve(low.T, np.linalg.solve(low, rhs))
    mean = prior_mean + cols @ solved[:, 0]
    cov = symmetrize(prior_cov - cols @ solved[:, 1:])

    if not noise_block.any():
        # exact measurement: observed entries are known with certainty
        mean[idx] = obs.values[idx]
        cov[idx, :] = 0.0
        cov[:, idx] = 0.0
    return BeliefState(Gaussian.trusted(mean, cov), "posterior")


def belief_features(belief: BeliefState) -> np.ndarray:
    """Policy/value input: posterior mean followed by the covariance diagonal."""
    if belief.kind != "posterior":
        raise ValueError("belief_features expects a posterior belief")
    return np.concatenate([belief.mean, np.diag(belief.cov)])


def filter_trajectory(obs_seq: Sequence[MaskedObservation],
                      action_seq: Sequence, model,
                      noise_cov) -> list[BeliefState]:
    """Run the update/propagate alternation over one episode.

    obs_seq has one more element than action_seq; filtering starts from the
    model's learned initial belief and returns the posterior at every step.
    """
    if len(obs_seq) != len(action_seq) + 1:
        raise ValueError(
            f"need len(obs) == len(actions) + 1, got {len(obs_seq)} and {len(action_seq)}"
        )
    belief = model.initial_belief()
    posteriors = []
    for t, obs in enumerate(obs_seq):
        post = posterior_update(belief, obs, noise_cov)
        posteriors.append(post)
        if t < len(action_seq):
            belief = propagate(post, action_seq[t], model)
    return posteriors

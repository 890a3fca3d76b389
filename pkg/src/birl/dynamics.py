"""Learnable Gaussian transition model and its masked surrogate likelihood.

The model maps (state, action) to a next-state Gaussian whose covariance is
assembled from a lower-triangular factor G as G G^T, so it is PSD for any
parameter values.  A learnable start-of-episode belief (mean plus its own
triangular factor) rides along with the network parameters.

The surrogate loss scores, per transition, the observed coordinates of the
next observation under the model's prediction from the current belief mean
(which is treated as a constant: the filter pass that produced it ran under
a frozen parameter copy, and no gradient flows back through it).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .belief import BeliefState
from .linalg import LN_2PI, Gaussian
from .nn import Linear, Mlp, Parameter, sigmoid, softplus

__all__ = [
    "TransitionModel",
    "LinearTransitionModel",
    "ModelBatch",
    "model_loss",
    "exact_loglik_oracle",
]

COV_FLOOR = 1e-8       # strict-PD guard added to G G^T
DIAG_FLOOR = 1e-4      # floor under the softplus-mapped diagonal of G


def _tril_unpack(raw: np.ndarray, dim: int) -> np.ndarray:
    """Raw packed entries -> lower-triangular factor with positive diagonal."""
    low = np.zeros((dim, dim))
    rows, cols = np.tril_indices(dim)
    low[rows, cols] = raw
    diag = np.arange(dim)
    low[diag, diag] = softplus(low[diag, diag]) + DIAG_FLOOR
    return low


def _tril_pack_grad(grad_low: np.ndarray, raw: np.ndarray, dim: int) -> np.ndarray:
    """Chain a gradient w.r.t. the factor back to the raw packed entries."""
    rows, cols = np.tril_indices(dim)
    packed = grad_low[rows, cols].copy()
    diag_positions = np.flatnonzero(rows == cols)
    packed[diag_positions] *= sigmoid(raw[diag_positions])
    return packed


class TransitionModel:
    """Neural one-step dynamics T(s'|s, a) = N(mean(s, a), G(s, a) G(s, a)^T).

    The trunk consumes the shared input layout [state | cov-diag | action]
    (the covariance slot is zeroed here; it exists so the first layer can be
    shared with networks that take belief features).  Heads emit the next
    mean and the packed triangular factor.
    """

    def __init__(self, rng: np.random.Generator, state_dim: int,
                 action_dim: int, hidden: tuple[int, int] = (64, 64),
                 shared_first: Linear | None = None):
        self.state_dim = state_dim
        self.action_dim = action_dim
        in_dim = 2 * state_dim + action_dim
        first = shared_first if shared_first is not None else Linear(
            rng, in_dim, hidden[0], name="shared.first")
        if first.n_in != in_dim:
            raise ValueError("shared first layer does not match input layout")
        self.trunk = Mlp(
            [first, Linear(rng, hidden[0], hidden[1], name="model.hidden")],
            final_tanh=True,
        )
        self.mean_head = Linear(rng, hidden[1], state_dim, gain=0.01,
                                name="model.mean")
        self.n_tril = state_dim * (state_dim + 1) // 2
        self.chol_head = Linear(rng, hidden[1], self.n_tril, gain=0.01,
                                name="model.chol")
        self.init_mean = Parameter("model.init_mean", np.zeros(state_dim))
        self.init_chol_raw = Parameter("model.init_chol",
                                       np.zeros(self.n_tril))

    def parameters(self) -> list[Parameter]:
        return (self.trunk.parameters() + self.mean_head.parameters()
                + self.chol_head.parameters()
                + [self.init_mean, self.init_chol_raw])

    # -- forward -----------------------------------------------------------

    def _trunk_input(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        pad = np.zeros((states.shape[0], self.state_dim))
        return np.concatenate([states, pad, actions], axis=1)

    def forward_batch(self, states, actions):
        """Batched heads: (means, factors, covs, cache) for the loss path."""
        z = self._trunk_input(states, actions)
        h, trunk_cache = self.trunk.forward(z)
        means, mean_cache = self.mean_head.forward(h)
        raws, chol_cache = self.chol_head.forward(h)
        n = means.shape[0]
        factors = np.zeros((n, self.state_dim, self.state_dim))
        rows, cols = np.tril_indices(self.state_dim)
        factors[:, rows, cols] = raws
        diag = np.arange(self.state_dim)
        factors[:, diag, diag] = softplus(factors[:, diag, diag]) + DIAG_FLOOR
        covs = factors @ np.transpose(factors, (0, 2, 1))
        covs[:, diag, diag] += COV_FLOOR
        cache = (trunk_cache, mean_cache, chol_cache, raws, factors)
        return means, covs, cache

    def backward_batch(self, grad_means, grad_covs, cache) -> None:
        """Accumulate parameter grads given dL/dmean and (symmetric) dL/dcov."""
        trunk_cache, mean_cache, chol_cache, raws, factors = cache
        sym = 0.5 * (grad_covs + np.transpose(grad_covs, (0, 2, 1)))
        grad_factors = 2.0 * sym @ factors
        rows, cols = np.tril_indices(self.state_dim)
        grad_raws = grad_factors[:, rows, cols].copy()
        diag_positions = np.flatnonzero(rows == cols)
        diag = np.arange(self.state_dim)
        grad_raws[:, diag_positions] *= sigmoid(raws[:, diag_positions])
        dh = self.mean_head.backward(grad_means, mean_cache)
        dh += self.chol_head.backward(grad_raws, chol_cache)
        self.trunk.backward(dh, trunk_cache)

    def transition(self, state, action) -> Gaussian:
        """Single-step next-state distribution (no gradient bookkeeping)."""
        means, covs, _ = self.forward_batch(state, action)
        return Gaussian(means[0], covs[0])

    def initial_chol(self) -> np.ndarray:
        return _tril_unpack(self.init_chol_raw.value, self.state_dim)

    def initial_belief(self) -> BeliefState:
        low = self.initial_chol()
        cov = low @ low.T + COV_FLOOR * np.eye(self.state_dim)
        return BeliefState(Gaussian(self.init_mean.value.copy(), cov),
                           "intermediate")


class LinearTransitionModel:
    """Known linear dynamics s' = A s + B a with fixed Gaussian noise.

    Useful for installing ground-truth dynamics in the filter and as the
    near-trivial special case of the neural model in tests.
    """

    def __init__(self, a_mat, b_mat, process_cov, init_mean, init_cov):
        self.a_mat = np.asarray(a_mat, dtype=np.float64)
        self.b_mat = np.asarray(b_mat, dtype=np.float64)
        self.process_cov = np.asarray(process_cov, dtype=np.float64)
        self._init_mean = np.asarray(init_mean, dtype=np.float64)
        self._init_cov = np.asarray(init_cov, dtype=np.float64)
        self.state_dim = self.a_mat.shape[0]
        self.action_dim = self.b_mat.shape[1]

    def transition(self, state, action) -> Gaussian:
        mean = self.a_mat @ np.asarray(state, float) + self.b_mat @ np.asarray(action, float)
        return Gaussian(mean, self.process_cov)

    def initial_belief(self) -> BeliefState:
        return BeliefState(Gaussian(self._init_mean, self._init_cov),
                           "intermediate")


@dataclass
class ModelBatch:
    """Constant inputs for the surrogate loss.

    states holds filter means computed under frozen parameters; gradients
    never flow through them.  Episode-start observations contribute the
    initial-belief terms.
    """

    states: np.ndarray            # (N, D) belief means (constants)
    actions: np.ndarray           # (N, A)
    next_values: np.ndarray       # (N, D) next observation, zero-filled
    next_masks: np.ndarray        # (N, D) bool
    init_values: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    init_masks: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), bool))

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        self.next_values = np.atleast_2d(np.asarray(self.next_values, dtype=np.float64))
        self.next_masks = np.atleast_2d(np.asarray(self.next_masks, dtype=bool))
        self.init_values = np.atleast_2d(np.asarray(self.init_values, dtype=np.float64))
        self.init_masks = np.atleast_2d(np.asarray(self.init_masks, dtype=bool))
        if not (len(self.states) == len(self.actions)
                == len(self.next_values) == len(self.next_masks)):
            raise ValueError("transition arrays must share a leading dimension")

    @property
    def n_terms(self) -> int:
        return self.states.shape[0] + self.init_values.shape[0]


def _masked_gaussian_terms(values, masks, means, covs, noise_cov):
    """Sum of log N(W x | W mean, W (cov + noise) W^T) over rows, plus the
    gradients w.r.t. means and covs.  Rows are grouped by mask pattern so the
    factorizations batch."""
    n, dim = values.shape
    total = 0.0
    grad_means = np.zeros_like(means)
    grad_covs = np.zeros_like(covs)
    patterns = {}
    for i in range(n):
        patterns.setdefault(masks[i].tobytes(), []).append(i)
    for key, rows_list in patterns.items():
        mask = np.frombuffer(key, dtype=bool)
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            continue  # nothing observed: empty product contributes zero
        rows = np.asarray(rows_list, dtype=np.intp)
        k = idx.size
        sub = covs[np.ix_(rows, idx, idx)] + noise_cov[np.ix_(idx, idx)]
        resid = values[np.ix_(rows, idx)] - means[np.ix_(rows, idx)]
        low = np.linalg.cholesky(sub)
        z = np.linalg.solve(low, resid[..., None])[..., 0]
        logdets = 2.0 * np.sum(np.log(np.diagonal(low, axis1=1, axis2=2)), axis=1)
        quads = np.sum(z * z, axis=1)
        total += float(np.sum(-0.5 * (k * LN_2PI + logdets + quads)))
        # d logN / d mean = S^-1 r ; d logN / d S = -(S^-1 - S^-1 r r^T S^-1)/2
        sub_inv = np.linalg.inv(sub)
        alpha = np.einsum("bij,bj->bi", sub_inv, resid)
        grad_means[np.ix_(rows, idx)] += alpha
        gs = -0.5 * (sub_inv - alpha[:, :, None] * alpha[:, None, :])
        grad_covs[np.ix_(rows, idx, idx)] += gs
    return total, grad_means, grad_covs


def model_loss(model: TransitionModel, batch: ModelBatch, noise_cov,
               grad: bool = True, scale: float = 1.0) -> float:
    """Averaged negative surrogate log-likelihood of the observed coordinates.

    Returns -(initial terms + transition terms) / n_terms; when grad is set,
    parameter gradients of scale * loss are accumulated into the model.
    All-missing rows contribute zero to the numerator but still count in the
    denominator, keeping the loss scale independent of the mask draw.
    """
    noise_cov = np.asarray(noise_cov, dtype=np.float64)
    if batch.n_terms == 0:
        raise ValueError("model batch is empty")
    n_terms = batch.n_terms
    total = 0.0

    if batch.states.shape[0]:
        means, covs, cache = model.forward_batch(batch.states, batch.actions)
        part, g_means, g_covs = _masked_gaussian_terms(
            batch.next_values, batch.next_masks, means, covs, noise_cov)
        total += part
        if grad:
            coef = -scale / n_terms
            model.backward_batch(coef * g_means, coef * g_covs, cache)

    if batch.init_values.shape[0]:
        m = batch.init_values.shape[0]
        low = model.initial_chol()
        cov0 = low @ low.T + COV_FLOOR * np.eye(model.state_dim)
        means0 = np.tile(model.init_mean.value, (m, 1))
        covs0 = np.tile(cov0, (m, 1, 1))
        part, g_means, g_covs = _masked_gaussian_terms(
            batch.init_values, batch.init_masks, means0, covs0, noise_cov)
        total += part
        if grad:
            coef = -scale / n_terms
            model.init_mean.grad += coef * g_means.sum(axis=0)
            g_cov = coef * g_covs.sum(axis=0)
            grad_low = 2.0 * (0.5 * (g_cov + g_cov.T)) @ low
            model.init_chol_raw.grad += _tril_pack_grad(
                grad_low, model.init_chol_raw.value, model.state_dim)

    return -total / n_terms


def exact_loglik_oracle(model, obs_seq, action_seq, noise_cov,
                        grid_points: int = 481, span: float = 12.0) -> float:
    """Exact marginal log-likelihood of the observation sequence by grid
    quadrature over the latent trajectory (test-grade; D <= 2 only).

    Integrates b1(s1) P(x1|s1) prod_t T(s_{t+1}|s_t, a_t) P(x_{t+1}|s_{t+1})
    with a scaled forward recursion on a uniform grid and trapezoid weights.
    Needs strictly positive observation noise on observed coordinates.
    """
    dim = model.state_dim
    if dim > 2:
        raise ValueError("exact likelihood quadrature supports D <= 2 only")
    noise_cov = np.asarray(noise_cov, dtype=np.float64)
    if len(obs_seq) != len(action_seq) + 1:
        raise ValueError("need len(obs) == len(actions) + 1")
    for obs in obs_seq:
        idx = np.flatnonzero(obs.mask)
        if idx.size and np.any(np.diag(noise_cov)[idx] <= 0):
            raise ValueError("quadrature requires positive noise on observed coordinates")

    init = model.initial_belief().gaussian
    seen = np.concatenate(
        [init.mean] + [obs.values[obs.mask] for obs in obs_seq if obs.mask.any()])
    scale = max(float(np.sqrt(np.max(np.diag(init.cov)))), 1.0)
    lo = float(seen.min()) - span * scale
    hi = float(seen.max()) + span * scale

    if dim == 1:
        grid = np.linspace(lo, hi, grid_points)[:, None]
        weights = np.full(grid_points, grid[1, 0] - grid[0, 0])
        weights[[0, -1]] *= 0.5
    else:
        n = max(41, int(np.sqrt(grid_points)))
        axis = np.linspace(lo, hi, n)
        w1 = np.full(n, axis[1] - axis[0])
        w1[[0, -1]] *= 0.5
        g0, g1 = np.meshgrid(axis, axis, indexing="ij")
        grid = np.stack([g0.ravel(), g1.ravel()], axis=1)
        weights = np.outer(w1, w1).ravel()

    def obs_density(obs, pts):
        idx = np.flatnonzero(obs.mask)
        if idx.size == 0:
            return np.ones(pts.shape[0])
        sub_noise = noise_cov[np.ix_(idx, idx)]
        inv = np.linalg.inv(sub_noise)
        _, logdet = np.linalg.slogdet(sub_noise)
        diff = pts[:, idx] - obs.values[idx]
        quad = np.einsum("ni,ij,nj->n", diff, inv, diff)
        return np.exp(-0.5 * (idx.size * LN_2PI + logdet + quad))

    def gaussian_on_grid(mean, cov, pts):
        inv = np.linalg.inv(cov)
        _, logdet = np.linalg.slogdet(cov)
        diff = pts - mean
        quad = np.einsum("ni,ij,nj->n", diff, inv, diff)
        return np.exp(-0.5 * (mean.size * LN_2PI + logdet + quad))

    alpha = gaussian_on_grid(init.mean, init.cov, grid) * obs_density(obs_seq[0], grid)
    loglik = 0.0
    for t, action in enumerate(action_seq):
        mass = float(alpha @ weights)
        loglik += np.log(mass)
        alpha = alpha / mass
        nxt = np.zeros(grid.shape[0])
        for i in range(grid.shape[0]):
            if alpha[i] <= 0.0:
                continue
            tr = model.transition(grid[i], action)
            nxt += (weights[i] * alpha[i]) * gaussian_on_grid(tr.mean, tr.cov, grid)
        alpha = nxt * obs_density(obs_seq[t + 1], grid)
    loglik += np.log(float(alpha @ weights))
    return float(loglik)

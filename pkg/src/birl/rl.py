"""PPO with generalized advantage estimation over belief features, and the
joint policy/value/model objective.

The policy, value and transition networks all consume the same input layout
[state estimate | covariance diagonal | action] and share the first hidden
layer; each consumer zeroes the slots it has no data for.  Policy and value
read [mean, cov-diag, 0], the transition model reads [state, 0, action].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import ModelBatch, TransitionModel, model_loss
from .linalg import LN_2PI
from .nn import (
    AdamState,
    Linear,
    Mlp,
    ParamBundle,
    Parameter,
    adam_step,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "gae",
    "normalize_advantages",
    "ppo_policy_loss",
    "value_loss",
    "PolicyNetwork",
    "ValueNetwork",
    "JointNetworks",
    "RunningRewardScale",
    "TrainingAbort",
    "joint_losses",
    "joint_step",
]

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0


class TrainingAbort(RuntimeError):
    """Raised when a non-finite loss or gradient stops an update."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def gae(rewards, values, dones, gamma: float, lam: float):
    """Generalized advantage estimates and return targets.

    values has length T+1; its last entry is the bootstrap value of the
    state after the final step (pass 0 for terminal ends).  Episode
    boundaries inside the arrays are marked by dones and stop the
    accumulation.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    t_max = rewards.size
    if values.size != t_max + 1 or dones.size != t_max:
        raise ValueError("need len(values) == T + 1 and len(dones) == T")
    if not (0.0 < gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError("gamma must lie in (0, 1] and lambda in [0, 1]")
    adv = np.zeros(t_max)
    acc = 0.0
    for t in range(t_max - 1, -1, -1):
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * nonterminal * values[t + 1] - values[t]
        acc = delta + gamma * lam * nonterminal * acc
        adv[t] = acc
    return adv, adv + values[:t_max]


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_policy_loss(logp_new, logp_old, advantages, clip: float):
    """Clipped-surrogate loss (negated objective) and its gradient w.r.t.
    the new log probabilities."""
    if clip <= 0.0:
        raise ValueError("clip must be positive")
    logp_new = np.asarray(logp_new, dtype=np.float64)
    logp_old = np.asarray(logp_old, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    ratio = np.exp(logp_new - logp_old)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * advantages
    per_sample = np.minimum(unclipped, clipped)
    loss = -float(per_sample.mean())
    # the clipped branch is flat wherever it is strictly smaller
    active = unclipped <= clipped
    grad_logp = np.where(active, ratio * advantages, 0.0)
    grad_logp = -grad_logp / logp_new.size
    return loss, grad_logp


def value_loss(predictions, targets):
    """Mean squared error and its gradient w.r.t. the predictions."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    diff = predictions - targets
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


class PolicyNetwork:
    """Diagonal-Gaussian policy over pre-squash actions.

    Sampled actions pass through bound * tanh(u) on their way to the
    environment; probability ratios are formed in u-space where the squash
    Jacobians cancel exactly.
    """

    def __init__(self, rng, state_dim: int, action_dim: int,
                 hidden: tuple[int, int], shared_first: Linear):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.trunk = Mlp(
            [shared_first, Linear(rng, hidden[0], hidden[1], name="policy.hidden")],
            final_tanh=True,
        )
        self.head = Linear(rng, hidden[1], action_dim, gain=0.01,
                           name="policy.mean")
        self.log_std = Parameter("policy.log_std", np.zeros(action_dim))

    def parameters(self) -> list[Parameter]:
        return self.trunk.parameters() + self.head.parameters() + [self.log_std]

    def _pad(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        return np.concatenate(
            [features, np.zeros((features.shape[0], self.action_dim))], axis=1)

    def forward(self, features):
        h, trunk_cache = self.trunk.forward(self._pad(features))
        means, head_cache = self.head.forward(h)
        return means, (trunk_cache, head_cache)

    def backward(self, grad_means, cache) -> None:
        trunk_cache, head_cache = cache
        dh = self.head.backward(grad_means, head_cache)
        self.trunk.backward(dh, trunk_cache)

    def std(self) -> np.ndarray:
        return np.exp(np.clip(self.log_std.value, LOG_STD_MIN, LOG_STD_MAX))

    def log_prob(self, means, actions_u):
        """Log density of pre-squash actions plus data for the backward pass."""
        std = self.std()
        z = (np.atleast_2d(actions_u) - np.atleast_2d(means)) / std
        clamped_logstd = np.clip(self.log_std.value, LOG_STD_MIN, LOG_STD_MAX)
        logp = -0.5 * np.sum(z * z + 2.0 * clamped_logstd + LN_2PI, axis=1)
        return logp, (z, std)

    def backward_logp(self, grad_logp, logp_data, cache) -> None:
        """Accumulate gradients of sum(grad_logp * logp) into the policy."""
        z, std = logp_data
        grad_logp = np.asarray(grad_logp, dtype=np.float64)[:, None]
        grad_means = grad_logp * z / std
        self.backward(grad_means, cache)
        unclamped = ((self.log_std.value > LOG_STD_MIN)
                     & (self.log_std.value < LOG_STD_MAX))
        self.log_std.grad += np.sum(grad_logp * (z * z - 1.0), axis=0) * unclamped

    def act(self, features, rng: np.random.Generator | None = None):
        """Sample (or take the mean of) a pre-squash action for one feature
        vector; returns (u, logp)."""
        means, _ = self.forward(features)
        mean = means[0]
        if rng is None:
            u = mean.copy()
        else:
            u = mean + self.std() * rng.standard_normal(self.action_dim)
        logp, _ = self.log_prob(mean[None, :], u[None, :])
        return u, float(logp[0])


class ValueNetwork:
    """State-value head over the shared trunk layout."""

    def __init__(self, rng, state_dim: int, action_dim: int,
                 hidden: tuple[int, int], shared_first: Linear):
        self.action_dim = action_dim
        self.trunk = Mlp(
            [shared_first, Linear(rng, hidden[0], hidden[1], name="value.hidden")],
            final_tanh=True,
        )
        self.head = Linear(rng, hidden[1], 1, gain=1.0, name="value.head")

    def parameters(self) -> list[Parameter]:
        return self.trunk.parameters() + self.head.parameters()

    def _pad(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        return np.concatenate(
            [features, np.zeros((features.shape[0], self.action_dim))], axis=1)

    def forward(self, features):
        h, trunk_cache = self.trunk.forward(self._pad(features))
        out, head_cache = self.head.forward(h)
        return out[:, 0], (trunk_cache, head_cache)

    def predict(self, features) -> np.ndarray:
        return self.forward(features)[0]

    def backward(self, grad_values, cache) -> None:
        trunk_cache, head_cache = cache
        dh = self.head.backward(np.asarray(grad_values)[:, None], head_cache)
        self.trunk.backward(dh, trunk_cache)


class JointNetworks:
    """Policy, value and transition networks sharing one first layer."""

    def __init__(self, rng: np.random.Generator, state_dim: int,
                 action_dim: int, hidden: tuple[int, int] = (64, 64)):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.hidden = tuple(hidden)
        in_dim = 2 * state_dim + action_dim
        self.shared = Linear(rng, in_dim, hidden[0], name="shared.first")
        self.policy = PolicyNetwork(rng, state_dim, action_dim, hidden,
                                    self.shared)
        self.value = ValueNetwork(rng, state_dim, action_dim, hidden,
                                  self.shared)
        self.model = TransitionModel(rng, state_dim, action_dim, hidden,
                                     shared_first=self.shared)
        self.bundle = ParamBundle(self.policy.parameters()
                                  + self.value.parameters()
                                  + self.model.parameters())

    @classmethod
    def create(cls, state_dim: int, action_dim: int,
               hidden: tuple[int, int] = (64, 64),
               init_seed: int = 0) -> "JointNetworks":
        return cls(np.random.default_rng(init_seed), state_dim, action_dim,
                   hidden)

    def meta(self) -> dict:
        return {"state_dim": self.state_dim, "action_dim": self.action_dim,
                "hidden": list(self.hidden)}

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = self.meta()
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, self.bundle.get_flat(), meta)

    @classmethod
    def load(cls, path) -> tuple["JointNetworks", dict]:
        flat, meta = load_checkpoint(path)
        nets = cls.create(meta["state_dim"], meta["action_dim"],
                          tuple(meta["hidden"]))
        nets.bundle.set_flat(flat)
        return nets, meta


class RunningRewardScale:
    """Scales rewards by the running standard deviation of the discounted
    return, the usual PPO reward normalization."""

    def __init__(self, gamma: float):
        self.gamma = gamma
        self._ret = 0.0
        self._count = 0
        self._mean = 0.0
        self._m2 = 0.0

    def update(self, reward: float, done: bool) -> None:
        self._ret = self.gamma * self._ret + reward
        self._count += 1
        delta = self._ret - self._mean
        self._mean += delta / self._count
        self._m2 += delta * (self._ret - self._mean)
        if done:
            self._ret = 0.0

    def std(self) -> float:
        if self._count < 2:
            return 1.0
        return float(np.sqrt(self._m2 / self._count)) or 1.0

    def scale(self, rewards) -> np.ndarray:
        return np.asarray(rewards, dtype=np.float64) / (self.std() + 1e-8)


@dataclass
class MiniBatch:
    """One optimization slice: PPO arrays plus the matching model terms."""

    features: np.ndarray       # (B, 2D)
    actions_u: np.ndarray      # (B, A) pre-squash actions
    logp_old: np.ndarray       # (B,)
    advantages: np.ndarray     # (B,)
    returns: np.ndarray        # (B,)
    model_batch: ModelBatch | None = None


def joint_losses(nets: JointNetworks, mb: MiniBatch, noise_cov,
                 clip: float, lambda_v: float, lambda_p: float) -> dict:
    """Evaluate J = policy loss + lambda_v * value loss + lambda_p * model
    loss, accumulating gradients of J into the bundle (caller zeroes)."""
    losses, _ = _joint_losses_grads(nets, mb, noise_cov, clip, lambda_v,
                                    lambda_p)
    return losses


def _joint_losses_grads(nets: JointNetworks, mb: MiniBatch, noise_cov,
                        clip: float, lambda_v: float, lambda_p: float):
    """As joint_losses, but also returns the (rl gradient, model gradient)
    split so each term can be norm-clipped on its own."""
    means, pcache = nets.policy.forward(mb.features)
    logp, logp_data = nets.policy.log_prob(means, mb.actions_u)
    p_loss, grad_logp = ppo_policy_loss(logp, mb.logp_old, mb.advantages, clip)
    nets.policy.backward_logp(grad_logp, logp_data, pcache)

    vpred, vcache = nets.value.forward(mb.features)
    v_loss, grad_v = value_loss(vpred, mb.returns)
    nets.value.backward(lambda_v * grad_v, vcache)
    rl_grad = nets.bundle.grad_flat()

    m_loss = 0.0
    model_grad = None
    if lambda_p > 0.0 and mb.model_batch is not None and mb.model_batch.n_terms:
        m_loss = model_loss(nets.model, mb.model_batch, noise_cov,
                            grad=True, scale=lambda_p)
        model_grad = nets.bundle.grad_flat() - rl_grad

    total = p_loss + lambda_v * v_loss + lambda_p * m_loss
    losses = {"policy": p_loss, "value": v_loss, "model": m_loss,
              "total": total}
    return losses, (rl_grad, model_grad)


def _clip_norm(grad: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return grad
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def joint_step(nets: JointNetworks, adam: AdamState, mb: MiniBatch,
               noise_cov, clip: float, lambda_v: float, lambda_p: float,
               max_grad_norm: float | None = 0.5) -> dict:
    """One Adam step on the joint objective over all shared and head
    parameters.

    The surrogate-likelihood gradient can be orders of magnitude larger
    than the policy gradient early in training, so the RL term and the
    model term are norm-clipped separately before summing; a single global
    clip would drown the policy signal through the shared layer.  Raises
    TrainingAbort on non-finite losses or gradients.
    """
    nets.bundle.zero_grads()
    losses, (rl_grad, model_grad) = _joint_losses_grads(
        nets, mb, noise_cov, clip, lambda_v, lambda_p)
    if not np.isfinite(losses["total"]):
        raise TrainingAbort("non-finite joint loss", {"losses": losses})
    grads = _clip_norm(rl_grad, max_grad_norm)
    if model_grad is not None:
        grads = grads + _clip_norm(model_grad, max_grad_norm)
    if not np.all(np.isfinite(grads)):
        raise TrainingAbort("non-finite gradient", {"losses": losses})
    flat = adam_step(adam, nets.bundle.get_flat(), grads)
    nets.bundle.set_flat(flat)
    return losses

"""Desk-scale continuous-control environments plus the observation
corruption layer (additive Gaussian noise and MCAR/MAR missingness).

Environments expose the latent state directly; the corruption layer is the
only thing standing between the simulator and the agent.  Ground-truth
latent traces are recorded for metrics only and never feed the agent path.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .belief import MaskedObservation
from .nn import sigmoid

__all__ = [
    "LinearGaussianEnv",
    "PendulumEnv",
    "CartPoleContinuousEnv",
    "make_env",
    "ENV_NAMES",
    "CorruptionConfig",
    "ObservationCorruptor",
    "corrupt",
    "mar_observe_prob",
    "observe_probabilities",
    "estimate_missing_ratio",
    "calibrate_xi",
    "imputed_state_mse",
]


class LinearGaussianEnv:
    """Stable linear dynamics with quadratic cost; the filtering testbed.

    s' = A s + B a + process noise, reward -(|s|^2 + 0.01 |a|^2).  A is a
    pair of damped rotations (spectral radius 0.9), so trajectories decay
    but keep moving, which punishes stale imputations.
    """

    name = "linear"
    state_dim = 4
    action_dim = 2
    action_bound = 1.0
    max_episode_steps = 64

    def __init__(self, process_noise_std: float = 0.05, seed: int | None = None):
        c1, s1 = np.cos(0.4), np.sin(0.4)
        c2, s2 = np.cos(0.9), np.sin(0.9)
        self.a_mat = 0.9 * np.array([
            [c1, -s1, 0.0, 0.0],
            [s1, c1, 0.0, 0.0],
            [0.0, 0.0, c2, -s2],
            [0.0, 0.0, s2, c2],
        ])
        self.b_mat = np.array([
            [0.20, 0.00],
            [0.00, 0.15],
            [0.10, 0.05],
            [0.00, 0.20],
        ])
        self.process_noise_std = process_noise_std
        self._rng = np.random.default_rng(seed)
        self._state = np.zeros(self.state_dim)
        self._steps = 0

    @property
    def process_cov(self) -> np.ndarray:
        return self.process_noise_std ** 2 * np.eye(self.state_dim)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._state = 0.5 * self._rng.standard_normal(self.state_dim)
        self._steps = 0
        return self._state.copy()

    def step(self, action):
        action = np.clip(np.asarray(action, dtype=np.float64),
                         -self.action_bound, self.action_bound)
        reward = -float(self._state @ self._state) - 0.01 * float(action @ action)
        noise = self.process_noise_std * self._rng.standard_normal(self.state_dim)
        self._state = self.a_mat @ self._state + self.b_mat @ action + noise
        self._steps += 1
        done = self._steps >= self.max_episode_steps
        return self._state.copy(), reward, done


def _angle_norm(theta: float) -> float:
    return ((theta + np.pi) % (2.0 * np.pi)) - np.pi


class PendulumEnv:
    """Torque-limited swing-up; state observed as (cos th, sin th, th_dot)."""

    name = "pendulum"
    state_dim = 3
    action_dim = 1
    action_bound = 2.0
    max_episode_steps = 200

    dt = 0.05
    gravity = 10.0
    mass = 1.0
    length = 1.0
    max_speed = 8.0

    def __init__(self, seed: int | None = None):
        self._rng = np.random.default_rng(seed)
        self._theta = 0.0
        self._theta_dot = 0.0
        self._steps = 0

    def _obs(self) -> np.ndarray:
        return np.array([np.cos(self._theta), np.sin(self._theta),
                         self._theta_dot])

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._theta = self._rng.uniform(-np.pi, np.pi)
        self._theta_dot = self._rng.uniform(-1.0, 1.0)
        self._steps = 0
        return self._obs()

    def energy(self) -> float:
        """Kinetic plus potential energy of the rod (zero at the bottom)."""
        inertia = self.mass * self.length ** 2 / 3.0
        height = 0.5 * self.length * (1.0 + np.cos(self._theta))
        return 0.5 * inertia * self._theta_dot ** 2 \
            + self.mass * self.gravity * height

    def step(self, action):
        torque = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0],
                               -self.action_bound, self.action_bound))
        cost = (_angle_norm(self._theta) ** 2
                + 0.1 * self._theta_dot ** 2 + 0.001 * torque ** 2)
        accel = (3.0 * self.gravity / (2.0 * self.length) * np.sin(self._theta)
                 + 3.0 * torque / (self.mass * self.length ** 2))
        self._theta_dot = np.clip(self._theta_dot + accel * self.dt,
                                  -self.max_speed, self.max_speed)
        self._theta = self._theta + self._theta_dot * self.dt
        self._steps += 1
        done = self._steps >= self.max_episode_steps
        return self._obs(), -cost, done


class CartPoleContinuousEnv:
    """Continuous-force cart-pole balance task (semi-implicit Euler)."""

    name = "cartpole"
    state_dim = 4
    action_dim = 1
    action_bound = 10.0
    max_episode_steps = 200

    dt = 0.02
    gravity = 9.8
    mass_cart = 1.0
    mass_pole = 0.1
    half_length = 0.5
    x_limit = 2.4
    theta_limit = 0.2

    def __init__(self, seed: int | None = None):
        self._rng = np.random.default_rng(seed)
        self._state = np.zeros(4)  # (x, x_dot, theta, theta_dot)
        self._steps = 0

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._state = self._rng.uniform(-0.05, 0.05, size=4)
        self._steps = 0
        return self._state.copy()

    def step(self, action):
        force = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0],
                              -self.action_bound, self.action_bound))
        x, x_dot, theta, theta_dot = self._state
        total_mass = self.mass_cart + self.mass_pole
        pole_ml = self.mass_pole * self.half_length
        sin_t, cos_t = np.sin(theta), np.cos(theta)
        temp = (force + pole_ml * theta_dot ** 2 * sin_t) / total_mass
        theta_acc = (self.gravity * sin_t - cos_t * temp) / (
            self.half_length * (4.0 / 3.0 - self.mass_pole * cos_t ** 2 / total_mass))
        x_acc = temp - pole_ml * theta_acc * cos_t / total_mass
        x_dot = x_dot + self.dt * x_acc
        theta_dot = theta_dot + self.dt * theta_acc
        x = x + self.dt * x_dot
        theta = theta + self.dt * theta_dot
        self._state = np.array([x, x_dot, theta, theta_dot])
        self._steps += 1
        fell = abs(x) > self.x_limit or abs(theta) > self.theta_limit
        done = fell or self._steps >= self.max_episode_steps
        reward = 0.0 if fell else 1.0
        return self._state.copy(), reward, done


ENV_NAMES = ("linear", "pendulum", "cartpole")


def make_env(name: str, seed: int | None = None):
    if name == "linear":
        return LinearGaussianEnv(seed=seed)
    if name == "pendulum":
        return PendulumEnv(seed=seed)
    if name == "cartpole":
        return CartPoleContinuousEnv(seed=seed)
    raise ValueError(f"unknown environment {name!r}; choose from {ENV_NAMES}")


# --------------------------------------------------------------------------
# observation corruption
# --------------------------------------------------------------------------

MECHANISMS = ("none", "mcar", "mar")


@dataclass(frozen=True)
class CorruptionConfig:
    """Noise and missingness settings for one experiment.

    sigma scales the observation noise as std = 0.01 * sigma per coordinate.
    eta is the target missing ratio: the maximum per-coordinate probability
    of being missing over encountered contexts.  xi is the underlying
    Bernoulli parameter; for MCAR it equals eta, for MAR it must be
    calibrated against the environment (see calibrate_xi).
    """

    mechanism: str
    eta: float
    sigma: float
    state_dim: int
    action_dim: int
    beta_state: np.ndarray
    beta_action: np.ndarray
    beta_bias: np.ndarray
    xi: float | None

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if not 0.0 <= self.eta < 1.0:
            raise ValueError("eta must lie in [0, 1)")
        if self.sigma < 0.0:
            raise ValueError("sigma must be nonnegative")

    @classmethod
    def create(cls, mechanism: str, eta: float, sigma: float, state_dim: int,
               action_dim: int, coeff_seed: int = 1234,
               xi: float | None = None) -> "CorruptionConfig":
        rng = np.random.default_rng(coeff_seed)
        beta_state = rng.standard_normal((state_dim, state_dim))
        beta_action = rng.standard_normal((state_dim, action_dim))
        beta_bias = rng.standard_normal(state_dim)
        if mechanism == "none" or eta == 0.0:
            xi = 0.0
        elif mechanism == "mcar":
            xi = eta
        return cls(mechanism, eta, sigma, state_dim, action_dim,
                   beta_state, beta_action, beta_bias, xi)

    @property
    def noise_std(self) -> float:
        return 0.01 * self.sigma

    def noise_cov(self) -> np.ndarray:
        return self.noise_std ** 2 * np.eye(self.state_dim)

    def with_xi(self, xi: float) -> "CorruptionConfig":
        return replace(self, xi=xi)


def mar_observe_prob(i: int, x_obs_prev, action, config: CorruptionConfig) -> float:
    """P(w_i = 1) under the MAR mechanism given the previous observed
    (zero-filled) observation and the current action."""
    z = (np.asarray(x_obs_prev, float) @ config.beta_state[i]
         + np.asarray(action, float) @ config.beta_action[i]
         + config.beta_bias[i])
    return float((1.0 - min(sigmoid(z), config.xi)) * (1.0 - config.xi))


def observe_probabilities(x_obs_prev, action, config: CorruptionConfig) -> np.ndarray:
    """Per-coordinate probability of being observed at the next step."""
    d = config.state_dim
    if config.mechanism == "none" or config.eta == 0.0:
        return np.ones(d)
    if config.mechanism == "mcar":
        return np.full(d, 1.0 - config.xi)
    if config.xi is None:
        raise ValueError("MAR corruption requires a calibrated xi; "
                         "run calibrate_xi first")
    z = (config.beta_state @ np.asarray(x_obs_prev, float)
         + config.beta_action @ np.asarray(action, float) + config.beta_bias)
    return (1.0 - np.minimum(sigmoid(z), config.xi)) * (1.0 - config.xi)


def corrupt(state, action_prev, config: CorruptionConfig,
            rng: np.random.Generator, prev_observed=None) -> MaskedObservation:
    """Noise-then-mask one latent state.

    The mask draw conditions only on already-realized quantities: the
    previous observation with missing entries zeroed, and the action taken
    since.  The latent state itself never enters the mask path.
    """
    state = np.asarray(state, dtype=np.float64)
    d = config.state_dim
    if prev_observed is None:
        prev_observed = np.zeros(d)
    if action_prev is None:
        action_prev = np.zeros(config.action_dim)
    noise = rng.standard_normal(d) * config.noise_std
    probs = observe_probabilities(prev_observed, action_prev, config)
    mask = rng.random(d) < probs
    return MaskedObservation.from_dense(state + noise, mask)


class ObservationCorruptor:
    """Streaming corruption for one episode: keeps the MAR context."""

    def __init__(self, config: CorruptionConfig, rng: np.random.Generator):
        self.config = config
        self._rng = rng
        self.reset()

    def reset(self) -> None:
        self._prev_observed = np.zeros(self.config.state_dim)
        self._prev_action = np.zeros(self.config.action_dim)

    def notify_action(self, action) -> None:
        self._prev_action = np.asarray(action, dtype=np.float64).copy()

    def current_probs(self) -> np.ndarray:
        return observe_probabilities(self._prev_observed, self._prev_action,
                                     self.config)

    def observe(self, state) -> MaskedObservation:
        obs = corrupt(state, self._prev_action, self.config, self._rng,
                      prev_observed=self._prev_observed)
        self._prev_observed = obs.filled(0.0)
        return obs


def estimate_missing_ratio(env, config: CorruptionConfig, n_steps: int = 4000,
                           seed: int = 0) -> float:
    """Monte-Carlo estimate of max P(w = 0): roll the environment under
    uniform random actions with streaming corruption, evaluating the
    missing probability analytically at every context."""
    if config.mechanism == "none" or config.eta == 0.0:
        return 0.0
    if config.mechanism == "mcar":
        return float(config.xi)
    rng = np.random.default_rng(seed)
    corruptor = ObservationCorruptor(config, np.random.default_rng(seed + 1))
    worst = 0.0
    steps = 0
    episode = 0
    while steps < n_steps:
        state = env.reset(seed=seed + 100 + episode)
        corruptor.reset()
        worst = max(worst, float(np.max(1.0 - corruptor.current_probs())))
        corruptor.observe(state)
        done = False
        while not done and steps < n_steps:
            action = rng.uniform(-env.action_bound, env.action_bound,
                                 env.action_dim)
            corruptor.notify_action(action)
            # probability context for the upcoming observation
            worst = max(worst, float(np.max(1.0 - corruptor.current_probs())))
            state, _, done = env.step(action)
            corruptor.observe(state)
            steps += 1
        episode += 1
    return worst


def calibrate_xi(env, config: CorruptionConfig, n_steps: int = 4000,
                 seed: int = 0, iters: int = 40) -> CorruptionConfig:
    """Set xi so the empirical missing ratio matches the configured eta.

    For MAR this bisects on xi with common random numbers; the empirical
    ratio is monotone increasing in xi and at xi = eta it already reaches at
    least eta, so the root lies in (0, eta]."""
    if config.mechanism == "none" or config.eta == 0.0:
        return config.with_xi(0.0)
    if config.mechanism == "mcar":
        return config.with_xi(config.eta)
    lo, hi = 0.0, config.eta
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        ratio = estimate_missing_ratio(env, config.with_xi(mid),
                                       n_steps=n_steps, seed=seed)
        if ratio < config.eta:
            lo = mid
        else:
            hi = mid
    return config.with_xi(0.5 * (lo + hi))


def imputed_state_mse(estimates, trace) -> float:
    """Mean over time of |estimate - latent state|^2 / D."""
    estimates = np.asarray(estimates, dtype=np.float64)
    trace = np.asarray(trace, dtype=np.float64)
    if estimates.shape != trace.shape:
        raise ValueError(
            f"estimates shape {estimates.shape} does not match trace {trace.shape}")
    return float(np.mean((estimates - trace) ** 2))

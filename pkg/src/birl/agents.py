"""Agent feature pipelines, rollout collection and the training loop.

Four agents share one network architecture and differ only in how raw
observations become policy features and state estimates:

* ``bi``      belief imputation: masked Gaussian filtering through the
              learned transition model; features are (mean, cov diagonal).
* ``ei``      exception imputation: missing coordinates replaced by the
              transition model's mean prediction from the previous estimate.
* ``fa``      fill-adjacent: missing coordinates keep their last observed
              value (0 before the first observation).
* ``oracle``  the true latent state (corruption bypass reference).

The imputation agents put their estimate in the mean slot and zeros in the
covariance slot, so the policy genuinely sees only the imputed vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .belief import (
    MaskedObservation,
    belief_features,
    posterior_update,
    propagate,
)
from .dynamics import ModelBatch
from .envs import ObservationCorruptor, imputed_state_mse
from .nn import AdamState
from .rl import (
    JointNetworks,
    MiniBatch,
    RunningRewardScale,
    TrainingAbort,
    gae,
    joint_step,
    normalize_advantages,
)

__all__ = [
    "AGENT_NAMES",
    "make_pipeline",
    "fill_adjacent_agent",
    "exception_imputation_agent",
    "EpisodeData",
    "RolloutBatch",
    "run_episode",
    "collect_rollout",
    "evaluate",
    "Trainer",
    "IterationStats",
]

AGENT_NAMES = ("bi", "ei", "fa", "oracle")


class BeliefImputationPipeline:
    """Kalman-style filtering through the learned transition model."""

    uses_model = True

    def __init__(self, nets: JointNetworks, noise_cov):
        self.model = nets.model
        self.noise_cov = np.asarray(noise_cov, dtype=np.float64)
        self._belief = None
        self._post = None

    def reset(self) -> None:
        self._belief = self.model.initial_belief()
        self._post = None

    def observe(self, obs: MaskedObservation, state=None):
        self._post = posterior_update(self._belief, obs, self.noise_cov)
        return belief_features(self._post), self._post.mean.copy()

    def after_action(self, action_env) -> None:
        self._belief = propagate(self._post, action_env, self.model)


class FillAdjacentPipeline:
    """Stale-fill imputation: last observed value per coordinate, else 0."""

    uses_model = False

    def __init__(self, nets: JointNetworks, noise_cov):
        self.state_dim = nets.state_dim
        self._estimate = np.zeros(self.state_dim)

    def reset(self) -> None:
        self._estimate = np.zeros(self.state_dim)

    def observe(self, obs: MaskedObservation, state=None):
        self._estimate = np.where(obs.mask, obs.filled(), self._estimate)
        features = np.concatenate([self._estimate, np.zeros(self.state_dim)])
        return features, self._estimate.copy()

    def after_action(self, action_env) -> None:
        pass


class ExceptionImputationPipeline:
    """Missing coordinates are replaced by the model's one-step mean
    prediction from the previous imputed state."""

    uses_model = True

    def __init__(self, nets: JointNetworks, noise_cov):
        self.model = nets.model
        self.state_dim = nets.state_dim
        self.action_dim = nets.action_dim
        self._estimate = np.zeros(self.state_dim)
        self._action = np.zeros(self.action_dim)

    def reset(self) -> None:
        self._estimate = np.zeros(self.state_dim)
        self._action = np.zeros(self.action_dim)

    def observe(self, obs: MaskedObservation, state=None):
        if obs.mask.all():
            self._estimate = obs.filled()
        else:
            prediction = self.model.transition(self._estimate, self._action).mean
            self._estimate = np.where(obs.mask, obs.filled(), prediction)
        features = np.concatenate([self._estimate, np.zeros(self.state_dim)])
        return features, self._estimate.copy()

    def after_action(self, action_env) -> None:
        self._action = np.asarray(action_env, dtype=np.float64).copy()


class TrueStatePipeline:
    """Reference agent acting on the uncorrupted latent state."""

    uses_model = False

    def __init__(self, nets: JointNetworks, noise_cov):
        self.state_dim = nets.state_dim

    def reset(self) -> None:
        pass

    def observe(self, obs: MaskedObservation, state=None):
        state = np.asarray(state, dtype=np.float64)
        features = np.concatenate([state, np.zeros(self.state_dim)])
        return features, state.copy()

    def after_action(self, action_env) -> None:
        pass


_PIPELINES = {
    "bi": BeliefImputationPipeline,
    "ei": ExceptionImputationPipeline,
    "fa": FillAdjacentPipeline,
    "oracle": TrueStatePipeline,
}


def make_pipeline(agent: str, nets: JointNetworks, noise_cov):
    try:
        cls = _PIPELINES[agent]
    except KeyError:
        raise ValueError(f"unknown agent {agent!r}; choose from {AGENT_NAMES}")
    return cls(nets, noise_cov)


def fill_adjacent_agent(nets: JointNetworks, noise_cov) -> FillAdjacentPipeline:
    return FillAdjacentPipeline(nets, noise_cov)


def exception_imputation_agent(nets: JointNetworks,
                               noise_cov) -> ExceptionImputationPipeline:
    return ExceptionImputationPipeline(nets, noise_cov)


@dataclass
class EpisodeData:
    """Everything recorded while running one (possibly truncated) episode."""

    obs_values: np.ndarray      # (L+1, D) zero-filled observations
    obs_masks: np.ndarray       # (L+1, D)
    actions_env: np.ndarray     # (L, A) squashed actions fed to the env
    actions_u: np.ndarray       # (L, A) pre-squash policy actions
    rewards: np.ndarray         # (L,) raw environment rewards
    features: np.ndarray        # (L, 2D)
    estimates: np.ndarray       # (L, D) agent state estimates
    logp: np.ndarray            # (L,)
    states: np.ndarray          # (L+1, D) latent trace (metrics only)
    terminal: bool              # env signalled done (vs. budget truncation)
    final_features: np.ndarray  # (2D,) features after the last observation

    @property
    def length(self) -> int:
        return self.rewards.size

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())


def _squash(u, bound: float) -> np.ndarray:
    return bound * np.tanh(np.asarray(u, dtype=np.float64))


def run_episode(env, corruptor: ObservationCorruptor, nets: JointNetworks,
                pipeline, rng: np.random.Generator | None,
                step_budget: int | None = None,
                env_seed: int | None = None) -> EpisodeData:
    """Filter-act loop for one episode.

    rng None means deterministic (mean) actions.  step_budget truncates the
    episode early; the trailing observation is still recorded so the value
    bootstrap has features to work from.
    """
    state = env.reset(seed=env_seed)
    corruptor.reset()
    pipeline.reset()
    obs = corruptor.observe(state)

    obs_values, obs_masks = [obs.filled()], [obs.mask.copy()]
    states = [np.asarray(state, dtype=np.float64).copy()]
    actions_env, actions_u, rewards, features, estimates, logps = \
        [], [], [], [], [], []
    terminal = False
    steps = 0
    while step_budget is None or steps < step_budget:
        feats, estimate = pipeline.observe(obs, state)
        u, logp = nets.policy.act(feats, rng)
        a_env = _squash(u, env.action_bound)
        corruptor.notify_action(a_env)
        pipeline.after_action(a_env)
        state, reward, done = env.step(a_env)
        obs = corruptor.observe(state)

        features.append(feats)
        estimates.append(estimate)
        actions_u.append(u)
        actions_env.append(a_env)
        logps.append(logp)
        rewards.append(reward)
        obs_values.append(obs.filled())
        obs_masks.append(obs.mask.copy())
        states.append(np.asarray(state, dtype=np.float64).copy())
        steps += 1
        if done:
            terminal = True
            break

    final_features, _ = pipeline.observe(obs, state)
    return EpisodeData(
        obs_values=np.stack(obs_values),
        obs_masks=np.stack(obs_masks),
        actions_env=np.stack(actions_env),
        actions_u=np.stack(actions_u),
        rewards=np.asarray(rewards, dtype=np.float64),
        features=np.stack(features),
        estimates=np.stack(estimates),
        logp=np.asarray(logps, dtype=np.float64),
        states=np.stack(states),
        terminal=terminal,
        final_features=final_features,
    )


def replay_features(pipeline, episode: EpisodeData):
    """Recompute features and estimates for stored observations/actions
    under the pipeline's current model parameters."""
    length = episode.length
    features = np.empty_like(episode.features)
    estimates = np.empty_like(episode.estimates)
    pipeline.reset()
    for t in range(length):
        obs = MaskedObservation.from_dense(episode.obs_values[t],
                                           episode.obs_masks[t])
        feats, est = pipeline.observe(obs, episode.states[t])
        features[t] = feats
        estimates[t] = est
        pipeline.after_action(episode.actions_env[t])
    return features, estimates


@dataclass
class RolloutBatch:
    """One training iteration's worth of experience, flattened."""

    episodes: list[EpisodeData]
    features: np.ndarray
    actions_u: np.ndarray
    logp_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    estimates: np.ndarray
    actions_env: np.ndarray
    next_values: np.ndarray
    next_masks: np.ndarray
    is_start: np.ndarray        # episode-start rows carry the initial term
    episode_index: np.ndarray   # row -> episode
    first_obs_values: np.ndarray
    first_obs_masks: np.ndarray
    raw_rewards: np.ndarray

    @property
    def size(self) -> int:
        return self.logp_old.size

    def refresh_features(self, pipeline) -> None:
        """Per-epoch belief recomputation under current model parameters."""
        offset = 0
        for ep in self.episodes:
            feats, ests = replay_features(pipeline, ep)
            self.features[offset:offset + ep.length] = feats
            self.estimates[offset:offset + ep.length] = ests
            offset += ep.length

    def minibatch(self, rows: np.ndarray, with_model: bool) -> MiniBatch:
        model_batch = None
        if with_model:
            start_eps = self.episode_index[rows[self.is_start[rows]]]
            model_batch = ModelBatch(
                self.estimates[rows], self.actions_env[rows],
                self.next_values[rows], self.next_masks[rows],
                init_values=self.first_obs_values[start_eps],
                init_masks=self.first_obs_masks[start_eps],
            )
        return MiniBatch(
            features=self.features[rows],
            actions_u=self.actions_u[rows],
            logp_old=self.logp_old[rows],
            advantages=self.advantages[rows],
            returns=self.returns[rows],
            model_batch=model_batch,
        )


def collect_rollout(env, corruptor, nets, pipeline, horizon: int,
                    action_rng: np.random.Generator,
                    reward_scale: RunningRewardScale,
                    gamma: float, lam: float) -> RolloutBatch:
    """Run episodes until `horizon` steps are gathered, then assemble the
    flattened batch with advantages and return targets."""
    episodes = []
    steps = 0
    while steps < horizon:
        ep = run_episode(env, corruptor, nets, pipeline, action_rng,
                         step_budget=horizon - steps)
        episodes.append(ep)
        steps += ep.length

    feat_rows, u_rows, logp_rows = [], [], []
    adv_rows, ret_rows = [], []
    est_rows, aenv_rows, nxt_rows, nxtmask_rows = [], [], [], []
    start_flags, start_episode_idx = [], []
    raw_rewards = []
    for idx, ep in enumerate(episodes):
        values = nets.value.predict(ep.features)
        if ep.terminal:
            bootstrap = 0.0
        else:
            bootstrap = float(nets.value.predict(ep.final_features[None, :])[0])
        for i, r in enumerate(ep.rewards):
            reward_scale.update(float(r), i == ep.length - 1)
        scaled = reward_scale.scale(ep.rewards)
        dones = np.zeros(ep.length, dtype=bool)
        dones[-1] = ep.terminal
        adv, rets = gae(scaled, np.append(values, bootstrap), dones,
                        gamma, lam)
        feat_rows.append(ep.features)
        u_rows.append(ep.actions_u)
        logp_rows.append(ep.logp)
        adv_rows.append(adv)
        ret_rows.append(rets)
        est_rows.append(ep.estimates)
        aenv_rows.append(ep.actions_env)
        nxt_rows.append(ep.obs_values[1:])
        nxtmask_rows.append(ep.obs_masks[1:])
        flags = np.zeros(ep.length, dtype=bool)
        flags[0] = True
        start_flags.append(flags)
        start_episode_idx.append(np.full(ep.length, idx))
        raw_rewards.append(ep.rewards)

    return RolloutBatch(
        episodes=episodes,
        features=np.concatenate(feat_rows),
        actions_u=np.concatenate(u_rows),
        logp_old=np.concatenate(logp_rows),
        advantages=normalize_advantages(np.concatenate(adv_rows)),
        returns=np.concatenate(ret_rows),
        estimates=np.concatenate(est_rows),
        actions_env=np.concatenate(aenv_rows),
        next_values=np.concatenate(nxt_rows),
        next_masks=np.concatenate(nxtmask_rows),
        is_start=np.concatenate(start_flags),
        episode_index=np.concatenate(start_episode_idx),
        first_obs_values=np.stack([ep.obs_values[0] for ep in episodes]),
        first_obs_masks=np.stack([ep.obs_masks[0] for ep in episodes]),
        raw_rewards=np.concatenate(raw_rewards),
    )


def evaluate(env, corruptor, nets, pipeline, n_episodes: int,
             seed: int) -> dict:
    """Deterministic-policy evaluation; reports raw reward statistics and
    the imputed-state MSE against the latent trace."""
    rewards, mses = [], []
    for k in range(n_episodes):
        ep = run_episode(env, corruptor, nets, pipeline, rng=None,
                         env_seed=seed + k)
        rewards.append(ep.total_reward)
        mses.append(imputed_state_mse(ep.estimates, ep.states[:-1]))
    return {
        "reward_mean": float(np.mean(rewards)),
        "reward_std": float(np.std(rewards)),
        "imputed_state_mse": float(np.mean(mses)),
        "episodes": n_episodes,
    }


@dataclass
class IterationStats:
    iteration: int
    timestep: int
    reward_mean: float
    reward_std: float
    episodes: int
    imputed_state_mse: float
    loss_policy: float
    loss_value: float
    loss_model: float

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "timestep": self.timestep,
            "reward_mean": self.reward_mean,
            "reward_std": self.reward_std,
            "episodes": self.episodes,
            "imputed_state_mse": self.imputed_state_mse,
            "loss_policy": self.loss_policy,
            "loss_value": self.loss_value,
            "loss_model": self.loss_model,
        }


class Trainer:
    """Alternates rollout collection with epochs of joint minibatch updates,
    recomputing beliefs under the current model at the start of each epoch
    after the first."""

    def __init__(self, env, corruptor: ObservationCorruptor,
                 nets: JointNetworks, agent: str, hp, seed: int):
        self.env = env
        self.corruptor = corruptor
        self.nets = nets
        self.agent = agent
        self.hp = hp
        self.noise_cov = corruptor.config.noise_cov()
        self.pipeline = make_pipeline(agent, nets, self.noise_cov)
        self.lambda_p = hp.lambda_p if self.pipeline.uses_model else 0.0
        seq = np.random.SeedSequence(seed)
        action_seed, shuffle_seed = seq.spawn(2)
        self.action_rng = np.random.default_rng(action_seed)
        self.shuffle_rng = np.random.default_rng(shuffle_seed)
        self.adam = AdamState(lr=hp.lr, eps=hp.adam_eps)
        self.reward_scale = RunningRewardScale(hp.gamma)
        self.timestep = 0
        self.iteration = 0

    def train_iteration(self) -> IterationStats:
        hp = self.hp
        batch = collect_rollout(self.env, self.corruptor, self.nets,
                                self.pipeline, hp.horizon, self.action_rng,
                                self.reward_scale, hp.gamma, hp.lam)
        self.timestep += batch.size
        loss_sums = {"policy": 0.0, "value": 0.0, "model": 0.0}
        n_updates = 0
        with_model = self.lambda_p > 0.0
        for epoch in range(hp.epochs):
            if epoch > 0 and self.pipeline.uses_model:
                batch.refresh_features(self.pipeline)
            perm = self.shuffle_rng.permutation(batch.size)
            for lo in range(0, batch.size, hp.minibatch):
                rows = perm[lo:lo + hp.minibatch]
                mb = batch.minibatch(rows, with_model)
                try:
                    losses = joint_step(self.nets, self.adam, mb,
                                        self.noise_cov, hp.clip, hp.lambda_v,
                                        self.lambda_p, hp.max_grad_norm)
                except TrainingAbort as exc:
                    exc.diagnostics.update({"iteration": self.iteration,
                                            "timestep": self.timestep,
                                            "epoch": epoch})
                    raise
                for key in loss_sums:
                    loss_sums[key] += losses[key]
                n_updates += 1
        self.iteration += 1

        finished = [ep for ep in batch.episodes if ep.terminal]
        ep_rewards = [ep.total_reward for ep in finished]
        mse = imputed_state_mse(batch.estimates,
                                np.concatenate([ep.states[:-1]
                                                for ep in batch.episodes]))
        return IterationStats(
            iteration=self.iteration,
            timestep=self.timestep,
            reward_mean=float(np.mean(ep_rewards)) if ep_rewards else float("nan"),
            reward_std=float(np.std(ep_rewards)) if ep_rewards else float("nan"),
            episodes=len(ep_rewards),
            imputed_state_mse=mse,
            loss_policy=loss_sums["policy"] / max(n_updates, 1),
            loss_value=loss_sums["value"] / max(n_updates, 1),
            loss_model=loss_sums["model"] / max(n_updates, 1),
        )

import numpy as np
import pytest

from birl.agents import (
    EpisodeData,
    Trainer,
    collect_rollout,
    evaluate,
    exception_imputation_agent,
    fill_adjacent_agent,
    make_pipeline,
    replay_features,
    run_episode,
)
from birl.belief import MaskedObservation
from birl.config import Hyperparams
from birl.dynamics import LinearTransitionModel
from birl.envs import CorruptionConfig, ObservationCorruptor, make_env
from birl.rl import JointNetworks, RunningRewardScale


def make_nets(env, seed=0, hidden=(16, 16)):
    return JointNetworks(np.random.default_rng(seed), env.state_dim,
                         env.action_dim, hidden)


def clean_corruptor(env, seed=0):
    cfg = CorruptionConfig.create("none", 0.0, 0.0, env.state_dim,
                                  env.action_dim)
    return ObservationCorruptor(cfg, np.random.default_rng(seed))


class TestFillAdjacentPipeline:
    def test_passthrough_when_complete(self):
        env = make_env("linear")
        nets = make_nets(env)
        pipe = fill_adjacent_agent(nets, np.zeros((4, 4)))
        pipe.reset()
        x = np.array([1.0, 2.0, 3.0, 4.0])
        feats, est = pipe.observe(MaskedObservation.full(x))
        np.testing.assert_array_equal(est, x)
        np.testing.assert_array_equal(feats[:4], x)
        np.testing.assert_array_equal(feats[4:], 0.0)

    def test_keeps_last_observed_value(self):
        env = make_env("linear")
        pipe = fill_adjacent_agent(make_nets(env), np.zeros((4, 4)))
        pipe.reset()
        # t=1: coordinate 1 observed as 5
        pipe.observe(MaskedObservation.from_dense([0.0, 5.0, 0.0, 0.0],
                                                  [True, True, True, True]))
        # t=2: coordinate 1 missing -> imputed 5
        _, est = pipe.observe(MaskedObservation.from_dense(
            [1.0, 0.0, 1.0, 1.0], [True, False, True, True]))
        assert est[1] == 5.0

    def test_initial_fallback_zero(self):
        env = make_env("linear")
        pipe = fill_adjacent_agent(make_nets(env), np.zeros((4, 4)))
        pipe.reset()
        _, est = pipe.observe(MaskedObservation.from_dense(
            [1.0, 0.0, 1.0, 1.0], [True, False, True, True]))
        assert est[1] == 0.0


class TestExceptionImputationPipeline:
    def test_passthrough_when_complete(self):
        env = make_env("linear")
        pipe = exception_imputation_agent(make_nets(env), np.zeros((4, 4)))
        pipe.reset()
        x = np.array([1.0, -1.0, 0.5, 2.0])
        _, est = pipe.observe(MaskedObservation.full(x))
        np.testing.assert_array_equal(est, x)

    def test_linear_prediction_at_masked_coords(self):
        # with a known linear model installed, the imputed value at a masked
        # coordinate equals (A s_prev + B a_prev) at that coordinate
        env = make_env("linear")
        nets = make_nets(env)
        pipe = exception_imputation_agent(nets, np.zeros((4, 4)))
        lin = LinearTransitionModel(env.a_mat, env.b_mat, env.process_cov,
                                    np.zeros(4), np.eye(4))
        pipe.model = lin
        pipe.reset()
        s_prev = np.array([0.5, -0.2, 0.1, 0.3])
        pipe.observe(MaskedObservation.full(s_prev))
        action = np.array([0.4, -0.6])
        pipe.after_action(action)
        mask = [True, False, True, False]
        _, est = pipe.observe(MaskedObservation.from_dense(
            [9.0, 0.0, 8.0, 0.0], mask))
        predicted = env.a_mat @ s_prev + env.b_mat @ action
        assert est[1] == pytest.approx(predicted[1])
        assert est[3] == pytest.approx(predicted[3])
        assert est[0] == 9.0 and est[2] == 8.0


class TestBeliefPipeline:
    def test_clean_observations_collapse_to_state(self):
        # no missingness, no noise: features are (x_t, 0) at every step
        env = make_env("pendulum")
        nets = make_nets(env, seed=1)
        corruptor = clean_corruptor(env)
        pipeline = make_pipeline("bi", nets, corruptor.config.noise_cov())
        ep = run_episode(env, corruptor, nets, pipeline,
                         np.random.default_rng(2), step_budget=20, env_seed=3)
        np.testing.assert_allclose(ep.features[:, :3], ep.states[:-1],
                                   atol=1e-12)
        np.testing.assert_allclose(ep.features[:, 3:], 0.0, atol=1e-12)
        np.testing.assert_allclose(ep.estimates, ep.states[:-1], atol=1e-12)


class TestRunEpisode:
    def test_deterministic_given_seeds(self):
        def rollout():
            env = make_env("linear")
            nets = make_nets(env, seed=4)
            cfg = CorruptionConfig.create("mcar", 0.2, 1.0, 4, 2)
            corruptor = ObservationCorruptor(cfg, np.random.default_rng(5))
            pipeline = make_pipeline("bi", nets, cfg.noise_cov())
            return run_episode(env, corruptor, nets, pipeline,
                               np.random.default_rng(6), env_seed=7)

        a, b = rollout(), rollout()
        np.testing.assert_array_equal(a.rewards, b.rewards)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.actions_env, b.actions_env)

    def test_all_missing_stream_completes(self):
        env = make_env("linear")
        nets = make_nets(env, seed=8)
        cfg = CorruptionConfig.create("mcar", 0.5, 1.0, 4, 2).with_xi(1.0)
        corruptor = ObservationCorruptor(cfg, np.random.default_rng(9))
        pipeline = make_pipeline("bi", nets, cfg.noise_cov())
        ep = run_episode(env, corruptor, nets, pipeline,
                         np.random.default_rng(10), env_seed=11)
        assert ep.length == env.max_episode_steps
        assert not ep.obs_masks.any()
        assert np.all(np.isfinite(ep.features))

    def test_budget_truncation(self):
        env = make_env("pendulum")
        nets = make_nets(env, seed=12)
        corruptor = clean_corruptor(env)
        pipeline = make_pipeline("bi", nets, corruptor.config.noise_cov())
        ep = run_episode(env, corruptor, nets, pipeline,
                         np.random.default_rng(13), step_budget=17, env_seed=14)
        assert ep.length == 17
        assert not ep.terminal
        assert ep.final_features.shape == (6,)

    def test_oracle_sees_true_state(self):
        env = make_env("linear")
        nets = make_nets(env, seed=15)
        cfg = CorruptionConfig.create("mcar", 0.3, 1.0, 4, 2)
        corruptor = ObservationCorruptor(cfg, np.random.default_rng(16))
        pipeline = make_pipeline("oracle", nets, cfg.noise_cov())
        ep = run_episode(env, corruptor, nets, pipeline,
                         np.random.default_rng(17), env_seed=18)
        np.testing.assert_array_equal(ep.estimates, ep.states[:-1])


class TestCollectRollout:
    def test_shapes_and_normalization(self):
        env = make_env("linear")
        nets = make_nets(env, seed=19)
        corruptor = clean_corruptor(env)
        pipeline = make_pipeline("bi", nets, corruptor.config.noise_cov())
        scale = RunningRewardScale(0.99)
        env.reset(seed=20)
        batch = collect_rollout(env, corruptor, nets, pipeline, horizon=150,
                                action_rng=np.random.default_rng(21),
                                reward_scale=scale, gamma=0.99, lam=0.95)
        assert batch.size == 150
        assert abs(batch.advantages.mean()) < 1e-10
        assert abs(batch.advantages.std() - 1.0) < 1e-6
        assert batch.features.shape == (150, 8)
        assert batch.is_start.sum() == len(batch.episodes)
        # linear env: 64-step episodes, so 150 steps span 3 episodes
        assert len(batch.episodes) == 3

    def test_replay_reproduces_features(self):
        env = make_env("linear")
        nets = make_nets(env, seed=22)
        cfg = CorruptionConfig.create("mcar", 0.3, 1.0, 4, 2)
        corruptor = ObservationCorruptor(cfg, np.random.default_rng(23))
        for agent in ("bi", "ei"):
            pipeline = make_pipeline(agent, nets, cfg.noise_cov())
            ep = run_episode(env, corruptor, nets, pipeline,
                             np.random.default_rng(24), env_seed=25)
            feats, ests = replay_features(pipeline, ep)
            np.testing.assert_allclose(feats, ep.features, atol=1e-12)
            np.testing.assert_allclose(ests, ep.estimates, atol=1e-12)

    def test_minibatch_carries_initial_terms(self):
        env = make_env("linear")
        nets = make_nets(env, seed=26)
        corruptor = clean_corruptor(env)
        pipeline = make_pipeline("bi", nets, corruptor.config.noise_cov())
        env.reset(seed=27)
        batch = collect_rollout(env, corruptor, nets, pipeline, horizon=130,
                                action_rng=np.random.default_rng(28),
                                reward_scale=RunningRewardScale(0.99),
                                gamma=0.99, lam=0.95)
        rows = np.arange(batch.size)
        mb = batch.minibatch(rows, with_model=True)
        assert mb.model_batch.init_values.shape[0] == len(batch.episodes)
        assert mb.model_batch.n_terms == batch.size + len(batch.episodes)
        mb_nostart = batch.minibatch(rows[~batch.is_start], with_model=True)
        assert mb_nostart.model_batch.init_values.shape[0] == 0


class TestEvaluate:
    def test_deterministic_and_finite(self):
        env = make_env("linear")
        nets = make_nets(env, seed=29)
        cfg = CorruptionConfig.create("mcar", 0.2, 1.0, 4, 2)

        def run():
            corruptor = ObservationCorruptor(cfg, np.random.default_rng(30))
            pipeline = make_pipeline("bi", nets, cfg.noise_cov())
            return evaluate(make_env("linear"), corruptor, nets, pipeline,
                            n_episodes=3, seed=100)

        a, b = run(), run()
        assert a == b
        assert np.isfinite(a["reward_mean"])
        assert a["imputed_state_mse"] >= 0.0
        assert a["episodes"] == 3


class TestTrainer:
    @pytest.mark.parametrize("agent", ["bi", "ei", "fa", "oracle"])
    def test_iteration_smoke(self, agent):
        env = make_env("linear")
        nets = make_nets(env, seed=31)
        cfg = CorruptionConfig.create("mcar", 0.2, 1.0, 4, 2)
        corruptor = ObservationCorruptor(cfg, np.random.default_rng(32))
        hp = Hyperparams(horizon=128, epochs=2, minibatch=32)
        env.reset(seed=33)
        trainer = Trainer(env, corruptor, nets, agent, hp, seed=34)
        stats = trainer.train_iteration()
        assert stats.timestep == 128
        assert stats.episodes == 2
        assert np.isfinite(stats.loss_policy)
        assert np.isfinite(stats.loss_value)
        if agent in ("bi", "ei"):
            assert stats.loss_model != 0.0
        else:
            assert stats.loss_model == 0.0
        assert np.isfinite(stats.imputed_state_mse)

    def test_learning_improves_linear_reward(self):
        # a short run on the linear regulator should beat the initial policy
        env = make_env("linear")
        nets = make_nets(env, seed=35)
        corruptor = clean_corruptor(env, seed=36)
        hp = Hyperparams(horizon=512, epochs=4, minibatch=64, lr=1e-3)
        env.reset(seed=37)
        trainer = Trainer(env, corruptor, nets, "bi", hp, seed=38)
        first = trainer.train_iteration()
        for _ in range(14):
            last = trainer.train_iteration()
        assert last.reward_mean > first.reward_mean

"""Built-in oracle checks runnable without the test suite (`birl selftest`).

Each check re-derives its expected values from an independent construction
(closed forms, brute-force sums, finite differences) and returns an error
message on mismatch, None on success.
"""

from __future__ import annotations

import numpy as np

from .belief import (
    BeliefState,
    MaskedObservation,
    build_sub_permutation,
    posterior_update,
)
from .dynamics import ModelBatch, TransitionModel, model_loss
from .linalg import Gaussian, cholesky, gaussian_logpdf
from .nn import ParamBundle, grad_check
from .rl import gae, ppo_policy_loss

__all__ = ["run_selftest", "CHECKS"]


def _check_cholesky() -> str | None:
    rng = np.random.default_rng(0)
    for dim in (2, 4, 6):
        a = rng.standard_normal((dim, dim))
        m = a @ a.T + dim * np.eye(dim)
        low = cholesky(m)
        err = np.linalg.norm(low @ low.T - m) / np.linalg.norm(m)
        if err > 1e-8:
            return f"reconstruction error {err:.2e} at dim {dim}"
    return None


def _check_logpdf() -> str | None:
    got = gaussian_logpdf([0.0], [0.0], [[1.0]])
    want = -0.5 * np.log(2 * np.pi)
    if abs(got - want) > 1e-12:
        return f"standard normal log density {got} != {want}"
    return None


def _check_collapse() -> str | None:
    rng = np.random.default_rng(1)
    a = rng.standard_normal((3, 3))
    inter = BeliefState(Gaussian(rng.standard_normal(3), a @ a.T + np.eye(3)),
                        "intermediate")
    x = rng.standard_normal(3)
    post = posterior_update(inter, MaskedObservation.full(x), np.zeros((3, 3)))
    if not np.array_equal(post.mean, x):
        return "posterior mean did not collapse to the observation"
    if np.linalg.norm(post.cov) >= 1e-12:
        return f"posterior covariance norm {np.linalg.norm(post.cov):.2e}"
    return None


def _check_conjugate() -> str | None:
    prior_mean, prior_var, obs, noise = 0.5, 1.0, 2.0, 0.01
    inter = BeliefState(Gaussian([prior_mean, -1.0], np.eye(2)), "intermediate")
    masked = MaskedObservation.from_dense([obs, 0.0], [True, False])
    post = posterior_update(inter, masked, noise * np.eye(2))
    gain = prior_var / (prior_var + noise)
    want_mean = prior_mean + gain * (obs - prior_mean)
    want_var = prior_var * noise / (prior_var + noise)
    if abs(post.mean[0] - want_mean) > 1e-10:
        return f"posterior mean {post.mean[0]} != {want_mean}"
    if abs(post.cov[0, 0] - want_var) > 1e-10:
        return f"posterior variance {post.cov[0, 0]} != {want_var}"
    return None


def _check_sub_permutation() -> str | None:
    sub = build_sub_permutation([True, False, True])
    want = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    if not np.array_equal(sub.matrix, want):
        return "selector rows do not match the observed coordinates"
    return None


def _check_gae() -> str | None:
    rng = np.random.default_rng(2)
    rewards = rng.standard_normal(10)
    values = rng.standard_normal(11)
    dones = np.zeros(10, bool)
    dones[[4, 9]] = True
    gamma, lam = 0.97, 0.9
    adv, _ = gae(rewards, values, dones, gamma, lam)
    for t in range(10):
        acc, coef = 0.0, 1.0
        for k in range(t, 10):
            nonterm = 0.0 if dones[k] else 1.0
            acc += coef * (rewards[k] + gamma * nonterm * values[k + 1] - values[k])
            if dones[k]:
                break
            coef *= gamma * lam
        if abs(adv[t] - acc) > 1e-10:
            return f"advantage mismatch at t={t}"
    return None


def _check_ppo_clip() -> str | None:
    # ratio 1.5, clip 0.2, advantage 1: clipped branch binds at 1.2
    loss, _ = ppo_policy_loss(np.log([1.5]), np.zeros(1), np.ones(1), 0.2)
    if abs(loss - (-1.2)) > 1e-12:
        return f"clip-binding loss {loss} != -1.2"
    # ratio 0.5, advantage -1: min(-0.5, -0.8) = -0.8, loss 0.8
    loss, _ = ppo_policy_loss(np.log([0.5]), np.zeros(1), -np.ones(1), 0.2)
    if abs(loss - 0.8) > 1e-12:
        return f"pessimistic-branch loss {loss} != 0.8"
    return None


def _check_model_gradient() -> str | None:
    model = TransitionModel(np.random.default_rng(3), 2, 1, hidden=(5, 4))
    rng = np.random.default_rng(4)
    batch = ModelBatch(rng.standard_normal((4, 2)), rng.standard_normal((4, 1)),
                       rng.standard_normal((4, 2)), rng.random((4, 2)) < 0.8)
    noise = 0.05 * np.eye(2)
    bundle = ParamBundle(model.parameters())

    def f(flat):
        bundle.set_flat(flat)
        bundle.zero_grads()
        val = model_loss(model, batch, noise)
        return val, bundle.grad_flat()

    err = grad_check(f, bundle.get_flat())
    if err > 1e-4:
        return f"model-loss gradient error {err:.2e}"
    return None


CHECKS = [
    ("cholesky-roundtrip", _check_cholesky),
    ("gaussian-logpdf", _check_logpdf),
    ("collapse-case", _check_collapse),
    ("conjugate-conditioning", _check_conjugate),
    ("sub-permutation", _check_sub_permutation),
    ("gae-bruteforce", _check_gae),
    ("ppo-clip-arithmetic", _check_ppo_clip),
    ("model-loss-gradient", _check_model_gradient),
]


def run_selftest(verbose: bool = True) -> int:
    """Run every check; returns the number of failures."""
    failures = 0
    for name, check in CHECKS:
        try:
            error = check()
        except Exception as exc:  # a crash is a failure, not an abort
            error = f"raised {type(exc).__name__}: {exc}"
        if error is None:
            if verbose:
                print(f"PASS {name}")
        else:
            failures += 1
            if verbose:
                print(f"FAIL {name}: {error}")
    return failures

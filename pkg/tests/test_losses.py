from types import SimpleNamespace

import numpy as np
import pytest

from dro_pref.errors import ConfigError, ContractError
from dro_pref.losses import (KLConfig, PolicyParams, RewardParams, bt_preference_prob,
                             compatible_loss, dpo_loss, dpo_loss_grad, fisher_matrix,
                             kl_value, kl_value_grad, log_policy, log_policy_table, pinv_eig,
                             pinv_psd, policy_score, policy_tables, potential, project_ball,
                             reward_loss, reward_loss_grad, sigmoid, value_tables,
                             weighted_fisher)
from dro_pref.synth_env import FeatureEnv, generate_env


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def ball_point(rng, d, radius):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v) * radius * rng.random() ** (1.0 / d)


def env_with_ref(seed, X=4, Y=3, d=3, F=1.0, B=1.0):
    """Random env with a non-zero reference policy."""
    base = generate_env(seed, X, Y, d, d, F, B)
    rng = np.random.default_rng(seed + 1000)
    return FeatureEnv(base.reward_features, base.policy_features, base.true_reward_params,
                      ball_point(rng, d, B), base.source_dist, F, B)


def central_diff(f, w, h=1e-5):
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-6)


# -- scalar helpers ---------------------------------------------------------

def test_sigmoid_examples():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(1.0) == pytest.approx(1 / (1 + np.exp(-1)), abs=1e-16)
    for z in (0.1, 5.0, 50.0):
        assert abs(sigmoid(-z) - (1 - sigmoid(z))) <= 1e-15
    assert np.isfinite(sigmoid(700.0)) and np.isfinite(sigmoid(-700.0))


def test_bt_preference_prob_examples():
    assert bt_preference_prob(0, 0) == 0.5
    assert bt_preference_prob(10, 0) == pytest.approx(0.9999546, abs=1e-7)
    for a, b in ((0.3, -1.2), (4.0, 2.5), (-7.0, 7.0)):
        assert abs(bt_preference_prob(a, b) + bt_preference_prob(b, a) - 1) <= 1e-15


def test_project_ball():
    np.testing.assert_allclose(project_ball([3.0, 4.0], 1.0), [0.6, 0.8])
    np.testing.assert_array_equal(project_ball([0.3, 0.4], 1.0), [0.3, 0.4])


def test_param_types_validate():
    with pytest.raises(ContractError):
        RewardParams(np.array([2.0, 0.0]), 1.0)
    with pytest.raises(ContractError):
        PolicyParams(np.array([0.0, 1.5]), 1.0)
    with pytest.raises(ConfigError):
        KLConfig(0.0)


# -- reward loss ------------------------------------------------------------

def test_reward_loss_examples(small_env):
    ex = (0, 1, 2)
    zero = RewardParams(np.zeros(small_env.d_reward), 1.0)
    assert reward_loss(zero, small_env, ex) == pytest.approx(np.log(2), abs=1e-15)
    diff = small_env.reward_features[0, 1] - small_env.reward_features[0, 2]
    np.testing.assert_allclose(reward_loss_grad(zero, small_env, ex), -0.5 * diff, atol=1e-15)
    omega = 2.0 * diff / (diff @ diff)
    assert reward_loss(RewardParams(omega, 10.0), small_env, ex) == pytest.approx(
        np.log1p(np.exp(-2.0)), abs=1e-14)


def test_reward_grad_finite_differences(small_env):
    rng = np.random.default_rng(5)
    for _ in range(50):
        w = ball_point(rng, small_env.d_reward, small_env.F)
        x = rng.integers(small_env.num_prompts)
        yp, ym = rng.choice(small_env.num_completions, 2, replace=False)
        ex = (x, yp, ym)
        fd = central_diff(lambda v: reward_loss(v, small_env, ex), w)
        assert rel_err(reward_loss_grad(w, small_env, ex), fd) < 1e-5


def test_reward_loss_bounds():
    # the 4F bound needs 2F >= ln 2, see the decisions notes
    rng = np.random.default_rng(6)
    for i in range(1000):
        F = rng.uniform(0.35, 3.0)
        env = generate_env(i % 20, 3, 3, 2, 2, F, 1.0)
        w = ball_point(rng, 2, F)
        yp, ym = rng.choice(3, 2, replace=False)
        ex = (rng.integers(3), yp, ym)
        assert 0 <= reward_loss(w, env, ex) <= 4 * F
        assert np.linalg.norm(reward_loss_grad(w, env, ex)) <= 2 + 1e-12


# -- policy -----------------------------------------------------------------

def test_log_policy_examples(small_env):
    theta0 = np.zeros(small_env.d_policy)
    Y = small_env.num_completions
    assert log_policy(theta0, small_env, 2, 1) == pytest.approx(-np.log(Y), abs=1e-15)
    rng = np.random.default_rng(7)
    for _ in range(20):
        lp = log_policy_table(ball_point(rng, small_env.d_policy, small_env.B), small_env)
        np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(8)
    psi = rng.standard_normal((3, 4, 5))
    theta = rng.standard_normal(5)
    shifted = psi + rng.standard_normal((3, 1, 5))  # same vector per prompt
    a = log_policy_table(theta, SimpleNamespace(policy_features=psi))
    b = log_policy_table(theta, SimpleNamespace(policy_features=shifted))
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_score_examples():
    psi = unit(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
    env = FeatureEnv(psi, psi, np.zeros(2), np.zeros(2), np.ones(1))
    d = psi[0, 0] - psi[0, 1]
    np.testing.assert_allclose(policy_score(np.zeros(2), env, 0, 0), 0.5 * d, atol=1e-15)
    np.testing.assert_allclose(policy_score(np.zeros(2), env, 0, 1), -0.5 * d, atol=1e-15)


def single_completion_env():
    f = unit(np.array([[[1.0, 2.0]], [[0.5, -1.0]]]))
    return FeatureEnv(f, f, np.array([0.3, 0.1]), np.zeros(2), np.array([0.4, 0.6]))


def test_single_completion_degenerates():
    env = single_completion_env()
    theta = np.array([0.5, -0.2])
    kl = KLConfig(0.7)
    assert np.all(policy_score(theta, env, 1, 0) == 0)
    assert np.all(fisher_matrix(theta, env, 0) == 0)
    assert np.all(kl_value_grad(theta, env, kl, env.true_reward_params, 0) == 0)


def test_score_mean_zero_and_bounded(small_env):
    rng = np.random.default_rng(9)
    for _ in range(100):
        theta = ball_point(rng, small_env.d_policy, small_env.B)
        _, probs, score = policy_tables(theta, small_env)
        mean = np.einsum("xy,xyd->xd", probs, score)
        assert np.abs(mean).max() <= 1e-10
        assert np.linalg.norm(score, axis=2).max() <= 2 + 1e-12


def test_kl_value_examples():
    env = env_with_ref(3)
    kl = KLConfig(0.4)
    w = env.true_reward_params
    ref = env.ref_policy_params
    r = env.rewards(w)
    p_ref = np.exp(log_policy_table(ref, env))
    for x in range(env.num_prompts):
        assert kl_value(ref, env, kl, w, x) == pytest.approx(p_ref[x] @ r[x], abs=1e-14)
        # constant reward at the reference: value is the constant
        assert kl_value(ref, env, kl, np.zeros(env.d_reward), x, reward_shift=1.7) == \
            pytest.approx(1.7, abs=1e-14)
        assert np.abs(kl_value_grad(ref, env, kl, np.zeros(env.d_reward), x, 1.7)).max() <= 1e-14

    theta = np.array([0.2, -0.5, 0.1])
    lp = log_policy_table(theta, env)
    lr = log_policy_table(ref, env)
    p = np.exp(lp)
    for x in range(env.num_prompts):
        kl_x = p[x] @ (lp[x] - lr[x])
        assert kl_value(theta, env, kl, w, x) + kl.beta * kl_x == pytest.approx(
            p[x] @ r[x], abs=1e-12)


def test_kl_value_grad_finite_differences():
    env = env_with_ref(4, X=3, Y=4, d=3, F=1.0, B=2.0)
    rng = np.random.default_rng(10)
    for _ in range(50):
        theta = ball_point(rng, env.d_policy, env.B)
        kl = KLConfig(rng.uniform(0.1, 2.0))
        x = rng.integers(env.num_prompts)
        fd = central_diff(lambda t: kl_value(t, env, kl, env.true_reward_params, x, 1.0), theta)
        g = kl_value_grad(theta, env, kl, env.true_reward_params, x, 1.0)
        assert rel_err(g, fd) < 1e-5


# -- Fisher and pseudo-inverse ---------------------------------------------

def test_fisher_two_outcomes():
    env = generate_env(13, 3, 2, 2, 3, 1.0, 1.0)
    theta = np.array([0.4, -0.3, 0.6])
    lp = log_policy_table(theta, env)
    for x in range(3):
        p = np.exp(lp[x, 0])
        d = env.policy_features[x, 0] - env.policy_features[x, 1]
        np.testing.assert_allclose(fisher_matrix(theta, env, x), p * (1 - p) * np.outer(d, d),
                                   atol=1e-14)


def test_fisher_psd(small_env):
    rng = np.random.default_rng(11)
    for _ in range(100):
        theta = ball_point(rng, small_env.d_policy, small_env.B)
        x = rng.integers(small_env.num_prompts)
        assert np.linalg.eigvalsh(fisher_matrix(theta, small_env, x)).min() >= -1e-10
        prompts = rng.integers(small_env.num_prompts, size=6)
        G = weighted_fisher(theta, small_env, prompts, rng.dirichlet(np.ones(6)))
        assert np.linalg.eigvalsh(G).min() >= -1e-10


def test_weighted_fisher_examples(small_env):
    theta = np.array([0.3, -0.8])
    F2 = fisher_matrix(theta, small_env, 2)
    np.testing.assert_allclose(weighted_fisher(theta, small_env, [2, 2, 2], np.full(3, 1 / 3)),
                               F2, atol=1e-15)
    np.testing.assert_allclose(weighted_fisher(theta, small_env, [0, 2, 4], [0, 1, 0]), F2,
                               atol=1e-15)


def test_pinv_examples():
    np.testing.assert_array_equal(pinv_psd(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(pinv_psd(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]))
    rng = np.random.default_rng(12)
    for _ in range(20):
        v = rng.standard_normal(4)
        M = np.outer(v, v)
        np.testing.assert_allclose(pinv_psd(M), M / (v @ v) ** 2, atol=1e-10)
    with pytest.raises(ContractError):
        pinv_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))
    P, lam, cut = pinv_eig(np.zeros((2, 2)))
    assert np.all(P == 0) and cut == 0.0


# -- compatible function approximation -------------------------------------

def test_compatible_loss_matches_least_squares():
    rng = np.random.default_rng(14)
    for seed in range(10):
        env = env_with_ref(seed, X=5, Y=4, d=3, F=1.0, B=2.0)
        kl = KLConfig(0.5)
        theta = ball_point(rng, 3, 2.0)
        prompts = rng.integers(5, size=7)
        q = rng.dirichlet(np.ones(7))
        w_r = env.true_reward_params
        v, _, grad, probs, score = value_tables(theta, env, kl.beta, env.rewards(w_r, 1.0))
        g = q @ grad[prompts]
        G = weighted_fisher(theta, env, prompts, q)
        w_star = pinv_psd(G) @ g
        # independent least squares over stacked (prompt, completion) rows
        wt = np.sqrt(q[:, None] * probs[prompts])
        rows = (wt[:, :, None] * score[prompts]).reshape(-1, 3)
        target = (wt * v[prompts]).ravel()
        sol, *_ = np.linalg.lstsq(rows, target, rcond=None)
        best = float(np.sum((target - rows @ sol) ** 2))
        L_star = compatible_loss(w_star, theta, env, prompts, q, kl, w_r, 1.0)
        assert L_star == pytest.approx(best, abs=1e-8)
        assert L_star <= compatible_loss(np.zeros(3), theta, env, prompts, q, kl, w_r, 1.0) + 1e-12
        assert L_star >= 0


def test_compatible_loss_zero_value():
    # theta = theta_ref and zero reward gives v = 0
    env = generate_env(15, 3, 3, 2, 2)
    kl = KLConfig(0.5)
    assert compatible_loss(np.zeros(2), np.zeros(2), env, [0, 1], [0.5, 0.5], kl,
                           np.zeros(2)) == 0.0


# -- DPO --------------------------------------------------------------------

def test_dpo_at_reference_is_ln2():
    env = env_with_ref(16)
    kl = KLConfig(0.8)
    for ex in ((0, 0, 1), (1, 2, 0), (3, 1, 2)):
        assert dpo_loss(env.ref_policy_params, env, kl, ex) == pytest.approx(np.log(2), abs=1e-14)


def test_dpo_grad_finite_differences():
    rng = np.random.default_rng(17)
    for i in range(50):
        env = env_with_ref(i % 5, X=3, Y=4, d=3, B=2.0)
        kl = KLConfig(rng.uniform(0.1, 2.0))
        theta = ball_point(rng, 3, 2.0)
        yp, ym = rng.choice(4, 2, replace=False)
        ex = (rng.integers(3), yp, ym)
        fd = central_diff(lambda t: dpo_loss(t, env, kl, ex), theta)
        assert rel_err(dpo_loss_grad(theta, env, kl, ex), fd) < 1e-5


def test_dpo_loss_bound():
    # valid once beta (2B + J) >= ln 2, see the decisions notes
    rng = np.random.default_rng(18)
    checked = 0
    for i in range(1000):
        B = rng.uniform(0.5, 3.0)
        env = env_with_ref(i % 10, X=3, Y=3, d=2, B=B)
        kl = KLConfig(rng.uniform(0.3, 2.0))
        lr = log_policy_table(env.ref_policy_params, env)
        J = float(np.max(lr.max(axis=1) - lr.min(axis=1)))
        if kl.beta * (2 * B + J) < np.log(2):
            continue
        theta = ball_point(rng, 2, B)
        yp, ym = rng.choice(3, 2, replace=False)
        ex = (rng.integers(3), yp, ym)
        assert 0 <= dpo_loss(theta, env, kl, ex) <= 2 * kl.beta * (2 * B + J)
        assert np.linalg.norm(dpo_loss_grad(theta, env, kl, ex)) <= 2 * kl.beta + 1e-12
        checked += 1
    assert checked > 900


# -- potential --------------------------------------------------------------

def test_potential_examples(small_env):
    theta = np.array([0.4, 0.9])
    assert potential(theta, theta, small_env) == 0.0
    # against uniform: KL(pi || unif) = log|Y| - H(pi)
    lp = log_policy_table(theta, small_env)
    H = -np.sum(np.exp(lp) * lp, axis=1)
    expected = small_env.source_dist @ (np.log(small_env.num_completions) - H)
    assert potential(np.zeros(2), theta, small_env) == pytest.approx(expected, abs=1e-14)
    assert potential(np.zeros(2), np.array([-0.3, 0.2]), small_env) > 0

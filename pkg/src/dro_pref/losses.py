"""Bradley-Terry reward loss, log-linear softmax policy quantities, DPO loss.

Per-example functions follow the public contract; the ``*_table`` helpers
evaluate the same quantities for every (prompt, completion) at once and are
what the trainers and evaluators use.
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .errors import ConfigError, ContractError


def sigmoid(z):
    """Logistic function 1 / (1 + exp(-z)), stable for large |z|."""
    out = expit(z)
    return float(out) if np.ndim(out) == 0 else out


def softplus(u):
    out = np.logaddexp(0.0, u)
    return float(out) if np.ndim(out) == 0 else out


def bt_preference_prob(r_plus, r_minus):
    """P(y+ preferred over y-) under Bradley-Terry."""
    return sigmoid(np.asarray(r_plus) - np.asarray(r_minus))


def project_ball(v, radius):
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if norm > radius:
        return v * (radius / norm)
    return v


@dataclass
class RewardParams:
    omega: np.ndarray
    radius_F: float = 1.0

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        if np.linalg.norm(self.omega) > self.radius_F * (1 + 1e-9):
            raise ContractError("reward parameters lie outside the F-ball")


@dataclass
class PolicyParams:
    theta: np.ndarray
    radius_B: float = 1.0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if np.linalg.norm(self.theta) > self.radius_B * (1 + 1e-9):
            raise ContractError("policy parameters lie outside the B-ball")


@dataclass(frozen=True)
class KLConfig:
    beta: float = 0.5

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")


def _omega(p):
    return p.omega if isinstance(p, RewardParams) else np.asarray(p, dtype=float)


def _theta(p):
    return p.theta if isinstance(p, PolicyParams) else np.asarray(p, dtype=float)


def _example(ex):
    if hasattr(ex, "y_plus"):
        return int(ex.x), int(ex.y_plus), int(ex.y_minus)
    x, yp, ym = ex
    return int(x), int(yp), int(ym)


# -- reward model -----------------------------------------------------------

def reward_margin(params, env, ex):
    x, yp, ym = _example(ex)
    return float(_omega(params) @ (env.reward_features[x, yp] - env.reward_features[x, ym]))


def reward_loss(params, env, ex):
    """-log sigmoid(<omega, phi(x, y+) - phi(x, y-)>)."""
    return -float(log_expit(reward_margin(params, env, ex)))


def reward_loss_grad(params, env, ex):
    x, yp, ym = _example(ex)
    diff = env.reward_features[x, yp] - env.reward_features[x, ym]
    return -sigmoid(-float(_omega(params) @ diff)) * diff


def reward_design(env, examples):
    """Rows phi(x, y+) - phi(x, y-) for an (N, 3) example array."""
    ex = np.asarray(examples)
    f = env.reward_features
    return f[ex[:, 0], ex[:, 1]] - f[ex[:, 0], ex[:, 2]]


# -- log-linear policy ------------------------------------------------------

def log_policy_table(theta, env):
    logits = env.policy_features @ _theta(theta)
    return logits - logsumexp(logits, axis=1, keepdims=True)


def policy_tables(theta, env):
    """Log-probabilities (X, Y), probabilities (X, Y) and scores (X, Y, d)."""
    logp = log_policy_table(theta, env)
    probs = np.exp(logp)
    psi = env.policy_features
    mean = np.einsum("xy,xyd->xd", probs, psi)
    return logp, probs, psi - mean[:, None, :]


def log_policy(params, env, x, y):
    return float(log_policy_table(params, env)[x, y])


def policy_score(params, env, x, y):
    """Gradient of log pi(y|x) in theta: psi(x, y) - E_pi psi(x, .)."""
    _, _, score = policy_tables(params, env)
    return score[x, y].copy()


def value_tables(theta, env, beta, rewards, ref_logp=None):
    """Per-completion value v(x, y) = r(x, y) - beta log(pi/pi_ref), the
    per-prompt expectation V(x) = E_pi v and its gradient in theta.

    Returns (v_xy, V_x, grad_x, probs, score).
    """
    logp, probs, score = policy_tables(theta, env)
    if ref_logp is None:
        ref_logp = log_policy_table(env.ref_policy_params, env)
    v = rewards - beta * (logp - ref_logp)
    V = np.sum(probs * v, axis=1)
    # d/dtheta E_pi[r - beta log(pi/pi_ref)] = E_pi[score * v] (the -beta E[score] term is 0)
    grad = np.einsum("xy,xy,xyd->xd", probs, v, score)
    return v, V, grad, probs, score


def kl_value(params, env, kl, reward, x, reward_shift=0.0):
    """E_{y~pi(.|x)} r(x, y) - beta KL(pi(.|x) || pi_ref(.|x))."""
    r = env.rewards(_omega(reward), reward_shift)
    _, V, _, _, _ = value_tables(params, env, kl.beta, r)
    return float(V[x])


def kl_value_grad(params, env, kl, reward, x, reward_shift=0.0):
    r = env.rewards(_omega(reward), reward_shift)
    _, _, grad, _, _ = value_tables(params, env, kl.beta, r)
    return grad[x].copy()


def fisher_table(probs, score):
    """(X, d, d) Fisher matrices E_pi[score score^T] per prompt."""
    return np.einsum("xy,xyi,xyj->xij", probs, score, score)


def fisher_matrix(params, env, x):
    _, probs, score = policy_tables(params, env)
    return fisher_table(probs[x:x + 1], score[x:x + 1])[0]


def weighted_fisher(params, env, prompts, q):
    """sum_i q_i F(theta | x_i) for a minibatch of prompts with weights q."""
    _, probs, score = policy_tables(params, env)
    w = np.bincount(np.asarray(prompts), weights=np.asarray(q, dtype=float),
                    minlength=env.num_prompts)
    return np.einsum("x,xij->ij", w, fisher_table(probs, score))


def pinv_eig(M, rel_tol=1e-10):
    """Pseudo-inverse of a symmetric PSD matrix with a relative eigenvalue
    cutoff. Returns (pinv, eigenvalues, cutoff)."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ContractError("expected a square matrix")
    asym = np.max(np.abs(M - M.T)) if M.size else 0.0
    if asym > 1e-9:
        raise ContractError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    lam, V = np.linalg.eigh(0.5 * (M + M.T))
    top = lam[-1] if lam.size else 0.0
    if top <= 0.0:
        return np.zeros_like(M), lam, 0.0
    cutoff = rel_tol * top
    keep = lam > cutoff
    inv = np.zeros_like(lam)
    inv[keep] = 1.0 / lam[keep]
    return (V * inv) @ V.T, lam, cutoff


def pinv_psd(M, rel_tol=1e-10):
    return pinv_eig(M, rel_tol)[0]


def compatible_loss(w, params, env, prompts, q, kl, reward, reward_shift=0.0):
    """sum_i q_i E_{y~pi}[(v(x_i, y) - <w, score(x_i, y)>)^2]."""
    r = env.rewards(_omega(reward), reward_shift)
    v, _, _, probs, score = value_tables(params, env, kl.beta, r)
    resid = v - score @ np.asarray(w, dtype=float)
    per_prompt = np.sum(probs * resid ** 2, axis=1)
    return float(np.asarray(q, dtype=float) @ per_prompt[np.asarray(prompts)])


# -- DPO --------------------------------------------------------------------

def dpo_design(env, examples, beta):
    """Rows psi(x, y+) - psi(x, y-) and offsets -beta * log(pi_ref(y+) / pi_ref(y-)),
    so the DPO margin is beta * <theta, row> + offset."""
    ex = np.asarray(examples)
    f = env.policy_features
    A = f[ex[:, 0], ex[:, 1]] - f[ex[:, 0], ex[:, 2]]
    ref = log_policy_table(env.ref_policy_params, env)
    offset = -beta * (ref[ex[:, 0], ex[:, 1]] - ref[ex[:, 0], ex[:, 2]])
    return A, offset


def dpo_margin(params, env, kl, ex):
    x, yp, ym = _example(ex)
    logp = log_policy_table(params, env)
    ref = log_policy_table(env.ref_policy_params, env)
    return kl.beta * ((logp[x, yp] - ref[x, yp]) - (logp[x, ym] - ref[x, ym]))


def dpo_loss(params, env, kl, ex):
    """-log sigmoid(beta log-ratio(y+) - beta log-ratio(y-))."""
    return -float(log_expit(dpo_margin(params, env, kl, ex)))


def dpo_loss_grad(params, env, kl, ex):
    x, yp, ym = _example(ex)
    z = dpo_margin(params, env, kl, ex)
    diff = env.policy_features[x, yp] - env.policy_features[x, ym]
    return -kl.beta * sigmoid(-z) * diff


def potential(theta, opt_theta, env):
    """sum_x D(x) KL(pi_opt(.|x) || pi_theta(.|x))."""
    lo = log_policy_table(opt_theta, env)
    lt = log_policy_table(theta, env)
    return float(env.source_dist @ np.sum(np.exp(lo) * (lo - lt), axis=1))

"""Exact population-level robust evaluation, Monte-Carlo bias check and
measured problem constants.

Two population views are available:
  * prompt-marginal: the adversary reweights prompts, each carrying its
    expected loss over the completion pair and label (``evaluate_*``);
  * joint: the adversary reweights whole (prompt, y+, y-) atoms
    (``AtomDist``). Training minibatches are drawn from atoms, so the joint
    view is the one whose minibatch estimates are biased downward.
"""
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import io
from .divergence import Divergence, as_divergence, as_sense, shift_distribution
from .errors import ContractError
from .losses import (fisher_table, log_policy_table, pinv_eig, policy_tables, softplus,
                     value_tables)


@dataclass
class EvalReport:
    standard_loss: float
    robust_loss: float
    worst_dist: np.ndarray
    rho: float
    kind: str = "tv"
    sense: str = "max"
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return {"standard_loss": self.standard_loss, "robust_loss": self.robust_loss,
                "worst_dist": np.asarray(self.worst_dist), "rho": self.rho,
                "divergence": str(self.kind), "sense": str(self.sense), "extras": self.extras}


def robust_population_loss(loss_per_prompt, source_dist, rho, kind="tv", sense="max"):
    sol = shift_distribution(source_dist, loss_per_prompt, rho, kind, sense)
    standard = float(np.asarray(source_dist, dtype=float) @ np.asarray(loss_per_prompt, dtype=float))
    return EvalReport(standard, sol.objective, sol.weights, float(rho),
                      as_divergence(kind).value, as_sense(sense).value)


# -- pairwise losses over the full (prompt, pair, label) distribution --------

def pair_weights(env):
    """(X, Y, Y) probability that (y+, y-) = (a, b) given the prompt: a uniform
    unordered pair of distinct completions labelled by the true BT model."""
    Y = env.num_completions
    if Y < 2:
        raise ContractError("pairwise losses need at least two completions")
    r = env.rewards()
    W = 1.0 / (1.0 + np.exp(-(r[:, :, None] - r[:, None, :]))) * (2.0 / (Y * (Y - 1)))
    W[:, np.arange(Y), np.arange(Y)] = 0.0
    return W


def pair_losses(scores):
    """(X, Y, Y) table softplus(-(s[x, a] - s[x, b]))."""
    return softplus(-(scores[:, :, None] - scores[:, None, :]))


def reward_scores(omega, env):
    return env.reward_features @ np.asarray(omega, dtype=float)


def dpo_scores(theta, env, beta):
    return beta * (log_policy_table(theta, env) - log_policy_table(env.ref_policy_params, env))


def reward_prompt_losses(omega, env):
    return np.sum(pair_weights(env) * pair_losses(reward_scores(omega, env)), axis=(1, 2))


def dpo_prompt_losses(theta, env, beta):
    return np.sum(pair_weights(env) * pair_losses(dpo_scores(theta, env, beta)), axis=(1, 2))


def log_ratio_bound(env):
    """J = max |log pi_ref(a|x) - log pi_ref(b|x)|."""
    ref = log_policy_table(env.ref_policy_params, env)
    return float(np.max(ref.max(axis=1) - ref.min(axis=1)))


@dataclass
class AtomDist:
    """Finite distribution over (prompt, y+, y-) triples."""
    prompt: np.ndarray
    y_plus: np.ndarray
    y_minus: np.ndarray
    prob: np.ndarray

    @classmethod
    def population(cls, env):
        W = pair_weights(env) * env.source_dist[:, None, None]
        x, a, b = np.nonzero(W)
        return cls(x, a, b, W[x, a, b] / W[x, a, b].sum())

    @classmethod
    def empirical(cls, dataset):
        rows, counts = np.unique(dataset.examples, axis=0, return_counts=True)
        return cls(rows[:, 0], rows[:, 1], rows[:, 2], counts / counts.sum())

    def __len__(self):
        return self.prob.size

    @property
    def examples(self):
        return np.stack([self.prompt, self.y_plus, self.y_minus], axis=1)

    def losses_from_scores(self, scores):
        return softplus(-(scores[self.prompt, self.y_plus] - scores[self.prompt, self.y_minus]))

    def reward_losses(self, omega, env):
        return self.losses_from_scores(reward_scores(omega, env))

    def dpo_losses(self, theta, env, beta):
        return self.losses_from_scores(dpo_scores(theta, env, beta))

    def robust(self, losses, rho, kind="tv"):
        return shift_distribution(self.prob, losses, rho, kind, "max").objective


def _common_extras(env):
    return {"nu": float(env.source_dist.min()), "num_prompts": env.num_prompts}


def evaluate_reward(omega, env, rho, kind="tv", atoms=None):
    """Prompt-marginal robust BT loss; the joint-atom robust loss (over
    ``atoms``, default the population atoms) is added to extras."""
    rep = robust_population_loss(reward_prompt_losses(omega, env), env.source_dist, rho, kind)
    atoms = AtomDist.population(env) if atoms is None else atoms
    losses = atoms.reward_losses(omega, env)
    r = env.rewards()
    rep.extras.update(_common_extras(env))
    rep.extras.update({"joint_standard_loss": float(atoms.prob @ losses),
                       "joint_robust_loss": atoms.robust(losses, rho, kind),
                       "r_max": float(np.abs(r).max()),
                       "q_min": float(rep.worst_dist[rep.worst_dist > 0].min())})
    return rep


def evaluate_dpo(theta, env, beta, rho, kind="tv", atoms=None):
    rep = robust_population_loss(dpo_prompt_losses(theta, env, beta), env.source_dist, rho, kind)
    atoms = AtomDist.population(env) if atoms is None else atoms
    losses = atoms.dpo_losses(theta, env, beta)
    rep.extras.update(_common_extras(env))
    rep.extras.update({"joint_standard_loss": float(atoms.prob @ losses),
                       "joint_robust_loss": atoms.robust(losses, rho, kind),
                       "J": log_ratio_bound(env),
                       "q_min": float(rep.worst_dist[rep.worst_dist > 0].min())})
    return rep


def policy_prompt_values(theta, env, beta, rewards):
    return value_tables(theta, env, beta, rewards)[1]


def robust_value(theta, env, beta, rewards, rho, kind="tv"):
    """Worst-case (min-sense) expected KL-regularised value over prompts."""
    V = policy_prompt_values(theta, env, beta, rewards)
    return shift_distribution(env.source_dist, V, rho, kind, "min").objective


def evaluate_policy(theta, env, beta, rewards, rho, kind="tv"):
    """``rewards`` is the (X, Y) table the policy was trained against."""
    rep = robust_population_loss(policy_prompt_values(theta, env, beta, rewards),
                                 env.source_dist, rho, kind, "min")
    rep.extras.update(_common_extras(env))
    rep.extras.update({"r_min": float(rewards.min()), "r_max": float(rewards.max()),
                       "q_min": float(rep.worst_dist[rep.worst_dist > 0].min())})
    return rep


def robust_value_grid(thetas, env, beta, rewards, rho, kind="tv"):
    """Robust value at each row of ``thetas`` (G, d), vectorised."""
    logits = np.einsum("xyd,gd->gxy", env.policy_features, thetas)
    logp = logits - np.logaddexp.reduce(logits, axis=2, keepdims=True)
    ref = log_policy_table(env.ref_policy_params, env)
    V = np.sum(np.exp(logp) * (rewards[None] - beta * (logp - ref[None])), axis=2)
    if as_divergence(kind) is Divergence.TV:
        return K.tv_objective_rows(env.source_dist, np.ascontiguousarray(V), float(rho), False)
    return np.array([shift_distribution(env.source_dist, v, rho, kind, "min").objective for v in V])


# -- bias of the minibatch robust loss --------------------------------------

def bias_bound(F, rho, n):
    """3 B (1 + 2 rho) sqrt((4 + ln n) / n) with loss bound B = 4F."""
    return 12.0 * F * (1.0 + 2.0 * rho) * np.sqrt((4.0 + np.log(n)) / n)


def bias_check(reward, env, dataset_dist=None, n=64, rho=0.1, trials=10000, seed=0):
    """Compare the TV-robust loss of ``reward`` under ``dataset_dist`` (an
    AtomDist; default the population atoms) with the mean robust loss over
    ``trials`` i.i.d. minibatches of size n."""
    omega = getattr(reward, "omega", reward)
    F = float(getattr(reward, "radius_F", env.F))
    atoms = AtomDist.population(env) if dataset_dist is None else dataset_dist
    losses = atoms.reward_losses(omega, env)
    pop = atoms.robust(losses, rho, "tv")
    rng = io.phase_rng(seed, "bias")
    vals = np.empty(trials)
    chunk = max(1, 200000 // n)
    for s in range(0, trials, chunk):
        m = min(chunk, trials - s)
        idx = rng.choice(len(atoms), size=(m, n), p=atoms.prob)
        vals[s:s + m] = K.tv_max_rows(np.ascontiguousarray(losses[idx]), float(rho))
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / np.sqrt(trials)) if trials > 1 else float("nan")
    bound = float(bias_bound(F, rho, n))
    bias = pop - mean
    return {"population_robust": pop, "minibatch_mean": mean, "minibatch_se": se,
            "bias": bias, "bound": bound, "n": n, "rho": float(rho), "trials": trials,
            "lower_ok": bool(bias >= -3.0 * se), "upper_ok": bool(bias <= bound)}


# -- measured constants -----------------------------------------------------

def measure_constants(env, theta=None, beta=0.5, rewards=None, q=None, prompts=None,
                      opt_theta=None, rel_tol=1e-10):
    """Empirical concentrability, Fisher and compatibility constants at one policy iterate.

    ``q``/``prompts`` give the minibatch weighting (default: source
    distribution over all prompts). Reports nu, r_min/r_max, q_min, the
    smallest weighted-Fisher eigenvalue above the pseudo-inverse cutoff
    (0 if the matrix vanishes), eps_apx (minimised compatible loss) and the
    concentrability ratio against ``opt_theta`` when given.
    """
    out = {"nu": float(env.source_dist.min())}
    if rewards is None:
        rewards = env.rewards()
    out["r_min"] = float(rewards.min())
    out["r_max"] = float(rewards.max())
    if theta is None:
        return out
    if prompts is None:
        prompts = np.arange(env.num_prompts)
        q = env.source_dist
    q = np.asarray(q, dtype=float)
    wq = np.bincount(np.asarray(prompts), weights=q, minlength=env.num_prompts)
    out["q_min"] = float(q[q > 0].min())
    v, _, grad, probs, score = value_tables(theta, env, beta, rewards)
    G = np.einsum("x,xij->ij", wq, fisher_table(probs, score))
    pinv, lam, cutoff = pinv_eig(G, rel_tol)
    above = lam[lam > cutoff]
    out["sigma_min"] = float(above.min()) if above.size and lam[-1] > 0 else 0.0
    w = pinv @ (wq @ grad)
    resid = v - score @ w
    out["eps_apx"] = float(wq @ np.sum(probs * resid ** 2, axis=1))
    if opt_theta is not None:
        out["concentrability"] = concentrability(theta, opt_theta, env, wq)
    return out


def concentrability(theta, opt_theta, env, prompt_weights):
    """sum_x w(x) E_{pi_theta}[(pi_opt / pi_theta)^2]."""
    _, probs, _ = policy_tables(theta, env)
    _, popt, _ = policy_tables(opt_theta, env)
    return float(np.asarray(prompt_weights) @ np.sum(popt ** 2 / probs, axis=1))

"""Distributionally robust policy optimisation: natural policy gradient on the
worst-case weighted KL-regularised value, preconditioned by the weighted
Fisher pseudo-inverse."""
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import io
from ._sgd import check_common, minibatch_indices
from .divergence import DivergenceSpec, worst_case_weights
from .errors import ConfigError, ContractError, DegenerateGeometryError
from .losses import (PolicyParams, fisher_table, log_policy_table, pinv_eig, potential,
                     project_ball, value_tables)
from .report import TrainReport

EXACT = "exact"
SAMPLED = "sampled"
DEFAULT_ETA_CAP = 0.1


@dataclass
class PolicyTrainConfig:
    T: int = 300
    n: int = 64
    eta: object = "auto"
    rho: float = 0.0
    divergence: str = "tv"
    beta: float = 0.5
    B: float = 1.0
    seed: int = 0
    mode: str = EXACT
    q_floor: float = 0.0
    pinv_rel_tol: float = 1e-10
    # constant added to the reward table; None means the reward radius F
    reward_shift: float = None
    replacement: bool = True
    warmup: int = 8

    def __post_init__(self):
        check_common(self)
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if not self.B > 0:
            raise ConfigError(f"B must be positive, got {self.B}")
        if self.mode not in (EXACT, SAMPLED):
            raise ConfigError(f"mode must be {EXACT!r} or {SAMPLED!r}, got {self.mode!r}")
        if not self.pinv_rel_tol > 0:
            raise ConfigError("pinv_rel_tol must be positive")
        if int(self.warmup) != self.warmup or self.warmup < 1:
            raise ConfigError("warmup must be a positive integer")

    def digest(self):
        return io.digest_obj(asdict(self))


def _prompts_of(dataset, env):
    if hasattr(dataset, "examples"):
        dataset.check_env(env)
        return np.asarray(dataset.prompts)
    prompts = np.asarray(dataset, dtype=np.int64)
    if prompts.ndim != 1 or prompts.size == 0:
        raise ConfigError("prompt list must be a non-empty vector")
    if prompts.min() < 0 or prompts.max() >= env.num_prompts:
        raise ConfigError("prompt index out of range")
    return prompts


def _sample_completions(rng, probs_rows):
    cdf = np.cumsum(probs_rows, axis=1)
    u = rng.random(len(probs_rows)) * cdf[:, -1]
    return np.minimum((cdf < u[:, None]).sum(axis=1), probs_rows.shape[1] - 1)


class _NPG:
    """State shared by the warmup pass and the main loop."""

    def __init__(self, cfg, env, prompts, rewards):
        self.cfg, self.env, self.prompts, self.rewards = cfg, env, prompts, rewards
        self.ref_logp = log_policy_table(env.ref_policy_params, env)
        self.spec = DivergenceSpec(cfg.divergence, cfg.rho)
        self.batch_rng = io.phase_rng(cfg.seed, "minibatch")
        self.completion_rng = io.phase_rng(cfg.seed, "completion")

    def batch(self, theta, rng):
        """Minibatch prompts, per-example values, worst-case weights and the
        value tables at theta."""
        cfg = self.cfg
        xs = self.prompts[minibatch_indices(rng, len(self.prompts), cfg.n, cfg.replacement)]
        tabs = value_tables(theta, self.env, cfg.beta, self.rewards, self.ref_logp)
        v_xy, V, _, probs, _ = tabs
        if cfg.mode == EXACT:
            vals = V[xs]
        else:
            ys = _sample_completions(self.completion_rng, probs[xs])
            vals = v_xy[xs, ys]
        sol = worst_case_weights(vals, self.spec, "min", cfg.q_floor)
        return xs, vals, sol, tabs


def default_step_size(cfg, env, prompts, rewards):
    """min(1 / (2 beta q_min_hat), cap) with q_min_hat the smallest positive
    weight seen over ``cfg.warmup`` minibatches at the initial policy."""
    npg = _NPG(cfg, env, prompts, rewards)
    rng = io.phase_rng(cfg.seed, "warmup")
    theta = np.zeros(env.d_policy)
    q_min = 1.0
    for _ in range(cfg.warmup):
        _, _, sol, _ = npg.batch(theta, rng)
        pos = sol.weights[sol.weights > 0]
        q_min = min(q_min, float(pos.min()))
    return min(1.0 / (2.0 * cfg.beta * q_min), DEFAULT_ETA_CAP)


def train_robust_policy(cfg, env, dataset, reward, opt=None, keep_iterates=False):
    """Returns (PolicyParams of the final iterate, TrainReport).

    ``dataset`` is a PreferenceDataset (its prompts are used) or a prompt index
    vector. ``reward`` is the estimated reward model (RewardParams); the reward
    table is <omega, phi> + reward_shift. When ``opt`` (PolicyParams of an
    optimal policy) is given, the potential and concentrability columns are
    filled in.
    """
    prompts = _prompts_of(dataset, env)
    omega = np.asarray(getattr(reward, "omega", reward), dtype=float)
    if omega.shape != (env.d_reward,):
        raise ContractError("reward parameters do not match the env")
    shift = float(getattr(reward, "radius_F", env.F)) if cfg.reward_shift is None \
        else float(cfg.reward_shift)
    rewards = env.rewards(omega, shift)
    eta = default_step_size(cfg, env, prompts, rewards) if cfg.eta == "auto" else float(cfg.eta)
    npg = _NPG(cfg, env, prompts, rewards)
    theta = np.zeros(env.d_policy)
    opt_theta = None if opt is None else np.asarray(getattr(opt, "theta", opt), dtype=float)
    meta = {"trainer": "policy", "config_digest": cfg.digest(), "build_id": io.build_id(),
            "eta": io.format_float(eta), "reward_shift": io.format_float(shift)}
    rep = TrainReport.empty(cfg.T, meta)
    cols = rep.columns
    traj = np.empty((cfg.T + 1, env.d_policy)) if keep_iterates else None
    limit = cfg.B * (1.0 + 1e-12)
    X = env.num_prompts
    t0 = time.perf_counter()
    for t in range(cfg.T):
        if keep_iterates:
            traj[t] = theta
        xs, vals, sol, (v_xy, _, grad, probs, score) = npg.batch(theta, npg.batch_rng)
        wq = np.bincount(xs, weights=sol.weights, minlength=X)
        g = wq @ grad
        G = np.einsum("x,xij->ij", wq, fisher_table(probs, score))
        pinv, lam, cutoff = pinv_eig(G, cfg.pinv_rel_tol)
        gnorm = float(np.linalg.norm(g))
        if lam[-1] <= 0.0 and gnorm > 0.0:
            raise DegenerateGeometryError(
                f"weighted Fisher matrix vanished at iteration {t + 1}",
                iteration=t + 1, grad_norm=gnorm)
        w = pinv @ g
        resid = v_xy - score @ w
        above = lam[lam > cutoff]
        cols["robust_minibatch_loss"][t] = sol.objective
        cols["uniform_minibatch_loss"][t] = float(vals.mean())
        cols["grad_norm"][t] = gnorm
        cols["mass_moved"][t] = sol.mass_moved
        cols["fisher_min_eig"][t] = float(above.min()) if lam[-1] > 0 and above.size else 0.0
        cols["compat_loss"][t] = float(wq @ np.sum(probs * resid ** 2, axis=1))
        if opt_theta is not None:
            cols["potential_or_nan"][t] = potential(theta, opt_theta, env)
            popt = np.exp(log_policy_table(opt_theta, env))
            cols["concentrability"][t] = float(wq @ np.sum(popt ** 2 / probs, axis=1))
        theta = project_ball(theta + eta * w, cfg.B)
        if np.linalg.norm(theta) > limit:  # pragma: no cover
            raise ContractError("projection left the feasible ball")
        cols["wallclock_ms"][t] = 1e3 * (time.perf_counter() - t0)
    if keep_iterates:
        traj[cfg.T] = theta
        rep.iterates = traj
    return PolicyParams(theta, cfg.B), rep

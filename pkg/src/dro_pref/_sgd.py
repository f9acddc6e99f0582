"""Reweighted projected minibatch SGD for logistic-type pairwise losses.

Shared by the reward and DPO trainers: both losses have the form
softplus(-(scale * <w, a_i> + offset_i)) over dataset rows a_i.
"""
import time

import numpy as np

from . import _kernels as K
from . import io
from .divergence import Divergence, as_divergence
from .errors import ConfigError, ContractError, NumericalError
from .losses import project_ball
from .report import TrainReport

OUTPUT_MODES = ("average", "last", "best")


def check_common(cfg):
    if int(cfg.T) != cfg.T or cfg.T < 1:
        raise ConfigError(f"T must be a positive integer, got {cfg.T}")
    if int(cfg.n) != cfg.n or cfg.n < 1:
        raise ConfigError(f"n must be a positive integer, got {cfg.n}")
    if not (cfg.rho >= 0) or not np.isfinite(cfg.rho):
        raise ConfigError(f"rho must be non-negative, got {cfg.rho}")
    if not 0.0 <= cfg.q_floor < 1.0:
        raise ConfigError(f"q_floor must lie in [0, 1), got {cfg.q_floor}")
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    as_divergence(cfg.divergence)
    if not (isinstance(cfg.eta, str) and cfg.eta == "auto"):
        if isinstance(cfg.eta, str) or not cfg.eta > 0:
            raise ConfigError(f"eta must be positive or 'auto', got {cfg.eta!r}")


def minibatch_indices(rng, N, n, replacement):
    if replacement:
        return rng.integers(0, N, size=n)
    return rng.choice(N, size=n, replace=False)


def robust_sgd(A, offset, scale, radius, init, eta, T, n, rho, divergence, q_floor, seed,
               replacement=True, output="average", keep_iterates=False, meta=None):
    """Run T steps; returns (output parameter vector, TrainReport)."""
    N, d = A.shape
    if not replacement and N < n:
        raise ConfigError(f"dataset has {N} examples, fewer than minibatch size {n} "
                          "with sampling without replacement")
    if output not in OUTPUT_MODES:
        raise ConfigError(f"output must be one of {OUTPUT_MODES}, got {output!r}")
    kind = K.TV if as_divergence(divergence) is Divergence.TV else K.CHI2
    A = np.ascontiguousarray(A, dtype=np.float64)
    offset = np.ascontiguousarray(offset, dtype=np.float64)
    rng = io.phase_rng(seed, "minibatch")
    w = np.array(init, dtype=np.float64)
    total = np.zeros(d)
    best, best_loss = w.copy(), np.inf
    rep = TrainReport.empty(T, meta)
    cols = rep.columns
    traj = np.empty((T, d)) if keep_iterates else None
    u = 1.0 / n
    limit = radius * (1.0 + 1e-12)
    t0 = time.perf_counter()
    for t in range(T):
        idx = minibatch_indices(rng, N, n, replacement)
        losses, q, g, status, res = K.robust_logistic_step(
            A, offset, idx, w, float(scale), float(rho), kind, float(q_floor))
        if status < 0:
            raise NumericalError("chi-square weight solve failed", iteration=t + 1,
                                 residual=res, tol=K.CHI2_TOL)
        robust = float(q @ losses)
        if keep_iterates:
            traj[t] = w
        total += w
        if output == "best" and robust < best_loss:
            best, best_loss = w.copy(), robust
        cols["robust_minibatch_loss"][t] = robust
        cols["uniform_minibatch_loss"][t] = float(losses.mean())
        cols["grad_norm"][t] = float(np.linalg.norm(g))
        cols["mass_moved"][t] = 0.5 * float(np.abs(q - u).sum())
        w = project_ball(w - eta * g, radius)
        if np.linalg.norm(w) > limit:  # pragma: no cover - guarded by project_ball
            raise ContractError("projection left the feasible ball")
        cols["wallclock_ms"][t] = 1e3 * (time.perf_counter() - t0)
    rep.iterates = traj
    if output == "average":
        return total / T, rep
    if output == "last":
        return w, rep
    return best, rep

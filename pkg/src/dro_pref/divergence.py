"""Worst-case reweighting of a minibatch or population inside a divergence ball.

Two ball shapes are supported around a reference distribution p:
  tv    : 0.5 * sum |q_i - p_i| <= rho
  chi2  : sum p_i * phi(q_i / p_i) <= rho with phi(t) = (t - 1)^2 / 2
For uniform p the chi2 ball reads (1/(2n)) sum (n q_i - 1)^2 <= rho.
"""
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from itertools import combinations

import numpy as np

from . import _kernels as K
from .errors import ConfigError, ContractError, DimensionTooLargeError, NumericalError


class Divergence(str, Enum):
    TV = "tv"
    CHI2 = "chi2"


class Sense(str, Enum):
    MAX = "max"
    MIN = "min"


def as_divergence(kind):
    try:
        return Divergence(kind)
    except ValueError:
        raise ConfigError(f"unknown divergence {kind!r}; expected 'tv' or 'chi2'") from None


def as_sense(sense):
    try:
        return Sense(sense)
    except ValueError:
        raise ConfigError(f"unknown sense {sense!r}; expected 'max' or 'min'") from None


@dataclass(frozen=True)
class DivergenceSpec:
    kind: Divergence = Divergence.TV
    rho: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", as_divergence(self.kind))
        if not (self.rho >= 0.0) or not np.isfinite(self.rho):
            raise ConfigError(f"rho must be a finite non-negative number, got {self.rho}")
        object.__setattr__(self, "rho", float(self.rho))


@dataclass
class WeightSolution:
    weights: np.ndarray
    objective: float
    mass_moved: float
    sense: Sense


def divergence_value(q, p, kind):
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    if as_divergence(kind) is Divergence.TV:
        return 0.5 * float(np.abs(q - p).sum())
    return 0.5 * float(np.sum((q - p) ** 2 / p))


def _check_losses(losses):
    x = np.ascontiguousarray(losses, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ContractError("losses must be a non-empty vector")
    if not np.all(np.isfinite(x)):
        raise ContractError("losses must be finite")
    return x


def _check_dist(p, n):
    p = np.ascontiguousarray(p, dtype=np.float64)
    if p.shape != (n,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ContractError("reference must be a probability vector matching the values")
    return p


def _solve(p, x, rho, kind, sense):
    """Dispatch to the kernels on the support of p; returns q over all atoms."""
    maximize = sense is Sense.MAX
    if kind is Divergence.TV:
        q, _ = K.tv_shift(p, x, rho, maximize)
        return q
    support = p > 0
    if support.all():
        ps, xs = p, x
    else:
        ps, xs = p[support], x[support]
    q_s, res, status = K.chi2_max(xs if maximize else -xs, ps, rho, K.CHI2_TOL, K.CHI2_MAX_ITER)
    if status < 0:
        raise NumericalError("chi-square bisection did not reach tolerance",
                             residual=res, rho=rho, tol=K.CHI2_TOL)
    if support.all():
        return q_s
    q = np.zeros_like(p)
    q[support] = q_s
    return q


def shift_distribution(p, values, rho, kind="tv", sense="max"):
    """Most adverse distribution within ``rho`` of ``p`` for the linear
    objective <q, values>. Mass is never placed outside the support of p."""
    x = _check_losses(values)
    p = _check_dist(p, x.size)
    spec = DivergenceSpec(kind, rho)
    sense = as_sense(sense)
    q = _solve(p, x, spec.rho, spec.kind, sense)
    return WeightSolution(q, float(q @ x), 0.5 * float(np.abs(q - p).sum()), sense)


def worst_case_weights(losses, spec, sense="max", q_floor=0.0):
    """Weights over a minibatch of ``n`` losses, reference uniform 1/n.

    ``q_floor`` = alpha mixes the solution as (1 - alpha) q + alpha / n so every
    weight stays at least alpha / n (useful when 1/q_min enters a step size).
    """
    x = _check_losses(losses)
    if not 0.0 <= q_floor <= 1.0:
        raise ConfigError("q_floor must lie in [0, 1]")
    sense = as_sense(sense)
    n = x.size
    u = np.full(n, 1.0 / n)
    q = _solve(u, x, spec.rho, spec.kind, sense)
    if q_floor > 0.0:
        q = (1.0 - q_floor) * q + q_floor / n
    return WeightSolution(q, float(q @ x), 0.5 * float(np.abs(q - u).sum()), sense)


def worst_case_weights_tv(losses, rho, sense="max", q_floor=0.0):
    return worst_case_weights(losses, DivergenceSpec(Divergence.TV, rho), sense, q_floor)


def worst_case_weights_chi2(losses, rho, sense="max", q_floor=0.0):
    return worst_case_weights(losses, DivergenceSpec(Divergence.CHI2, rho), sense, q_floor)


def simplex_grid(n, resolution):
    """All points of the probability simplex whose coordinates are multiples
    of ``resolution`` (which must divide 1). The result is cached and read-only."""
    m = int(round(1.0 / resolution))
    if abs(m * resolution - 1.0) > 1e-9:
        raise ContractError("resolution must divide 1")
    return _simplex_grid(int(n), m)


@lru_cache(maxsize=16)
def _simplex_grid(n, m):
    # stars and bars: choose n-1 bar positions among m+n-1 slots
    bars = np.array(list(combinations(range(m + n - 1), n - 1)), dtype=np.int64).reshape(-1, n - 1)
    edges = np.concatenate([np.full((len(bars), 1), -1), bars,
                            np.full((len(bars), 1), m + n - 1)], axis=1)
    counts = np.diff(edges, axis=1) - 1
    grid = counts / m
    grid.setflags(write=False)
    return grid


def oracle_weights(losses, spec, sense="max", resolution=0.01, reference=None):
    """Brute-force optimum over a simplex grid; only for n <= 4."""
    x = _check_losses(losses)
    n = x.size
    if n > 4:
        raise DimensionTooLargeError(f"grid oracle supports n <= 4, got {n}")
    sense = as_sense(sense)
    p = np.full(n, 1.0 / n) if reference is None else _check_dist(reference, n)
    # the reference itself is always feasible but may be off-grid (1/3, ...)
    Q = np.vstack([p, simplex_grid(n, resolution)])
    if spec.kind is Divergence.TV:
        div = 0.5 * np.abs(Q - p).sum(axis=1)
    else:
        div = 0.5 * np.sum((Q - p) ** 2 / p, axis=1)
    feasible = div <= spec.rho + 1e-9
    obj = Q @ x
    obj = np.where(feasible, obj, -np.inf if sense is Sense.MAX else np.inf)
    k = int(np.argmax(obj) if sense is Sense.MAX else np.argmin(obj))
    q = Q[k]
    return WeightSolution(q, float(obj[k]), 0.5 * float(np.abs(q - p).sum()), sense)

"""Reference optima of the population robust objectives.

Reward and DPO objectives are convex in the parameters (a worst case over a
convex set of mixtures of convex losses), so they are solved as one convex
program through the divergence-ball dual and then re-scored with the exact
evaluator. The policy value is not concave in the softmax parameters; small
problems use a dense grid over the ball plus local ascent, larger ones
multi-start projected gradient ascent.
"""
from itertools import permutations

import cvxpy as cp
import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

from . import _kernels as K
from . import io
from .divergence import Divergence, as_divergence, shift_distribution
from .errors import ContractError, NumericalError
from .evaluation import pair_weights, robust_value_grid
from .losses import (PolicyParams, RewardParams, dpo_design, project_ball, softplus,
                     value_tables)


class PairObjective:
    """Robust objective sum over groups g of q_g * sum_a C[g, a] loss_a with
    loss_a = softplus(-(scale * <w, A[a]> + offset[a])) and q in the ball
    around the group distribution p."""

    def __init__(self, A, offset, scale, C, p, radius, rho, kind):
        self.A = np.asarray(A, dtype=float)
        self.offset = np.asarray(offset, dtype=float)
        self.scale = float(scale)
        self.C = sp.csr_matrix(C)
        self.p = np.asarray(p, dtype=float)
        self.radius = float(radius)
        self.rho = float(rho)
        self.kind = as_divergence(kind)

    def group_losses(self, w):
        z = self.scale * (self.A @ w) + self.offset
        return self.C @ softplus(-z)

    def value(self, w):
        return shift_distribution(self.p, self.group_losses(w), self.rho, self.kind).objective

    def subgradient(self, w):
        z = self.scale * (self.A @ w) + self.offset
        losses = self.C @ softplus(-z)
        q = shift_distribution(self.p, losses, self.rho, self.kind).weights
        coef = -self.scale / (1.0 + np.exp(z))
        return self.A.T @ ((self.C.T @ q) * coef)

    def solve_convex(self):
        d = self.A.shape[1]
        w = cp.Variable(d)
        eta = cp.Variable()
        lam = cp.Variable(nonneg=True)
        z = self.scale * (self.A @ w) + self.offset
        gl = self.C @ cp.logistic(-z)
        cons = [cp.norm(w, 2) <= self.radius]
        if self.kind is Divergence.TV:
            cons.append(gl - eta <= lam)
            obj = eta + 2.0 * self.rho * lam + self.p @ cp.maximum(gl - eta, -lam)
        else:
            s = cp.Variable(self.p.size, nonneg=True)
            cons.append(s >= gl - eta + lam)
            obj = (lam * (self.rho - 0.5) + eta
                   + cp.quad_over_lin(cp.multiply(np.sqrt(self.p), s), 2.0 * lam))
        prob = cp.Problem(cp.Minimize(obj), cons)
        try:
            prob.solve(solver=cp.CLARABEL)
        except cp.SolverError as e:
            raise NumericalError(f"convex oracle failed: {e}") from None
        if w.value is None or prob.status not in ("optimal", "optimal_inaccurate"):
            raise NumericalError(f"convex oracle status {prob.status}")
        return project_ball(w.value, self.radius)

    def solve_pgd(self, starts=32, iters=3000, seed=0, step=None):
        """Multi-start projected subgradient descent with diminishing steps;
        best value over all starts and iterates."""
        rng = io.phase_rng(seed, "oracle")
        d = self.A.shape[1]
        step = self.radius if step is None else step
        best_w, best_v = None, np.inf
        for s in range(starts):
            if s == 0:
                w = np.zeros(d)
            else:
                u = rng.standard_normal(d)
                w = u / np.linalg.norm(u) * self.radius * rng.random() ** (1.0 / d)
            for k in range(1, iters + 1):
                v = self.value(w)
                if v < best_v:
                    best_w, best_v = w.copy(), v
                g = self.subgradient(w)
                gn = np.linalg.norm(g)
                if gn == 0.0:
                    break
                w = project_ball(w - step / np.sqrt(k) * g / gn, self.radius)
        return best_w

    def grid(self, resolution=0.01):
        """Dense grid over the ball (d <= 2)."""
        d = self.A.shape[1]
        if d > 2:
            raise ContractError("grid oracle is limited to d <= 2")
        ticks = np.arange(-self.radius, self.radius + resolution / 2, resolution)
        pts = np.stack(np.meshgrid(*([ticks] * d), indexing="ij"), -1).reshape(-1, d)
        pts = pts[np.linalg.norm(pts, axis=1) <= self.radius + 1e-12]
        vals = np.array([self.value(w) for w in pts])
        k = int(np.argmin(vals))
        return pts[k], float(vals[k])


def _prompt_groups(env):
    """Atoms = all ordered pairs per prompt; groups = prompts weighted by the
    conditional pair/label probabilities."""
    X = env.num_prompts
    W = pair_weights(env)
    x, a, b = np.nonzero(W)
    C = sp.csr_matrix((W[x, a, b], (x, np.arange(x.size))), shape=(X, x.size))
    return np.stack([x, a, b], axis=1), C, env.source_dist


def _joint_groups(atoms):
    m = len(atoms)
    return atoms.examples, sp.identity(m, format="csr"), atoms.prob


def _groups(env, atoms):
    return _prompt_groups(env) if atoms is None else _joint_groups(atoms)


def reward_objective(env, rho, kind="tv", atoms=None, F=None):
    ex, C, p = _groups(env, atoms)
    f = env.reward_features
    A = f[ex[:, 0], ex[:, 1]] - f[ex[:, 0], ex[:, 2]]
    return PairObjective(A, np.zeros(len(A)), 1.0, C, p, env.F if F is None else F, rho, kind)


def dpo_objective(env, beta, rho, kind="tv", atoms=None, B=None):
    ex, C, p = _groups(env, atoms)
    A, offset = dpo_design(env, ex, beta)
    return PairObjective(A, offset, beta, C, p, env.B if B is None else B, rho, kind)


def _solve(obj, method):
    if method == "convex":
        return obj.solve_convex()
    if method == "pgd":
        return obj.solve_pgd()
    if method == "grid":
        return obj.grid()[0]
    raise ContractError(f"unknown oracle method {method!r}")


def oracle_optimum_reward(env, rho, kind="tv", atoms=None, method="convex", F=None):
    """Minimiser of the robust BT loss over the F-ball. ``atoms=None`` uses the
    prompt-marginal population objective; pass an AtomDist for the joint one."""
    obj = reward_objective(env, rho, kind, atoms, F)
    w = _solve(obj, method)
    return RewardParams(w, obj.radius), obj.value(w)


def oracle_optimum_dpo(env, kl, rho, kind="tv", atoms=None, method="convex", B=None):
    obj = dpo_objective(env, kl.beta, rho, kind, atoms, B)
    th = _solve(obj, method)
    return PolicyParams(th, obj.radius), obj.value(th)


# -- policy -----------------------------------------------------------------

def _value_supergradient(theta, env, beta, rewards, rho, kind):
    _, V, grad, _, _ = value_tables(theta, env, beta, rewards)
    sol = shift_distribution(env.source_dist, V, rho, kind, "min")
    return sol.objective, sol.weights @ grad


def _ascend(theta, env, beta, rewards, rho, kind, radius, iters, step):
    best_t, best_v = theta.copy(), -np.inf
    for k in range(1, iters + 1):
        v, g = _value_supergradient(theta, env, beta, rewards, rho, kind)
        if v > best_v:
            best_t, best_v = theta.copy(), v
        gn = np.linalg.norm(g)
        if gn < 1e-14:
            break
        theta = project_ball(theta + step / np.sqrt(k) * g / gn, radius)
    return best_t, best_v


def _tv_vertex_weights(p, rho):
    """Greedy min-sense TV weights for every ordering of the prompts. The
    robust value at any theta is the minimum of these fixed weightings."""
    W = set()
    for order in permutations(range(p.size)):
        vals = np.empty(p.size)
        vals[list(order)] = np.arange(p.size, dtype=float)
        q, _ = K.tv_shift_np(p, vals, rho, False)
        W.add(tuple(np.round(q, 15)))
    return np.array(sorted(W))


def _polish_tv(theta, env, beta, rewards, rho, radius):
    """Solve max t s.t. t <= <q_k, V(theta)> for all vertex weightings q_k,
    |theta| <= radius, by SLSQP started at ``theta``."""
    Q = _tv_vertex_weights(env.source_dist, rho)
    d = theta.size

    def parts(z):
        _, V, grad, _, _ = value_tables(z[:d], env, beta, rewards)
        return V, grad

    cons = [{"type": "ineq",
             "fun": lambda z: Q @ parts(z)[0] - z[d],
             "jac": lambda z: np.hstack([Q @ parts(z)[1], -np.ones((len(Q), 1))])},
            {"type": "ineq",
             "fun": lambda z: radius ** 2 - z[:d] @ z[:d],
             "jac": lambda z: np.append(-2.0 * z[:d], 0.0)}]
    V0, _ = parts(theta)
    z0 = np.append(theta, float(np.min(Q @ V0)))
    res = minimize(lambda z: -z[d], z0, jac=lambda z: np.append(np.zeros(d), -1.0),
                   constraints=cons, method="SLSQP", options={"ftol": 1e-15, "maxiter": 500})
    return project_ball(res.x[:d], radius)


def oracle_optimum_policy(env, rewards, kl, rho, kind="tv", B=None, resolution=0.01,
                          starts=32, iters=2000, seed=0):
    """Maximiser of the worst-case KL-regularised value over the B-ball.

    ``rewards`` is an (X, Y) reward table (e.g. ``env.rewards(omega, shift)``).
    Returns (PolicyParams, value, grid_value); ``grid_value`` is the best
    value on the resolution grid (NaN when d > 2).
    """
    B = env.B if B is None else float(B)
    d = env.d_policy
    beta = kl.beta
    if d <= 2:
        ticks = np.arange(-B, B + resolution / 2, resolution)
        pts = np.stack(np.meshgrid(*([ticks] * d), indexing="ij"), -1).reshape(-1, d)
        pts = pts[np.linalg.norm(pts, axis=1) <= B + 1e-12]
        vals = np.concatenate([robust_value_grid(pts[i:i + 20000], env, beta, rewards, rho, kind)
                               for i in range(0, len(pts), 20000)])
        k = int(np.argmax(vals))
        grid_value = float(vals[k])
        starts_list = [pts[k]]
        step = 2 * resolution
    else:
        grid_value = float("nan")
        rng = io.phase_rng(seed, "oracle")
        starts_list = [np.zeros(d)]
        for _ in range(starts - 1):
            u = rng.standard_normal(d)
            starts_list.append(u / np.linalg.norm(u) * B * rng.random() ** (1.0 / d))
        step = B
    best_t, best_v = None, -np.inf
    for t0 in starts_list:
        t, v = _ascend(np.array(t0, dtype=float), env, beta, rewards, rho, kind, B, iters, step)
        if v > best_v:
            best_t, best_v = t, v
    if as_divergence(kind) is Divergence.TV and env.num_prompts <= 6:
        cand = _polish_tv(best_t, env, beta, rewards, rho, B)
        v = robust_value_grid(cand[None], env, beta, rewards, rho, kind)[0]
        if v > best_v:
            best_t, best_v = cand, v
    if d <= 2 and grid_value > best_v:
        best_t, best_v = pts[k], grid_value
    return PolicyParams(best_t, B), float(best_v), grid_value


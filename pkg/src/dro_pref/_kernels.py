"""Hot inner-loop kernels.

Each kernel exists twice: an explicit-loop version compiled with numba
``@njit`` and a vectorised pure-numpy version. ``DRO_PREF_NUMBA=0`` (or a
missing numba install) routes the public names to the numpy versions. Both
variants stay importable under ``*_nb`` / ``*_np`` so tests and
``benchmarks/bench_kernels.py`` can compare them directly.

Exception: ``tv_max_rows`` always uses the numpy version. It sorts many short
rows at once, where numpy's vectorised sort beats a per-row compiled loop.
"""
import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("DRO_PREF_NUMBA", "1").lower() not in (
    "0", "false", "no", "off")

TV, CHI2 = 0, 1
CHI2_TOL = 1e-10
CHI2_MAX_ITER = 200


def _njit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True)(fn)


def backend():
    return "numba" if USE_NUMBA else "numpy"


# -- scalar helpers ---------------------------------------------------------

@_njit
def _softplus(u):
    if u > 0.0:
        return u + math.log1p(math.exp(-u))
    return math.log1p(math.exp(u))


@_njit
def _sigmoid(z):
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


# -- TV greedy shift --------------------------------------------------------

@_njit
def tv_shift_nb(p, values, rho, maximize):
    n = values.shape[0]
    q = p.copy()
    if maximize:
        order = np.argsort(values, kind="mergesort")
        top = np.argmax(values)
    else:
        order = np.argsort(-values, kind="mergesort")
        top = np.argmin(values)
    delta = min(rho, 1.0 - p[top])
    if delta <= 0.0:
        return q, 0.0
    remaining = delta
    for k in range(n):
        i = order[k]
        if i == top:
            continue
        if remaining <= 0.0:
            break
        take = min(p[i], remaining)
        q[i] = p[i] - take
        remaining -= take
    moved = delta - remaining
    q[top] = p[top] + moved
    return q, moved


def tv_shift_np(p, values, rho, maximize):
    order = np.argsort(values if maximize else -values, kind="stable")
    top = int(np.argmax(values) if maximize else np.argmin(values))
    delta = min(rho, 1.0 - p[top])
    q = p.copy()
    if delta <= 0.0:
        return q, 0.0
    order = order[order != top]
    caps = p[order]
    before = np.cumsum(caps) - caps
    take = np.clip(delta - before, 0.0, caps)
    q[order] = caps - take
    moved = float(take.sum())
    q[top] = p[top] + moved
    return q, moved


@_njit
def tv_max_rows_nb(losses, rho):
    m, n = losses.shape
    out = np.empty(m)
    delta = min(rho, (n - 1.0) / n)
    u = 1.0 / n
    for r in range(m):
        s = np.sort(losses[r])
        remaining = delta
        acc = 0.0
        for j in range(n):
            take = min(u, remaining) if remaining > 0.0 else 0.0
            remaining -= take
            acc += (u - take) * s[j]
        out[r] = acc + delta * s[n - 1]
    return out


def tv_max_rows_np(losses, rho):
    m, n = losses.shape
    s = np.sort(losses, axis=1)
    delta = min(rho, (n - 1.0) / n)
    take = np.clip(delta - np.arange(n) / n, 0.0, 1.0 / n)
    return s @ (1.0 / n - take) + delta * s[:, -1]


@_njit
def tv_objective_rows_nb(p, values, rho, maximize):
    m = values.shape[0]
    out = np.empty(m)
    for r in range(m):
        q, _ = tv_shift_nb(p, values[r], rho, maximize)
        out[r] = q @ values[r]
    return out


def tv_objective_rows_np(p, values, rho, maximize):
    m, n = values.shape
    v = values if maximize else -values
    order = np.argsort(v, axis=1, kind="stable")
    sv = np.take_along_axis(v, order, axis=1)
    caps = p[order]
    # the target is the first maximiser; stable sort puts it after equal
    # values with smaller index, so locate it explicitly
    top = np.argmax(v, axis=1)
    is_top = order == top[:, None]
    ptop = p[top]
    delta = np.minimum(rho, 1.0 - ptop)
    caps_nt = np.where(is_top, 0.0, caps)
    before = np.cumsum(caps_nt, axis=1) - caps_nt
    take = np.clip(delta[:, None] - before, 0.0, caps_nt)
    moved = take.sum(axis=1)
    obj = np.sum((caps - take) * sv, axis=1) + moved * v[np.arange(m), top]
    return obj if maximize else -obj


# -- chi-square ball --------------------------------------------------------
# Max-sense solution over {q : sum p_i phi(q_i / p_i) <= rho}, phi(t) = (t-1)^2/2,
# has the form q_i ∝ p_i * max(0, x_i - eta). Normalisation is exact for every
# eta, so only eta is bisected; the divergence is increasing in eta.

@_njit
def _chi2_div(q, p):
    acc = 0.0
    for i in range(q.shape[0]):
        t = q[i] - p[i]
        acc += t * t / p[i]
    return 0.5 * acc


@_njit
def chi2_max_nb(x, p, rho, tol, max_iter):
    n = x.shape[0]
    if n == 1 or rho <= 0.0:
        return p.copy(), 0.0, 0
    xmax = x.max()
    xmin = x.min()
    if xmax == xmin:
        return p.copy(), 0.0, 0
    ptop = 0.0
    for i in range(n):
        if x[i] == xmax:
            ptop += p[i]
    q = np.zeros(n)
    if 0.5 * (1.0 / ptop - 1.0) <= rho:
        for i in range(n):
            if x[i] == xmax:
                q[i] = p[i] / ptop
        return q, 0.0, 0
    # the maximiser is invariant to affine maps of x; work on [0, 1] so the
    # bisection bracket never sits in the subnormal range
    x = (x - xmin) / (xmax - xmin)
    xmin, xmax = 0.0, 1.0
    mean = 0.0
    for i in range(n):
        mean += p[i] * x[i]
    var = 0.0
    for i in range(n):
        var += p[i] * (x[i] - mean) ** 2
    c = math.sqrt(var / (2.0 * rho))
    if mean - c <= xmin:
        # unclipped: q = p (x - eta) / (mean - eta) with eta = mean - c,
        # written so that c = inf (tiny rho) stays finite
        q = p * (1.0 + (x - mean) / c)
        return q, _chi2_div(q, p) - rho, 0
    lo, hi = xmin, xmax
    s = p * (x - lo)
    q_lo = s / s.sum()
    res_lo = _chi2_div(q_lo, p) - rho
    for it in range(max_iter):
        mid = 0.5 * (lo + hi)
        if not (lo < mid < hi):
            # bracket is down to adjacent floats: eta is exact to machine
            # precision, return the feasible endpoint
            return q_lo, res_lo, it + 1
        s = p * np.maximum(x - mid, 0.0)
        q = s / s.sum()
        res = _chi2_div(q, p) - rho
        if abs(res) <= tol:
            return q, res, it + 1
        if res > 0.0:
            hi = mid
        else:
            lo, q_lo, res_lo = mid, q, res
    return q_lo, res_lo, -1


def chi2_max_np(x, p, rho, tol, max_iter):
    n = x.shape[0]
    if n == 1 or rho <= 0.0:
        return p.copy(), 0.0, 0
    xmax, xmin = x.max(), x.min()
    if xmax == xmin:
        return p.copy(), 0.0, 0
    top = x == xmax
    ptop = float(p[top].sum())
    if 0.5 * (1.0 / ptop - 1.0) <= rho:
        return np.where(top, p / ptop, 0.0), 0.0, 0
    x = (x - xmin) / (xmax - xmin)
    xmin, xmax = 0.0, 1.0

    def div(q):
        return float(0.5 * np.sum((q - p) ** 2 / p))

    mean = float(p @ x)
    c = math.sqrt(float(p @ (x - mean) ** 2) / (2.0 * rho))
    if mean - c <= xmin:
        q = p * (1.0 + (x - mean) / c)
        return q, div(q) - rho, 0
    lo, hi = float(xmin), float(xmax)
    s = p * (x - lo)
    q_lo = s / s.sum()
    res_lo = div(q_lo) - rho
    for it in range(max_iter):
        mid = 0.5 * (lo + hi)
        if not (lo < mid < hi):
            return q_lo, res_lo, it + 1
        s = p * np.maximum(x - mid, 0.0)
        q = s / s.sum()
        res = div(q) - rho
        if abs(res) <= tol:
            return q, res, it + 1
        if res > 0.0:
            hi = mid
        else:
            lo, q_lo, res_lo = mid, q, res
    return q_lo, res_lo, -1


# -- fused robust logistic minibatch step -----------------------------------
# loss_i = softplus(-z_i), z_i = scale * <A[idx_i], w> + offset[idx_i]
# grad_i = -scale * sigmoid(-z_i) * A[idx_i]

@_njit
def robust_logistic_step_nb(A, offset, idx, w, scale, rho, kind, q_floor):
    n = idx.shape[0]
    d = A.shape[1]
    losses = np.empty(n)
    coef = np.empty(n)
    for i in range(n):
        row = idx[i]
        acc = 0.0
        for j in range(d):
            acc += A[row, j] * w[j]
        z = scale * acc + offset[row]
        losses[i] = _softplus(-z)
        coef[i] = -scale * _sigmoid(-z)
    status = 0
    res = 0.0
    if kind == TV:
        q, _ = tv_shift_nb(np.full(n, 1.0 / n), losses, rho, True)
    else:
        q, res, status = chi2_max_nb(losses, np.full(n, 1.0 / n), rho, CHI2_TOL, CHI2_MAX_ITER)
    if q_floor > 0.0:
        q = (1.0 - q_floor) * q + q_floor / n
    g = np.zeros(d)
    for i in range(n):
        c = q[i] * coef[i]
        row = idx[i]
        for j in range(d):
            g[j] += c * A[row, j]
    return losses, q, g, status, res


def robust_logistic_step_np(A, offset, idx, w, scale, rho, kind, q_floor):
    n = idx.shape[0]
    rows = A[idx]
    z = scale * (rows @ w) + offset[idx]
    losses = np.logaddexp(0.0, -z)
    coef = -scale * np.where(z >= 0, np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))),
                             1.0 / (1.0 + np.exp(-np.abs(z))))
    status, res = 0, 0.0
    if kind == TV:
        q, _ = tv_shift_np(np.full(n, 1.0 / n), losses, rho, True)
    else:
        q, res, status = chi2_max_np(losses, np.full(n, 1.0 / n), rho, CHI2_TOL, CHI2_MAX_ITER)
    if q_floor > 0.0:
        q = (1.0 - q_floor) * q + q_floor / n
    g = rows.T @ (q * coef)
    return losses, q, g, status, res


if USE_NUMBA:
    tv_shift = tv_shift_nb
    tv_max_rows = tv_max_rows_np
    tv_objective_rows = tv_objective_rows_nb
    chi2_max = chi2_max_nb
    robust_logistic_step = robust_logistic_step_nb
else:
    tv_shift = tv_shift_np
    tv_max_rows = tv_max_rows_np
    tv_objective_rows = tv_objective_rows_np
    chi2_max = chi2_max_np
    robust_logistic_step = robust_logistic_step_np

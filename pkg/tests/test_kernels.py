"""The compiled and numpy kernel twins must agree."""
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dro_pref import _kernels as K

finite = st.floats(-20, 20, allow_nan=False)
vec = st.integers(1, 10).flatmap(lambda n: arrays(np.float64, n, elements=finite))


def dist(n, seed):
    return np.random.default_rng(seed).dirichlet(np.ones(n))


@given(vec, st.floats(0, 1.5), st.booleans(), st.integers(0, 2 ** 31))
def test_tv_shift_parity(values, rho, maximize, seed):
    p = dist(values.size, seed)
    q1, m1 = K.tv_shift_nb(p, values, rho, maximize)
    q2, m2 = K.tv_shift_np(p, values, rho, maximize)
    np.testing.assert_allclose(q1, q2, atol=1e-15)
    assert m1 == pytest.approx(m2, abs=1e-15)
    assert q1.min() >= 0 and abs(q1.sum() - 1) <= 1e-12
    assert 0.5 * np.abs(q1 - p).sum() <= rho + 1e-12


@given(st.integers(1, 6), st.integers(1, 9), st.floats(0, 1.5), st.integers(0, 2 ** 31))
def test_tv_rows_parity(m, n, rho, seed):
    rng = np.random.default_rng(seed)
    L = rng.integers(-3, 4, size=(m, n)).astype(float)  # small ints give ties
    u = np.full(n, 1.0 / n)
    per_row = np.array([K.tv_shift_np(u, row, rho, True)[0] @ row for row in L])
    np.testing.assert_allclose(K.tv_max_rows_np(L, rho), per_row, atol=1e-12)
    np.testing.assert_allclose(K.tv_max_rows_nb(L, rho), per_row, atol=1e-12)
    p = dist(n, seed)
    for maximize in (True, False):
        ref = np.array([K.tv_shift_np(p, row, rho, maximize)[0] @ row for row in L])
        np.testing.assert_allclose(K.tv_objective_rows_np(p, L, rho, maximize), ref, atol=1e-12)
        np.testing.assert_allclose(K.tv_objective_rows_nb(p, L, rho, maximize), ref, atol=1e-12)


@given(vec, st.floats(0, 3), st.integers(0, 2 ** 31))
def test_chi2_parity(values, rho, seed):
    p = dist(values.size, seed)
    q1, r1, s1 = K.chi2_max_nb(values, p, rho, K.CHI2_TOL, K.CHI2_MAX_ITER)
    q2, r2, s2 = K.chi2_max_np(values, p, rho, K.CHI2_TOL, K.CHI2_MAX_ITER)
    assert s1 >= 0 and s2 >= 0
    np.testing.assert_allclose(q1, q2, atol=1e-9)
    assert 0.5 * np.sum((q1 - p) ** 2 / p) <= rho + 1e-9


@given(st.integers(1, 40), st.integers(1, 5), st.floats(0, 1), st.sampled_from([K.TV, K.CHI2]),
       st.floats(0, 0.5), st.integers(0, 2 ** 31))
def test_robust_step_parity(n, d, rho, kind, q_floor, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((50, d))
    offset = rng.standard_normal(50)
    idx = rng.integers(0, 50, size=n)
    w = rng.standard_normal(d)
    out_nb = K.robust_logistic_step_nb(A, offset, idx, w, 0.7, rho, kind, q_floor)
    out_np = K.robust_logistic_step_np(A, offset, idx, w, 0.7, rho, kind, q_floor)
    for a, b in zip(out_nb[:3], out_np[:3]):
        np.testing.assert_allclose(a, b, atol=1e-9, rtol=1e-9)
    assert out_nb[3] >= 0 and out_np[3] >= 0


def test_robust_step_gradient_matches_assembly():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((20, 3))
    offset = rng.standard_normal(20)
    idx = rng.integers(0, 20, size=8)
    w = rng.standard_normal(3)
    losses, q, g, _, _ = K.robust_logistic_step(A, offset, idx, w, 0.5, 0.3, K.TV, 0.0)
    z = 0.5 * A[idx] @ w + offset[idx]
    np.testing.assert_allclose(losses, np.log1p(np.exp(-z)), atol=1e-14)
    expected = -(q * 0.5 / (1 + np.exp(z))) @ A[idx]
    np.testing.assert_allclose(g, expected, atol=1e-14)


@pytest.mark.parametrize("flag, expected", [("0", "numpy"), ("1", "numba")])
def test_env_flag_selects_backend(flag, expected):
    code = ("from dro_pref import _kernels as K; "
            "print(K.backend(), K.tv_shift.__name__, K.tv_max_rows.__name__)")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True,
                         env={**os.environ, "DRO_PREF_NUMBA": flag}).stdout.split()
    assert out[0] == expected
    assert out[1] == ("tv_shift_np" if expected == "numpy" else "tv_shift_nb")
    assert out[2] == "tv_max_rows_np"

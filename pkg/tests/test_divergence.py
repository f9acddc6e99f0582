import numpy as np
import pytest

from dro_pref.divergence import (DivergenceSpec, divergence_value, oracle_weights,
                                 shift_distribution, simplex_grid, worst_case_weights,
                                 worst_case_weights_chi2, worst_case_weights_tv)
from dro_pref.errors import ConfigError, ContractError, DimensionTooLargeError

def test_tv_examples():
    sol = worst_case_weights_tv([1.0, 2.0, 3.0], 1 / 3)
    np.testing.assert_allclose(sol.weights, [0, 1 / 3, 2 / 3], atol=1e-15)
    assert sol.objective == pytest.approx(8 / 3, abs=1e-15)
    assert sol.mass_moved == pytest.approx(1 / 3, abs=1e-15)

    sol = worst_case_weights_tv([1.0, 2.0, 3.0], 1.0)
    np.testing.assert_allclose(sol.weights, [0, 0, 1], atol=1e-15)
    assert sol.mass_moved == pytest.approx(2 / 3, abs=1e-15)

    sol = worst_case_weights_tv([1.0, 2.0, 3.0], 1.0, "min")
    np.testing.assert_allclose(sol.weights, [1, 0, 0], atol=1e-15)


def test_rho_zero_is_uniform():
    for kind in ("tv", "chi2"):
        sol = worst_case_weights([3.0, -1.0, 2.0, 7.0], DivergenceSpec(kind, 0.0))
        assert np.array_equal(sol.weights, np.full(4, 0.25))
        assert sol.mass_moved == 0.0


def test_ties_go_to_lowest_index():
    sol = worst_case_weights_tv([5.0, 1.0, 5.0], 0.2)
    np.testing.assert_allclose(sol.weights, [1 / 3 + 0.2, 1 / 3 - 0.2, 1 / 3], atol=1e-15)


def test_chi2_two_point_against_grid():
    sol = worst_case_weights_chi2([0.0, 1.0], 0.125)
    ref = oracle_weights([0.0, 1.0], DivergenceSpec("chi2", 0.125), resolution=0.001)
    assert sol.objective == pytest.approx(ref.objective, abs=1e-3)
    assert sol.objective >= ref.objective - 1e-12
    assert divergence_value(sol.weights, [0.5, 0.5], "chi2") <= 0.125 + 1e-10


def test_chi2_large_rho_concentrates_on_argmax():
    sol = worst_case_weights_chi2([1.0, 4.0, 4.0, 0.0], 10.0)
    np.testing.assert_allclose(sol.weights, [0, 0.5, 0.5, 0], atol=1e-15)


def test_shift_distribution_example():
    sol = shift_distribution([0.5, 0.5], [0.0, 1.0], 0.25, "tv", "min")
    np.testing.assert_allclose(sol.weights, [0.75, 0.25], atol=1e-15)
    assert sol.objective == pytest.approx(0.25, abs=1e-15)


def test_shift_distribution_matches_grid_with_nonuniform_reference(rng):
    for _ in range(20):
        p = rng.dirichlet(np.ones(3))
        v = rng.normal(size=3)
        for kind in ("tv", "chi2"):
            for sense in ("max", "min"):
                sol = shift_distribution(p, v, 0.15, kind, sense)
                ref = oracle_weights(v, DivergenceSpec(kind, 0.15), sense, 0.005, reference=p)
                bound = 0.005 * np.abs(v).max() * 3
                if sense == "max":
                    assert ref.objective - 1e-12 <= sol.objective <= ref.objective + bound
                else:
                    assert ref.objective - bound <= sol.objective <= ref.objective + 1e-12


def test_q_floor_mixes_toward_uniform():
    sol = worst_case_weights_tv([1.0, 2.0, 3.0, 4.0], 0.5, q_floor=0.2)
    assert sol.weights.min() >= 0.2 / 4 - 1e-15
    assert sol.weights.sum() == pytest.approx(1.0, abs=1e-15)


def test_errors():
    with pytest.raises(ConfigError):
        DivergenceSpec("tv", -0.1)
    with pytest.raises(ConfigError):
        DivergenceSpec("kl", 0.1)
    with pytest.raises(ContractError):
        worst_case_weights_tv([], 0.1)
    with pytest.raises(ContractError):
        worst_case_weights_tv([1.0, np.nan], 0.1)
    with pytest.raises(DimensionTooLargeError):
        oracle_weights(np.arange(5.0), DivergenceSpec("tv", 0.1))
    with pytest.raises(ContractError):
        simplex_grid(3, 0.3)


def test_simplex_grid_counts():
    g = simplex_grid(3, 0.1)
    assert len(g) == 66  # C(12, 2)
    np.testing.assert_allclose(g.sum(axis=1), 1.0)
    assert g.min() >= 0

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bprelab.envmodel import (LINEAR_FRACTIONAL, POISSON, OffspringFamily, check_B2, gamma_b,
                              offspring_pmf, pgf_eval, sample_environment, sample_offspring)

FAMILIES = [LINEAR_FRACTIONAL, POISSON]
K = np.arange(0, 4000)


@pytest.mark.parametrize("fam", FAMILIES)
@given(x=st.floats(-3, 3), z=st.floats(0, 1))
def test_pgf_is_pmf_transform(fam, x, z):
    direct = np.sum(offspring_pmf(fam, x, K) * z ** K)
    assert pgf_eval(fam, x, z) == pytest.approx(direct, rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("fam", FAMILIES)
@given(x=st.floats(-3, 3))
def test_mean_is_exp_X(fam, x):
    assert np.sum(K * offspring_pmf(fam, x, K)) == pytest.approx(np.exp(x), rel=1e-9)


@pytest.mark.parametrize("fam", FAMILIES)
@given(x=st.floats(-2, 2.5), b=st.integers(0, 6))
def test_gamma_b_brute_force(fam, x, b):
    p = offspring_pmf(fam, x, K)
    ref = np.sum((K >= b) * K ** 2 * p) / np.exp(2 * x)
    assert gamma_b(fam, x, b) == pytest.approx(ref, rel=1e-8)


@pytest.mark.parametrize("fam", FAMILIES)
def test_sample_offspring_moments(fam):
    rng = np.random.default_rng(4)
    x, k = 0.3, 5
    s = sample_offspring(fam, np.full(200_000, x), np.full(200_000, k), rng)
    m = np.exp(x)
    var = k * (m * (1 + m) if fam.is_lf else m)
    assert abs(s.mean() - k * m) < 4 * np.sqrt(var / s.size)
    assert s.var() == pytest.approx(var, rel=0.03)
    assert np.all(sample_offspring(fam, 0.0, np.zeros(3), rng) == 0)


def test_sample_offspring_clt_branch():
    s = sample_offspring(LINEAR_FRACTIONAL, np.full(5000, 2.0), np.full(5000, 1e16),
                         np.random.default_rng(0))
    assert s.mean() == pytest.approx(1e16 * np.exp(2.0), rel=1e-6)


def test_check_B2_finite_for_gaussian(gauss):
    for fam in FAMILIES:
        e = check_B2(gauss, fam, 2, 0.1, 100_000, np.random.default_rng(1))
        assert e.extra["finite"] and 0 < e.value < np.inf


def test_check_B2_arguments(gauss):
    with pytest.raises(ValueError):
        check_B2(gauss, POISSON, 1, 0.0, 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        OffspringFamily("binomial")


def test_environment_walk(gauss):
    env = sample_environment(gauss, LINEAR_FRACTIONAL, 7, np.random.default_rng(2))
    assert env.n == 7
    assert np.allclose(np.cumsum(env.log_means), env.walk.partial_sums)
    with pytest.raises(ValueError):
        pgf_eval(POISSON, 0.0, 1.5)

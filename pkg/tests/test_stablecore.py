import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from bprelab.stablecore import (IncrementModel, StableParams, density_at_zero, exact_stable,
                                gaussian, norming, positivity_rho, stable_rvs, two_sided_pareto)


def _scipy_stable(p):
    # same characteristic function, scale sigma = c^{1/alpha}
    return stats.levy_stable(p.alpha, p.beta, scale=p.c ** (1 / p.alpha))


def test_gaussian_density_at_zero():
    assert density_at_zero(gaussian(3.0).limit) == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-9)


@pytest.mark.parametrize("alpha,beta,c", [(1.5, 0.0, 1.0), (1.5, 0.5, 2.0), (0.7, -0.3, 1.0),
                                          (1.0, 0.0, 0.5)])
def test_density_at_zero_matches_scipy(alpha, beta, c):
    p = StableParams(alpha, beta, c)
    assert density_at_zero(p) == pytest.approx(_scipy_stable(p).pdf(0.0), rel=1e-4)


def test_cauchy_density_closed_form():
    assert density_at_zero(StableParams(1.0, 0.0, 2.0)) == pytest.approx(1 / (2 * math.pi), rel=1e-9)


@pytest.mark.parametrize("alpha,beta", [(1.5, 0.5), (0.7, -0.3), (1.8, -0.9)])
def test_positivity_rho_matches_scipy(alpha, beta):
    p = StableParams(alpha, beta, 1.0)
    assert positivity_rho(p) == pytest.approx(_scipy_stable(p).sf(0.0), abs=2e-4)


@pytest.mark.parametrize("alpha,beta", [(1.5, 0.0), (1.5, 0.6), (0.8, 0.4)])
def test_stable_sampler_ks(alpha, beta):
    p = StableParams(alpha, beta, 1.3)
    x = stable_rvs(p, np.random.default_rng(1), 4000)
    d = _scipy_stable(p)
    qs = np.quantile(x, [0.1, 0.3, 0.5, 0.7, 0.9])
    assert np.max(np.abs(d.cdf(qs) - [0.1, 0.3, 0.5, 0.7, 0.9])) < 0.03


def test_gaussian_limit_scaling():
    m = gaussian(2.0)
    x = m.sample(np.random.default_rng(0), 200_000)
    assert x.std() == pytest.approx(2.0, rel=0.01)
    nm = norming(m, 100)
    assert nm.a_n == pytest.approx(20.0)
    assert nm.b_n == pytest.approx(1 / (20.0 * 100))


def test_pareto_centred_and_tail():
    m = two_sided_pareto(1.5, balance=0.4)
    x = m.sample(np.random.default_rng(2), 400_000)
    assert abs(np.median(x - x.mean())) < 5
    assert abs(x.mean()) < 0.1
    t = 20.0
    shift = 0.4 * 1.5 / 0.5
    emp = np.mean(x + shift > t)
    assert emp == pytest.approx(0.7 * t ** -1.5, rel=0.1)


def test_pdf_integrates_to_one():
    from scipy import integrate
    assert integrate.quad(gaussian(1.0).pdf, -np.inf, np.inf)[0] == pytest.approx(1.0, abs=1e-9)
    m = two_sided_pareto(1.5, 0.2)
    sh = 0.2 * 1.5 / 0.5
    tot = (integrate.quad(m.pdf, -np.inf, -1 - sh)[0] + integrate.quad(m.pdf, 1 - sh, np.inf)[0])
    assert tot == pytest.approx(1.0, abs=1e-6)


def test_invalid_parameters():
    with pytest.raises(ValueError):
        StableParams(2.0, 0.5)
    with pytest.raises(ValueError):
        StableParams(1.0, 0.3)
    with pytest.raises(ValueError):
        StableParams(1.5, 0.0, -1.0)
    with pytest.raises(ValueError):
        norming(gaussian(), 0)


@given(st.sampled_from(["gaussian", "stable", "pareto"]), st.floats(1.1, 1.9),
       st.floats(-0.8, 0.8))
def test_config_roundtrip(fam, alpha, beta):
    cfg = {"family": fam, "sigma": 1.5, "alpha": alpha, "beta": beta, "balance": beta}
    m = IncrementModel.from_config(cfg)
    assert IncrementModel.from_config(m.to_config()) == m
    assert IncrementModel.from_config(m.to_config()).key() == m.key()


@given(st.floats(0.3, 1.95).filter(lambda a: abs(a - 1) > 0.05), st.floats(-0.95, 0.95))
def test_rho_in_unit_interval(alpha, beta):
    r = positivity_rho(StableParams(alpha, beta))
    assert 0 < r < 1
    if alpha > 1:
        # positivity parameter of a spectrally admissible law with alpha > 1
        assert 1 - 1 / alpha <= r + 1e-12 <= 1 / alpha + 2e-12

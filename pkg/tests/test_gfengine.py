import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from bprelab.envmodel import LINEAR_FRACTIONAL, POISSON, EnvRealization, sample_offspring
from bprelab.gfengine import (GenFunChain, O_functional, check_hbound, complement_batch,
                              conditional_pgf, naive_iterate, power_gap, reversed_complement_step,
                              survival_prob)
from bprelab.walks import WalkPath

FAMILIES = [LINEAR_FRACTIONAL, POISSON]
incs = arrays(float, st.integers(1, 25), elements=st.floats(-2.5, 2.5))


def _env(x, fam):
    return EnvRealization(WalkPath.from_increments(x), fam)


@pytest.mark.parametrize("fam", FAMILIES)
@given(x=incs, z=st.floats(0, 1))
def test_chain_matches_nesting(fam, x, z):
    ch = GenFunChain(_env(x, fam))
    assert ch(0, x.size, z) == pytest.approx(naive_iterate(fam, x, z), rel=1e-9, abs=1e-12)
    k = x.size // 2
    assert ch(k, x.size, z) == pytest.approx(naive_iterate(fam, x[k:], z), rel=1e-9, abs=1e-12)


@given(x=incs, w=st.floats(1e-6, 1))
def test_lf_complement_identity(x, w):
    # 1/(1 - F_{0,n}(1-w)) = sum_{k<n} e^{-S_k} + e^{-S_n}/w
    S = np.concatenate([[0.0], np.cumsum(x)])
    ref = 1.0 / (np.sum(np.exp(-S[:-1])) + np.exp(-S[-1]) / w)
    c = GenFunChain(_env(x, LINEAR_FRACTIONAL)).complement(0, x.size, w)
    assert c == pytest.approx(ref, rel=1e-10)
    assert complement_batch(LINEAR_FRACTIONAL, x[None, :], w)[0] == pytest.approx(ref, rel=1e-10)


@pytest.mark.parametrize("fam", FAMILIES)
def test_complement_batch_rows_and_vector_w(fam):
    X = np.random.default_rng(0).standard_normal((6, 40))
    ws = np.array([0.1, 0.5, 1.0])
    out = complement_batch(fam, X, ws)
    for i in range(6):
        ch = GenFunChain(_env(X[i], fam))
        assert np.allclose(out[i], ch.complement(0, 40, ws), rtol=1e-10)


def test_lf_survival_keeps_precision_deep_in_the_tail():
    # S_n = -400: survival is about e^{-400}, far below double-precision 1 - F
    x = np.full(400, -1.0)
    p = survival_prob(_env(x, LINEAR_FRACTIONAL))
    S = np.concatenate([[0.0], np.cumsum(x)])
    assert p == pytest.approx(1.0 / np.sum(np.exp(-S)), rel=1e-10)
    assert p > 0


@pytest.mark.parametrize("fam", FAMILIES)
def test_survival_against_population_simulation(fam):
    x = np.random.default_rng(5).normal(0, 0.7, 12)
    env = _env(x, fam)
    rng = np.random.default_rng(6)
    z = np.ones(200_000)
    for xi in x:
        z = sample_offspring(fam, xi, z, rng)
    emp = np.mean(z > 0)
    se = math.sqrt(emp * (1 - emp) / z.size)
    assert abs(survival_prob(env) - emp) < 4 * se
    # conditional pgf at z = 1/2 with one and two ancestors
    assert abs(conditional_pgf(env, 12, 0.5) - np.mean((z > 0) * 0.5 ** z)) < 4 * se


@given(x=incs, z=st.floats(0, 0.99), q=st.integers(1, 5))
def test_conditional_pgf_q(x, z, q):
    ch = GenFunChain(_env(x, LINEAR_FRACTIONAL))
    ref = ch(0, x.size, z) ** q - ch(0, x.size, 0.0) ** q
    assert conditional_pgf(ch, x.size, z, q) == pytest.approx(ref, rel=1e-7, abs=1e-12)


@given(s0=st.floats(1e-12, 0.9), d=st.floats(0, 1), q=st.integers(1, 9))
def test_power_gap(s0, d, q):
    sz = s0 * d
    ref = (1 - sz) ** q - (1 - s0) ** q
    assert power_gap(sz, s0, q) == pytest.approx(ref, rel=1e-7, abs=1e-15)


@pytest.mark.parametrize("fam", FAMILIES)
@given(x=st.floats(-3, 3), w=st.floats(0, 1))
def test_reversed_step_is_one_generation(fam, x, w):
    from bprelab.envmodel import pgf_eval
    assert reversed_complement_step(fam, x, w) == pytest.approx(1 - pgf_eval(fam, x, 1 - w),
                                                                rel=1e-9, abs=1e-14)


def test_O_functional_small_j_quadrature(gauss):
    # j = 1: O_1(z, w) = E[1-f(z); X <= w, X < 0] / E[e^X; X < 0]
    from scipy import integrate, special, stats
    z, w = 0.3, -0.5
    f = lambda x: stats.norm.pdf(x) * special.expit(x + math.log(1 - z))
    num = integrate.quad(f, -np.inf, w)[0]
    den = math.exp(0.5) * stats.norm.cdf(-1.0)
    e = O_functional(gauss, LINEAR_FRACTIONAL, 1, z, w, 400_000, np.random.default_rng(8))
    assert abs(e.value - num / den) < 4 * e.std_error


def test_hbound_no_growth(gauss):
    r = check_hbound(gauss, LINEAR_FRACTIONAL, [5, 20], [0.0, 0.9], [-1.0, 0.0], 50_000,
                     np.random.default_rng(1))
    assert 0 < r["max_ratio"] < np.inf
    assert r["max_by_j"][20] / r["max_by_j"][5] < 2

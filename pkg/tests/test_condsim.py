import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from bprelab.condsim import (F_NEG, F_NONNEG, F_ONE, HKernelGrid, TruncatedFamily,
                             PopulationPath, conditioned_trajectories, conditioned_trajectory,
                             estimate_h, estimate_Wplus, f_B, f_survival, f_survival_sampled,
                             horizon_extrapolate, minus_expectation, minus_pool,
                             plus_expectation, plus_pool, transition_pmf,
                             weighted_ks, weighted_quantile)
from bprelab.envmodel import LINEAR_FRACTIONAL, POISSON, EnvRealization
from bprelab.gfengine import survival_prob
from bprelab.walks import WalkPath

from enumeration import conditioned_path_law, tv


def _env(x, fam):
    return EnvRealization(WalkPath.from_increments(np.asarray(x, dtype=float)), fam)


def _chain_law(env, n, q):
    law = {}

    def rec(z, path, prob, m):
        if m == n:
            law[tuple(path)] = law.get(tuple(path), 0.0) + prob
            return
        j, p = transition_pmf(env, n, m, z)
        for jj, pp in zip(j, p):
            if pp > 0:
                rec(int(jj), path + [int(jj)], prob * pp, m + 1)

    rec(q, [], 1.0, 0)
    return law


@pytest.mark.parametrize("base", [LINEAR_FRACTIONAL, POISSON])
@pytest.mark.parametrize("x", [[0.3], [0.3, -0.5], [0.3, -0.5, 0.8], [-1.0, 1.2, -0.4]])
def test_sampler_law_equals_enumeration(base, x):
    fam = TruncatedFamily(base, 4)
    env = _env(x[:3], fam)
    n = env.n
    exact, _ = conditioned_path_law([fam.pmf(xi) for xi in x[:3]])
    assert tv(exact, _chain_law(env, n, 1)) < 1e-12


def test_sampler_draws_follow_law():
    fam = TruncatedFamily(POISSON, 4)
    x = [0.2, -0.4, 0.5]
    env = _env(x, fam)
    exact, _ = conditioned_path_law([fam.pmf(xi) for xi in x])
    rng = np.random.default_rng(2)
    N = 20_000
    cnt = Counter(tuple(int(v) for v in conditioned_trajectory(env, 3, 1, rng).z[1:])
                  for _ in range(N))
    for k, p in exact.items():
        assert abs(cnt.get(k, 0) / N - p) < 5 * np.sqrt(p * (1 - p) / N) + 1e-4


@pytest.mark.parametrize("fam", [LINEAR_FRACTIONAL, POISSON])
def test_thinning_matches_transition_pmf(fam):
    x = np.array([0.3, -0.5, 0.8, -0.2])
    env = _env(x, fam)
    N = 200_000
    Z = conditioned_trajectories(fam, np.tile(x, (N, 1)), 1, np.random.default_rng(4))
    assert np.all(Z[:, -1] > 0)
    for m in range(4):
        sel = Z[:, m] == 1
        j, p = transition_pmf(env, 4, m, 1)
        emp = np.bincount(Z[sel, m + 1].astype(int), minlength=j.size)[:j.size] / sel.sum()
        se = np.sqrt(p * (1 - p) / sel.sum())
        assert np.all(np.abs(emp - p) < 5 * se + 1e-4)


def test_single_and_vector_samplers_agree_in_law():
    x = np.array([0.5, -1.0, 0.7])
    env = _env(x, LINEAR_FRACTIONAL)
    rng = np.random.default_rng(1)
    a = np.array([conditioned_trajectory(env, 3, 2, rng).z[-1] for _ in range(4000)])
    b = conditioned_trajectories(LINEAR_FRACTIONAL, np.tile(x, (4000, 1)), 2, rng)[:, -1]
    assert weighted_ks(a, np.ones_like(a), b, np.ones_like(b)) < 0.05


def test_huge_populations_do_not_overflow():
    x = np.full((50, 400), 0.5)
    Z = conditioned_trajectories(LINEAR_FRACTIONAL, x, 1, np.random.default_rng(0))
    assert np.all(np.isfinite(Z)) and np.all(Z[:, -1] > 0)
    assert np.median(np.log(Z[:, -1])) == pytest.approx(200, rel=0.05)


def test_population_path_absorption():
    with pytest.raises(ValueError):
        PopulationPath(np.array([1, 0, 2]), None)


@pytest.mark.parametrize("n", [5, 60])
def test_weights_are_normalised(gauss, small_tables, n):
    U, V = small_tables
    rng = np.random.default_rng(7)
    e = plus_expectation(gauss, LINEAR_FRACTIONAL, n, F_ONE, 0.0, U, 100_000, rng)
    assert e.agrees(1.0, 4)
    e = minus_expectation(gauss, LINEAR_FRACTIONAL, n, F_ONE, 0.0, V, 100_000, rng)
    assert e.agrees(1.0, 4)
    # the conditioned walks keep their sign
    assert plus_expectation(gauss, LINEAR_FRACTIONAL, n, F_NONNEG, 0.0, U, 20_000, rng).value == \
        pytest.approx(plus_expectation(gauss, LINEAR_FRACTIONAL, n, F_ONE, 0.0, U, 20_000,
                                       np.random.default_rng(7)).value, rel=0.2)
    assert minus_expectation(gauss, LINEAR_FRACTIONAL, n, F_NEG, 0.0, V, 20_000, rng).agrees(1.0, 4)


def test_exact_and_sampled_survival_agree(gauss, small_tables):
    U, _ = small_tables
    a = plus_expectation(gauss, POISSON, 30, f_survival(1), 0.0, U, 40_000, np.random.default_rng(3))
    b = plus_expectation(gauss, POISSON, 30, f_survival_sampled(1), 0.0, U, 40_000,
                         np.random.default_rng(3))
    assert abs(a.value - b.value) < 3 * np.hypot(a.std_error, b.std_error)


def test_B_increases_in_n(gauss, small_tables):
    _, V = small_tables
    vals = [minus_expectation(gauss, LINEAR_FRACTIONAL, n, f_B(0.5), 0.0, V, 50_000,
                              np.random.default_rng(5)).normalized_value for n in (1, 10, 80)]
    assert 0.5 < vals[0] < vals[1] < vals[2] < 1


def test_Wplus_mean_and_survival(gauss, small_tables):
    U, _ = small_tables
    r = estimate_Wplus(gauss, LINEAR_FRACTIONAL, 1, 60, U, 50_000, np.random.default_rng(2))
    assert 0 < r["positive_mass"].value <= 1
    assert abs(r["positive_mass"].value - r["survival_exact"].value) < \
        4 * np.hypot(r["positive_mass"].std_error, r["survival_exact"].std_error)


@given(arrays(float, st.integers(2, 50), elements=st.floats(-10, 10)), st.floats(0.05, 0.95))
def test_weighted_quantile_equal_weights(x, q):
    v = weighted_quantile(x, np.ones_like(x), q)
    assert x.min() <= v <= x.max()
    assert weighted_ks(x, np.ones_like(x), x, np.full_like(x, 3.0)) == 0.0


def test_h_rb_matches_population_route(gauss, small_tables):
    U, V = small_tables
    kw = dict(horizons=(120, 120), plus_samples=20_000, minus_samples=60_000, replicates=3)
    a = estimate_h(gauss, LINEAR_FRACTIONAL, 0.0, 0.0, U, V, rng=np.random.default_rng(1),
                   method="lf", **kw)
    b = estimate_h(gauss, LINEAR_FRACTIONAL, 0.0, 0.0, U, V, rng=np.random.default_rng(2),
                   method="population", **kw)
    assert a.value > 0 and b.value > 0
    assert abs(a.value - b.value) < 3 * np.hypot(a.std_error, b.std_error)
    assert estimate_h(gauss, LINEAR_FRACTIONAL, 1.0, 0.0, U, V, rng=np.random.default_rng(1)).value == 0


def test_hkernel_grid_extension_rules():
    u = np.array([0.0, 0.5, 0.9])
    w = np.array([-2.0, -1.0, 0.0])
    vals = np.outer([0.2, 0.15, 0.05], np.exp(w / 2))
    g = HKernelGrid(u, w, vals, np.zeros_like(vals))
    assert g(0.0, 0.0) == pytest.approx(0.2)
    assert g(1.0, 0.0) == 0.0
    assert g(0.0, -4.0) == pytest.approx(0.2 * np.exp(-1.0) * np.exp(-1.0))
    # beyond the last c = 1/(1-u) node the kernel decays like 1/c
    assert g(0.99, 0.0) == pytest.approx(0.05 * 0.1, rel=1e-9)
    assert g.coverage_gap(np.array([0.0, 0.99]), np.array([0.0, 0.0])) == 0.5


@given(st.floats(-5, 5), st.floats(-5, 5), st.sampled_from([1.2, 1.5, 2.0]),
       st.integers(4, 4000), st.sampled_from([2, 4, 8]))
def test_horizon_extrapolate_cancels_leading_term(a, b, alpha, m, ratio):
    v = lambda h: a + b * h ** (-1 / alpha)
    assert horizon_extrapolate(v(m * ratio), v(m), alpha, ratio) == pytest.approx(a, abs=1e-9)


def _cut_means(pool, key, f):
    # functionals of the path up to a checkpoint, all under the final-horizon weights
    return (pool["w"] * f(pool[key])).sum() / pool["n"]


@pytest.mark.parametrize("side", ["minus", "plus"])
def test_extrapolated_sums_match_long_horizon(gauss, small_tables, side):
    """Richardson on horizons 75 and 300 (the kernel defaults) reproduces a
    direct 12800-step run.

    The raw 300-step value is visibly biased; the long run stands in for the
    limit (its own bias is about 6.5 times smaller).
    """
    U, V = small_tables
    f = lambda q: 1.0 / (1.0 + q)
    runs = {}
    for cut in (75, 300):
        rng = np.random.default_rng(77)
        if side == "minus":
            runs[cut] = minus_pool(gauss, 12800, 200_000, rng, V, checkpoint=cut)
        else:
            runs[cut] = plus_pool(gauss, 0.5, 12800, 100_000, rng, U, checkpoint=cut)
    key = "Q" if side == "minus" else "T"
    np.testing.assert_array_equal(runs[75][key], runs[300][key])
    long = _cut_means(runs[300], key, f)
    raw = _cut_means(runs[300], key + "_q", f)
    ext = horizon_extrapolate(raw, _cut_means(runs[75], key + "_q", f), 2.0, 4)
    assert raw - long > 0.005
    assert abs(ext - long) < 0.25 * (raw - long)

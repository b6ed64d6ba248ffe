import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate, special, stats

from bprelab.stablecore import gaussian
from bprelab.walks import (WalkPath, estimate_exp_at_min_epoch, estimate_stay_low,
                           min_epoch_duality, path_stats, path_stats_batch, reverse_path)


@given(arrays(float, st.integers(1, 30), elements=st.floats(-5, 5, allow_subnormal=False)))
def test_path_stats_brute_force(x):
    p = WalkPath.from_increments(x)
    s = np.cumsum(x)
    st_ = path_stats(p)
    L = min(s)
    assert st_.L == L and st_.M == max(s)
    if L >= 0:
        assert st_.tau == 0
    else:
        assert st_.tau == 1 + min(k for k in range(s.size) if s[k] == L)
    Lb, Mb, tb = path_stats_batch(s[None, :])
    assert (Lb[0], Mb[0], tb[0]) == (st_.L, st_.M, st_.tau)


@given(arrays(float, st.integers(1, 20), elements=st.floats(-5, 5)))
def test_reversal_is_an_involution(x):
    p = WalkPath.from_increments(x)
    r = reverse_path(reverse_path(p))
    assert np.array_equal(r.increments, p.increments)
    assert reverse_path(p).partial_sums[-1] == pytest.approx(p.partial_sums[-1])


def test_stay_low_one_step_exact(gauss, rng):
    e = estimate_stay_low(gauss, 1, 0.7, 400_000, rng)
    assert abs(e.value - (stats.norm.cdf(0.7) - 0.5)) < 4 * e.std_error


def test_stay_low_two_steps_quadrature(gauss, rng):
    y = 1.0
    f = lambda x: stats.norm.pdf(x) * (stats.norm.cdf(y - x) - stats.norm.cdf(-x))
    ref = integrate.quad(f, 0, np.inf)[0]
    e = estimate_stay_low(gauss, 2, y, 400_000, rng)
    assert abs(e.value - ref) < 4 * e.std_error


@pytest.mark.parametrize("n", [3, 10, 25])
def test_sparre_andersen(gauss, rng, n):
    # P(L_n >= 0) = C(2n, n) / 4^n for symmetric continuous increments
    e = estimate_stay_low(gauss, n, 1e9, 200_000, rng)
    ref = special.comb(2 * n, n) / 4 ** n
    assert abs(e.value - ref) < 4 * e.std_error


def test_exp_at_min_epoch_one_step(gauss, rng):
    e = estimate_exp_at_min_epoch(gauss, 1, 400_000, rng)
    ref = math.exp(0.5) * stats.norm.cdf(-1.0)
    assert abs(e.value - ref) < 4 * e.std_error


def test_exp_at_min_epoch_paired_identical(gauss, rng):
    a, b = estimate_exp_at_min_epoch(gauss, 12, 20_000, rng, paired=True)
    assert a.value == pytest.approx(b.value, rel=1e-12)
    c = estimate_exp_at_min_epoch(gauss, 12, 200_000, np.random.default_rng(9))
    assert a.agrees(c)


def test_duality_pathwise_and_in_law(gauss, rng):
    d = min_epoch_duality(gauss, 10, 0.0, 100_000, rng)
    assert d["primal"].value == d["reversed"].value
    assert d["primal"].agrees(d["independent"])


def test_bad_arguments(gauss, rng):
    with pytest.raises(ValueError):
        estimate_stay_low(gauss, 5, 0.0, 10, rng)
    with pytest.raises(ValueError):
        WalkPath.from_increments([])

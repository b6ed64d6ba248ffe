import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, special, stats

from bprelab.envmodel import LINEAR_FRACTIONAL, POISSON
from bprelab.limits import (ConstantPart, ConstantsReport, _ratio, _series_tail, _y_indices,
                            decomposition, exp_at_zero_one_step, meander_proportionality,
                            one_step_theta, survival_ratio_theta, survival_scaling,
                            theorem1_law, theorem2_constancy)
from bprelab.streams import Estimate, Lanes

phi = stats.norm.pdf


def _q(x):
    # P(Z_1 > 0 | X = x) for linear-fractional offspring: 1 - p = e^x / (1 + e^x)
    return special.expit(x)


def test_survival_one_step_quadrature(gauss):
    ref = integrate.quad(lambda x: _q(x) * phi(x), -np.inf, 0.0)[0]  # b_1 = 1
    r = survival_scaling(gauss, LINEAR_FRACTIONAL, 0.0, [1], 400_000, np.random.default_rng(1))
    row = r.rows[0]
    assert abs(row["ratio"] - ref) < 4 * row["se"]


def test_theorem1_one_step_quadrature(gauss):
    z = 0.6
    # E[z^Z; Z > 0 | x] = p/(1 - qz) - p for linear-fractional offspring
    f = lambda x: (special.expit(-x) / (1 - special.expit(x) * z) - special.expit(-x)) * phi(x)
    ref = integrate.quad(f, -np.inf, 0)[0] / integrate.quad(lambda x: _q(x) * phi(x), -np.inf, 0)[0]
    r, curves = theorem1_law(gauss, LINEAR_FRACTIONAL, 0.0, [1], [0.0, z, 1.0], 400_000,
                             np.random.default_rng(2))
    c = curves[0]
    assert c.values[0] == 0.0 and c.values[2] == pytest.approx(1.0)
    assert abs(c.values[1] - ref) < 4 * c.std_error[1]


def test_meander_one_step_quadrature(gauss):
    x = 0.5
    num = integrate.quad(lambda y: _q(y) * phi(y), -np.inf, x)[0]
    den = integrate.quad(lambda y: _q(y) * phi(y), -np.inf, np.inf)[0]
    r = meander_proportionality(gauss, LINEAR_FRACTIONAL, [x, 1.0], [1], 400_000,
                                np.random.default_rng(3))
    row = r.rows[0]
    assert abs(row["value"] - num / den) < 4 * row["se"]


@pytest.mark.parametrize("fam", [LINEAR_FRACTIONAL, POISSON])
def test_theta_one_step(gauss, fam):
    r = survival_ratio_theta(gauss, fam, [1, 2], 300_000, np.random.default_rng(4))
    row = r.rows[0]
    assert abs(row["ratio"] - r.verdicts["one_step_exact"]) < 4 * row["se"]
    assert r.verdicts["one_step_exact"] == pytest.approx(one_step_theta(gauss, fam))


def test_exp_at_zero_one_step(gauss):
    assert exp_at_zero_one_step(gauss) == pytest.approx(math.exp(0.5) * stats.norm.cdf(-1), rel=1e-9)


def test_decomposition_is_exact(gauss):
    r = decomposition(gauss, LINEAR_FRACTIONAL, 0.0, 40, [2, 5, 10], 20_000, np.random.default_rng(5))
    assert r.verdicts["complete"] and r.verdicts["middle_decreasing"]


def test_lanes_parallel_equals_serial(gauss):
    a = survival_scaling(gauss, LINEAR_FRACTIONAL, 0.0, [8, 16], 6000, Lanes(3, ("t",), 3, 1))
    b = survival_scaling(gauss, LINEAR_FRACTIONAL, 0.0, [8, 16], 6000, Lanes(3, ("t",), 3, 2))
    assert a.rows == b.rows


def test_ratio_delta_method():
    rng = np.random.default_rng(0)
    b = rng.random(100_000) + 0.5
    a = 2 * b + rng.normal(0, 0.1, b.size)
    r, se = _ratio(a.sum(), b.sum(), a @ a, b @ b, a @ b, b.size)
    assert r == pytest.approx(a.mean() / b.mean())
    # bootstrap-free check: the linearised residual a - r b has the same variance
    ref = np.std(a - r * b, ddof=1) / b.mean() / math.sqrt(b.size)
    assert se == pytest.approx(ref, rel=1e-3)


@given(st.floats(1.1, 2.0), st.integers(40, 400), st.floats(0.1, 5.0))
def test_series_tail_exact_power_law(alpha, J, C):
    j = np.arange(J + 1, dtype=float)
    terms = np.where(j > 0, C * np.maximum(j, 1) ** (-1 - 1 / alpha), 0.0)
    tail, _ = _series_tail(terms, np.zeros_like(terms), alpha)
    ref = C * (special.zeta(1 + 1 / alpha) - np.sum(np.maximum(j[1:], 1) ** (-1 - 1 / alpha)))
    assert tail == pytest.approx(ref, rel=0.01)


@given(st.integers(8, 2000), st.sampled_from([0.1, 0.25, 0.4]))
def test_y_indices(n, theta):
    k = int(math.floor(theta * n))
    ks = _y_indices(n, theta, 17)
    assert ks[0] == k and ks[-1] == n - k and ks.size == 17
    assert np.all(np.diff(ks) >= 0)


def test_theorem2_structure(gauss):
    r, reps = theorem2_constancy(gauss, LINEAR_FRACTIONAL, 0.0, 0.25, [16, 32], 20_000,
                                 np.random.default_rng(6), resample=500)
    assert r.verdicts["mass_zero_ok"]
    assert [x.n for x in reps] == [16, 32]
    assert all(x.mass_y0_zero == 0 for x in reps)
    with pytest.raises(ValueError):
        theorem2_constancy(gauss, LINEAR_FRACTIONAL, 0.0, 0.5, [16], 10, np.random.default_rng(0))


def test_limit_curve_assembly():
    z = np.array([0.0, 0.5, 1.0])
    L = ConstantPart("left", 0.0, np.ones(3), np.zeros(3), Estimate(0.3, 0.01, 1), z,
                     np.array([0.3, 0.2, 0.0]), np.zeros(3))
    R = ConstantPart("right", 0.0, np.ones(3), np.zeros(3), Estimate(0.7, 0.01, 1), z,
                     np.array([0.7, 0.4, 0.0]), np.zeros(3))
    rep = ConstantsReport(L, R)
    zz, c, _ = rep.limit_curve()
    assert rep.total.value == pytest.approx(1.0)
    assert np.allclose(c, [1.0, 0.6, 0.0])

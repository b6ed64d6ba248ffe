"""Offspring laws driven by the walk increment X, with mean e^X.

linear-fractional:  f(z) = p / (1 - (1-p) z),  p = 1 / (1 + e^X)
poisson:            f(z) = exp(e^X (z - 1))
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .streams import Estimate
from .walks import WalkPath

__all__ = [
    "OffspringFamily", "EnvRealization", "LINEAR_FRACTIONAL", "POISSON",
    "pgf_eval", "gamma_b", "check_B2", "sample_environment", "offspring_pmf",
    "sample_offspring",
]


@dataclass(frozen=True)
class OffspringFamily:
    kind: str

    def __post_init__(self):
        if self.kind not in ("linear-fractional", "poisson"):
            raise ValueError(f"unknown offspring family {self.kind!r}")

    @property
    def is_lf(self):
        return self.kind == "linear-fractional"


LINEAR_FRACTIONAL = OffspringFamily("linear-fractional")
POISSON = OffspringFamily("poisson")


@dataclass(frozen=True)
class EnvRealization:
    walk: WalkPath
    family: OffspringFamily

    @property
    def n(self):
        return self.walk.n

    @property
    def log_means(self):
        return self.walk.increments


def lf_p(X):
    """Success probability p = 1/(1+e^X), computed without overflow."""
    return special.expit(-np.asarray(X, dtype=float))


def pgf_eval(family, X, z):
    z = np.asarray(z)
    if np.any(np.abs(z) > 1 + 1e-15):
        raise ValueError("pgf argument must satisfy |z| <= 1")
    if family.is_lf:
        p = lf_p(X)
        return p / (1 - (1 - p) * z)
    return np.exp(np.exp(X) * (z - 1))


def offspring_pmf(family, X, k):
    k = np.asarray(k)
    if family.is_lf:
        p = lf_p(X)
        return stats.geom.pmf(k + 1, p)
    return stats.poisson.pmf(k, np.exp(X))


def sample_offspring(family, X, parents, rng):
    """Total offspring of ``parents`` individuals under log-mean X (vectorised)."""
    parents = np.asarray(parents, dtype=float)
    out = np.zeros(np.broadcast(parents, X).shape)
    live = parents > 0
    if not np.any(live):
        return out
    Xl = np.broadcast_to(X, out.shape)[live]
    kl = np.broadcast_to(parents, out.shape)[live]
    m = np.exp(Xl)
    big = kl * np.maximum(m, 1.0) > 1e15
    res = np.empty(kl.size)
    small = ~big
    if family.is_lf:
        res[small] = rng.negative_binomial(kl[small], lf_p(Xl[small]))
        var = m * (1 + m)
    else:
        res[small] = rng.poisson(kl[small] * m[small])
        var = m
    if np.any(big):
        # central limit approximation once counts leave the exact integer range
        mb = kl[big] * m[big]
        res[big] = np.maximum(np.rint(mb + np.sqrt(kl[big] * var[big]) * rng.standard_normal(mb.size)), 0.0)
    out[live] = res
    return out


def gamma_b(family, X, b):
    """gamma(b) = sum_{k>=b} k^2 P(xi=k) / (E xi)^2 in closed form."""
    if b < 0:
        raise ValueError("b must be nonnegative")
    X = np.asarray(X, dtype=float)
    if family.is_lf:
        p = lf_p(X)
        q = 1 - p
        # sum_{k>=b} k^2 q^k = q^b [q(1+q)/p^3 + 2 b q/p^2 + b^2/p]
        with np.errstate(divide="ignore", invalid="ignore"):
            logqb = b * np.log(q) if b > 0 else 0.0
            bracket = q * (1 + q) / p ** 3 + 2 * b * q / p ** 2 + b * b / p
            m = np.exp(X)
            return np.exp(logqb) * p * bracket / (m * m)
    m = np.exp(X)
    s2 = stats.poisson.sf(b - 3, m)
    s1 = stats.poisson.sf(b - 2, m)
    # sum_{k>=b} k(k-1) pi_k = m^2 P(N >= b-2),  sum_{k>=b} k pi_k = m P(N >= b-1)
    return s2 + s1 / m


def check_B2(model, family, b, epsilon, samples, rng, tail_frac=0.01):
    """Monte Carlo value of E[(log+ gamma(b))^{alpha+eps}] with tail diagnostics.

    ``extra`` carries a Hill estimate of the tail index of the summand (finite
    mean needs an index above 1), the value at half the sample for a stability
    check, and the share of the total coming from X < 0.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if b < 0:
        raise ValueError("b must be nonnegative")
    X = model.sample(rng, samples)
    g = gamma_b(family, X, b)
    v = np.maximum(np.log(np.maximum(g, 1e-300)), 0.0) ** (model.limit.alpha + epsilon)
    mean = v.mean()
    se = v.std(ddof=1) / math.sqrt(samples)
    half = v[: samples // 2].mean()
    pos = np.sort(v[v > 0])
    k = max(10, int(tail_frac * pos.size))
    hill = np.inf
    if pos.size > k + 1:
        top = pos[-k:]
        ref = pos[-k - 1]
        hill = 1.0 / np.mean(np.log(top / ref))
    left_share = float(v[X < 0].sum() / v.sum()) if v.sum() > 0 else 0.0
    stable_half = abs(half - mean) < 3 * se * math.sqrt(2) if se > 0 else half == mean
    finite = bool(hill > 1.0 and stable_half)
    return Estimate(float(mean), float(se), samples, int(np.count_nonzero(v)),
                    extra={"hill_index": float(hill), "half_sample": float(half),
                           "left_share": left_share, "finite": finite,
                           "heavy_left": bool(left_share > 0.5 and hill < 4.0)})


def sample_environment(model, family, n, rng):
    if n < 1:
        raise ValueError("n must be positive")
    return EnvRealization(WalkPath.from_increments(model.sample(rng, n)), family)

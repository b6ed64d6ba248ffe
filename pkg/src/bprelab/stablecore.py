"""Increment laws in the domain of attraction of a strictly stable law.

The characteristic function of the limit law is

    G(w) = exp(-c |w|^alpha (1 - i beta sgn(w) tan(pi alpha / 2)))

with the convention tan(pi/2) * 0 = 0 for the symmetric Cauchy case.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

__all__ = [
    "StableParams", "IncrementModel", "Norming",
    "sample_increment", "density_at_zero", "positivity_rho", "norming",
    "stable_rvs", "gaussian", "exact_stable", "two_sided_pareto",
]


@dataclass(frozen=True)
class StableParams:
    alpha: float
    beta: float = 0.0
    c: float = 1.0

    def __post_init__(self):
        a, b = float(self.alpha), float(self.beta)
        if not self.c > 0:
            raise ValueError("scale c must be positive")
        ok = (0 < a < 2 and a != 1 and abs(b) < 1) or (a == 1 and b == 0) or (a == 2 and b == 0)
        if not ok:
            raise ValueError(f"(alpha, beta) = ({a}, {b}) outside the admissible set")

    @property
    def skew(self):
        """beta * tan(pi alpha / 2), zero for the symmetric cases."""
        if self.beta == 0:
            return 0.0
        return self.beta * math.tan(0.5 * math.pi * self.alpha)


@dataclass(frozen=True)
class Norming:
    n: int
    a_n: float
    b_n: float


@dataclass(frozen=True)
class IncrementModel:
    """Law of one increment X.

    family is "stable", "gaussian" or "pareto".  ``limit`` holds the stable
    law that S_n / a_n approaches; ``ell`` is the constant slowly varying
    factor used in a_n = n^{1/alpha} ell.
    """

    family: str
    limit: StableParams
    sigma: float = 1.0
    scale: float = 1.0
    balance: float = 0.0
    ell: float = 1.0
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    def to_config(self):
        return {"family": self.family, "alpha": self.limit.alpha, "beta": self.limit.beta,
                "c": self.limit.c, "sigma": self.sigma, "scale": self.scale,
                "balance": self.balance, "ell": self.ell}

    @classmethod
    def from_config(cls, cfg):
        fam = cfg["family"]
        if fam == "gaussian":
            return gaussian(cfg.get("sigma", 1.0))
        if fam == "stable":
            return exact_stable(cfg["alpha"], cfg.get("beta", 0.0), cfg.get("c", 1.0))
        if fam == "pareto":
            m = two_sided_pareto(cfg["alpha"], cfg.get("balance", 0.0), cfg.get("scale", 1.0))
            return m.with_ell(cfg.get("ell", 1.0))
        raise ValueError(f"unknown increment family {fam!r}")

    def key(self):
        blob = json.dumps(self.to_config(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_ell(self, ell):
        return IncrementModel(self.family, self.limit, self.sigma, self.scale,
                              self.balance, float(ell))

    def sample(self, rng, size=None):
        if self.family == "gaussian":
            return self.sigma * rng.standard_normal(size)
        if self.family == "stable":
            return stable_rvs(self.limit, rng, size)
        if self.family == "pareto":
            return _pareto_rvs(self, rng, size)
        raise ValueError(self.family)

    def pdf(self, x):
        """Increment density (closed form for gaussian and pareto only)."""
        x = np.asarray(x, dtype=float)
        if self.family == "gaussian":
            return np.exp(-0.5 * (x / self.sigma) ** 2) / (self.sigma * math.sqrt(2 * math.pi))
        if self.family == "pareto":
            a, s = self.limit.alpha, self.scale
            pp = 0.5 * (1 + self.balance)
            y = x + _pareto_shift(self)
            ay = np.abs(y)
            dens = np.where(ay >= s, a * s ** a / np.maximum(ay, s) ** (a + 1), 0.0)
            return np.where(y > 0, pp * dens, (1 - pp) * dens)
        if self.family == "stable":
            return _stable_pdf(self.limit, x)
        raise ValueError(self.family)


def gaussian(sigma=1.0):
    # c = 1/2 pins the limit to the standard normal, so a_n = sigma sqrt(n)
    return IncrementModel("gaussian", StableParams(2.0, 0.0, 0.5), sigma=float(sigma),
                          ell=float(sigma))


def exact_stable(alpha, beta=0.0, c=1.0):
    return IncrementModel("stable", StableParams(float(alpha), float(beta), float(c)))


def two_sided_pareto(alpha, balance=0.0, scale=1.0):
    """Pareto tails on both sides, P(X > x) ~ (1+balance)/2 (scale/x)^alpha.

    For alpha > 1 the law is shifted to mean zero.  ell is left at 1 until
    :func:`calibrate_pareto` is run.
    """
    a = float(alpha)
    if not 0 < a < 2:
        raise ValueError("pareto tail index must lie in (0, 2)")
    if a <= 1 and balance != 0:
        raise ValueError("skewed pareto needs alpha > 1 so that it can be centred")
    b = float(balance)
    if a == 1:
        b = 0.0
    lim = StableParams(a, b if a != 1 else 0.0, 1.0)
    return IncrementModel("pareto", lim, scale=float(scale), balance=b)


def _pareto_shift(model):
    a, s = model.limit.alpha, model.scale
    if a <= 1:
        return 0.0
    mean_abs = a * s / (a - 1)
    return model.balance * mean_abs


def _pareto_rvs(model, rng, size):
    a, s = model.limit.alpha, model.scale
    u = rng.random(size)
    e = rng.random(size)
    mag = s * (1.0 - u) ** (-1.0 / a)
    sign = np.where(e < 0.5 * (1 + model.balance), 1.0, -1.0)
    return sign * mag - _pareto_shift(model)


def stable_rvs(p, rng, size=None):
    """Chambers-Mallows-Stuck draws with characteristic function G above."""
    a, b, c = p.alpha, p.beta, p.c
    if a == 2:
        return math.sqrt(2 * c) * rng.standard_normal(size)
    v = math.pi * (rng.random(size) - 0.5)
    w = rng.standard_exponential(size)
    if a == 1:
        return c * np.tan(v)
    zeta = p.skew
    b0 = math.atan(zeta) / a
    s0 = (1 + zeta * zeta) ** (0.5 / a)
    x = (s0 * np.sin(a * (v + b0)) / np.cos(v) ** (1 / a)
         * (np.cos(v - a * (v + b0)) / w) ** ((1 - a) / a))
    return c ** (1 / a) * x


def sample_increment(model, rng, size=None):
    """One (or ``size``) draws of the increment X."""
    return model.sample(rng, size)


def _re_cf(w, p):
    t = p.c * w ** p.alpha
    return math.exp(-t) * math.cos(t * p.skew)


def density_at_zero(p, rtol=1e-8):
    """g(0) = (1/pi) int_0^inf Re G(w) dw by adaptive quadrature on doubling panels."""
    if isinstance(p, IncrementModel):
        p = p.limit
    a, c = p.alpha, p.c
    total = 0.0
    lo, hi = 0.0, 1.0
    while True:
        val, err = integrate.quad(_re_cf, lo, hi, args=(p,), epsabs=1e-14, epsrel=rtol,
                                  limit=200)
        if err > max(rtol * abs(total + val), 1e-13):
            raise RuntimeError(f"quadrature did not converge on [{lo}, {hi}]")
        total += val
        tail = math.exp(-c * hi ** a) / (c * a * hi ** (a - 1))
        if tail < 1e-12:
            break
        lo, hi = hi, 2 * hi
    return total / math.pi


def positivity_rho(p):
    """P(Y_1 > 0) for the limit law."""
    if isinstance(p, IncrementModel):
        p = p.limit
    if p.beta == 0:
        return 0.5
    return 0.5 + math.atan(p.skew) / (math.pi * p.alpha)


def norming(model, n):
    if n < 1:
        raise ValueError("n must be positive")
    a_n = n ** (1.0 / model.limit.alpha) * model.ell
    return Norming(int(n), a_n, 1.0 / (a_n * n))


def calibrate_pareto(model, rng, n_pilot=2048, paths=20000, q=0.75):
    """Fix ell by matching the q-quantile of S_n / a_n to the stable target."""
    target = np.quantile(stable_rvs(model.limit, rng, 10 ** 6), q)
    s = np.zeros(paths)
    for _ in range(n_pilot):
        s += _pareto_rvs(model, rng, paths)
    emp = np.quantile(s / n_pilot ** (1 / model.limit.alpha), q)
    return model.with_ell(emp / target)


def _stable_pdf(p, x):
    # Fourier inversion, used only for diagnostics and plots
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty_like(x)
    for i, xi in enumerate(x):
        f = lambda w: math.exp(-p.c * w ** p.alpha) * math.cos(p.c * w ** p.alpha * p.skew - w * xi)
        out[i] = integrate.quad(f, 0, np.inf, limit=400)[0] / math.pi
    return out


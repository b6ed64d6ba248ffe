"""Iterated generating functions F_{k,n}(z) = f_{k+1}(f_{k+2}(... f_n(z) ...)).

For linear-fractional offspring the complement w = 1 - z transforms as

    1 - f(z) = q w / (p + q w),

a Moebius map with nonnegative coefficients [[q, 0], [q, p]].  Products of
these matrices never cancel, so 1 - F_{k,n}(z) keeps full relative precision
even when it is of order e^{S_n} << 1.  Poisson iterates use the plain
backward recursion.
"""

import math
from dataclasses import dataclass

import numpy as np

from .envmodel import lf_p, pgf_eval, sample_environment
from .streams import Estimate, mean_estimate
from .stablecore import norming

__all__ = [
    "GenFunChain", "iterate", "survival_prob", "conditional_pgf",
    "O_functional", "check_hbound", "naive_iterate", "complement_batch",
    "reversed_complement_step", "power_gap",
]


def _mats(X):
    """Normalised complement matrices: [[1, 0], [1, e^{-X}]] (divided by q)."""
    X = np.asarray(X, dtype=float)
    m = np.zeros(X.shape + (2, 2))
    m[..., 0, 0] = 1.0
    m[..., 1, 0] = 1.0
    m[..., 1, 1] = np.exp(-X)
    return m


def _renorm(M):
    s = np.max(np.abs(M), axis=(-2, -1), keepdims=True)
    return M / s


@dataclass
class GenFunChain:
    """Evaluator of F_{k,n} for one environment.

    For the linear-fractional family the suffix products
    P_k = N_{k+1} ... N_n (complement coordinates) are stored, giving O(1)
    evaluation of F_{k,n} for the chain's own horizon n.
    """

    env: object

    def __post_init__(self):
        self.X = np.asarray(self.env.log_means, dtype=float)
        self.n = self.X.size
        self.family = self.env.family
        if self.family.is_lf:
            mats = _mats(self.X)
            suf = np.empty((self.n + 1, 2, 2))
            suf[self.n] = np.eye(2)
            for k in range(self.n - 1, -1, -1):
                suf[k] = _renorm(mats[k] @ suf[k + 1])
            self._suffix = suf
            self._mats = mats

    def complement(self, k, n, w):
        """1 - F_{k,n}(1 - w)."""
        if not 0 <= k <= n <= self.n:
            raise ValueError("need 0 <= k <= n <= chain length")
        w = np.asarray(w)
        if k == n:
            return w
        if self.family.is_lf:
            if n == self.n:
                P = self._suffix[k]
            else:
                P = np.eye(2)
                for i in range(k, n):
                    P = _renorm(P @ self._mats[i])
            return P[0, 0] * w / (P[1, 0] * w + P[1, 1])
        z = 1 - w
        for i in range(n - 1, k - 1, -1):
            z = pgf_eval(self.family, self.X[i], z)
        return 1 - z

    def __call__(self, k, n, z):
        z = np.asarray(z)
        if np.any(np.abs(z) > 1 + 1e-15):
            raise ValueError("|z| must not exceed 1")
        if self.family.is_lf:
            return 1 - self.complement(k, n, 1 - z)
        if k == n:
            return z
        for i in range(n - 1, k - 1, -1):
            z = pgf_eval(self.family, self.X[i], z)
        return z


def iterate(chain, k, n, z):
    return chain(k, n, z)


def naive_iterate(family, X, z):
    """f_1(f_2(... f_n(z))) by direct nesting of the offspring pgfs."""
    for x in X[::-1]:
        z = pgf_eval(family, x, z)
    return z


def survival_prob(env, n=None):
    """P(Z_n > 0 | environment) = 1 - F_{0,n}(0)."""
    chain = env if isinstance(env, GenFunChain) else GenFunChain(env)
    n = chain.n if n is None else n
    if n == 0:
        return 1.0
    return float(np.clip(chain.complement(0, n, 1.0), 0.0, 1.0))


def power_gap(s_z, s_0, q):
    """(1 - s_z)^q - (1 - s_0)^q without cancellation, for s = 1 - F."""
    a = q * np.log1p(-np.minimum(s_0, 1.0 - 1e-300))
    b = q * np.log1p(-np.minimum(s_z, 1.0 - 1e-300))
    return np.exp(a) * np.expm1(b - a)


def conditional_pgf(env, n, z, q=1):
    """E[z^{Z_n}; Z_n > 0 | environment, Z_0 = q] = F_{0,n}^q(z) - F_{0,n}^q(0)."""
    if q < 1:
        raise ValueError("q must be a positive integer")
    chain = env if isinstance(env, GenFunChain) else GenFunChain(env)
    s_z = chain.complement(0, n, 1.0 - np.asarray(z, dtype=float))
    s_0 = chain.complement(0, n, 1.0)
    return power_gap(s_z, s_0, q)


# ---------------------------------------------------------------- batches

def complement_batch(family, X, w):
    """1 - F_{0,n}(1 - w) for a matrix of log-means X (rows = environments).

    w may be a scalar or a vector of arguments; the result has shape
    (rows,) or (rows, len(w)).  Linear-fractional rows are composed forward
    with the complement Moebius maps; other families recurse backward.
    """
    X = np.atleast_2d(X)
    w = np.asarray(w, dtype=float)
    if family.is_lf:
        # prefix product [[A, 0], [C, D]] of the maps [[1, 0], [1, e^{-x}]],
        # rescaled every few steps; 1 - F = A w / (C w + D)
        rows = X.shape[0]
        A = np.ones(rows)
        C = np.zeros(rows)
        D = np.ones(rows)
        for k in range(X.shape[1]):
            C += D
            D *= np.exp(-X[:, k])
            if k % 16 == 15:
                sc = np.maximum(C, D)
                A /= sc
                C /= sc
                D /= sc
        if w.ndim == 0:
            return A * w / (C * w + D)
        return A[:, None] * w[None, :] / (C[:, None] * w[None, :] + D[:, None])
    z = 1.0 - (w if w.ndim == 0 else w[None, :])
    z = np.broadcast_to(z, (X.shape[0],) + w.shape).copy()
    for k in range(X.shape[1] - 1, -1, -1):
        xk = X[:, k] if w.ndim == 0 else X[:, k][:, None]
        z = pgf_eval(family, xk, z)
    return 1.0 - z


def reversed_complement_step(family, x, w):
    """w -> 1 - f_x(1 - w): one step of the backward recursion."""
    if family.is_lf:
        # 1 - f(z) = w / (w + e^{-x})
        return w / (w + np.exp(-x))
    return -np.expm1(-np.exp(x) * w)


def _reversed_min_epoch(model, family, j, zs, samples, rng, chunk=1 << 20):
    """Walk the reversed path S'_m = S_j - S_{j-m} with killing at M'_m >= 0.

    tau_j = j on the original path is exactly M'_j < 0 on the reversed one, and
    the backward recursion of F_{0,j} consumes the reversed increments in
    simulation order.  Returns arrays (S_j, 1 - F_{0,j}(z) for each z) of the
    surviving paths.
    """
    zs = np.atleast_1d(np.asarray(zs, dtype=float))
    out_s, out_c = [], []
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        done += m
        s = np.zeros(m)
        w = np.broadcast_to(1.0 - zs, (m, zs.size)).copy()
        for _ in range(j):
            x = model.sample(rng, s.size)
            s = s + x
            keep = s < 0
            s, x, w = s[keep], x[keep], w[keep]
            w = reversed_complement_step(family, x[:, None], w)
            if s.size == 0:
                break
        out_s.append(s)
        out_c.append(w)
    return np.concatenate(out_s), np.concatenate(out_c, axis=0)


def O_functional(model, family, j, z, w, samples, rng):
    """O_j(z, w) = E[1 - F_{0,j}(z); S_j <= w, tau_j = j] / E[e^{S_j}; tau_j = j].

    Numerator and denominator are means over the same sample of reversed
    paths; the standard error uses the delta method with their covariance.
    z and w may be sequences, giving a grid of values on shared paths.
    Returns a dict keyed by (z, w) with Estimates, or one Estimate for
    scalar input.
    """
    if j < 1:
        raise ValueError("j must be at least 1")
    zs = np.atleast_1d(np.asarray(z, dtype=float))
    ws = np.atleast_1d(np.asarray(w, dtype=float))
    s, comp = _reversed_min_epoch(model, family, j, zs, samples, rng)
    den = np.exp(s)
    N = samples
    mden = den.sum() / N
    if mden <= 0:
        raise RuntimeError("denominator estimate vanished")
    out = {}
    for a, zz in enumerate(zs):
        for ww in ws:
            num = np.where(s <= ww, comp[:, a], 0.0)
            mnum = num.sum() / N
            r = mnum / mden
            # delta method; zeros of killed paths enter through N
            vn = (num @ num) / N - mnum ** 2
            vd = (den @ den) / N - mden ** 2
            cv = (num @ den) / N - mnum * mden
            var = (vn - 2 * r * cv + r * r * vd) / (mden ** 2) / N
            out[(float(zz), float(ww))] = Estimate(float(r), math.sqrt(max(var, 0.0)), N,
                                                   int(np.count_nonzero(num)),
                                                   extra={"numerator": mnum, "denominator": mden})
    if np.ndim(z) == 0 and np.ndim(w) == 0:
        return out[(float(z), float(w))]
    return out


def check_hbound(model, family, j_list, z_grid, w_grid, samples, rng):
    """Ratios E[1 - F_{0,j}(z); S_j <= w, tau_j = j] / ((1-z) b_j e^{w/2}).

    One reversed-path sample per j serves the whole (z, w) grid.  Cells with
    z = 1 have a vanishing left side and are reported as ratio 0.
    """
    zs = np.asarray(z_grid, dtype=float)
    ws = np.asarray(w_grid, dtype=float)
    rows = []
    for j in j_list:
        s, comp = _reversed_min_epoch(model, family, j, zs, samples, rng)
        bj = norming(model, j).b_n
        for a, zz in enumerate(zs):
            for ww in ws:
                vals = np.where(s <= ww, comp[:, a], 0.0)
                est = mean_estimate(vals, n_total=samples)
                env = (1 - zz) * bj * math.exp(ww / 2)
                ratio = est.value / env if env > 0 else 0.0
                rse = est.std_error / env if env > 0 else 0.0
                rows.append({"j": int(j), "z": float(zz), "w": float(ww), "lhs": est.value,
                             "lhs_se": est.std_error, "ratio": ratio, "ratio_se": rse})
    ratios = np.array([r["ratio"] for r in rows])
    by_j = {j: max(r["ratio"] for r in rows if r["j"] == j) for j in j_list}
    return {"rows": rows, "max_ratio": float(ratios.max()), "max_by_j": by_j}


def sample_chain(model, family, n, rng):
    return GenFunChain(sample_environment(model, family, n, rng))

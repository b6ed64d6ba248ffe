"""Changes of measure P+ / P-, the limits W+ and B_inf(u), conditioned
population paths and the kernel h(u, w).

P+ and P- are realised as importance weights on killed walks,

    E+_x[g] = E_x[g U(S_n); L_n >= 0] / U(x),
    E-_x[g] = E_x[g V(S_n); M_n < 0] / V(x),

so every estimate is a plain weighted mean over raw samples (killed paths
contribute zero) and carries its effective sample size.  Starting P- at 0
uses V(0-) = 1 as normaliser.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .envmodel import lf_p, offspring_pmf, pgf_eval, sample_offspring
from .gfengine import GenFunChain, complement_batch, reversed_complement_step
from .renewal import mu_eta

__all__ = [
    "WeightedEstimate", "WalkBatch", "PopulationPath", "HKernel", "HKernelGrid",
    "plus_expectation", "minus_expectation", "estimate_Wplus", "conditioned_trajectory",
    "conditioned_trajectories", "transition_pmf", "estimate_h", "h_grid",
    "plus_pool", "minus_pool", "horizon_extrapolate", "weighted_quantile", "weighted_ks",
    "F_ONE", "F_NONNEG", "F_NEG", "f_survival", "f_survival_sampled", "f_B",
    "TruncatedFamily",
]

LOW_ESS = 30


@dataclass
class WeightedEstimate:
    value: float
    std_error: float
    effective_sample_size: float
    horizon: int
    n_samples: int
    normalized_value: float = float("nan")
    extrapolated_share: float = 0.0
    low_ess: bool = False

    def agrees(self, target, k=3.0):
        return abs(self.value - target) < k * self.std_error


@dataclass
class WalkBatch:
    """Surviving paths of a killed walk with their P+/- weights.

    X holds the increments (rows = surviving paths), S the positions
    including the start, ``weights`` the change-of-measure weights.
    """

    X: np.ndarray
    start: float
    weights: np.ndarray
    family: object
    n_total: int

    @property
    def S(self):
        return self.start + np.concatenate([np.zeros((self.X.shape[0], 1)),
                                            np.cumsum(self.X, axis=1)], axis=1)

    @property
    def n(self):
        return self.X.shape[1]

    def population(self, q, rng):
        """Z_0..Z_n under each environment (float counts)."""
        Z = np.empty((self.X.shape[0], self.n + 1))
        Z[:, 0] = q
        for k in range(self.n):
            Z[:, k + 1] = sample_offspring(self.family, self.X[:, k], Z[:, k], rng)
        return Z

    def complement(self, w):
        """1 - F_{0,n}(1 - w) for every path."""
        return complement_batch(self.family, self.X, w)


# functionals -----------------------------------------------------------

def F_ONE(batch, rng=None):
    return np.ones(batch.X.shape[0])


def F_NONNEG(batch, rng=None):
    return (batch.S[:, -1] >= 0).astype(float)


def F_NEG(batch, rng=None):
    return (batch.S[:, 1:].max(axis=1) < 0).astype(float) if batch.n else np.ones(batch.X.shape[0])


def f_survival(q=1):
    """Exact P(Z_n > 0 | environment) from Z_0 = q."""
    def fn(batch, rng=None):
        s = batch.complement(1.0)
        return -np.expm1(q * np.log1p(-np.minimum(s, 1.0)))
    return fn


def f_survival_sampled(q=1):
    """Indicator 1{Z_n > 0} from simulated populations."""
    def fn(batch, rng):
        return (batch.population(q, rng)[:, -1] > 0).astype(float)
    return fn


def f_B(u):
    """B_n(u) = F_{-n,0}(u)^{exp(-W_n)} on paths of the reversed (minus) walk.

    Row increments X_1, X_2, ... are read backward in time from 0, so
    F_{-n,0} = f_{X_n} o ... o f_{X_1} is built in simulation order.
    """
    def fn(batch, rng=None):
        w = np.full(batch.X.shape[0], 1.0 - u)
        for k in range(batch.n):
            w = reversed_complement_step(batch.family, batch.X[:, k], w)
        Wn = batch.S[:, -1] - batch.start
        return np.exp(np.exp(-Wn) * np.log1p(-np.minimum(w, 1.0)))
    return fn


# weighted expectations --------------------------------------------------

def _constrained(model, family, n, x, side, samples, rng, chunk_cells=1 << 22):
    chunk = max(1, chunk_cells // max(n, 1))
    keepX, keepS = [], []
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        done += m
        X = model.sample(rng, (m, n))
        S = x + np.cumsum(X, axis=1)
        ok = S.min(axis=1) >= 0 if side == "plus" else S.max(axis=1) < 0
        keepX.append(X[ok])
    X = np.concatenate(keepX) if keepX else np.zeros((0, n))
    return X


def _weighted(vals, w, N, n, extrap):
    wf = w * vals
    value = wf.sum() / N
    se = math.sqrt(max((wf @ wf) / N - value ** 2, 0.0) / max(N - 1, 1))
    ess = (w.sum() ** 2 / (w @ w)) if w.size and w.sum() > 0 else 0.0
    norm = wf.sum() / w.sum() if w.sum() > 0 else float("nan")
    share = float(w[extrap].sum() / w.sum()) if w.sum() > 0 else 0.0
    low = ess < LOW_ESS
    if low:
        warnings.warn(f"effective sample size {ess:.1f} below {LOW_ESS}")
    return WeightedEstimate(float(value), se, float(ess), n, N, float(norm), share, low)


def plus_batch(model, family, n, x, U_table, samples, rng):
    if x < 0:
        raise ValueError("P+ needs a start x >= 0")
    X = _constrained(model, family, n, x, "plus", samples, rng)
    end = x + X.sum(axis=1)
    w = U_table(end) / float(U_table(x))
    return WalkBatch(X, float(x), w, family, samples), end > U_table.x_max


def minus_batch(model, family, n, x, V_table, samples, rng):
    if x > 0:
        raise ValueError("P- needs a start x <= 0")
    X = _constrained(model, family, n, x, "minus", samples, rng)
    end = x + X.sum(axis=1)
    w = V_table(end) / float(V_table.left(x))
    return WalkBatch(X, float(x), w, family, samples), end < -V_table.x_max


def plus_expectation(model, family, n, functional, x, U_table, samples, rng):
    """E+_x[functional] as a weighted mean with ESS and extrapolation share."""
    batch, extrap = plus_batch(model, family, n, x, U_table, samples, rng)
    vals = np.asarray(functional(batch, rng), dtype=float)
    return _weighted(vals, batch.weights, samples, n, extrap)


def minus_expectation(model, family, n, functional, x, V_table, samples, rng):
    """E-_x[functional]; x = 0 uses the left limit V(0-)."""
    batch, extrap = minus_batch(model, family, n, x, V_table, samples, rng)
    vals = np.asarray(functional(batch, rng), dtype=float)
    return _weighted(vals, batch.weights, samples, n, extrap)


# W+ ------------------------------------------------------------------------

def weighted_quantile(x, w, q):
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    o = np.argsort(x, kind="stable")
    cw = np.cumsum(w[o])
    cw /= cw[-1]
    return np.interp(q, cw, x[o])


def weighted_ks(a, wa, b, wb):
    """Kolmogorov distance between two weighted empirical laws."""
    grid = np.union1d(a, b)

    def cdf(x, w):
        o = np.argsort(x, kind="stable")
        cw = np.cumsum(w[o]) / w.sum()
        i = np.searchsorted(x[o], grid, side="right")
        return np.where(i > 0, cw[np.maximum(i - 1, 0)], 0.0)

    return float(np.max(np.abs(cdf(np.asarray(a), np.asarray(wa)) - cdf(np.asarray(b), np.asarray(wb)))))


def estimate_Wplus(model, family, q, n, U_table, samples, rng):
    """Weighted law of e^{-S_n} Z_n under P+ from 0 with Z_0 = q."""
    if q < 1:
        raise ValueError("q must be at least 1")
    if n == 0:
        return {"values": np.array([float(q)]), "weights": np.array([1.0]), "mean": float(q),
                "atom_zero": 0.0, "ess": 1.0}
    batch, extrap = plus_batch(model, family, n, 0.0, U_table, samples, rng)
    Z = batch.population(q, rng)[:, -1]
    W = np.exp(-(batch.S[:, -1] - batch.start)) * Z
    w = batch.weights
    mean = _weighted(W, w, samples, n, extrap)
    pos = _weighted((W > 0).astype(float), w, samples, n, extrap)
    exact = _weighted(f_survival(q)(batch), w, samples, n, extrap)
    return {"values": W, "weights": w, "mean": mean, "positive_mass": pos,
            "survival_exact": exact, "atom_zero": float(w[W == 0].sum() / w.sum()),
            "ess": mean.effective_sample_size}


# conditioned trajectories ---------------------------------------------------

@dataclass
class PopulationPath:
    z: np.ndarray
    env: object
    method: str = "exact"

    def __post_init__(self):
        z = np.asarray(self.z)
        dead = np.nonzero(z == 0)[0]
        if dead.size and np.any(z[dead[0]:] != 0):
            raise ValueError("population path leaves the absorbing state 0")


@dataclass(frozen=True)
class TruncatedFamily:
    """A base family with offspring counts restricted to 0..kmax (renormalised).

    Used for exhaustive checks; the mean is no longer exactly e^X.
    """

    base: object
    kmax: int

    @property
    def is_lf(self):
        return False

    @property
    def kind(self):
        return f"{self.base.kind}<= {self.kmax}"

    def pmf(self, X):
        p = offspring_pmf(self.base, X, np.arange(self.kmax + 1))
        return p / p.sum()

    def pgf(self, X, z):
        p = self.pmf(X)
        return np.polyval(p[::-1], z)


def _extinction_to_n(env, n):
    """s[m] = F_{m,n}(0) for m = 0..n (s[n] = 0), as complements c = 1 - s."""
    X = np.asarray(env.log_means, dtype=float)[:n]
    fam = env.family
    c = np.empty(n + 1)
    c[n] = 1.0
    for m in range(n - 1, -1, -1):
        if isinstance(fam, TruncatedFamily):
            c[m] = 1.0 - fam.pgf(X[m], 1.0 - c[m + 1])
        else:
            c[m] = reversed_complement_step(fam, X[m], c[m + 1])
    return c


def _offspring_vec(fam, x, tol=1e-17):
    if isinstance(fam, TruncatedFamily):
        return fam.pmf(x)
    kmax = 8
    while True:
        p = offspring_pmf(fam, x, np.arange(kmax + 1))
        if 1.0 - p.sum() < tol or kmax > 1 << 16:
            return p
        kmax *= 2


def transition_pmf(env, n, m, k, tol=1e-8):
    """Law of Z_{m+1} given Z_m = k under P(. | Z_n > 0, environment).

    P(j | k) is proportional to P(Z_{m+1} = j | Z_m = k)(1 - F_{m+1,n}(0)^j).
    The k-fold offspring convolution is truncated adaptively until the
    neglected mass is below tol.  Returns (support, probabilities).
    """
    X = np.asarray(env.log_means, dtype=float)
    c = _extinction_to_n(env, n)
    s_next = 1.0 - c[m + 1]
    off = _offspring_vec(env.family, X[m])
    base = np.array([1.0])
    for _ in range(int(k)):
        base = np.convolve(base, off)
    j = np.arange(base.size)
    h = -np.expm1(j * np.log(s_next)) if s_next > 0 else (j > 0).astype(float)
    pj = base * h
    missing = 1.0 - base.sum()
    if missing > tol:
        raise RuntimeError("offspring convolution lost too much mass; widen the support")
    return j, pj / pj.sum()


def _nb_atleast_one(k, rho, rng):
    """NB(k, pi) failures conditioned to be >= 1, pi = 1 - rho.

    Write the count as a sum of k geometric variables and condition on the
    first nonzero one: its index I is a truncated geometric, that term is
    1 + Geom(pi), earlier terms vanish and later ones are unconditioned.
    """
    k = np.asarray(k, dtype=float)
    rho = np.asarray(rho, dtype=float)
    lpi = np.log1p(-rho)
    T = -np.expm1(k * lpi)
    v = rng.random(k.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        I = np.ceil(np.log1p(-v * T) / lpi)
    I = np.clip(np.nan_to_num(I, nan=1.0), 1.0, k)
    pi = np.broadcast_to(1.0 - rho, k.shape)
    # 1 + Geom(pi) failures by inversion, in floating point
    with np.errstate(divide="ignore"):
        first = 1.0 + np.floor(np.log(rng.random(k.shape)) / np.log(np.broadcast_to(rho, k.shape)))
    first = np.nan_to_num(first, nan=1.0, posinf=1.0)
    rest_n = k - I
    rest = np.zeros_like(k)
    m = rest_n > 0
    if np.any(m):
        rest[m] = _nbinom(rest_n[m], pi[m], rng)
    return first + rest


def _nbinom(n, p, rng):
    """NB(n, p) failures as a gamma mixed Poisson; valid for any size of n and mean."""
    n = np.asarray(n, dtype=float)
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore"):
        lam = rng.gamma(np.maximum(n, 1e-300), np.where(p > 0, (1.0 - p) / p, np.inf))
    lam = np.where(n > 0, lam, 0.0)
    out = np.empty_like(lam)
    small = lam < 1e15
    out[small] = _poisson(lam[small], rng)
    # Poisson noise is negligible against the gamma spread once lam is this large
    out[~small] = np.rint(lam[~small])
    return out


def _sample_lf_step(k, X, c_next, rng):
    """One conditioned step for linear-fractional offspring (vectorised).

    Children of the k parents are thinned by whether their line survives to
    n.  Surviving children a ~ NB(k, p/A) conditioned on a >= 1, the others
    d ~ NB(k + a, A), with A = 1 - (1-p) F_{m+1,n}(0) = p + (1-p) c.
    """
    e = np.exp(X)
    rho = e * c_next / (1.0 + e * c_next)      # 1 - p/A
    a = _nb_atleast_one(k, rho, rng)
    p = lf_p(X)
    A = p + (1 - p) * c_next
    d = _nbinom(k + a, np.broadcast_to(A, np.shape(k)), rng)
    return a + d


def _sample_poisson_step(k, X, c_next, rng):
    """Poisson thinning: surviving children Poi(k m c) given >= 1, others Poi(k m (1-c))."""
    lam_a = k * np.exp(X) * c_next
    lam_d = k * np.exp(X) * (1.0 - c_next)
    # inversion of the zero-truncated Poisson through its first arrival
    u = rng.random(np.shape(lam_a))
    t = -np.log1p(-u * -np.expm1(-lam_a)) / np.maximum(lam_a, 1e-300)
    a = 1 + _poisson(np.maximum(lam_a * (1 - np.clip(t, 0, 1)), 0.0), rng)
    return a + _poisson(lam_d, rng)


def _poisson(lam, rng):
    lam = np.asarray(lam, dtype=float)
    out = np.empty_like(lam)
    small = lam < 1e15
    out[small] = rng.poisson(lam[small])
    big = ~small
    out[big] = np.rint(lam[big] + np.sqrt(lam[big]) * rng.standard_normal(np.count_nonzero(big)))
    return out


def conditioned_trajectory(env, n, q, rng):
    """One path Z_0..Z_n drawn from L(Z | Z_n > 0, environment), Z_0 = q."""
    c = _extinction_to_n(env, n)
    if c[0] <= 0:
        raise ValueError("survival probability is zero")
    X = np.asarray(env.log_means, dtype=float)
    fam = env.family
    z = np.empty(n + 1)
    z[0] = q
    if isinstance(fam, TruncatedFamily) or not (fam.is_lf or fam.kind == "poisson"):
        for m in range(n):
            j, p = transition_pmf(env, n, m, int(z[m]))
            z[m + 1] = rng.choice(j, p=p)
        return PopulationPath(z, env, "pmf")
    step = _sample_lf_step if fam.is_lf else _sample_poisson_step
    for m in range(n):
        z[m + 1] = step(np.array([z[m]]), X[m], c[m + 1], rng)[0]
    return PopulationPath(z, env, "thinning")


def conditioned_trajectories(family, X, q, rng):
    """Vectorised conditioned paths for a matrix of environments (rows)."""
    X = np.atleast_2d(X)
    rows, n = X.shape
    c = np.empty((rows, n + 1))
    c[:, n] = 1.0
    for m in range(n - 1, -1, -1):
        c[:, m] = reversed_complement_step(family, X[:, m], c[:, m + 1])
    step = _sample_lf_step if family.is_lf else _sample_poisson_step
    Z = np.empty((rows, n + 1))
    Z[:, 0] = q
    for m in range(n):
        Z[:, m + 1] = step(Z[:, m], X[:, m], c[:, m + 1], rng)
    return Z


# pools and the kernel h ----------------------------------------------------

def horizon_extrapolate(full, part, alpha, ratio=4):
    """Remove the leading horizon bias using values at horizons m/ratio and m.

    Exponential sums such as T and Q keep growing after any finite horizon m:
    the conditioned walk comes back near 0 after time m with probability of
    order m^{-1/alpha}, so bounded functionals of them are off by C m^{-1/alpha}.
    One Richardson step on shared paths cancels that term.
    """
    r = ratio ** (1.0 / alpha)
    return full + (np.asarray(full) - np.asarray(part)) / (r - 1.0)


def plus_pool(model, y, horizon, samples, rng, U_table, with_population=False, family=None,
              checkpoint=None):
    """Killed walk from y >= 0.  Returns T = sum_k e^{-(S_k - y)}, weights, end points.

    With ``with_population`` the population from one ancestor is simulated
    too and W = e^{-(S_m - y)} Z_m is returned.  Values at ``checkpoint``
    (default horizon // 4) come back with suffix ``_q`` for the surviving
    paths; the final weights serve both horizons.
    """
    if checkpoint is None:
        checkpoint = horizon // 4
    s = np.full(samples, float(y))
    T = np.ones(samples)
    Z = np.ones(samples) if with_population else None
    Tq, sq, Zq = T.copy(), s.copy(), Z
    for k in range(horizon):
        x = model.sample(rng, s.size)
        s = s + x
        keep = s >= 0
        s, T, x, Tq, sq = s[keep], T[keep], x[keep], Tq[keep], sq[keep]
        if with_population:
            Z = sample_offspring(family, x, Z[keep], rng)
            if k >= checkpoint:
                Zq = Zq[keep]
        T += np.exp(-(s - y))
        if k + 1 == checkpoint:
            Tq, sq = T.copy(), s.copy()
            if with_population:
                Zq = Z.copy()
    if checkpoint >= horizon:
        Tq, sq, Zq = T, s, Z
    w = U_table(s) / float(U_table(y))
    out = {"T": T, "w": w, "end": s, "n": samples, "T_q": Tq, "end_q": sq,
           "horizon": horizon, "checkpoint": min(checkpoint, horizon)}
    if with_population:
        out["W"] = np.exp(-(s - y)) * Z
        out["W_q"] = np.exp(-(sq - y)) * Zq
    return out


def minus_pool(model, horizon, samples, rng, V_table, family=None, u_grid=None, checkpoint=None):
    """Killed walk from 0 staying negative.  Q = sum_{i>=1} e^{W_i}; optional B_m(u).

    ``Q_q`` (and ``B_q``) hold the values at ``checkpoint``, default horizon // 4.
    """
    if checkpoint is None:
        checkpoint = horizon // 4
    s = np.zeros(samples)
    Q = np.zeros(samples)
    comp = None
    if u_grid is not None:
        comp = np.tile(1.0 - np.asarray(u_grid, dtype=float), (samples, 1))
    Qq, sq, cq = Q.copy(), s.copy(), comp
    for k in range(horizon):
        x = model.sample(rng, s.size)
        s = s + x
        keep = s < 0
        s, Q, x, Qq, sq = s[keep], Q[keep], x[keep], Qq[keep], sq[keep]
        if comp is not None:
            comp = reversed_complement_step(family, x[:, None], comp[keep])
            if k >= checkpoint:
                cq = cq[keep]
        Q += np.exp(s)
        if k + 1 == checkpoint:
            Qq, sq = Q.copy(), s.copy()
            if comp is not None:
                cq = comp.copy()
    if checkpoint >= horizon:
        Qq, sq, cq = Q, s, comp
    w = V_table(s) / float(V_table.left(0.0))
    out = {"Q": Q, "w": w, "end": s, "n": samples, "Q_q": Qq,
           "horizon": horizon, "checkpoint": min(checkpoint, horizon)}
    if comp is not None:
        out["B"] = np.exp(np.exp(-s)[:, None] * np.log1p(-np.minimum(comp, 1.0)))
        out["B_q"] = np.exp(np.exp(-sq)[:, None] * np.log1p(-np.minimum(cq, 1.0)))
    return out


@dataclass
class HKernel:
    u: float
    w: float
    value: float
    std_error: float
    truncation: dict = field(default_factory=dict)


@dataclass
class HKernelGrid:
    u_grid: np.ndarray
    w_grid: np.ndarray
    values: np.ndarray
    std_error: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        lc = -np.log1p(-np.minimum(self.u_grid, 1 - 1e-300))
        self._lc = lc
        self._interp = RegularGridInterpolator((lc, self.w_grid), self.values,
                                               bounds_error=False, fill_value=None)

    def __call__(self, u, w):
        u = np.asarray(u, dtype=float)
        w = np.asarray(w, dtype=float)
        lc = -np.log1p(-np.minimum(u, 1 - 1e-16))
        lc_c = np.clip(lc, self._lc[0], self._lc[-1])
        w_c = np.clip(w, self.w_grid[0], self.w_grid[-1])
        v = self._interp(np.stack([lc_c, w_c], axis=-1))
        # beyond the last c node h ~ 1/c; below the w grid the e^{w/2} envelope
        v = v * np.where(lc > self._lc[-1], np.exp(self._lc[-1] - lc), 1.0)
        v = v * np.where(w < self.w_grid[0], np.exp((w - self.w_grid[0]) / 2), 1.0)
        return np.where(u >= 1, 0.0, np.maximum(v, 0.0))

    def coverage_gap(self, u, w):
        u = np.asarray(u)
        lc = -np.log1p(-np.minimum(u, 1 - 1e-16))
        return float(np.mean((lc > self._lc[-1]) | (np.asarray(w) < self.w_grid[0])))


def _tail_integral(nodes, f, y0):
    """int_{y0}^inf f dy on nodes by the trapezoid rule, splitting the cell at y0."""
    if y0 <= nodes[0]:
        return float(np.trapezoid(f, nodes))
    if y0 >= nodes[-1]:
        return 0.0
    k = np.searchsorted(nodes, y0)
    fy = np.interp(y0, nodes, f)
    return float(np.trapezoid(np.concatenate([[fy], f[k:]]), np.concatenate([[y0], nodes[k:]])))


DEFAULT_Y_NODES = np.concatenate([np.arange(0, 3, 0.25), np.arange(3, 10, 0.5),
                                  np.arange(10, 26, 2.0)])


def _inner_lf(pools, mpool, c_grid, y_nodes, rng, shuffles, sfx=""):
    """inner[c, y] = E+_y E-[1 / (c + Q + e^{-y} T)] by randomly paired pools."""
    Q, wq = mpool["Q" + sfx], mpool["w"]
    nq = Q.size
    scale_q = nq / mpool["n"]
    inner = np.zeros((c_grid.size, y_nodes.size))
    if nq == 0:
        return inner
    for iy, (y, P) in enumerate(zip(y_nodes, pools)):
        T, wt = P["T" + sfx], P["w"]
        acc = np.zeros(c_grid.size)
        for _ in range(shuffles):
            j = rng.integers(0, nq, size=T.size)
            D = Q[j] + math.exp(-y) * T
            ww = wt * wq[j]
            acc += (ww[None, :] / (c_grid[:, None] + D[None, :])).sum(axis=1)
        inner[:, iy] = acc / shuffles / P["n"] * scale_q
    return inner


def _inner_population(pools, mpool, u_grid, y_nodes, rng, shuffles, sfx=""):
    """inner[u, y] = E+_y E-[(1 - B^{W e^{-y}}) e^{y}] with sampled W and B."""
    B, wq = mpool["B" + sfx], mpool["w"]
    nq = wq.size
    scale_q = nq / mpool["n"]
    inner = np.zeros((u_grid.size, y_nodes.size))
    if nq == 0:
        return inner
    logB = np.log(np.maximum(B, 1e-300))
    for iy, (y, P) in enumerate(zip(y_nodes, pools)):
        W, wt = P["W" + sfx], P["w"]
        acc = np.zeros(u_grid.size)
        for _ in range(shuffles):
            j = rng.integers(0, nq, size=W.size)
            ww = wt * wq[j]
            psi = -np.expm1((W * math.exp(-y))[:, None] * logB[j]) * math.exp(y)
            acc += (ww[:, None] * psi).sum(axis=0)
        inner[:, iy] = acc / shuffles / P["n"] * scale_q
    return inner


def h_grid(model, family, u_grid, w_grid, U_table, V_table, rng, horizons=(300, 300),
           plus_samples=100000, minus_samples=400000, replicates=4, shuffles=4,
           y_nodes=None, method="auto", extrapolate=True):
    """Kernel h on a (u, w) grid.

    h(u, w) = int mu_1(dy) 1{y >= -w} E+_y E-[(1 - B_inf(u)^{W+ e^{-y}}) e^{y}].

    For linear-fractional offspring the W+ expectation is taken in closed
    form given the environment, which gives 1 / (c + Q + e^{-y} T) with
    c = 1/(1-u), Q = sum e^{W_i} along the P- path and T = sum e^{-(S_k-y)}
    along the P+_y path ("rb").  ``method="population"`` samples W+ from
    simulated populations and B_inf(u) at the P- horizon instead; it works
    for every family.  Replicates are independent and give the standard error.

    T, Q, W+ and B are limits along the paths, so with ``extrapolate`` the
    inner expectations are also taken at a quarter of the horizons and the
    m^{-1/alpha} truncation bias is removed by :func:`horizon_extrapolate`.
    """
    u_grid = np.asarray(u_grid, dtype=float)
    w_grid = np.asarray(w_grid, dtype=float)
    if np.any(u_grid >= 1) or np.any(u_grid < 0):
        raise ValueError("u must lie in [0, 1)")
    if method == "auto":
        method = "rb" if family.is_lf else "population"
    y_nodes = DEFAULT_Y_NODES if y_nodes is None else np.asarray(y_nodes, dtype=float)
    mu = mu_eta(U_table, 1.0)
    fine = mu.nodes
    dens = np.exp(-fine) * U_table(fine) / mu.normalizer
    m_plus, m_minus = horizons
    reps = np.zeros((replicates, u_grid.size, w_grid.size))
    raw = np.zeros_like(reps)
    ess_p, ess_m, extrap = [], [], []
    for r in range(replicates):
        pop = method == "population"
        mpool = minus_pool(model, m_minus, minus_samples, rng, V_table, family,
                           u_grid if pop else None)
        pools = [plus_pool(model, y, m_plus, plus_samples, rng, U_table, pop, family)
                 for y in y_nodes]
        ess_m.append(mpool["w"].sum() ** 2 / max((mpool["w"] ** 2).sum(), 1e-300))
        ess_p.append(min(P["w"].sum() ** 2 / max((P["w"] ** 2).sum(), 1e-300) for P in pools))
        extrap.append(max(float(P["w"][P["end"] > U_table.x_max].sum() / P["w"].sum())
                          for P in pools))
        inner_fn = _inner_population if pop else _inner_lf
        arg = u_grid if pop else 1.0 / (1.0 - u_grid)
        # both horizons see the same pairings, so their difference is precise
        state = rng.bit_generator.state
        inner = inner_fn(pools, mpool, arg, y_nodes, rng, shuffles)
        inner_raw = inner
        if extrapolate:
            rng.bit_generator.state = state
            inner_q = inner_fn(pools, mpool, arg, y_nodes, rng, shuffles, "_q")
            inner = horizon_extrapolate(inner, inner_q, model.limit.alpha,
                                        mpool["horizon"] / max(mpool["checkpoint"], 1))
        for iu in range(u_grid.size):
            f = dens * np.interp(fine, y_nodes, inner[iu])
            f_raw = dens * np.interp(fine, y_nodes, inner_raw[iu])
            for iw, w in enumerate(w_grid):
                reps[r, iu, iw] = _tail_integral(fine, f, -w)
                raw[r, iu, iw] = _tail_integral(fine, f_raw, -w)
    vals = reps.mean(axis=0)
    se = reps.std(axis=0, ddof=1) / math.sqrt(replicates) if replicates > 1 else np.zeros_like(vals)
    meta = {"method": method, "horizons": list(horizons), "plus_samples": plus_samples,
            "minus_samples": minus_samples, "replicates": replicates,
            "min_ess_plus": float(min(ess_p)), "min_ess_minus": float(min(ess_m)),
            "max_extrapolated_share": float(max(extrap)),
            "horizon_extrapolated": bool(extrapolate),
            "max_horizon_correction_rel": float(np.max(np.abs(vals - raw.mean(axis=0))
                                                       / np.maximum(vals, 1e-300))),
            "mu_mass_beyond_nodes": float(_tail_integral(fine, dens, y_nodes[-1]))}
    if min(ess_p) < LOW_ESS or min(ess_m) < LOW_ESS:
        warnings.warn("low effective sample size in h pools")
    return HKernelGrid(u_grid, w_grid, vals, se, meta)


def estimate_h(model, family, u, w, U_table, V_table, horizons=(300, 300), rng=None, **kw):
    """h(u, w) at one point; see :func:`h_grid`."""
    if u >= 1:
        return HKernel(u, w, 0.0, 0.0, {"note": "u = 1 gives B_inf = 1"})
    g = h_grid(model, family, [u], [w], U_table, V_table, rng, horizons, **kw)
    return HKernel(float(u), float(w), float(g.values[0, 0]), float(g.std_error[0, 0]), g.meta)

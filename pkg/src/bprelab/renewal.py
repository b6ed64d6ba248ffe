"""Renewal functions U and V of the associated walk.

    U(x) = 1{x >= 0} + sum_{n>=1} P(S_n >= -x, M_n < 0)
    V(x) = 1{x < 0}  + sum_{n>=1} P(S_n < -x, L_n >= 0)

Both series are estimated from killed walkers: a walker stays in the
population while it respects the sign constraint, and at each step it adds
one to every grid point x with |S_n| <= |x|.  The series tail beyond the
horizon is extrapolated from the b_n decay of the terms.

The V table is stored on an increasing grid of nonpositive x.  Its value at
x = 0 is the left limit V(0-) = 1; evaluating the table at x >= 0 returns the
literal value 0.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .streams import Estimate

__all__ = [
    "RenewalTable", "MuMeasure", "estimate_U", "estimate_V", "check_harmonicity",
    "integral_V", "integral_V_many", "mu_eta", "default_grid",
]


@dataclass
class RenewalTable:
    kind: str
    grid: np.ndarray
    values: np.ndarray
    std_error: np.ndarray
    n_max: int
    partial: np.ndarray = None
    tail: np.ndarray = None
    last_term_rel: float = 0.0
    notes: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.std_error = np.asarray(self.std_error, dtype=float)
        if self.partial is None:
            self.partial = self.values.copy()
        if self.tail is None:
            self.tail = np.zeros_like(self.values)
        k = max(2, self.grid.size // 20)
        if self.kind == "U":
            g, v = self.grid[-k:], self.values[-k:]
        else:
            g, v = self.grid[:k], self.values[:k]
        self._slope = float(np.polyfit(g, v, 1)[0])

    # evaluation -------------------------------------------------------
    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        g, v = self.grid, self.values
        if self.kind == "U":
            out = np.interp(x, g, v)
            out = np.where(x > g[-1], v[-1] + self._slope * (x - g[-1]), out)
            return np.where(x < 0, 0.0, out)
        out = np.interp(x, g, v)
        out = np.where(x < g[0], v[0] + self._slope * (x - g[0]), out)
        return np.where(x >= 0, 0.0, out)

    def left(self, x):
        """V with the left-limit convention V(0) := V(0-)."""
        x = np.asarray(x, dtype=float)
        return np.where(x == 0, self.values[-1], self(x)) if self.kind == "V" else self(x)

    def se_at(self, x):
        return np.interp(x, self.grid, self.std_error)

    def covers(self, lo, hi):
        return self.grid[0] <= lo and hi <= self.grid[-1]

    @property
    def x_max(self):
        return self.grid[-1] if self.kind == "U" else -self.grid[0]

    @property
    def extrapolation_slope(self):
        return self._slope


@dataclass
class MuMeasure:
    nodes: np.ndarray
    weights: np.ndarray
    eta: float
    normalizer: float

    def mean(self):
        return float(np.dot(self.nodes, self.weights))


def default_grid(model, x_max=40.0, h=None):
    """Uniform grid on [0, x_max] with spacing a_1 / 20 by default."""
    if h is None:
        h = model.ell / 20.0
    m = int(math.ceil(x_max / h))
    return np.arange(m + 1) * h


def _series(model, grid_abs, n_max, samples, rng, side, rel_tol, n_batches, n_min):
    """Shared engine.  side='U' keeps S < 0 and counts -S <= x; side='V' keeps S >= 0."""
    grid_abs = np.asarray(grid_abs, dtype=float)
    ng = grid_abs.size
    alpha = model.limit.alpha
    batch_sizes = np.full(n_batches, samples // n_batches)
    batch_sizes[: samples % n_batches] += 1
    per_batch = np.zeros((n_batches, ng))
    win = np.zeros(ng)
    term_hist = []
    n_stop = n_max
    for b, m in enumerate(batch_sizes):
        s = np.zeros(m)
        acc = np.zeros(ng)
        for n in range(1, n_max + 1):
            x = model.sample(rng, s.size)
            s = s + x
            s = s[s < 0] if side == "U" else s[s >= 0]
            if s.size == 0:
                break
            a = -s if side == "U" else s
            if side == "U":
                idx = np.searchsorted(grid_abs, a, side="left")
            else:
                idx = np.searchsorted(grid_abs, a, side="right")
            c = np.cumsum(np.bincount(idx, minlength=ng + 1)[:ng])
            acc += c
            if n > n_max // 2:
                win += c
            if b == 0:
                term_hist.append(c[-1] / m)
        per_batch[b] = acc / m
    partial_terms = np.average(per_batch, axis=0, weights=batch_sizes)
    se = per_batch.std(axis=0, ddof=1) / math.sqrt(n_batches)
    # truncation rule on the outermost grid point
    th = np.asarray(term_hist)
    run = 1.0 + np.cumsum(th)
    small = th < rel_tol * run
    for n in range(max(n_min, 3), th.size + 1):
        if small[n - 3:n].all():
            n_stop = n
            break
    nn = np.arange(n_max // 2 + 1, n_max + 1, dtype=float)
    decay = np.sum(nn ** (-1 - 1 / alpha))
    C = win / samples / decay
    tail = C * alpha * (n_max + 0.5) ** (-1 / alpha)
    last = np.array([th[-1] if th.size else 0.0])
    return partial_terms, se, tail, n_stop, th, last


def _finish(kind, grid, ind, partial_terms, se, tail, n_max, n_stop, th):
    partial = ind + partial_terms
    values = partial + tail
    notes = []
    rel = float(th[-1] / (1 + partial_terms[-1] if kind == "U" else 1 + partial_terms[0])) if th.size else 0.0
    if th.size > 8:
        q = th.size // 4
        if th[-q:].mean() >= th[-2 * q:-q].mean():
            notes.append("series terms not decaying at the horizon")
            warnings.warn(f"{kind}-series terms are not decaying at N_max={n_max}")
    if n_stop >= n_max:
        notes.append("truncation rule not met before N_max; tail extrapolated")
    return RenewalTable(kind, grid, values, se, n_max, partial, tail, rel, notes,
                        {"n_stop": int(n_stop)})


def estimate_U(model, x_grid, N_max, samples, rng, rel_tol=1e-3, n_batches=16, n_min=None):
    """U on a grid of x >= 0 (points below 0 get the value 0)."""
    if N_max < 1:
        raise ValueError("N_max must be at least 1")
    grid = np.asarray(x_grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be increasing")
    pos = grid >= 0
    if n_min is None:
        n_min = int(min(N_max, 16 * (max(grid[-1], 1.0) / model.ell) ** model.limit.alpha))
    pt, se, tail, n_stop, th, _ = _series(model, np.maximum(grid, 0), N_max, samples, rng,
                                          "U", rel_tol, n_batches, n_min)
    ind = pos.astype(float)
    pt, se, tail = pt * pos, se * pos, tail * pos
    t = _finish("U", grid, ind, pt, se, tail, N_max, n_stop, th)
    t.meta.update(model=model.key(), samples=int(samples))
    return t


def estimate_V(model, x_grid, N_max, samples, rng, rel_tol=1e-3, n_batches=16, n_min=None):
    """V on an increasing grid of x <= 0; the entry at x = 0 is V(0-) = 1."""
    if N_max < 1:
        raise ValueError("N_max must be at least 1")
    grid = np.asarray(x_grid, dtype=float)
    if np.any(np.diff(grid) <= 0) or grid[-1] > 0:
        raise ValueError("V grid must be increasing and nonpositive")
    u = -grid
    if n_min is None:
        n_min = int(min(N_max, 16 * (max(u[0], 1.0) / model.ell) ** model.limit.alpha))
    pt, se, tail, n_stop, th, _ = _series(model, u[::-1], N_max, samples, rng, "V",
                                          rel_tol, n_batches, n_min)
    # strict count S_n < u via searchsorted(side="right")
    pt, se, tail = pt[::-1], se[::-1], tail[::-1]
    ind = np.ones_like(grid)
    t = _finish("V", grid, ind, pt, se, tail, N_max, n_stop, th)
    t.meta.update(model=model.key(), samples=int(samples))
    return t


def check_harmonicity(model, table, side, x, samples, rng, steps=1):
    """Relative residual of E[U(x+X); x+X >= 0] = U(x) or E[V(x+X); x+X < 0] = V(x).

    With ``steps`` = n > 1 the n-step form E_x[U(S_n); L_n >= 0] = U(x) (or its
    minus-side dual) is checked on killed walks.  Returns an Estimate whose
    value is the signed relative residual and whose standard error combines
    the Monte Carlo error with the table error.
    """
    if side == "plus":
        if x < 0:
            raise ValueError("plus side needs x >= 0")
    elif side == "minus":
        if x >= 0:
            raise ValueError("minus side needs x < 0")
    else:
        raise ValueError("side must be 'plus' or 'minus'")
    ref = float(table(x))
    if ref == 0:
        raise ValueError("table vanishes at x; residual undefined")
    if steps < 1:
        raise ValueError("steps must be positive")
    y = np.full(samples, float(x))
    keep = np.ones(samples, dtype=bool)
    for _ in range(steps):
        y = y + model.sample(rng, samples)
        keep &= (y >= 0) if side == "plus" else (y < 0)
    vals = np.where(keep, table(np.where(keep, y, -1.0 if side == "plus" else 1.0)), 0.0)
    m = vals.mean()
    se_mc = vals.std(ddof=1) / math.sqrt(samples)
    se_tab_shift = float(np.mean(np.where(keep, table.se_at(y), 0.0)))
    se_tab_ref = float(table.se_at(x))
    se = math.sqrt(se_mc ** 2 + se_tab_shift ** 2 + se_tab_ref ** 2)
    r = (m - ref) / ref
    return Estimate(r, se / ref, samples, int(keep.sum()),
                    extra={"lhs": float(m), "rhs": ref, "se_mc": se_mc / ref})


def integral_V(table, y):
    """int_0^y V(-u) du by the trapezoid rule, with a grid-halving error estimate.

    Returns (value, error).
    """
    if table.kind != "V":
        raise ValueError("integral_V needs a V table")
    if y <= 0:
        return 0.0, 0.0
    if y > -table.grid[0]:
        raise ValueError(f"V table covers u <= {-table.grid[0]}, asked for {y}")
    u = -table.grid[::-1]
    v = table.values[::-1]
    k = np.searchsorted(u, y, side="right")
    uu = np.append(u[:k], y) if u[k - 1] < y else u[:k]
    vv = np.append(v[:k], np.interp(y, u, v)) if u[k - 1] < y else v[:k]
    fine = float(np.trapezoid(vv, uu))
    coarse = float(np.trapezoid(np.append(vv[:-1:2], vv[-1]), np.append(uu[:-1:2], uu[-1])))
    return fine, abs(fine - coarse) / 3.0


def integral_V_many(table, y):
    """Vectorised int_0^y V(-u) du for an array of y >= 0 (y beyond the grid extrapolated)."""
    u = -table.grid[::-1]
    v = table.values[::-1]
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * np.diff(u))])
    y = np.asarray(y, dtype=float)
    yc = np.clip(y, 0, u[-1])
    k = np.clip(np.searchsorted(u, yc, side="right") - 1, 0, u.size - 2)
    vy = np.interp(yc, u, v)
    inner = cum[k] + 0.5 * (v[k] + vy) * (yc - u[k])
    s = table.extrapolation_slope
    # beyond the grid V(-u) = v_end - s (u - u_end), s < 0 for a V table
    d = np.maximum(y - u[-1], 0.0)
    out = inner + v[-1] * d - 0.5 * s * d * d
    return np.where(y <= 0, 0.0, out)


def mu_eta(table_U, eta=1.0):
    """Quadrature form of mu_eta(dy) = e^{-eta y} U(y) dy / int e^{-eta x} U(x) dx."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    if table_U.kind != "U":
        raise ValueError("mu_eta needs a U table")
    g = table_U.grid[table_U.grid >= 0]
    f = np.exp(-eta * g) * table_U(g)
    if f[-1] >= 1e-10 * f.max():
        raise ValueError("U table does not cover the tail of mu_eta; extend the grid")
    w = np.empty_like(g)
    d = np.diff(g)
    w[0] = 0.5 * d[0]
    w[-1] = 0.5 * d[-1]
    w[1:-1] = 0.5 * (d[1:] + d[:-1])
    raw = w * f
    z = raw.sum()
    return MuMeasure(g, raw / z, float(eta), float(z))

"""Associated random walk: paths, fluctuation functionals and rare-event estimators.

Rare events of the form {L_n >= 0} or {M_n < 0} are estimated with killed
walkers: paths leave the population as soon as the constraint is violated, so
the cost is proportional to the number of surviving walker-steps.
"""

from dataclasses import dataclass

import numpy as np

from .streams import Estimate, mean_estimate

__all__ = [
    "WalkPath", "PathStats", "simulate_path", "simulate_sums", "path_stats",
    "path_stats_batch", "reverse_path", "estimate_stay_low",
    "estimate_exp_at_min_epoch", "min_epoch_duality",
]

CHUNK = 1 << 16


@dataclass(frozen=True)
class WalkPath:
    increments: np.ndarray
    partial_sums: np.ndarray

    @classmethod
    def from_increments(cls, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.size == 0:
            raise ValueError("a path needs at least one increment")
        return cls(x, np.cumsum(x))

    @property
    def n(self):
        return self.increments.size


@dataclass(frozen=True)
class PathStats:
    L: float
    M: float
    tau: int


def simulate_path(model, n, rng):
    if n < 1:
        raise ValueError("n must be positive")
    return WalkPath.from_increments(model.sample(rng, n))


def simulate_sums(model, n, size, rng):
    """Matrix of partial sums, one row per path."""
    return np.cumsum(model.sample(rng, (size, n)), axis=1)


def path_stats(path):
    s = path.partial_sums
    L, M = float(s.min()), float(s.max())
    if L >= 0:
        return PathStats(L, M, 0)
    return PathStats(L, M, int(np.argmin(s)) + 1)


def path_stats_batch(S):
    """Vectorised (L, M, tau) for a matrix of partial sums."""
    S = np.atleast_2d(S)
    L = S.min(axis=1)
    M = S.max(axis=1)
    tau = np.where(L >= 0, 0, np.argmin(S, axis=1) + 1)
    return L, M, tau


def reverse_path(path):
    return WalkPath.from_increments(path.increments[::-1])


def _chunks(samples, chunk):
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        yield m
        done += m


def estimate_stay_low(model, n, y, samples, rng, chunk=1 << 20):
    """P(S_n <= y, L_n >= 0) for one or several levels y on shared paths.

    Returns a single Estimate for scalar y, else a list.
    """
    ys = np.atleast_1d(np.asarray(y, dtype=float))
    if np.any(ys <= 0) or samples < 1:
        raise ValueError("need y > 0 and samples >= 1")
    counts = np.zeros(ys.size, dtype=np.int64)
    for m in _chunks(samples, chunk):
        s = np.zeros(m)
        for _ in range(n):
            s = s + model.sample(rng, s.size)
            s = s[s >= 0]
            if s.size == 0:
                break
        counts += np.searchsorted(np.sort(s), ys, side="right")
    out = []
    for c in counts:
        p = c / samples
        se = np.sqrt(p * (1 - p) / samples)
        out.append(Estimate(float(p), float(se), samples, int(c), c == 0))
    return out[0] if np.ndim(y) == 0 else out


def estimate_exp_at_min_epoch(model, n, samples, rng, paired=False, chunk=1 << 20):
    """E[e^{S_n}; tau_n = n].

    By default the dual form E[e^{S_n}; M_n < 0] is computed with killed
    walkers; this is the same random variable as the primal one evaluated on
    the time-reversed path.  With ``paired=True`` full paths are drawn, the
    primal indicator is evaluated on each path and the dual indicator on its
    reversal, and both estimates are returned (they coincide path by path).
    """
    if samples < 1:
        raise ValueError("samples must be positive")
    if paired:
        prim, dual = [], []
        for m in _chunks(samples, max(1, min(chunk, CHUNK * 16 // max(n, 1)))):
            x = model.sample(rng, (m, n))
            S = np.cumsum(x, axis=1)
            _, _, tau = path_stats_batch(S)
            prim.append(np.where(tau == n, np.exp(np.minimum(S[:, -1], 0.0)), 0.0))
            Sr = np.cumsum(x[:, ::-1], axis=1)
            dual.append(np.where(Sr.max(axis=1) < 0, np.exp(np.minimum(Sr[:, -1], 0.0)), 0.0))
        return mean_estimate(np.concatenate(prim)), mean_estimate(np.concatenate(dual))
    vals = []
    for m in _chunks(samples, chunk):
        s = np.zeros(m)
        for _ in range(n):
            s = s + model.sample(rng, s.size)
            s = s[s < 0]
            if s.size == 0:
                break
        vals.append(np.exp(s))
    return mean_estimate(np.concatenate(vals), n_total=samples)


def min_epoch_duality(model, j, w, samples, rng, chunk=CHUNK):
    """Three estimates of P(S_j <= w, tau_j = j).

    ``primal``: the event on forward paths.  ``reversed``: {M_j < 0, S_j <= w}
    on the reversed copies of the same paths.  ``independent``: {M_j < 0,
    S_j <= w} on a fresh, independent sample, which checks the identity in
    distribution rather than path by path.
    """
    a, b, c = [], [], []
    for m in _chunks(samples, chunk):
        x = model.sample(rng, (m, j))
        S = np.cumsum(x, axis=1)
        _, _, tau = path_stats_batch(S)
        a.append((tau == j) & (S[:, -1] <= w))
        Sr = np.cumsum(x[:, ::-1], axis=1)
        b.append((Sr.max(axis=1) < 0) & (Sr[:, -1] <= w))
    for m in _chunks(samples, chunk):
        S = np.cumsum(model.sample(rng, (m, j)), axis=1)
        c.append((S.max(axis=1) < 0) & (S[:, -1] <= w))
    est = [mean_estimate(np.concatenate(v).astype(float)) for v in (a, b, c)]
    return dict(zip(("primal", "reversed", "independent"), est))

"""Counter-based random streams and the Monte Carlo estimate record.

Every stochastic routine in the package takes an explicit ``numpy.random.Generator``.
Reproducible lanes are obtained from :func:`lane_rng`, which keys a Philox
generator by ``(master seed, experiment, n, lane)``.  Philox is counter based,
so a lane's stream does not depend on which other lanes were drawn before it.
"""

import hashlib
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

__all__ = ["lane_rng", "stream_key", "Estimate", "mean_estimate", "batch_estimate",
           "Lanes", "map_lanes", "merge_sums"]


def _as_int(tag):
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(tag).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream_key(seed, *tags):
    """Two 64-bit words used as the Philox key for ``(seed, *tags)``."""
    if seed is None:
        raise ValueError("a master seed is mandatory")
    words = [_as_int(seed)] + [_as_int(t) for t in tags]
    ss = np.random.SeedSequence(words)
    return ss.generate_state(2, dtype=np.uint64)


def lane_rng(seed, *tags):
    """Independent generator for one worker lane.

    >>> a = lane_rng(7, "survival", 128, 0).standard_normal()
    >>> b = lane_rng(7, "survival", 128, 0).standard_normal()
    >>> a == b
    True
    """
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *tags)))


@dataclass
class Estimate:
    """Monte Carlo value with its standard error."""

    value: float
    std_error: float
    n_samples: int
    hits: int = -1
    degenerate: bool = False
    extra: dict = field(default_factory=dict)

    def z_score(self, other):
        se = math.hypot(self.std_error, other.std_error)
        if se == 0.0:
            return 0.0 if self.value == other.value else math.inf
        return abs(self.value - other.value) / se

    def agrees(self, other, k=3.0):
        return self.z_score(other) < k

    def ratio(self, other):
        """Ratio estimate assuming independent errors (delta method)."""
        r = self.value / other.value
        rel = math.hypot(self.std_error / self.value if self.value else 0.0,
                         other.std_error / other.value)
        return Estimate(r, abs(r) * rel, min(self.n_samples, other.n_samples))

    def scaled(self, c):
        return Estimate(self.value * c, self.std_error * abs(c), self.n_samples,
                        self.hits, self.degenerate, dict(self.extra))

    def to_dict(self):
        return asdict(self)


def mean_estimate(values, n_total=None):
    """Plain sample mean; ``values`` may omit zeros when ``n_total`` is given."""
    values = np.asarray(values, dtype=float)
    n = values.size if n_total is None else int(n_total)
    if n == 0:
        return Estimate(0.0, math.inf, 0, 0, True)
    s1 = values.sum()
    s2 = np.dot(values, values)
    m = s1 / n
    var = max(s2 / n - m * m, 0.0) * n / max(n - 1, 1)
    hits = int(np.count_nonzero(values))
    return Estimate(float(m), math.sqrt(var / n), n, hits, hits == 0)


def batch_estimate(sums, sq_sums, counts):
    """Merge per-lane running sums into one estimate (order is fixed by caller)."""
    n = int(np.sum(counts))
    s1 = float(np.sum(sums))
    s2 = float(np.sum(sq_sums))
    if n == 0:
        return Estimate(0.0, math.inf, 0, 0, True)
    m = s1 / n
    var = max(s2 / n - m * m, 0.0) * n / max(n - 1, 1)
    return Estimate(m, math.sqrt(var / n), n)


@dataclass(frozen=True)
class Lanes:
    """Split of one Monte Carlo budget over independent keyed streams.

    Lane i draws from ``lane_rng(seed, *tags, *extra, i)``.  With
    ``workers > 1`` lanes run in a process pool; results are always returned
    in lane order, so merged sums do not depend on scheduling.
    """

    seed: int
    tags: tuple = ()
    n_lanes: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("a master seed is mandatory")
        if self.n_lanes < 1 or self.workers < 1:
            raise ValueError("need at least one lane and one worker")

    def rng(self, i, *extra):
        return lane_rng(self.seed, *self.tags, *extra, i)

    def sub(self, *extra):
        return Lanes(self.seed, tuple(self.tags) + tuple(extra), self.n_lanes, self.workers)

    def split(self, samples):
        base, rem = divmod(int(samples), self.n_lanes)
        return [base + (i < rem) for i in range(self.n_lanes)]


def _call(fn, args, samples, rng):
    return fn(*args, samples, rng)


def map_lanes(fn, rng, samples, *args):
    """Run ``fn(*args, samples_i, rng_i)`` over lanes and return the results in order.

    ``rng`` may be a plain Generator (one lane) or a :class:`Lanes` spec.
    """
    if not isinstance(rng, Lanes):
        return [fn(*args, samples, rng)]
    sizes = rng.split(samples)
    gens = [rng.rng(i) for i in range(rng.n_lanes)]
    if rng.workers == 1:
        return [fn(*args, m, g) for m, g in zip(sizes, gens)]
    with ProcessPoolExecutor(max_workers=rng.workers) as ex:
        futs = [ex.submit(_call, fn, args, m, g) for m, g in zip(sizes, gens)]
        return [f.result() for f in futs]


def merge_sums(parts):
    """Elementwise sum of dicts of arrays, in the given order."""
    out = {}
    for p in parts:
        for k, v in p.items():
            out[k] = out[k] + v if k in out else np.array(v, dtype=float, copy=True)
    return out

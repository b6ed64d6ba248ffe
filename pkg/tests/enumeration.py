"""Exhaustive path law of a Galton-Watson chain in a fixed environment."""

import numpy as np


def conditioned_path_law(pmf_list, q=1):
    """Law of (Z_1..Z_n) given Z_n > 0, Z_0 = q, by enumerating every family tree size.

    pmf_list[m] is the offspring pmf of generation m + 1 (finite support).
    Returns (law dict keyed by path tuples, unconditioned survival probability).
    """
    n = len(pmf_list)
    paths = {}

    def rec(z, path, prob, m):
        if m == n:
            if z > 0:
                paths[tuple(path)] = paths.get(tuple(path), 0.0) + prob
            return
        if z == 0:
            rec(0, path + [0], prob, m + 1)
            return
        off = np.array([1.0])
        for _ in range(z):
            off = np.convolve(off, pmf_list[m])
        for j, pj in enumerate(off):
            if pj > 0:
                rec(j, path + [j], prob * pj, m + 1)

    rec(q, [], 1.0, 0)
    tot = sum(paths.values())
    return {k: v / tot for k, v in paths.items()}, tot


def tv(a, b):
    keys = set(a) | set(b)
    return 0.5 * sum(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys)

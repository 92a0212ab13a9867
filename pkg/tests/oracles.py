"""Independent reference computations used by the tests.

Nothing here calls into the package's numerics: gradients come from central
differences, subsequences and edit scripts from brute-force enumeration, and
normal quantiles from bisection on ``math.erf``.
"""

from __future__ import annotations

import math
from functools import lru_cache
from itertools import combinations, product

import numpy as np


def central_difference(f, arrays, eps=1e-5):
    """Numerical gradient of scalar ``f(*arrays)`` with respect to each array (float64)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            hi = f(*arrays)
            a[i] = old - eps
            lo = f(*arrays)
            a[i] = old
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(analytic, numeric) -> float:
    """Norm-wise relative error, guarded for near-zero gradients."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / denom)


def lcs_brute(a, b) -> int:
    """Length of the longest subsequence of ``a`` that is also a subsequence of ``b``."""

    def is_subseq(sub, seq):
        it = iter(seq)
        return all(x in it for x in sub)

    for k in range(len(a), 0, -1):
        for idx in combinations(range(len(a)), k):
            if is_subseq([a[i] for i in idx], b):
                return k
    return 0


def edit_scripts(ref, hyp) -> set[tuple[int, int, int]]:
    """Every (S, D, I) triple reachable by some alignment of ``ref`` to ``hyp``.

    Enumerates all alignment paths; memoized on the position pair so the set
    of triples, not the paths, is stored.
    """

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(ref) and j == len(hyp):
            return frozenset({(0, 0, 0)})
        out = set()
        if i < len(ref) and j < len(hyp):
            sub = int(ref[i] != hyp[j])
            out |= {(s + sub, d, n) for s, d, n in go(i + 1, j + 1)}
        if i < len(ref):
            out |= {(s, d + 1, n) for s, d, n in go(i + 1, j)}
        if j < len(hyp):
            out |= {(s, d, n + 1) for s, d, n in go(i, j + 1)}
        return frozenset(out)

    return set(go(0, 0))


def min_edits_brute(ref, hyp) -> int:
    return min(sum(t) for t in edit_scripts(ref, hyp))


def all_sequences(alphabet, max_len):
    for n in range(max_len + 1):
        yield from product(alphabet, repeat=n)


def normal_quantile(p: float) -> float:
    """Standard normal quantile by bisection on the erf-based CDF."""
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = (lo + hi) / 2
        if 0.5 * (1 + math.erf(mid / math.sqrt(2))) < p:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def nf4_reference() -> list[float]:
    """NF4 levels from the quantile construction, via :func:`normal_quantile`."""
    p0 = 1 / 32
    neg = [normal_quantile(p0 + (0.5 - p0) * i / 8) for i in range(8)]
    pos = [normal_quantile(0.5 + (0.5 - p0) * i / 7) for i in range(1, 8)]
    return sorted([v / -neg[0] for v in neg] + [0.0] + [v / pos[-1] for v in pos])


def skip_bigrams_brute(tokens):
    return [(tokens[i], tokens[j]) for i in range(len(tokens)) for j in range(len(tokens)) if i < j]


def subsequences(seq) -> frozenset:
    """Every subsequence of ``seq`` (including the empty one) as a set of tuples."""
    return frozenset(tuple(seq[i] for i in idx) for k in range(len(seq) + 1) for idx in combinations(range(len(seq)), k))


def lcs_by_enumeration(sub_a: frozenset, sub_b: frozenset) -> int:
    return max(len(s) for s in sub_a & sub_b)


def group_index(shape, kind, block=64):
    """Group id of every element (row-major) for tensor, row or block grouping."""
    rows, cols = shape
    flat = np.arange(rows * cols)
    if kind == "tensor":
        return np.zeros(rows * cols, dtype=int)
    if kind == "row":
        return flat // cols
    return flat // block


def reference_scales(x, kind, bits, gidx):
    """Per-element scale straight from the scheme definitions.

    asymmetric: range widened to contain 0, split into 2^b - 1 steps;
    symmetric: absmax over 2^(b-1) - 1; nf4: absmax.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    S = np.empty_like(x)
    for g in np.unique(gidx):
        v = x[gidx == g]
        if kind == "asymmetric":
            s = (max(v.max(), 0.0) - min(v.min(), 0.0)) / (2**bits - 1)
        elif kind == "symmetric":
            s = np.abs(v).max() / (2 ** (bits - 1) - 1)
        else:
            s = np.abs(v).max()
        S[gidx == g] = s
    return S

"""Independent reference implementations used by the tests."""

import itertools
from fractions import Fraction

import mpmath

mpmath.mp.dps = 40


def normal_cdf(x):
    return float(mpmath.ncdf(x))


def normal_ppf_bisect(p, lo=-40.0, hi=40.0, iters=200):
    p = mpmath.mpf(p)
    lo, hi = mpmath.mpf(lo), mpmath.mpf(hi)
    for _ in range(iters):
        mid = (lo + hi) / 2
        if mpmath.ncdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return float((lo + hi) / 2)


def binom_cdf_enumerated(n_a, k0):
    """P(#heads <= n_a) by walking all 2**k0 equiprobable vote outcomes."""
    hits = sum(1 for votes in itertools.product((0, 1), repeat=k0) if sum(votes) <= n_a)
    return Fraction(hits, 2 ** k0)

"""Compiled kernels for ensembles of independent Moran chains.

An ensemble of ``R`` independent chains that share a transition kernel is
tracked through its occupation counts: the ``c`` chains sitting in cell
``(e, i)`` move up/down/stay with a multinomial split and then spread over
environment states with another multinomial.  This is exact in law for the
ensemble and costs O(cells) per step instead of O(R).
"""
import numpy as np
from numba import njit

# below this mean, inversion beats the library sampler
_INVERSION_MEAN = 30.0


@njit(cache=True)
def binomial(rng, n, p):
    """``Binomial(n, p)`` draw: sequential inversion for small ``n p``, library sampler otherwise."""
    if n <= 0 or p <= 0.0:
        return 0
    if p >= 1.0:
        return n
    if p > 0.5:
        return n - binomial(rng, n, 1.0 - p)
    if n * p > _INVERSION_MEAN:
        return rng.binomial(n, p)
    q = 1.0 - p
    s = p / q
    a = (n + 1) * s
    r = q ** n
    u = rng.random()
    x = 0
    while u > r:
        u -= r
        x += 1
        if x >= n:
            return n
        r *= a / x - s
    return x


@njit(cache=True)
def _spread(rng, new, b, i, e, k, P):
    """Send ``k`` chains at count ``i`` from environment ``e`` to their next environment."""
    E = P.shape[0]
    if E == 1:
        new[b, 0, i] += k
        return
    left = k
    mass = 1.0
    for f in range(E - 1):
        if left == 0:
            return
        pf = P[e, f]
        d = binomial(rng, left, min(1.0, pf / mass)) if mass > 0.0 else 0
        new[b, f, i] += d
        left -= d
        mass -= pf
    new[b, E - 1, i] += left


@njit(cache=True)
def moran_counts_step(rng, counts, pp, pm, P, g, acc):
    """One Moran step for every batch; adds ``sum counts * g`` (pre-step) to ``acc``.

    counts : (B, E, M) int64, pp/pm/g : (E, M), P : (E, E), acc : (B,)
    """
    B, E, M = counts.shape
    new = np.zeros_like(counts)
    for b in range(B):
        tot = 0.0
        for e in range(E):
            for i in range(M):
                c = counts[b, e, i]
                if c == 0:
                    continue
                tot += c * g[e, i]
                up = binomial(rng, c, pp[e, i])
                rest = c - up
                rem = 1.0 - pp[e, i]
                down = binomial(rng, rest, min(1.0, pm[e, i] / rem)) if rem > 0.0 else 0
                stay = rest - down
                if up:
                    _spread(rng, new, b, i + 1, e, up, P)
                if down:
                    _spread(rng, new, b, i - 1, e, down, P)
                if stay:
                    _spread(rng, new, b, i, e, stay, P)
        acc[b] += tot
    return new


@njit(cache=True)
def counts_dot(counts, g, acc):
    B, E, M = counts.shape
    for b in range(B):
        tot = 0.0
        for e in range(E):
            for i in range(M):
                if counts[b, e, i]:
                    tot += counts[b, e, i] * g[e, i]
        acc[b] += tot

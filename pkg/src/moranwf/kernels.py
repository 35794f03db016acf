"""One-step kernels of the Moran and discrete Wright-Fisher chains.

States live on the lattice ``I_J = {i/J : 0 <= i <= J}`` and are carried as
integer counts ``i`` wherever the chain is simulated, so no float drift
accumulates along a path.  Selection and immigration are weak: the
per-step probabilities are ``s = s'/J`` and ``m = m'/J``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from math import comb, isfinite

import numpy as np

PROB_TOL = 1e-12
LATTICE_TOL = 1e-12


class ParameterError(ValueError):
    """Raised when parameters leave the admissible regime of a kernel."""


@dataclass(frozen=True)
class PopulationParams:
    """Population size and rescaled selection / immigration.

    Parameters
    ----------
    J : int
        Population size (>= 2).
    s_prime : float
        Rescaled selection; the per-step selection is ``s = s_prime / J``.
    m_prime : float
        Rescaled immigration; ``m = m_prime / J`` must be a probability.
    p : float
        Fraction of species 1 in the immigrant pool.
    """

    J: int
    s_prime: float = 0.0
    m_prime: float = 0.0
    p: float = 0.5

    def __post_init__(self):
        if int(self.J) != self.J or self.J < 2:
            raise ParameterError(f"J must be an integer >= 2, got {self.J!r}")
        object.__setattr__(self, "J", int(self.J))
        for name in ("s_prime", "m_prime", "p"):
            if not isfinite(getattr(self, name)):
                raise ParameterError(f"{name} must be finite")
        if not 0.0 <= self.p <= 1.0:
            raise ParameterError(f"p must lie in [0, 1], got {self.p}")
        if self.m_prime < 0 or self.m_prime / self.J > 1.0:
            raise ParameterError(
                f"m = m'/J must lie in [0, 1], got m'={self.m_prime}, J={self.J}")
        # 1 + s x > 0 on [0, 1]  <=>  s > -1  <=>  J > -s'
        if self.s_prime / self.J <= -1.0:
            raise ParameterError(
                f"1 + s x must stay positive: need J > -s', got s'={self.s_prime}, J={self.J}")

    @property
    def s(self) -> float:
        return self.s_prime / self.J

    @property
    def m(self) -> float:
        return self.m_prime / self.J

    @property
    def delta(self) -> float:
        return 1.0 / self.J

    def with_J(self, J: int) -> "PopulationParams":
        return replace(self, J=J)

    def with_selection(self, s_prime: float) -> "PopulationParams":
        return replace(self, s_prime=s_prime)


@dataclass(frozen=True)
class StateX:
    """A point ``i/J`` of the lattice, stored as its integer count."""

    i: int
    J: int

    def __post_init__(self):
        if not 0 <= self.i <= self.J:
            raise ParameterError(f"count {self.i} outside 0..{self.J}")

    @property
    def x(self) -> float:
        return self.i / self.J

    @classmethod
    def from_fraction(cls, x: float, J: int) -> "StateX":
        return cls(lattice_index(x, J), J)


def lattice_index(x, J: int) -> int:
    """Integer count of a lattice point; rejects off-lattice fractions."""
    if isinstance(x, StateX):
        if x.J != J:
            raise ParameterError(f"state lives on I_{x.J}, expected I_{J}")
        return x.i
    xf = float(x)
    i = round(xf * J)
    if abs(xf * J - i) > LATTICE_TOL * max(1.0, J) or not 0 <= i <= J:
        raise ParameterError(f"x={xf} is not a point of I_{J}")
    return int(i)


def _as_fraction(x, J: int) -> float:
    return lattice_index(x, J) / J


def _selection(params: PopulationParams, s) -> float:
    s = params.s if s is None else float(s)
    if not s > -1.0:
        raise ParameterError(f"selection s={s} violates 1 + s x > 0")
    return s


@dataclass(frozen=True)
class MomentReport:
    """Centered one-step moments ``E[(X_1 - x)^k]``, k = 1..5.

    ``m4``/``m5`` are ``None`` for the Moran chain.
    """

    m1: float
    m2: float
    m3: float
    m4: float | None = None
    m5: float | None = None

    def __post_init__(self):
        vals = [v for v in (self.m1, self.m2, self.m3, self.m4, self.m5) if v is not None]
        if not all(isfinite(v) for v in vals):
            raise ValueError("non-finite moment")

    def as_tuple(self):
        return (self.m1, self.m2, self.m3, self.m4, self.m5)


# --------------------------------------------------------------------------
# Moran chain
# --------------------------------------------------------------------------

def moran_probs_array(x, s: float, m: float, p: float):
    """Vectorised ``(p_plus, p_minus)`` for fractions ``x`` (no validation)."""
    x = np.asarray(x, dtype=float)
    q = x * (1.0 + s) / (1.0 + s * x)
    p_plus = (1.0 - x) * (m * p + (1.0 - m) * q)
    p_minus = x * (m * (1.0 - p) + (1.0 - m) * (1.0 - q))
    return p_plus, p_minus


def _check_prob(name, value):
    if value < -PROB_TOL or value > 1.0 + PROB_TOL:
        raise ParameterError(f"{name}={value} outside [0, 1]: invalid parameter regime")
    return min(max(value, 0.0), 1.0)


def moran_transition_probs(x, params: PopulationParams, s=None):
    """Probabilities of moving up, down, or staying from ``x``.

    ``s`` overrides the constant selection ``params.s`` (per-step value used
    by the random-environment chains).  ``p_stay`` is the complement, so the
    three values sum to one exactly.
    """
    s = _selection(params, s)
    xf = _as_fraction(x, params.J)
    p_plus, p_minus = moran_probs_array(xf, s, params.m, params.p)
    p_plus = _check_prob("p_plus", float(p_plus))
    p_minus = _check_prob("p_minus", float(p_minus))
    p_stay = 1.0 - (p_plus + p_minus)
    if p_stay < -PROB_TOL:
        raise ParameterError(f"p_plus + p_minus = {p_plus + p_minus} exceeds 1")
    return p_plus, p_minus, p_stay


def moran_step(x, params: PopulationParams, s=None, rng=None) -> StateX:
    """Draw one Moran transition from ``x``; returns the new lattice state."""
    rng = np.random.default_rng() if rng is None else rng
    i = lattice_index(x, params.J)
    p_plus, p_minus, _ = moran_transition_probs(StateX(i, params.J), params, s)
    u = rng.random()
    if u < p_plus:
        i += 1
    elif u < p_plus + p_minus:
        i -= 1
    return StateX(i, params.J)


def moran_centered_moments(x, params: PopulationParams, s=None) -> MomentReport:
    """Closed-form first and second centered moments; third by enumeration."""
    s = _selection(params, s)
    J, m, p = params.J, params.m, params.p
    xf = _as_fraction(x, J)
    m1 = s * xf * (1 - xf) * (1 - m) / (J * (1 + s * xf)) + m * (p - xf) / J
    m2 = (m * p * (1 - 2 * xf)
          + (1 - m) * (1 + s) * xf * (1 - 2 * xf) / (1 + s * xf)
          + xf) / J**2
    p_plus, p_minus, _ = moran_transition_probs(xf, params, s)
    m3 = (p_plus - p_minus) / J**3
    return MomentReport(m1, m2, m3)


# --------------------------------------------------------------------------
# Discrete Wright-Fisher chain
# --------------------------------------------------------------------------

def wf_success_array(x, s: float, m: float, p: float):
    x = np.asarray(x, dtype=float)
    return m * p + (1.0 - m) * (1.0 + s) * x / (1.0 + s * x)


def wf_success_prob(x, params: PopulationParams, s=None) -> float:
    """Binomial success probability ``P_x = m p + (1-m)(1+s)x/(1+sx)``."""
    s = _selection(params, s)
    xf = _as_fraction(x, params.J)
    return _check_prob("P_x", float(wf_success_array(xf, s, params.m, params.p)))


def wf_step(x, params: PopulationParams, s=None, rng=None) -> StateX:
    """Resample the whole population: ``k ~ Binomial(J, P_x)``."""
    rng = np.random.default_rng() if rng is None else rng
    P = wf_success_prob(x, params, s)
    return StateX(int(rng.binomial(params.J, P)), params.J)


def binomial_central_moments(n: int, P: float):
    """Central moments of order 2..5 of ``Binomial(n, P)`` (count scale)."""
    v = P * (1.0 - P)
    mu2 = n * v
    mu3 = n * v * (1.0 - 2.0 * P)
    mu4 = n * v * (3.0 * n * v - 6.0 * v + 1.0)
    mu5 = n * v * (1.0 - 2.0 * P) * (10.0 * n * v - 12.0 * v + 1.0)
    return (0.0, mu2, mu3, mu4, mu5)


def wf_centered_moments(x, params: PopulationParams, s=None, order: int = 5) -> MomentReport:
    """Exact moments ``E[(X_1 - x)^k]`` of the binomial step, ``k <= order``.

    Central moments about ``P_x`` are shifted to moments about ``x`` with the
    binomial theorem.  Orders above ``order`` are reported as ``None``.
    """
    if not 1 <= order <= 5:
        raise ParameterError(f"moment order must be in 1..5, got {order}")
    J = params.J
    xf = _as_fraction(x, J)
    P = wf_success_prob(xf, params, s)
    d = P - xf
    # central moments of X_1 = K/J about its mean P
    c = [1.0] + [mu / J**k for k, mu in enumerate(binomial_central_moments(J, P), start=1)]
    out = []
    for k in range(1, 6):
        if k > order:
            out.append(None)
            continue
        out.append(sum(comb(k, j) * c[j] * d ** (k - j) for j in range(k + 1)))
    return MomentReport(*out)

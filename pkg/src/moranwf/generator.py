"""Generators of the Wright-Fisher diffusion acting on polynomial test functions.

Everything here is exact polynomial algebra: a ``TestFunction`` is a
polynomial in ``x``, the generator maps polynomials to polynomials, and the
one-step defect coefficients are closed-form functions of ``x``.

Two time scales appear.  One Moran step corresponds to ``1/J**2`` units of
rescaled diffusion time and one Wright-Fisher generation to ``1/J``.  The
rescaled generator is

    kappa * x(1-x) d^2/dx^2 + (s' x(1-x) + m'(p-x)) d/dx

with ``kappa = 1`` for Moran and ``kappa = 1/2`` for Wright-Fisher; the
per-step generator is the rescaled one divided by the time-scale factor.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy.stats import binom

from .kernels import (
    PopulationParams,
    _as_fraction,
    _selection,
    moran_transition_probs,
    wf_success_prob,
)

MODELS = ("moran", "wf")
MAX_DEGREE = 12

_X = Polynomial([0.0, 1.0])
_XX = _X * (1.0 - _X)


def check_model(model: str) -> str:
    model = model.lower()
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}, got {model!r}")
    return model


def diffusion_coefficient(model: str) -> float:
    """Factor in front of ``x(1-x) d^2/dx^2`` in the rescaled generator."""
    return 1.0 if check_model(model) == "moran" else 0.5


def time_scale(model: str, J: int) -> float:
    """Number of chain steps per unit of rescaled diffusion time."""
    return float(J) ** 2 if check_model(model) == "moran" else float(J)


@dataclass(frozen=True)
class TestFunction:
    """Polynomial test function, coefficients in ascending degree."""

    __test__ = False  # keep pytest from collecting this class

    coeffs: tuple

    def __init__(self, coeffs: Sequence[float]):
        c = np.trim_zeros(np.asarray(coeffs, dtype=float), "b")
        if c.size == 0:
            c = np.zeros(1)
        if c.size - 1 > MAX_DEGREE:
            raise ValueError(f"degree {c.size - 1} exceeds {MAX_DEGREE}")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite coefficient")
        object.__setattr__(self, "coeffs", tuple(float(v) for v in c))

    @classmethod
    def from_polynomial(cls, poly: Polynomial) -> "TestFunction":
        return cls(poly.coef)

    @classmethod
    def monomial(cls, k: int) -> "TestFunction":
        return cls([0.0] * k + [1.0])

    @classmethod
    def simpson(cls) -> "TestFunction":
        """``x**2 + (1-x)**2``: chance two random individuals are conspecific."""
        return cls.from_polynomial(_X**2 + (1.0 - _X) ** 2)

    @property
    def poly(self) -> Polynomial:
        return Polynomial(self.coeffs)

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def __call__(self, x):
        return self.poly(np.asarray(x, dtype=float))

    def derivative(self, order: int = 1) -> "TestFunction":
        return TestFunction.from_polynomial(self.poly.deriv(order))

    def is_constant(self) -> bool:
        return all(c == 0.0 for c in self.coeffs[1:])

    def sup_norm(self, order: int = 0, n_points: int = 10001) -> float:
        """Sup of ``|f^(order)|`` over [0, 1] (dense grid plus critical points)."""
        g = self.poly.deriv(order) if order else self.poly
        xs = np.linspace(0.0, 1.0, n_points)
        crit = g.deriv().roots() if g.degree() > 1 else np.array([])
        crit = np.real(crit[np.isreal(crit)])
        crit = crit[(crit >= 0) & (crit <= 1)]
        return float(np.max(np.abs(g(np.concatenate([xs, crit])))))


def _drift_poly(s_prime: float, m_prime: float, p: float) -> Polynomial:
    return s_prime * _XX + m_prime * (p - _X)


def apply_L(f: TestFunction, params: PopulationParams, s=None, rescaled: bool = False,
            model: str = "moran") -> TestFunction:
    """Apply the diffusion generator to a polynomial.

    With ``rescaled=False`` this is the per-step generator (Moran:
    ``x(1-x)/J^2 f'' + (s x(1-x) + m(p-x))/J f'``); with ``rescaled=True`` it is
    the J-free generator in diffusion time.
    """
    kappa = diffusion_coefficient(model)
    s_prime = params.s_prime if s is None else _selection(params, s) * params.J
    drift = _drift_poly(s_prime, params.m_prime, params.p)
    poly = kappa * _XX * f.poly.deriv(2) + drift * f.poly.deriv(1)
    if not rescaled:
        poly = poly / time_scale(model, params.J)
    return TestFunction.from_polynomial(poly)


def apply_L2(f: TestFunction, params: PopulationParams, s=None, rescaled: bool = False,
             model: str = "moran") -> TestFunction:
    return apply_L(apply_L(f, params, s, rescaled, model), params, s, rescaled, model)


@dataclass
class DefectCoefficients:
    """Leading coefficients of ``(S_1 - T_1) f = sum_k gamma_k f^(k) + remainder``.

    Each ``gammas[k-1]`` is a vectorised callable of ``x``.
    """

    model: str
    gammas: list = field(default_factory=list)

    @property
    def gamma1(self) -> Callable:
        return self.gammas[0]

    @property
    def gamma2(self) -> Callable:
        return self.gammas[1]

    @property
    def gamma3(self) -> Callable | None:
        return self.gammas[2] if len(self.gammas) > 2 else None

    @property
    def gamma4(self) -> Callable | None:
        return self.gammas[3] if len(self.gammas) > 3 else None

    def sup_norms(self, n_points: int = 10001) -> list[float]:
        xs = np.linspace(0.0, 1.0, n_points)
        return [float(np.max(np.abs(g(xs)))) for g in self.gammas]

    def leading_term(self, f: TestFunction, x) -> float:
        """``sum_k gamma_k(x) f^(k)(x)`` over the non-remainder coefficients."""
        n = 2 if self.model == "moran" else 3
        return float(sum(self.gammas[k](x) * f.derivative(k + 1)(x) for k in range(n)))


def gamma_moran(params: PopulationParams, s=None) -> DefectCoefficients:
    s = _selection(params, s)
    J, m, p = params.J, params.m, params.p

    def gamma1(x):
        x = np.asarray(x, dtype=float)
        return -s * x * (1 - x) * (m + s * x) / (J * (1 + s * x))

    def gamma2(x):
        x = np.asarray(x, dtype=float)
        return (m * p * (1 - 2 * x)
                + x * (1 - 2 * x) * (s * (1 - x) - m * (1 + s)) / (1 + s * x)) / (2 * J**2)

    return DefectCoefficients("moran", [gamma1, gamma2])


def gamma_wf(params: PopulationParams, s=None) -> DefectCoefficients:
    """Wright-Fisher defect coefficients, consistent to O(1/J^3).

    Obtained from the binomial moments and ``T_1 = I + L + L^2/2 + O(J^-3)``
    with ``L = x(1-x)/(2J) d^2 + b d`` and ``b = s x(1-x) + m(p-x)``.
    ``gamma4`` is the exact fourth-order mismatch ``E[(X_1-x)^4]/24 - (L^2)_4/2``,
    itself O(1/J^3).
    """
    s = _selection(params, s)
    J, m, p = params.J, params.m, params.p

    def _b(x):
        return s * x * (1 - x) + m * (p - x)

    def _db(x):
        return s * (1 - 2 * x) - m

    def gamma1(x):
        x = np.asarray(x, dtype=float)
        bias = -s * x * (1 - x) * (m + s * x) / (1 + s * x)
        return bias - 0.5 * (-s * x * (1 - x) / J + _b(x) * _db(x))

    def gamma2(x):
        x = np.asarray(x, dtype=float)
        return x * (1 - x) / (4 * J**2) + ((1 - 2 * x) * _b(x) - 2 * x * (1 - x) * _db(x)) / (4 * J)

    def gamma3(x):
        x = np.asarray(x, dtype=float)
        return -x * (1 - x) * (1 - 2 * x) / (12 * J**2)

    def gamma4(x):
        x = np.asarray(x, dtype=float)
        P = m * p + (1 - m) * (1 + s) * x / (1 + s * x)
        d = P - x
        v = P * (1 - P)
        c2, c3 = v / J, v * (1 - 2 * P) / J**2
        c4 = v * (3 * J * v - 6 * v + 1) / J**3
        mu4 = c4 + 4 * c3 * d + 6 * c2 * d**2 + d**4
        return mu4 / 24 - (x * (1 - x)) ** 2 / (8 * J**2)

    return DefectCoefficients("wf", [gamma1, gamma2, gamma3, gamma4])


def exact_one_step(f: TestFunction, x, params: PopulationParams, s=None,
                   model: str = "moran") -> float:
    """``S_1 f(x) - f(x)`` computed exactly from the kernel."""
    model = check_model(model)
    xf = _as_fraction(x, params.J)
    fx = float(f(xf))
    if model == "moran":
        p_plus, p_minus, _ = moran_transition_probs(xf, params, s)
        d = params.delta
        return p_plus * (float(f(xf + d)) - fx) + p_minus * (float(f(xf - d)) - fx)
    P = wf_success_prob(xf, params, s)
    k = np.arange(params.J + 1)
    w = binom.pmf(k, params.J, P)
    return float(np.dot(w, f(k / params.J) - fx))


def one_step_defect(f: TestFunction, x, params: PopulationParams, s=None,
                    model: str = "moran", reference: Callable | None = None) -> float:
    """``(S_1 f)(x) - (T_1 f)(x)`` for one chain step.

    ``S_1 f`` is exact (three-outcome sum for Moran, binomial sum for
    Wright-Fisher).  ``reference(f, params, model, x)`` must return
    ``(T_1 f)(x) - f(x)``; the default solves the backward equation over one
    step of diffusion time and raises ``UnconvergedError`` if the solve does
    not pass its refinement check.
    """
    model = check_model(model)
    if f.is_constant():
        return 0.0
    if s is not None:
        params = params.with_selection(_selection(params, s) * params.J)
    if reference is None:
        from .diffusion import one_step_increment
        reference = one_step_increment
    return exact_one_step(f, x, params, None, model) - float(reference(f, params, model, x))


def feynman_kac_constants(params: PopulationParams, j: int):
    """Growth constants of the derivative bounds.

    Returns ``(c_j, lambda_1)`` with ``c_j = sup_x |j(j-1) - J s(1-2x) - J m|``
    (sup of an affine function of ``1-2x``, attained at an endpoint) and
    ``lambda_1 = m' + |s'|``.
    """
    if j < 1:
        raise ValueError("derivative order j must be >= 1")
    base = j * (j - 1) - params.m_prime
    c_j = max(abs(base - params.s_prime), abs(base + params.s_prime))
    return float(c_j), float(params.m_prime + abs(params.s_prime))

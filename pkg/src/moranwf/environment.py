"""Random selection: finite-state jump chains and clamped selection diffusions.

Jump environment
    The discrete chain carries a selection state ``e`` whose value is
    ``s'_e / J``; between Moran steps ``e`` moves with a row-stochastic
    matrix ``P_J``.  In the limit ``P_J ~ I + diag(alpha) Q / J**2``, so in
    rescaled time the environment jumps with rates ``alpha_e Q[e, e']``.

Diffusion environment
    A real selection driver ``Z`` follows an Euler scheme with Gaussian
    increments of variance ``1/J**2``; the Moran chain uses ``h(Z) =
    clamp(Z)/J`` as its selection so the kernel stays valid.

Simulators that draw random numbers for the population and for the
environment always draw the population block first, so a frozen or
singleton environment reproduces the constant-selection path for the same
seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffusion import SdePath, _check_em, em_increment
from .kernels import (
    ParameterError,
    PopulationParams,
    StateX,
    lattice_index,
    moran_probs_array,
    moran_transition_probs,
)

ROW_TOL = 1e-12


class SpecError(ValueError):
    """An environment specification violates its contract."""


# --------------------------------------------------------------------------
# Jump environment
# --------------------------------------------------------------------------

@dataclass
class JumpSelectionSpec:
    """Finite selection environment.

    ``states`` holds rescaled selection values ``s'``; ``P`` is the one-step
    transition matrix of the discrete environment, ``alpha`` the per-state
    rate scalars and ``Q`` the generator of the limit chain.
    """

    states: Sequence[float]
    P: np.ndarray
    alpha: Sequence[float]
    Q: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).ravel()
        E = self.states.size
        if E == 0:
            raise SpecError("environment needs at least one state")
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.alpha = np.asarray(self.alpha, dtype=float).ravel()
        if self.P.shape != (E, E) or self.Q.shape != (E, E) or self.alpha.size != E:
            raise SpecError("P, Q and alpha must match the number of states")
        if np.any(self.P < -ROW_TOL) or np.any(np.abs(self.P.sum(axis=1) - 1) > ROW_TOL):
            raise SpecError("P must be row-stochastic")
        off = ~np.eye(E, dtype=bool)
        if np.any(self.Q[off] < 0) or np.any(np.abs(self.Q.sum(axis=1)) > ROW_TOL):
            raise SpecError("Q must have nonnegative off-diagonals and zero row sums")
        if np.any(self.alpha < 0):
            raise SpecError("alpha must be nonnegative")
        self._cumP = np.cumsum(self.P, axis=1)

    @property
    def n_states(self) -> int:
        return self.states.size

    @property
    def rates(self) -> np.ndarray:
        """Rescaled jump-rate matrix ``alpha_e Q[e, e']``."""
        return self.alpha[:, None] * self.Q

    @classmethod
    def exact_rate(cls, states, alpha, Q, J: int) -> "JumpSelectionSpec":
        """Spec whose one-step matrix is ``I + diag(alpha) Q / J**2`` (zero rate gap)."""
        alpha = np.asarray(alpha, dtype=float)
        Q = np.asarray(Q, dtype=float)
        P = np.eye(len(alpha)) + alpha[:, None] * Q / J**2
        if np.any(P < 0):
            raise SpecError(f"J={J} too small: rates make P negative")
        return cls(states, P, alpha, Q)

    @classmethod
    def frozen(cls, s_prime: float) -> "JumpSelectionSpec":
        return cls([s_prime], [[1.0]], [0.0], [[0.0]])

    def index_of(self, s_prime: float) -> int:
        hits = np.flatnonzero(np.isclose(self.states, s_prime, rtol=0, atol=1e-12))
        if hits.size == 0:
            raise SpecError(f"s'={s_prime} is not an environment state")
        return int(hits[0])

    def check_params(self, params: PopulationParams):
        for sp_ in self.states:
            params.with_selection(float(sp_))


def jump_chain_step(e: int, spec: JumpSelectionSpec, rng=None) -> int:
    """Next environment index, drawn from row ``P[e]``."""
    if not 0 <= e < spec.n_states:
        raise SpecError(f"state index {e} not in environment")
    rng = np.random.default_rng() if rng is None else rng
    return _next_env(spec, e, rng.random())


def _next_env(spec: JumpSelectionSpec, e: int, u: float) -> int:
    row = spec._cumP[e]
    k = int(np.searchsorted(row, u, side="right"))
    return min(k, spec.n_states - 1)


def rate_gap(spec: JumpSelectionSpec, J: int) -> float:
    """``max_{e != e'} |J**2 P[e, e'] - alpha_e Q[e, e']|``."""
    E = spec.n_states
    if E == 1:
        return 0.0
    off = ~np.eye(E, dtype=bool)
    return float(np.max(np.abs(J**2 * spec.P - spec.rates)[off]))


@dataclass(frozen=True)
class CoupledState:
    x: float
    s: float


@dataclass
class CoupledPath:
    """Trajectory of a population fraction and its selection driver."""

    x: np.ndarray
    s: np.ndarray
    env: np.ndarray | None = None
    times: np.ndarray | None = None

    def __len__(self):
        return len(self.x)

    def __getitem__(self, k) -> CoupledState:
        return CoupledState(float(self.x[k]), float(self.s[k]))


def moran_path(params: PopulationParams, x0, n_steps: int, rng=None, s=None) -> np.ndarray:
    """Constant-selection Moran path as lattice fractions (length ``n_steps + 1``)."""
    rng = np.random.default_rng() if rng is None else rng
    J = params.J
    i = lattice_index(x0, J)
    s = params.s if s is None else s
    u = rng.random(n_steps)
    grid = np.arange(J + 1) / J
    pp, pm = moran_probs_array(grid, s, params.m, params.p)
    moran_transition_probs(StateX(i, J), params, s)  # validates the regime
    out = np.empty(n_steps + 1, dtype=np.int64)
    out[0] = i
    for k in range(n_steps):
        if u[k] < pp[i]:
            i += 1
        elif u[k] < pp[i] + pm[i]:
            i -= 1
        out[k + 1] = i
    return out / J


def coupled_moran_path(spec: JumpSelectionSpec, params: PopulationParams, x0, e0: int,
                       n_steps: int, rng=None) -> CoupledPath:
    """Moran chain whose selection follows the jump environment.

    Each step moves ``X`` with the current selection ``s'_e / J`` and then
    moves ``e`` with ``P``.
    """
    spec.check_params(params)
    rng = np.random.default_rng() if rng is None else rng
    J = params.J
    i = lattice_index(x0, J)
    if not 0 <= e0 < spec.n_states:
        raise SpecError(f"initial state index {e0} not in environment")
    u = rng.random(n_steps)
    v = rng.random(n_steps)
    grid = np.arange(J + 1) / J
    probs = [moran_probs_array(grid, sp_ / J, params.m, params.p) for sp_ in spec.states]
    xs = np.empty(n_steps + 1, dtype=np.int64)
    es = np.empty(n_steps + 1, dtype=np.int64)
    xs[0], es[0] = i, e0
    e = e0
    for k in range(n_steps):
        pp, pm = probs[e]
        if u[k] < pp[i]:
            i += 1
        elif u[k] < pp[i] + pm[i]:
            i -= 1
        e = _next_env(spec, e, v[k])
        xs[k + 1], es[k + 1] = i, e
    return CoupledPath(xs / J, spec.states[es] / J, env=es)


def _jump_targets(spec: JumpSelectionSpec, dt: float):
    rates = spec.rates
    out_rate = -np.diag(rates)
    leave = 1.0 - np.exp(-out_rate * dt)
    dest = np.where(np.eye(spec.n_states, dtype=bool), 0.0, rates)
    with np.errstate(invalid="ignore", divide="ignore"):
        dest = np.where(out_rate[:, None] > 0, dest / out_rate[:, None], 0.0)
    return leave, np.cumsum(dest, axis=1)


def coupled_limit_jump(spec: JumpSelectionSpec, params: PopulationParams, x0: float, e0: int,
                       t_end: float, dt: float, rng=None) -> SdePath:
    """Euler-Maruyama for ``Y`` with selection ``s'_{S_t}`` and exponential-clock jumps of ``S``.

    Rescaled time.  ``S`` leaves state ``e`` within a step with probability
    ``1 - exp(-alpha_e |Q_ee| dt)`` (at most one jump per step).
    """
    n = _check_em(x0, dt, t_end, max_dt=0.01)
    rng = np.random.default_rng() if rng is None else rng
    dt_eff = t_end / n if n else dt
    normals = rng.standard_normal(n)
    u = rng.random((n, 2))
    leave, cum_dest = _jump_targets(spec, dt_eff)
    z = np.empty(n + 1)
    es = np.empty(n + 1, dtype=np.int64)
    z[0], es[0] = x0, e0
    e = e0
    for k in range(n):
        z[k + 1] = em_increment(z[k], spec.states[e], params.m_prime, params.p, dt_eff, normals[k])
        if u[k, 0] < leave[e]:
            e = min(int(np.searchsorted(cum_dest[e], u[k, 1], side="right")), spec.n_states - 1)
        es[k + 1] = e
    return SdePath(np.arange(n + 1) * dt_eff, z, env=es)


def coupled_limit_jump_ensemble(spec: JumpSelectionSpec, params: PopulationParams, x0: float,
                                e0: int, t_end: float, dt: float, n_paths: int, rng=None):
    """Final ``(Y, S-index)`` of ``n_paths`` independent limit paths."""
    n = _check_em(x0, dt, t_end, max_dt=0.01)
    rng = np.random.default_rng() if rng is None else rng
    dt_eff = t_end / n if n else dt
    leave, cum_dest = _jump_targets(spec, dt_eff)
    z = np.full(n_paths, float(x0))
    e = np.full(n_paths, e0, dtype=np.int64)
    for _ in range(n):
        z = em_increment(z, spec.states[e], params.m_prime, params.p, dt_eff,
                         rng.standard_normal(n_paths))
        u = rng.random((2, n_paths))
        jumps = u[0] < leave[e]
        if jumps.any():
            idx = np.flatnonzero(jumps)
            rows = cum_dest[e[idx]]
            e[idx] = np.minimum((u[1, idx, None] >= rows).sum(axis=1), spec.n_states - 1)
    return z, e


def occupation_fractions(env_path: np.ndarray, n_states: int) -> np.ndarray:
    return np.bincount(np.asarray(env_path), minlength=n_states) / len(env_path)


def stationary_law(Q: np.ndarray) -> np.ndarray:
    """Stationary distribution of a generator (left null vector, normalised)."""
    Q = np.asarray(Q, dtype=float)
    E = Q.shape[0]
    A = np.vstack([Q.T, np.ones(E)])
    b = np.zeros(E + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    return pi


# --------------------------------------------------------------------------
# Diffusion environment
# --------------------------------------------------------------------------

def smooth_clamp(lo: float = -0.9, hi: float = 5.0) -> Callable:
    """C^2 map of the real line onto ``(lo, hi)``, identity to second order at 0."""
    if not lo < 0 < hi:
        raise SpecError("clamp needs lo < 0 < hi")

    def clamp(z):
        z = np.asarray(z, dtype=float)
        return np.where(z >= 0, hi * np.tanh(z / hi), -lo * np.tanh(z / -lo))

    clamp.bounds = (lo, hi)
    clamp.lipschitz = 1.0
    return clamp


@dataclass
class DiffusionSelectionSpec:
    """Selection driver ``dS = b(S) dt + sqrt(2) sigma(S) dB`` (rescaled time).

    ``clamp`` maps the driver to a rescaled selection value; the per-step
    selection is ``h(z) = clamp(z) / J``.  Lipschitz constants are declared
    and spot-checked on random pairs at construction.
    """

    b: Callable
    sigma: Callable
    clamp: Callable
    lipschitz_b: float
    lipschitz_sigma: float
    epsilon: float = 0.05
    lipschitz_clamp: float = 1.0
    check_range: tuple = (-10.0, 10.0)
    n_checks: int = 1000
    seed: int = field(default=20240501, repr=False)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise SpecError("epsilon must be positive")
        for name in ("lipschitz_b", "lipschitz_sigma", "lipschitz_clamp"):
            if not getattr(self, name) > 0:
                raise SpecError(f"{name} must be positive")
        rng = np.random.default_rng(self.seed)
        lo, hi = self.check_range
        a = rng.uniform(lo, hi, self.n_checks)
        c = rng.uniform(lo, hi, self.n_checks)
        dz = np.abs(a - c)
        for fn, L, name in ((self.b, self.lipschitz_b, "b"),
                            (self.sigma, self.lipschitz_sigma, "sigma"),
                            (self.clamp, self.lipschitz_clamp, "clamp")):
            fa, fc = np.asarray(fn(a), dtype=float), np.asarray(fn(c), dtype=float)
            if not (np.all(np.isfinite(fa)) and np.all(np.isfinite(fc))):
                raise SpecError(f"{name} is not finite on the check range")
            if np.any(np.abs(fa - fc) > L * dz * (1 + 1e-9) + 1e-15):
                raise SpecError(f"{name} violates its declared Lipschitz constant {L}")
        zs = np.linspace(lo, hi, 2001)
        self.sup_b = float(np.max(np.abs(self.b(zs))))
        self.sup_sigma = float(np.max(np.abs(self.sigma(zs))))

    def h(self, z, J: int):
        """Per-step selection ``clamp(z)/J``; rejects values at or below ``-1 + epsilon``."""
        s = np.asarray(self.clamp(z), dtype=float) / J
        if np.any(s <= -1.0 + self.epsilon):
            raise SpecError(f"h(z) leaves (-1 + {self.epsilon}, inf) at J={J}")
        return s

    @classmethod
    def default(cls, sigma: float = 0.5, lo: float = -0.9, hi: float = 5.0):
        """Mean-reverting bounded drift ``-tanh(z)``, constant volatility, smooth clamp."""
        return cls(b=lambda z: -np.tanh(z),
                   sigma=lambda z: np.full_like(np.asarray(z, dtype=float), sigma),
                   clamp=smooth_clamp(lo, hi), lipschitz_b=1.0, lipschitz_sigma=1e-12)

    @classmethod
    def constant(cls, s_prime: float):
        """Frozen driver: ``b = sigma = 0`` and ``clamp`` returning ``s'``."""
        return cls(b=lambda z: np.zeros_like(np.asarray(z, dtype=float)),
                   sigma=lambda z: np.zeros_like(np.asarray(z, dtype=float)),
                   clamp=lambda z: np.full_like(np.asarray(z, dtype=float), s_prime),
                   lipschitz_b=1e-12, lipschitz_sigma=1e-12, lipschitz_clamp=1e-12)


def selection_euler_step(z, spec: DiffusionSelectionSpec, J: int, rng=None, normals=None):
    """``z + b(z)/J**2 + sqrt(2) sigma(z) * N(0, 1/J**2)``."""
    z = np.asarray(z, dtype=float)
    if normals is None:
        rng = np.random.default_rng() if rng is None else rng
        normals = rng.standard_normal(z.shape)
    out = z + spec.b(z) / J**2 + math.sqrt(2.0) * spec.sigma(z) * normals / J
    return out if out.ndim else float(out)


def coupled_diffusion_path(spec: DiffusionSelectionSpec, params: PopulationParams, x0, z0: float,
                           n_steps: int, rng=None) -> CoupledPath:
    """Discrete side: Moran step with selection ``h(Z_k)``, then an Euler step of ``Z``."""
    rng = np.random.default_rng() if rng is None else rng
    J = params.J
    i = lattice_index(x0, J)
    u = rng.random(n_steps)
    normals = rng.standard_normal(n_steps)
    xs = np.empty(n_steps + 1, dtype=np.int64)
    zs = np.empty(n_steps + 1)
    xs[0], zs[0] = i, z0
    z = float(z0)
    for k in range(n_steps):
        s = float(spec.h(z, J))
        pp, pm = moran_probs_array(i / J, s, params.m, params.p)
        if u[k] < pp:
            i += 1
        elif u[k] < pp + pm:
            i -= 1
        z = selection_euler_step(z, spec, J, normals=normals[k])
        xs[k + 1], zs[k + 1] = i, z
    return CoupledPath(xs / J, zs)


def coupled_diffusion_ensemble(spec: DiffusionSelectionSpec, params: PopulationParams, x0,
                               z0: float, n_steps: int, n_paths: int, rng=None):
    """Final ``(X_n, Z_n)`` for ``n_paths`` independent discrete coupled paths."""
    rng = np.random.default_rng() if rng is None else rng
    J = params.J
    i = np.full(n_paths, lattice_index(x0, J), dtype=np.int64)
    z = np.full(n_paths, float(z0))
    for _ in range(n_steps):
        pp, pm = moran_probs_array(i / J, spec.h(z, J), params.m, params.p)
        u = rng.random(n_paths)
        i += (u < pp).astype(np.int64) - ((u >= pp) & (u < pp + pm)).astype(np.int64)
        z = selection_euler_step(z, spec, J, normals=rng.standard_normal(n_paths))
    return i / J, z


def limit_pair(spec: DiffusionSelectionSpec, params: PopulationParams, x0: float, z0: float,
               t_end: float, dt: float, rng=None) -> SdePath:
    """Euler-Maruyama for ``(Y, S)`` under the coupled generator, rescaled time.

    ``Y`` uses ``clamp(S)`` as its rescaled selection.  The environment
    path is stored in ``SdePath.env``.
    """
    n = _check_em(x0, dt, t_end, max_dt=0.01)
    rng = np.random.default_rng() if rng is None else rng
    dt_eff = t_end / n if n else dt
    dB = rng.standard_normal(n)
    dW = rng.standard_normal(n)
    y = np.empty(n + 1)
    s = np.empty(n + 1)
    y[0], s[0] = x0, z0
    for k in range(n):
        y[k + 1] = em_increment(y[k], float(spec.clamp(s[k])), params.m_prime, params.p,
                                dt_eff, dB[k])
        s[k + 1] = s[k] + spec.b(s[k]) * dt_eff + math.sqrt(2 * dt_eff) * spec.sigma(s[k]) * dW[k]
    return SdePath(np.arange(n + 1) * dt_eff, y, env=s)


def limit_pair_ensemble(spec: DiffusionSelectionSpec, params: PopulationParams, x0: float,
                        z0: float, t_end: float, dt: float, n_paths: int, rng=None):
    n = _check_em(x0, dt, t_end, max_dt=0.01)
    rng = np.random.default_rng() if rng is None else rng
    dt_eff = t_end / n if n else dt
    y = np.full(n_paths, float(x0))
    s = np.full(n_paths, float(z0))
    for _ in range(n):
        y = em_increment(y, spec.clamp(s), params.m_prime, params.p, dt_eff,
                         rng.standard_normal(n_paths))
        s = s + spec.b(s) * dt_eff + math.sqrt(2 * dt_eff) * spec.sigma(s) * rng.standard_normal(n_paths)
    return y, s


def coupled_moments(x, z: float, spec: DiffusionSelectionSpec, params: PopulationParams):
    """Closed-form conditional mean and variance of ``X_{n+1} - x`` given ``(x, z)``.

    ``mean = D [m(p-x) + (1-m) h x(1-x)/(1+hx)]`` with ``D = 1/J`` and
    ``var = D^2 [m p(1-2x) + x + (1-m)(1+h) x (1-2x)/(1+hx)] - mean^2``.
    """
    J = params.J
    xf = lattice_index(x, J) / J
    h = float(spec.h(z, J))
    m, p = params.m, params.p
    drift = m * (p - xf) + (1 - m) * h * xf * (1 - xf) / (1 + h * xf)
    second = m * p * (1 - 2 * xf) + xf + (1 - m) * (1 + h) * xf * (1 - 2 * xf) / (1 + h * xf)
    mean = drift / J
    return mean, second / J**2 - mean**2


def coupled_moments_enumerated(x, z: float, spec: DiffusionSelectionSpec, params: PopulationParams):
    """Same two moments from the three-outcome kernel."""
    J = params.J
    p_plus, p_minus, _ = moran_transition_probs(x, params, float(spec.h(z, J)))
    mean = (p_plus - p_minus) / J
    return mean, (p_plus + p_minus) / J**2 - mean**2


def cross_moment_estimate(x, z: float, spec: DiffusionSelectionSpec, params: PopulationParams,
                          n_samples: int, rng=None, conditional: bool = True):
    """Monte Carlo estimate of ``E[(X_1 - x)(Z_1 - z)]`` and its standard error.

    With ``conditional=True`` the three-outcome Moran step is averaged
    exactly for each simulated driver increment (the two steps are
    conditionally independent), which removes the population noise;
    otherwise both steps are sampled.
    """
    rng = np.random.default_rng() if rng is None else rng
    J = params.J
    dz = selection_euler_step(np.full(n_samples, float(z)), spec, J,
                              normals=rng.standard_normal(n_samples)) - z
    p_plus, p_minus, _ = moran_transition_probs(x, params, float(spec.h(z, J)))
    if conditional:
        samples = (p_plus - p_minus) / J * dz
    else:
        u = rng.random(n_samples)
        dx = ((u < p_plus).astype(float) - ((u >= p_plus) & (u < p_plus + p_minus))) / J
        samples = dx * dz
    return float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(n_samples))

"""Monte Carlo estimates of the diffusion-approximation error and its rate in J.

The quantity of interest is ``E_x f(X_n) - E_x f(Y_t)`` with ``t = n/J**2``
(Moran) or ``t = n/J`` (Wright-Fisher).  For constant and jump selection the
reference ``E_x f(Y_t)`` is the backward-equation solution ``phi``, which is
deterministic.

Control variate
    Let ``phi_l`` be the backward solution after ``l`` chain steps of
    diffusion time, with ``phi_0 = f`` on the lattice.  Telescoping gives

        f(X_n) - phi_n(x) = sum_k [g_{n-k-1}(X_k)] + martingale,
        g_l = S_1 phi_l - phi_{l+1},

    so ``mean(sum_k g_{n-k-1}(X_k))`` is an unbiased estimate of the error
    whatever the accuracy of ``phi``, and its variance is that of a sum of
    one-step defects instead of the variance of ``f(X_n)``.  Moran ensembles
    are simulated through occupation counts; the standard error comes from
    independent batches.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _counts
from .diffusion import (
    DEFAULT_DT,
    BackwardSolver,
    em_wf_ensemble,
    lattice_grid_size,
)
from .environment import (
    DiffusionSelectionSpec,
    JumpSelectionSpec,
    coupled_diffusion_ensemble,
    coupled_limit_jump_ensemble,
    limit_pair_ensemble,
)
from .generator import TestFunction, check_model, diffusion_coefficient, time_scale
from .kernels import (
    ParameterError,
    PopulationParams,
    lattice_index,
    moran_probs_array,
    wf_success_array,
)

MIN_CURVE_REPLICATES = 1000
DEFAULT_REPLICATES = 200_000
DEFAULT_BATCHES = 10
REFERENCES = ("pde", "mc")
CSV_SCHEMA = ("J", "n", "t", "error", "stderr", "replicates", "seed")


class RateIndeterminate(RuntimeError):
    """Error estimates are not significant enough to fit a rate."""


@dataclass(frozen=True)
class ErrorRow:
    J: int
    n: int
    t: float
    error: float
    stderr: float
    replicates: int
    seed: int | None = None
    signed: float = 0.0
    reference: float = float("nan")

    def __post_init__(self):
        if not (self.error >= 0 and self.stderr >= 0):
            raise ValueError("error and stderr must be nonnegative")

    def significant(self, k: float = 3.0) -> bool:
        return self.error > k * self.stderr

    def as_tuple(self):
        return (self.J, self.n, self.t, self.error, self.stderr, self.replicates,
                -1 if self.seed is None else self.seed)


@dataclass
class ErrorCurve:
    rows: list = field(default_factory=list)

    def __post_init__(self):
        Js = [r.J for r in self.rows]
        if any(b <= a for a, b in zip(Js, Js[1:])):
            raise ValueError("J must be strictly increasing across rows")
        if any(r.replicates < MIN_CURVE_REPLICATES for r in self.rows):
            raise ValueError(f"each row needs at least {MIN_CURVE_REPLICATES} replicates")

    def __len__(self):
        return len(self.rows)

    @property
    def J(self):
        return np.array([r.J for r in self.rows], dtype=float)

    @property
    def errors(self):
        return np.array([r.error for r in self.rows])

    @property
    def stderrs(self):
        return np.array([r.stderr for r in self.rows])

    def scaled(self, power: float = 1.0):
        """``error * J**power`` per row."""
        return self.errors * self.J**power


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    rss: float
    n_rows: int


def rate_fit(curve, min_rows: int = 4, k_se: float = 3.0) -> RateFit:
    """Least squares of ``log error`` on ``log J``.

    Every row must pass the ``k_se`` significance rule, otherwise
    ``RateIndeterminate`` is raised instead of returning a spurious slope.
    """
    rows = curve.rows if isinstance(curve, ErrorCurve) else list(curve)
    if len(rows) < min_rows:
        raise RateIndeterminate(f"rate fit needs at least {min_rows} rows, got {len(rows)}")
    weak = [r.J for r in rows if not r.significant(k_se)]
    if weak:
        raise RateIndeterminate(f"rate indeterminate: estimates within {k_se} SE of 0 at J={weak}")
    lx = np.log([r.J for r in rows])
    ly = np.log([r.error for r in rows])
    A = np.column_stack([lx, np.ones_like(lx)])
    (slope, intercept), *_ = np.linalg.lstsq(A, ly, rcond=None)
    rss = float(np.sum((ly - (slope * lx + intercept)) ** 2))
    return RateFit(float(slope), float(intercept), rss, len(rows))


def steps_for(t: float, J: int, model: str = "moran") -> int:
    """Number of chain steps covering rescaled time ``t`` (rounded up)."""
    if t < 0:
        raise ParameterError("t must be nonnegative")
    return math.ceil(t * time_scale(model, J) - 1e-9)


def row_rng(seed: int, row: int) -> np.random.Generator:
    """Independent stream for row ``row`` of an experiment seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(row)]))


# --------------------------------------------------------------------------
# Lattice operators
# --------------------------------------------------------------------------

class _LatticeKernel:
    """One-step operator ``S_1`` of a chain on ``E x I_J``."""

    def __init__(self, params: PopulationParams, model: str, env: JumpSelectionSpec | None):
        self.J, self.model = params.J, model
        self.s_primes = np.array([params.s_prime]) if env is None else env.states
        self.P = np.eye(1) if env is None else env.P
        for sp_ in self.s_primes:
            params.with_selection(float(sp_))
        grid = np.arange(self.J + 1) / self.J
        if model == "moran":
            probs = [moran_probs_array(grid, sp_ / self.J, params.m, params.p) for sp_ in self.s_primes]
            self.pp = np.clip(np.array([a for a, _ in probs]), 0.0, 1.0)
            self.pm = np.clip(np.array([b for _, b in probs]), 0.0, 1.0)
        else:
            if env is not None:
                raise ParameterError("random environments are only implemented for the Moran chain")
            from scipy.stats import binom
            P = np.clip(wf_success_array(grid, params.s, params.m, params.p), 0.0, 1.0)
            self.success = P
            self.K = binom.pmf(np.arange(self.J + 1)[None, :], self.J, P[:, None])

    def increment(self, phi: np.ndarray) -> np.ndarray:
        """``S_1 phi - phi`` for ``phi`` of shape (E, J+1)."""
        if self.model == "wf":
            return phi @ self.K.T - phi
        psi = self.P @ phi if self.P.shape[0] > 1 else phi
        up = np.zeros_like(psi)
        down = np.zeros_like(psi)
        up[:, :-1] = psi[:, 1:] - psi[:, :-1]
        down[:, 1:] = psi[:, :-1] - psi[:, 1:]
        return (psi - phi) + self.pp * up + self.pm * down

    def apply(self, phi: np.ndarray) -> np.ndarray:
        return phi + self.increment(phi)


def discrete_expectation(f: TestFunction, params: PopulationParams, n_steps: int,
                         model: str = "moran", env: JumpSelectionSpec | None = None) -> np.ndarray:
    """Exact ``E f(X_n)`` from every starting cell, shape (E, J+1), by iterating ``S_1``."""
    model = check_model(model)
    kern = _LatticeKernel(params, model, env)
    phi = np.tile(f(np.arange(params.J + 1) / params.J), (len(kern.s_primes), 1))
    for _ in range(n_steps):
        phi = kern.apply(phi)
    return phi


class _Levels:
    """Backward-equation values on the lattice after ``l`` chain steps, ``l = n, n-1, ..., 0``.

    Levels are produced in descending order (the order a forward simulation
    consumes them) by storing about ``sqrt(n)`` checkpoints on the way up
    and recomputing one block at a time on the way down.  Both passes march
    identical blocks, so every level is a single well-defined array.
    """

    def __init__(self, f: TestFunction, params: PopulationParams, n: int, model: str,
                 env: JumpSelectionSpec | None = None, N_min: int = 2001, dt: float = DEFAULT_DT):
        J = params.J
        self.J, self.n = J, n
        self.N = lattice_grid_size(J, N_min)
        self.stride = (self.N - 1) // J
        if env is None:
            self.solver = BackwardSolver([params.s_prime], params.m_prime, params.p, self.N,
                                         kappa=diffusion_coefficient(model))
        else:
            self.solver = BackwardSolver(env.states, params.m_prime, params.p, self.N,
                                         kappa=diffusion_coefficient(model), rates=env.rates)
        self.E = self.solver.n_env
        self.tau = 1.0 / time_scale(model, J)
        self.sub = max(1, math.ceil(self.tau / dt - 1e-9))
        self.block = max(1, math.isqrt(n))
        v = self.solver.sample(f)
        self.checkpoints = [v]
        for a in range(0, n, self.block):
            v = self._march(v, a)[0]
            self.checkpoints.append(v)

    def _march(self, v, a, record=False):
        steps = min(self.block, self.n - a)
        return self.solver.march(v, steps * self.tau, steps * self.sub,
                                 record_every=self.sub if record else None,
                                 startup_steps=2 if a == 0 else 0)

    def lattice(self, v: np.ndarray) -> np.ndarray:
        return v.reshape(self.E, self.N)[:, ::self.stride]

    @property
    def top(self) -> np.ndarray:
        return self.lattice(self.checkpoints[-1])

    def descending(self):
        yield self.top
        starts = list(range(0, self.n, self.block))
        for b in reversed(range(len(starts))):
            _, records = self._march(self.checkpoints[b], starts[b], record=True)
            for v in reversed(records[:-1]):
                yield self.lattice(v)


def _batch_sizes(replicates: int, batches: int) -> np.ndarray:
    batches = max(2, min(batches, replicates))
    sizes = np.full(batches, replicates // batches, dtype=np.int64)
    sizes[: replicates % batches] += 1
    return sizes


def _batch_estimate(acc: np.ndarray, sizes: np.ndarray):
    """Mean and standard error from per-batch sums."""
    R = sizes.sum()
    mean = acc.sum() / R
    means = acc / sizes
    var = np.sum(sizes * (means - mean) ** 2) / ((len(sizes) - 1) * R)
    return float(mean), float(math.sqrt(max(var, 0.0)))


def _moran_counts(kern: _LatticeKernel, i0: int, e0: int, sizes: np.ndarray, rng, g_levels, n: int):
    """Run the counts ensemble; ``g_levels`` yields the per-step accumulation weights.

    Returns the per-batch accumulated sums and the final counts.
    """
    E, M = kern.pp.shape
    counts = np.zeros((len(sizes), E, M), dtype=np.int64)
    counts[:, e0, i0] = sizes
    acc = np.zeros(len(sizes))
    P = np.ascontiguousarray(kern.P, dtype=float)
    for _ in range(n):
        g = next(g_levels) if g_levels is not None else np.zeros((E, M))
        counts = _counts.moran_counts_step(rng, counts, kern.pp, kern.pm, P, g, acc)
    return acc, counts


def _defect_stream(levels: _Levels, kern: _LatticeKernel):
    """``g_{n-k-1}`` for ``k = 0, 1, ...`` computed from consecutive levels."""
    it = levels.descending()
    upper = next(it)
    for lower in it:
        # S_1 phi_l - phi_{l+1}, in increment form to keep the small differences exact
        yield np.ascontiguousarray(kern.increment(lower) - (upper - lower))
        upper = lower


def estimate_error(f: TestFunction, params: PopulationParams, x0, t: float,
                   replicates: int = DEFAULT_REPLICATES, reference: str = "pde", env=None,
                   rng=None, *, model: str = "moran", s0=None, control_variate: bool = True,
                   batches: int = DEFAULT_BATCHES, em_dt: float = 1e-3, seed: int | None = None,
                   N_min: int = 2001, pde_dt: float = DEFAULT_DT) -> ErrorRow:
    """Estimate ``|E_x f(X_n) - E_x f(Y_t)|`` with its standard error.

    Parameters
    ----------
    f : TestFunction
    params : PopulationParams
        Population size and constant selection/immigration.
    x0 : float or StateX
        Starting point, a lattice point of ``I_J``.
    t : float
        Rescaled time; the chain runs ``ceil(J**2 t)`` Moran or ``ceil(J t)``
        Wright-Fisher steps.
    replicates : int
        Number of independent chains on the discrete side (and limit paths
        for an MC reference).
    reference : {"pde", "mc"}
        Backward-equation solve or Euler-Maruyama ensemble of the limit.
    env : None, JumpSelectionSpec or DiffusionSelectionSpec
        Selection regime.  A diffusion environment requires ``reference="mc"``.
    s0 : float, optional
        Initial environment: an ``s'`` value of a jump spec, or the initial
        driver value for a diffusion spec (default 0).
    control_variate : bool
        Use the telescoping control variate (PDE reference only).
    batches : int
        Independent batches used for the standard error of count ensembles.

    Returns
    -------
    ErrorRow
    """
    model = check_model(model)
    if reference not in REFERENCES:
        raise ParameterError(f"reference must be one of {REFERENCES}")
    if replicates < 2:
        raise ParameterError("need at least 2 replicates")
    rng = np.random.default_rng(seed) if rng is None else rng
    J = params.J
    i0 = lattice_index(x0, J)
    n = steps_for(t, J, model)
    fx = f(np.arange(J + 1) / J)

    def row(signed, se, ref):
        return ErrorRow(J, n, t, abs(signed), se, replicates, seed, signed, ref)

    if isinstance(env, DiffusionSelectionSpec):
        if reference != "mc":
            raise ParameterError("diffusion selection needs the coupled-limit MC reference")
        z0 = 0.0 if s0 is None else float(s0)
        if f.is_constant() or n == 0:
            return row(0.0, 0.0, float(f(i0 / J)))
        xd, _ = coupled_diffusion_ensemble(env, params, i0 / J, z0, n, replicates, rng)
        yl, _ = limit_pair_ensemble(env, params, i0 / J, z0, n / J**2, em_dt, replicates, rng)
        return _mc_row(row, f(xd), f(yl))

    jump = env if isinstance(env, JumpSelectionSpec) else None
    if env is not None and jump is None:
        raise ParameterError("env must be None, a JumpSelectionSpec or a DiffusionSelectionSpec")
    e0 = 0 if jump is None or s0 is None else jump.index_of(s0)
    kern = _LatticeKernel(params, model, jump)
    if f.is_constant() or n == 0:
        return row(0.0, 0.0, float(fx[i0]))

    if reference == "mc":
        t_n = n / time_scale(model, J)
        disc = _discrete_samples(kern, params, i0, e0, n, replicates, rng, fx, model)
        if jump is None:
            yl = em_wf_ensemble(params, i0 / J, em_dt, t_n, replicates, rng,
                                kappa=diffusion_coefficient(model))
        else:
            yl, _ = coupled_limit_jump_ensemble(jump, params, i0 / J, e0, t_n, em_dt, replicates, rng)
        if isinstance(disc, tuple):
            (dm, dse) = disc
            lm, lse = float(np.mean(f(yl))), float(np.std(f(yl), ddof=1) / math.sqrt(replicates))
            return row(dm - lm, math.hypot(dse, lse), lm)
        return _mc_row(row, disc, f(yl))

    levels = _Levels(f, params, n, model, jump, N_min=N_min, dt=pde_dt)
    ref = float(levels.top[e0, i0])
    if not control_variate:
        disc = _discrete_samples(kern, params, i0, e0, n, replicates, rng, fx, model)
        if isinstance(disc, tuple):
            return row(disc[0] - ref, disc[1], ref)
        return row(float(disc.mean()) - ref, float(disc.std(ddof=1) / math.sqrt(replicates)), ref)

    gs = _defect_stream(levels, kern)
    if model == "moran":
        sizes = _batch_sizes(replicates, batches)
        acc, _ = _moran_counts(kern, i0, e0, sizes, rng, gs, n)
        mean, se = _batch_estimate(acc, sizes)
        return row(mean, se, ref)
    i = np.full(replicates, i0, dtype=np.int64)
    acc = np.zeros(replicates)
    for g in gs:
        acc += g[0, i]
        i = rng.binomial(J, kern.success[i])
    return row(float(acc.mean()), float(acc.std(ddof=1) / math.sqrt(replicates)), ref)


def _mc_row(row, disc: np.ndarray, lim: np.ndarray) -> ErrorRow:
    R1, R2 = len(disc), len(lim)
    se = math.sqrt(np.var(disc, ddof=1) / R1 + np.var(lim, ddof=1) / R2)
    return row(float(disc.mean() - lim.mean()), se, float(lim.mean()))


def _discrete_samples(kern, params, i0, e0, n, replicates, rng, fx, model):
    """Plain discrete side: per-path ``f(X_n)`` samples (WF) or ``(mean, se)`` from counts (Moran)."""
    if model == "wf":
        i = np.full(replicates, i0, dtype=np.int64)
        for _ in range(n):
            i = rng.binomial(params.J, kern.success[i])
        return fx[i]
    sizes = np.array([replicates], dtype=np.int64)
    _, counts = _moran_counts(kern, i0, e0, sizes, rng, None, n)
    w = counts[0].ravel() / replicates
    vals = np.tile(fx, len(kern.s_primes))
    mean = float(w @ vals)
    var = float(w @ (vals - mean) ** 2) * replicates / (replicates - 1)
    return mean, math.sqrt(var / replicates)


def exact_error(f: TestFunction, params: PopulationParams, x0, t: float, model: str = "moran",
                env: JumpSelectionSpec | None = None, s0=None, N_min: int = 2001,
                pde_dt: float = DEFAULT_DT) -> ErrorRow:
    """Deterministic error: exact discrete expectation against the backward solve."""
    model = check_model(model)
    J = params.J
    i0 = lattice_index(x0, J)
    n = steps_for(t, J, model)
    e0 = 0 if env is None or s0 is None else env.index_of(s0)
    disc = discrete_expectation(f, params, n, model, env)[e0, i0]
    ref = float(_Levels(f, params, n, model, env, N_min=N_min, dt=pde_dt).top[e0, i0]) if n else disc
    return ErrorRow(J, n, t, abs(disc - ref), 0.0, 0, None, float(disc - ref), ref)


def error_curve(f: TestFunction, params: PopulationParams, x0, t: float, J_list: Sequence[int],
                replicates: int = DEFAULT_REPLICATES, seed: int = 0, **kwargs) -> ErrorCurve:
    """``estimate_error`` over increasing ``J``; row ``k`` uses stream ``(seed, k)``.

    ``env`` may be a callable returning the environment for a given ``J``.
    """
    env = kwargs.pop("env", None)
    rows = []
    for k, J in enumerate(J_list):
        env_J = env(int(J)) if callable(env) else env
        rows.append(estimate_error(f, params.with_J(int(J)), x0, t, replicates, env=env_J,
                                   rng=row_rng(seed, k), seed=seed, **kwargs))
    return ErrorCurve(rows)


def time_growth_profile(f: TestFunction, params: PopulationParams, x0, J: int, t_grid,
                        replicates: int = DEFAULT_REPLICATES, seed: int = 0, **kwargs) -> list:
    """Error at each ``t`` of ``t_grid`` for fixed ``J`` (constant selection)."""
    params = params.with_J(J)
    return [estimate_error(f, params, x0, float(t), replicates, rng=row_rng(seed, k),
                           seed=seed, **kwargs)
            for k, t in enumerate(t_grid)]


def simpson_error_demo(params: PopulationParams, x0, t: float, J_list, replicates: int = DEFAULT_REPLICATES,
                       seed: int = 0, **kwargs) -> ErrorCurve:
    """Error curve for the Simpson index ``x**2 + (1-x)**2``."""
    return error_curve(TestFunction.simpson(), params, x0, t, J_list, replicates, seed, **kwargs)

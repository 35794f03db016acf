"""Wright-Fisher diffusion: Euler-Maruyama paths and a backward Kolmogorov solver.

The solver is the deterministic reference for ``T_t f(x) = E_x f(Y_t)``.  It
works in rescaled time on a uniform grid of [0, 1] and supports a finite
Markov environment for the selection (one equation per environment state,
coupled through the jump rates).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import CubicSpline
from scipy.sparse.linalg import splu

from .generator import TestFunction, check_model, diffusion_coefficient, time_scale
from .kernels import ParameterError, PopulationParams, lattice_index

DEFAULT_N = 2001
DEFAULT_DT = 1e-4
CONVERGENCE_TOL = 1e-6
MIN_N = 201
MAX_EM_DT = 0.1


class UnconvergedError(RuntimeError):
    """The grid-refinement check of the backward solver failed."""


@dataclass
class GridFunction:
    """Values of ``phi(t, .)`` on ``x_i = i/(N-1)``.

    ``values`` has shape ``(N,)`` or ``(n_env, N)`` for a coupled solve.
    """

    values: np.ndarray
    t: float
    refinement_change: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[-1] < 3:
            raise ValueError("grid needs at least 3 points")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite grid values")

    @property
    def N(self) -> int:
        return self.values.shape[-1]

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.N)

    @property
    def h(self) -> float:
        return 1.0 / (self.N - 1)

    def at(self, x, env: int | None = None) -> float:
        """Value at ``x``: exact on grid points, cubic spline otherwise."""
        vals = self.values if env is None else self.values[env]
        if vals.ndim != 1:
            raise ValueError("coupled grid function: pass env")
        pos = float(x) * (self.N - 1)
        k = round(pos)
        if abs(pos - k) < 1e-9:
            return float(vals[k])
        return float(CubicSpline(self.x, vals)(float(x)))

    def on_lattice(self, J: int, env: int | None = None) -> np.ndarray:
        """Values at ``i/J``; requires ``J`` to divide ``N - 1``."""
        if (self.N - 1) % J:
            raise ValueError(f"grid of {self.N} points does not contain I_{J}")
        vals = self.values if env is None else self.values[env]
        return vals[..., :: (self.N - 1) // J].copy()

    def derivative(self, order: int = 1) -> np.ndarray:
        """Finite-difference derivative (second-order, one-sided at the ends)."""
        if order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        d = np.gradient(self.values, self.h, edge_order=2, axis=-1)
        if order == 2:
            d = np.gradient(d, self.h, edge_order=2, axis=-1)
        return d


def lattice_grid_size(J: int, N_min: int = DEFAULT_N) -> int:
    """Smallest grid size ``>= N_min`` whose nodes contain ``I_J``."""
    return J * math.ceil((N_min - 1) / J) + 1


class BackwardSolver:
    """Theta-scheme for ``d_t phi = kappa x(1-x) phi'' + drift phi' + Q phi``.

    The drift is ``s'_e x(1-x) + m'(p-x)`` in environment state ``e``; ``rates``
    is the rescaled jump-rate matrix of the environment (rows sum to zero).
    Central differences are used in the interior; the drift switches to
    upwinding wherever central differencing would break monotonicity.  At
    ``x = 0`` and ``x = 1`` the diffusion vanishes and only one-sided drift
    transport is kept, so no boundary data is imposed.

    The scheme advances the increment ``w = phi - f`` so that short-time
    solves do not lose digits to cancellation.
    """

    def __init__(self, s_primes: Sequence[float], m_prime: float, p: float, N: int = DEFAULT_N,
                 kappa: float = 1.0, rates=None):
        if N < 3:
            raise ParameterError("grid needs at least 3 points")
        self.s_primes = np.atleast_1d(np.asarray(s_primes, dtype=float))
        self.n_env = self.s_primes.size
        self.m_prime, self.p, self.N, self.kappa = float(m_prime), float(p), int(N), float(kappa)
        self.x = np.linspace(0.0, 1.0, self.N)
        blocks = [self._space_operator(sp_) for sp_ in self.s_primes]
        D = sp.block_diag(blocks, format="csr")
        if rates is not None:
            rates = np.asarray(rates, dtype=float)
            if rates.shape != (self.n_env, self.n_env):
                raise ParameterError("rate matrix shape does not match environment")
            D = D + sp.kron(sp.csr_matrix(rates), sp.identity(self.N), format="csr")
        elif self.n_env > 1:
            raise ParameterError("coupled environment needs a rate matrix")
        self.D = D.tocsc()
        self._factor_key = None
        self._lu = None

    def _space_operator(self, s_prime: float):
        N, x = self.N, self.x
        h = 1.0 / (N - 1)
        A = self.kappa * x * (1.0 - x)
        b = s_prime * x * (1.0 - x) + self.m_prime * (self.p - x)
        lower = np.zeros(N)
        diag = np.zeros(N)
        upper = np.zeros(N)
        i = slice(1, N - 1)
        lower[i] = A[i] / h**2 - b[i] / (2 * h)
        diag[i] = -2.0 * A[i] / h**2
        upper[i] = A[i] / h**2 + b[i] / (2 * h)
        bad = np.zeros(N, dtype=bool)
        bad[i] = A[i] / h**2 < np.abs(b[i]) / (2 * h)
        if bad.any():
            fwd = bad & (b > 0)
            bwd = bad & (b <= 0)
            lower[bad] = A[bad] / h**2
            upper[bad] = A[bad] / h**2
            upper[fwd] += b[fwd] / h
            lower[bwd] -= b[bwd] / h
            diag[bad] = -2.0 * A[bad] / h**2 - np.abs(b[bad]) / h
        # degenerate endpoints: one-sided (second-order) transport into the interior
        b0, b1 = max(b[0], 0.0), min(b[-1], 0.0)
        op = sp.diags([lower[1:], diag, upper[:-1]], [-1, 0, 1], format="lil")
        op[0, 0:3] = np.array([-3.0, 4.0, -1.0]) * b0 / (2 * h)
        op[N - 1, N - 3:N] = np.array([1.0, -4.0, 3.0]) * b1 / (2 * h)
        return op.tocsr()

    def _factor(self, dt: float, theta: float):
        key = (dt, theta)
        if key != self._factor_key:
            M = sp.identity(self.D.shape[0], format="csc") - theta * dt * self.D
            self._lu = splu(M.tocsc())
            self._factor_key = key
        return self._lu

    def sample(self, f: TestFunction) -> np.ndarray:
        return np.tile(f(self.x), self.n_env)

    def march(self, v0: np.ndarray, t_end: float, n_steps: int, theta: float = 0.5,
              record_every: int | None = None, startup_steps: int = 2):
        """Advance ``v0`` by ``n_steps`` steps of size ``t_end/n_steps``.

        Returns the final values (environment-major when coupled) and, when
        ``record_every`` is given, the values at every multiple of it
        including time zero.  The first ``startup_steps`` steps are taken as
        two fully implicit half steps to damp grid-scale modes before
        Crank-Nicolson takes over.
        """
        v0 = np.asarray(v0, dtype=float)
        w = np.zeros_like(v0)
        records = [v0.copy()] if record_every else None
        if n_steps == 0 or t_end == 0:
            return v0.copy(), records
        dt = t_end / n_steps
        Dv = self.D @ v0
        for k in range(n_steps):
            if theta != 1.0 and k < startup_steps:
                lu = self._factor(dt / 2, 1.0)
                for _ in range(2):
                    w = lu.solve(w + (dt / 2) * Dv)
            else:
                rhs = w + dt * Dv
                if theta != 1.0:
                    rhs += (dt * (1.0 - theta)) * (self.D @ w)
                w = self._factor(dt, theta).solve(rhs)
            if record_every and (k + 1) % record_every == 0:
                records.append(v0 + w)
        return v0 + w, records


def _steps_for(t_end: float, dt: float) -> int:
    return max(1, math.ceil(t_end / dt - 1e-9))


def bk_solve(f: TestFunction, params: PopulationParams, t_end: float, N: int = DEFAULT_N,
             dt: float | None = None, *, theta: float = 0.5, kappa: float = 1.0,
             s_prime: float | None = None, check: bool = True,
             tol: float = CONVERGENCE_TOL) -> GridFunction:
    """Solve the backward equation ``d_t phi = L phi``, ``phi(0) = f`` up to ``t_end``.

    Parameters
    ----------
    f : TestFunction
        Initial condition.
    params : PopulationParams
        Only the rescaled drift ``(s', m', p)`` is used.
    t_end : float
        Horizon in rescaled diffusion time.
    N, dt : int, float
        Grid size (>= 201) and time step (<= 1e-3 * t_end).  The default step
        is ``min(1e-4, t_end/1000)``.
    kappa : float
        Diffusion coefficient (1 for the Moran limit, 1/2 for Wright-Fisher).
    check : bool
        Re-solve on ``2N-1`` points with ``dt/2`` and raise
        ``UnconvergedError`` when the sup-norm change exceeds ``tol``.
    """
    if N < MIN_N:
        raise ParameterError(f"grid size N={N} below {MIN_N}")
    if t_end < 0:
        raise ParameterError("t_end must be nonnegative")
    sprime = params.s_prime if s_prime is None else s_prime
    if t_end == 0 or f.is_constant():
        # the generator annihilates constants exactly; skip the rounding of a solve
        solver = BackwardSolver([sprime], params.m_prime, params.p, N, kappa)
        return GridFunction(solver.sample(f), float(t_end), 0.0)
    if dt is None:
        dt = min(DEFAULT_DT, t_end / 1000)
    if dt > 1e-3 * t_end * (1 + 1e-12):
        raise ParameterError(f"dt={dt} exceeds 1e-3 * t_end")
    n = _steps_for(t_end, dt)
    solver = BackwardSolver([sprime], params.m_prime, params.p, N, kappa)
    vals, _ = solver.march(solver.sample(f), t_end, n, theta)
    change = None
    if check:
        fine = BackwardSolver([sprime], params.m_prime, params.p, 2 * N - 1, kappa)
        fvals, _ = fine.march(fine.sample(f), t_end, 2 * n, theta)
        change = float(np.max(np.abs(fvals[::2] - vals)))
        if change >= tol:
            raise UnconvergedError(
                f"refinement changed the solution by {change:.3e} (tol {tol:.1e})")
    return GridFunction(vals, t_end, change)


def semigroup_reference(f: TestFunction, params: PopulationParams, n_steps: int,
                        model: str = "moran", **kwargs) -> GridFunction:
    """``T_n f`` on the chain's clock: ``t = n/J^2`` (Moran) or ``n/J`` (WF)."""
    if n_steps < 0:
        raise ParameterError("n_steps must be nonnegative")
    model = check_model(model)
    t_end = n_steps / time_scale(model, params.J)
    return bk_solve(f, params, t_end, kappa=diffusion_coefficient(model), **kwargs)


def one_step_increment(f: TestFunction, params: PopulationParams, model: str, x,
                       N: int = DEFAULT_N) -> float:
    """``(T_1 f)(x) - f(x)`` over one chain step, from the backward solver.

    The grid is chosen so that ``x`` is a node.  Grid refinement is checked
    as in ``bk_solve``.
    """
    model = check_model(model)
    i = lattice_index(x, params.J)
    N = lattice_grid_size(params.J, N)
    grid = semigroup_reference(f, params, 1, model, N=N)
    xf = i / params.J
    return grid.at(xf) - float(f(xf))


def derivative_norm_profile(f: TestFunction, params: PopulationParams, t_grid, j: int = 1,
                            N: int = DEFAULT_N, dt: float = DEFAULT_DT, kappa: float = 1.0,
                            theta: float = 0.5) -> np.ndarray:
    """Sup-norms of ``d^j/dx^j phi(t, .)`` for each ``t`` in ``t_grid`` (rescaled time)."""
    if j not in (1, 2):
        raise ValueError("only j = 1, 2 are supported")
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) < 0) or np.any(t_grid < 0):
        raise ValueError("t_grid must be nonnegative and sorted")
    solver = BackwardSolver([params.s_prime], params.m_prime, params.p, N, kappa)
    out = np.empty(t_grid.size)
    vals = solver.sample(f)
    t_prev = 0.0
    for k, t in enumerate(t_grid):
        gap = t - t_prev
        if gap > 0:
            n = _steps_for(gap, dt)
            vals, _ = solver.march(vals, gap, n, theta)
        out[k] = np.max(np.abs(GridFunction(vals, t).derivative(j)))
        t_prev = t
    return out


# --------------------------------------------------------------------------
# Euler-Maruyama
# --------------------------------------------------------------------------

@dataclass
class SdePath:
    times: np.ndarray
    states: np.ndarray
    seed: object = None
    env: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if np.any(self.states < 0) or np.any(self.states > 1):
            raise ValueError("diffusion states must stay in [0, 1]")

    @property
    def final(self) -> float:
        return float(self.states[-1])


def _check_em(x0, dt, t_end, max_dt=MAX_EM_DT):
    if not 0.0 <= x0 <= 1.0:
        raise ParameterError(f"x0={x0} outside [0, 1]")
    if dt <= 0 or dt > max_dt:
        raise ParameterError(f"dt={dt} must lie in (0, {max_dt}]")
    if t_end < 0:
        raise ParameterError("t_end must be nonnegative")
    return _steps_for(t_end, dt) if t_end > 0 else 0


def em_increment(z, s_prime, m_prime, p, dt, normals, kappa=1.0):
    """One Euler-Maruyama step with truncated square root and clamping."""
    drift = s_prime * z * (1.0 - z) + m_prime * (p - z)
    vol = np.sqrt(np.maximum(0.0, 2.0 * kappa * z * (1.0 - z)))
    return np.clip(z + drift * dt + vol * math.sqrt(dt) * normals, 0.0, 1.0)


def em_wf_path(params: PopulationParams, x0: float, dt: float, t_end: float, rng=None,
               kappa: float = 1.0) -> SdePath:
    """Euler-Maruyama path of ``dZ = sqrt(2 Z(1-Z)) dB + (s'Z(1-Z) + m'(p-Z)) dt``."""
    n = _check_em(x0, dt, t_end)
    rng = np.random.default_rng() if rng is None else rng
    dt_eff = t_end / n if n else dt
    z = np.empty(n + 1)
    z[0] = x0
    normals = rng.standard_normal(n)
    for k in range(n):
        z[k + 1] = em_increment(z[k], params.s_prime, params.m_prime, params.p, dt_eff,
                                normals[k], kappa)
    return SdePath(np.arange(n + 1) * dt_eff, z)


def em_wf_ensemble(params: PopulationParams, x0: float, dt: float, t_end: float, n_paths: int,
                   rng=None, kappa: float = 1.0) -> np.ndarray:
    """Final states of ``n_paths`` independent Euler-Maruyama paths."""
    n = _check_em(x0, dt, t_end)
    rng = np.random.default_rng() if rng is None else rng
    dt_eff = t_end / n if n else dt
    z = np.full(n_paths, float(x0))
    for _ in range(n):
        z = em_increment(z, params.s_prime, params.m_prime, params.p, dt_eff,
                         rng.standard_normal(n_paths), kappa)
    return z

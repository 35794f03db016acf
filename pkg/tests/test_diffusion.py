import math

import numpy as np
import pytest

from moranwf.diffusion import (
    GridFunction,
    UnconvergedError,
    bk_solve,
    derivative_norm_profile,
    em_wf_ensemble,
    em_wf_path,
    lattice_grid_size,
    semigroup_reference,
)
from moranwf.generator import TestFunction
from moranwf.kernels import ParameterError, PopulationParams

LINEAR = TestFunction([0, 1])
NEUTRAL_IMM = PopulationParams(50, 0.0, 1.0, 0.5)


def closed_form(x, t, m_prime=1.0, p=0.5):
    return p + (x - p) * np.exp(-m_prime * t)


@pytest.fixture(scope="module")
def neutral_solution():
    return bk_solve(LINEAR, NEUTRAL_IMM, 1.0)


def test_time_zero_is_identity():
    f = TestFunction([0.2, -1, 3])
    sol = bk_solve(f, NEUTRAL_IMM, 0.0, N=201)
    assert np.array_equal(sol.values, f(np.linspace(0, 1, 201)))


def test_linear_closed_form(neutral_solution):
    sol = neutral_solution
    assert np.max(np.abs(sol.values - closed_form(sol.x, 1.0))) < 1e-4
    assert sol.at(0.7) == pytest.approx(0.5 + 0.2 * math.exp(-1), abs=1e-6)
    assert sol.refinement_change < 1e-6


def test_constants_preserved():
    params = PopulationParams(50, 1.0, 0.2, 0.5)
    sol = bk_solve(TestFunction([0.3]), params, 2.0, check=False)
    assert np.max(np.abs(sol.values - 0.3)) < 1e-12
    # without the shortcut the marched operator still keeps constants to rounding level
    from moranwf.diffusion import BackwardSolver
    solver = BackwardSolver([1.0], 0.2, 0.5, 2001)
    vals, _ = solver.march(np.full(2001, 0.3), 2.0, 20000)
    assert np.max(np.abs(vals - 0.3)) < 1e-10


def test_maximum_principle():
    f = TestFunction.simpson()
    for params in (PopulationParams(50, 1.0, 0.2, 0.5), PopulationParams(50, -2.0, 0.0)):
        sol = bk_solve(f, params, 1.0, check=False)
        assert sol.values.min() >= 0.5 - 1e-9 and sol.values.max() <= 1.0 + 1e-9


def test_neutral_boundaries_absorbing():
    f = TestFunction([0.1, 0.0, 0.0, 1.0])
    sol = bk_solve(f, PopulationParams(50), 0.5, check=False)
    assert sol.values[0] == pytest.approx(0.1, abs=1e-12)
    assert sol.values[-1] == pytest.approx(1.1, abs=1e-12)


def test_input_guards():
    with pytest.raises(ParameterError):
        bk_solve(LINEAR, NEUTRAL_IMM, 1.0, N=101)
    with pytest.raises(ParameterError):
        bk_solve(LINEAR, NEUTRAL_IMM, 1.0, dt=0.01)
    with pytest.raises(UnconvergedError):
        bk_solve(TestFunction.monomial(3), PopulationParams(50, 1.0, 0.2), 0.5, N=201, dt=5e-4,
                 tol=1e-12)


def test_implicit_euler_option_is_first_order():
    sol = bk_solve(LINEAR, NEUTRAL_IMM, 1.0, theta=1.0, check=False)
    err = np.max(np.abs(sol.values - closed_form(sol.x, 1.0)))
    assert 1e-7 < err < 1e-4


def test_semigroup_reference_time_scales(neutral_solution):
    params = PopulationParams(20, 0.0, 1.0, 0.5)
    assert np.array_equal(semigroup_reference(LINEAR, params, 0).values,
                          LINEAR(np.linspace(0, 1, 2001)))
    moran = semigroup_reference(LINEAR, params, 400)
    assert np.max(np.abs(moran.values - neutral_solution.values)) < 1e-9
    wf = semigroup_reference(LINEAR, params, 20, model="wf")
    assert np.max(np.abs(wf.values - closed_form(wf.x, 1.0))) < 1e-4


def test_grid_function_lookup():
    g = GridFunction(np.linspace(0, 1, 201) ** 2, 0.0)
    assert g.at(0.5) == 0.25
    assert g.at(0.503) == pytest.approx(0.503**2, abs=1e-12)
    assert np.allclose(g.on_lattice(10), (np.arange(11) / 10) ** 2)
    with pytest.raises(ValueError):
        g.on_lattice(7)
    assert lattice_grid_size(7) == 2003 and lattice_grid_size(50) == 2001


# --- Euler-Maruyama -----------------------------------------------------

def test_em_boundaries_without_immigration():
    params = PopulationParams(50, 1.0)
    rng = np.random.default_rng(0)
    assert np.all(em_wf_path(params, 0.0, 1e-3, 1.0, rng).states == 0.0)
    assert np.all(em_wf_path(params, 1.0, 1e-3, 1.0, rng).states == 1.0)


def test_em_guards_and_grid():
    with pytest.raises(ParameterError):
        em_wf_path(NEUTRAL_IMM, 0.5, 0.2, 1.0)
    with pytest.raises(ParameterError):
        em_wf_path(NEUTRAL_IMM, 1.5, 0.01, 1.0)
    path = em_wf_path(NEUTRAL_IMM, 0.5, 0.01, 1.0, np.random.default_rng(1))
    assert len(path.times) == 101 and np.allclose(np.diff(path.times), 0.01)
    assert np.all((path.states >= 0) & (path.states <= 1))


def test_em_reproducible():
    a = em_wf_path(NEUTRAL_IMM, 0.3, 0.01, 1.0, np.random.default_rng(5))
    b = em_wf_path(NEUTRAL_IMM, 0.3, 0.01, 1.0, np.random.default_rng(5))
    assert np.array_equal(a.states, b.states)


def test_em_mean_closed_form():
    z = em_wf_ensemble(NEUTRAL_IMM, 0.7, 1e-3, 1.0, 100_000, np.random.default_rng(2))
    se = z.std(ddof=1) / math.sqrt(z.size)
    assert abs(z.mean() - closed_form(0.7, 1.0)) < 4 * se


@pytest.mark.parametrize("params, x0, t", [
    (PopulationParams(50, 1.0, 2.0, 0.5), 0.5, 0.3),
    (PopulationParams(50, 0.5, 4.0, 0.5), 0.5, 0.5),
])
def test_em_agrees_with_pde_for_cubic(params, x0, t):
    f = TestFunction([0.1, -0.5, 0.3, 1.0])
    z = em_wf_ensemble(params, x0, 1e-3, t, 100_000, np.random.default_rng(3))
    vals = f(z)
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    ref = bk_solve(f, params, t).at(x0)
    assert abs(vals.mean() - ref) < 4 * se + 1e-4


def test_em_boundary_bias_is_visible_with_weak_immigration():
    # clipped square-root EM loses accuracy once mass reaches the boundary;
    # the PDE stays the reference there
    params = PopulationParams(50, 1.0, 0.2, 0.5)
    f = TestFunction([0.1, -0.5, 0.3, 1.0])
    ref = bk_solve(f, params, 0.5).at(0.4)
    means = [f(em_wf_ensemble(params, 0.4, dt, 0.5, 100_000, np.random.default_rng(3))).mean()
             for dt in (1e-2, 1e-3)]
    assert abs(means[1] - ref) < abs(means[0] - ref)


# --- derivative profiles ------------------------------------------------------

def test_profile_at_time_zero():
    f = TestFunction([0, 0, 1])
    prof = derivative_norm_profile(f, PopulationParams(50, 1.0, 0.2), [0.0], j=1)
    assert prof[0] == pytest.approx(2.0, abs=1e-6)
    prof2 = derivative_norm_profile(f, PopulationParams(50, 1.0, 0.2), [0.0], j=2)
    assert prof2[0] == pytest.approx(2.0, abs=1e-6)


def test_profile_linear_closed_form():
    ts = np.linspace(0, 2, 5)
    prof = derivative_norm_profile(LINEAR, NEUTRAL_IMM, ts, j=1)
    assert np.allclose(prof, np.exp(-ts), atol=1e-6)


def test_profile_non_increasing_when_immigration_dominates():
    ts = np.linspace(0, 3, 31)
    prof = derivative_norm_profile(TestFunction([0, 0, 1]), PopulationParams(50, 0.2, 1.0), ts, j=1)
    assert np.all(np.diff(prof) <= 1e-9)


def test_profile_rejects_bad_input():
    with pytest.raises(ValueError):
        derivative_norm_profile(LINEAR, NEUTRAL_IMM, [0.0], j=3)
    with pytest.raises(ValueError):
        derivative_norm_profile(LINEAR, NEUTRAL_IMM, [1.0, 0.5])

from fractions import Fraction
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moranwf.kernels import (
    MomentReport,
    ParameterError,
    PopulationParams,
    StateX,
    binomial_central_moments,
    lattice_index,
    moran_centered_moments,
    moran_step,
    moran_transition_probs,
    wf_centered_moments,
    wf_step,
    wf_success_prob,
)


def rational_moran(i, J, s_prime, m_prime, p):
    """Kernel probabilities in exact rational arithmetic."""
    x = Fraction(i, J)
    s, m, p = Fraction(s_prime) / J, Fraction(m_prime) / J, Fraction(p)
    q = x * (1 + s) / (1 + s * x)
    up = (1 - x) * (m * p + (1 - m) * q)
    down = x * (m * (1 - p) + (1 - m) * (1 - q))
    return up, down


# --- parameters -----------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    dict(J=1), dict(J=10, p=1.5), dict(J=10, p=-0.1), dict(J=10, m_prime=-1),
    dict(J=10, m_prime=11), dict(J=2, s_prime=-2), dict(J=10, s_prime=float("nan")),
    dict(J=10.5),
])
def test_params_reject_inadmissible(kwargs):
    with pytest.raises(ParameterError):
        PopulationParams(**kwargs)


def test_params_derived_values():
    params = PopulationParams(20, s_prime=1.0, m_prime=0.2)
    assert params.s == pytest.approx(0.05)
    assert params.m == pytest.approx(0.01)
    assert params.delta == 0.05
    assert params.with_J(40).s == pytest.approx(0.025)


def test_lattice_index_rejects_off_lattice():
    assert lattice_index(0.7, 10) == 7
    assert lattice_index(StateX(3, 10), 10) == 3
    with pytest.raises(ParameterError):
        lattice_index(0.33, 10)
    with pytest.raises(ParameterError):
        lattice_index(1.1, 10)
    with pytest.raises(ParameterError):
        lattice_index(StateX(1, 5), 10)


# --- Moran kernel -----------------------------------------------------------

def test_moran_neutral_symmetric():
    assert moran_transition_probs(0.5, PopulationParams(10)) == pytest.approx((0.25, 0.25, 0.5))


def test_moran_boundary_immigration_only():
    pp, pm, ps = moran_transition_probs(0.0, PopulationParams(10, m_prime=1.0, p=0.5))
    assert (pp, pm, ps) == pytest.approx((0.05, 0.0, 0.95))


def test_moran_matches_rational_enumeration():
    params = PopulationParams(100, 1.0, 0.2, 0.5)
    up, down = rational_moran(70, 100, 1, Fraction(1, 5), Fraction(1, 2))
    pp, pm, ps = moran_transition_probs(0.7, params)
    assert pp == pytest.approx(float(up), abs=1e-15)
    assert pm == pytest.approx(float(down), abs=1e-15)
    assert ps == pytest.approx(float(1 - up - down), abs=1e-15)


@given(J=st.integers(2, 200), data=st.data(),
       s_prime=st.floats(-0.9, 5), m_prime=st.floats(0, 1), p=st.floats(0, 1))
@settings(max_examples=200, deadline=None)
def test_moran_normalisation_exact(J, data, s_prime, m_prime, p):
    i = data.draw(st.integers(0, J))
    params = PopulationParams(J, s_prime, m_prime, p)
    pp, pm, ps = moran_transition_probs(StateX(i, J), params)
    assert (pp + pm) + ps == 1.0
    assert all(0 <= v <= 1 for v in (pp, pm, ps))


def test_moran_absorbing_boundaries():
    rng = np.random.default_rng(1)
    params = PopulationParams(10, s_prime=1.0)
    for _ in range(200):
        assert moran_step(0.0, params, rng=rng).i == 0
        assert moran_step(1.0, params, rng=rng).i == 10


def test_moran_step_frequencies():
    params = PopulationParams(10, 1.0, 0.2, 0.5)
    pp, pm, ps = moran_transition_probs(0.5, params)
    rng = np.random.default_rng(7)
    n = 10**6
    # vectorised replica of moran_step's single-uniform rule
    u = rng.random(n)
    up, down = np.mean(u < pp), np.mean((u >= pp) & (u < pp + pm))
    for freq, prob in ((up, pp), (down, pm)):
        assert abs(freq - prob) < 4 * np.sqrt(prob * (1 - prob) / n)
    # and the scalar sampler itself on a smaller run
    rng = np.random.default_rng(8)
    steps = np.array([moran_step(0.5, params, rng=rng).i - 5 for _ in range(20000)])
    assert abs(np.mean(steps == 1) - pp) < 4 * np.sqrt(pp * (1 - pp) / 20000)


def test_moran_moments_neutral():
    rep = moran_centered_moments(0.5, PopulationParams(10))
    assert rep.m1 == 0.0
    assert rep.m2 == pytest.approx(0.5 / 100, abs=1e-16)
    rep = moran_centered_moments(0.3, PopulationParams(10, m_prime=1.0, p=0.5))
    assert rep.m1 == pytest.approx(0.1 * 0.2 / 10, abs=1e-16)


@pytest.mark.parametrize("J", [5, 10, 20])
@pytest.mark.parametrize("s_prime", [-0.5, 0.0, 1.0])
@pytest.mark.parametrize("m_prime", [0.0, 0.2, 1.0])
@pytest.mark.parametrize("p", [0.0, 0.5, 1.0])
def test_moran_moments_equal_enumeration(J, s_prime, m_prime, p):
    params = PopulationParams(J, s_prime, m_prime, p)
    for i in range(J + 1):
        up, down = rational_moran(i, J, s_prime, m_prime, p)
        d = Fraction(1, J)
        rep = moran_centered_moments(StateX(i, J), params)
        assert abs(rep.m1 - float(d * (up - down))) < 1e-14
        assert abs(rep.m2 - float(d**2 * (up + down))) < 1e-14
        assert abs(rep.m3 - float(d**3 * (up - down))) < 1e-14
        assert rep.m4 is None and rep.m2 >= rep.m1**2


def test_moran_third_moment_scaling():
    vals = []
    for J in (50, 100, 200, 400, 800):
        params = PopulationParams(J, 1.0, 0.2, 0.5)
        vals.append(max(J**3 * abs(moran_centered_moments(StateX(i, J), params).m3)
                        for i in range(0, J + 1, J // 10)))
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_neutral_martingale_by_enumeration():
    J = 8
    params = PopulationParams(J)
    dist = np.zeros(J + 1)
    dist[3] = 1.0
    for _ in range(6):
        new = np.zeros_like(dist)
        for i in range(J + 1):
            pp, pm, ps = moran_transition_probs(StateX(i, J), params)
            new[i] += ps * dist[i]
            if i < J:
                new[i + 1] += pp * dist[i]
            if i > 0:
                new[i - 1] += pm * dist[i]
        dist = new
        assert np.dot(dist, np.arange(J + 1) / J) == pytest.approx(3 / 8, abs=1e-15)


def test_moment_report_rejects_nonfinite():
    with pytest.raises(ValueError):
        MomentReport(0.0, float("inf"), 0.0)


# --- Wright-Fisher kernel -----------------------------------------------

def test_wf_success_prob_identities():
    assert wf_success_prob(0.3, PopulationParams(10)) == pytest.approx(0.3)
    params = PopulationParams(10, 1.0, 0.5, 0.4)
    assert wf_success_prob(0.0, params) == pytest.approx(params.m * 0.4)


def test_wf_success_prob_extended_precision():
    params = PopulationParams(100, 1.0, 0.2, 0.5)
    x, s, m = Fraction(7, 10), Fraction(1, 100), Fraction(2, 1000)
    exact = m / 2 + (1 - m) * (1 + s) * x / (1 + s * x)
    assert wf_success_prob(0.7, params) == pytest.approx(float(exact), abs=1e-15)


def test_wf_absorbing_zero():
    rng = np.random.default_rng(0)
    params = PopulationParams(10, 1.0)
    assert all(wf_step(0.0, params, rng=rng).i == 0 for _ in range(100))


def test_wf_binomial_mean_and_variance():
    J = 50
    params = PopulationParams(J, 1.0, 0.2, 0.5)
    P = wf_success_prob(0.5, params)
    rng = np.random.default_rng(11)
    n = 10**6
    x1 = rng.binomial(J, P, size=n) / J  # the vectorised form of wf_step
    var = P * (1 - P) / J
    assert abs(x1.mean() - P) < 4 * np.sqrt(var / n)
    mu4 = binomial_central_moments(J, P)[3] / J**4
    assert abs(x1.var() - var) < 4 * np.sqrt((mu4 - var**2) / n)
    single = np.array([wf_step(0.5, params, rng=rng).x for _ in range(5000)])
    assert abs(single.mean() - P) < 4 * np.sqrt(var / 5000)


def test_wf_moments_neutral():
    rep = wf_centered_moments(0.3, PopulationParams(20))
    assert rep.m1 == pytest.approx(0.0, abs=1e-16)
    assert rep.m2 == pytest.approx(0.3 * 0.7 / 20)
    rep = wf_centered_moments(0.3, PopulationParams(20, m_prime=2.0, p=0.5))
    assert rep.m1 == pytest.approx(0.1 * 0.2)


@pytest.mark.parametrize("J", [2, 7, 15, 30])
def test_wf_moments_equal_binomial_sums(J):
    params = PopulationParams(J, 1.0, 0.2, 0.3)
    for i in range(J + 1):
        x = Fraction(i, J)
        P = Fraction(wf_success_prob(StateX(i, J), params))
        rep = wf_centered_moments(StateX(i, J), params)
        for k, got in enumerate(rep.as_tuple(), start=1):
            exact = sum(comb(J, j) * P**j * (1 - P) ** (J - j) * (Fraction(j, J) - x) ** k
                        for j in range(J + 1))
            assert abs(got - float(exact)) < 1e-14


def test_wf_moment_order_limits():
    params = PopulationParams(10)
    assert wf_centered_moments(0.5, params, order=2).m3 is None
    with pytest.raises(ParameterError):
        wf_centered_moments(0.5, params, order=6)


def test_wf_fifth_moment_scaling():
    vals = [J**3 * abs(wf_centered_moments(0.3, PopulationParams(J, 1.0, 0.2, 0.5)).m5)
            for J in (50, 100, 200, 400, 800)]
    assert max(vals) < 2 * min(vals) + 1e-12

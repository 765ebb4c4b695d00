import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from consistency_lab.schedule import (
    Schedule,
    beta_at,
    build_grid,
    integrated_beta,
    mean_coeff,
    std_coeff,
)

LIN = Schedule.linear(0.1, 1.0, 1.0, 0.01)
CONST = Schedule.constant(0.5, 3.0, 0.01)


def test_beta_constant_and_linear():
    assert beta_at(CONST, 1.3) == 0.5
    assert beta_at(LIN, 0.0) == pytest.approx(0.1, abs=1e-15)
    assert beta_at(LIN, 0.5) == pytest.approx(0.55, abs=1e-15)


def test_beta_domain():
    with pytest.raises(ValueError):
        beta_at(CONST, -0.1)
    with pytest.raises(ValueError):
        mean_coeff(CONST, 3.5)


def test_mean_coeff_values():
    assert mean_coeff(CONST, 0.0) == 1.0
    assert mean_coeff(CONST, 2.0) == pytest.approx(0.606531, abs=1e-6)
    assert mean_coeff(LIN, 1.0) == pytest.approx(0.759572, abs=1e-6)
    assert mean_coeff(LIN, 1.0) == pytest.approx(math.exp(-0.275), rel=1e-14)


def test_std_coeff_values():
    assert std_coeff(CONST, 0.0) == 0.0
    # sqrt(1 - e^-1) = 0.7950600...
    assert std_coeff(CONST, 2.0) == pytest.approx(math.sqrt(-math.expm1(-1.0)), rel=1e-14)
    assert std_coeff(CONST, 2.0) == pytest.approx(0.795060, abs=1e-6)
    ts = np.linspace(0.1, 3.0, 50)
    sig = std_coeff(CONST, ts)
    assert np.all(np.diff(sig) > 0) and sig[-1] < 1.0


def test_closed_form_matches_quadrature():
    rng = np.random.default_rng(0)
    for s in (LIN, Schedule.linear(0.3, 2.0, 5.0, 0.1), CONST):
        for t in rng.uniform(0, s.T, 100):
            ib, _ = quad(lambda u: beta_at(s, u), 0.0, t, epsabs=1e-13, epsrel=1e-13)
            assert integrated_beta(s, t) == pytest.approx(ib, abs=1e-11)
            assert mean_coeff(s, t) == pytest.approx(math.exp(-0.5 * ib), abs=1e-9)


schedules = st.builds(
    lambda lo, span, T, frac: Schedule.linear(lo, lo + span, T, frac * T),
    st.floats(0.05, 5.0), st.floats(0.0, 5.0), st.floats(0.1, 20.0), st.floats(1e-4, 0.5),
)


@settings(max_examples=60, deadline=None)
@given(schedules, st.floats(0.0, 1.0))
def test_variance_preserved(s, frac):
    t = frac * s.T
    assert mean_coeff(s, t) ** 2 + std_coeff(s, t) ** 2 == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(schedules)
def test_monotone_and_sandwiched(s):
    ts = np.linspace(0.0, s.T, 64)
    m, sig = mean_coeff(s, ts), std_coeff(s, ts)
    assert np.all(np.diff(m) < 0) and np.all(np.diff(sig) >= 0)
    # sigma is strictly increasing until it rounds to 1
    live = m[1:] > 1e-6
    assert np.all(np.diff(sig)[live] > 0)
    assert np.all(np.exp(-s.beta_max * ts / 2) <= m * (1 + 1e-12))
    assert np.all(m <= np.exp(-s.beta_min * ts / 2) * (1 + 1e-12))


def test_schedule_validation():
    with pytest.raises(ValueError):
        Schedule.constant(1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        Schedule.linear(2.0, 1.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        Schedule("cosine", 1.0, 1.0, 1.0, 0.1)


def test_schedule_roundtrip():
    d = LIN.to_dict()
    assert set(d) == {"kind", "beta_min", "beta_max", "T", "eps"}
    assert Schedule.from_dict(d) == LIN


def test_grid_arithmetic():
    g = build_grid(Schedule.constant(1.0, 1.01, 0.01), 2, 5)
    assert g.N == 10
    np.testing.assert_allclose(g.times, 0.01 + 0.1 * np.arange(11), atol=1e-15)
    np.testing.assert_allclose(g.taus, [0.01, 0.51, 1.01], atol=1e-15)
    assert g.times[0] == 0.01 and g.times[-1] == 1.01


def test_grid_degenerate_and_index():
    g = build_grid(CONST, 1, 1)
    assert list(g.times) == [CONST.eps, CONST.T]
    assert list(build_grid(CONST, 3, 4).coarse_index) == [0, 4, 8, 12]


def test_grid_rejects_bad_counts():
    for n, m in [(0, 1), (1, 0), (-2, 3)]:
        with pytest.raises(ValueError):
            build_grid(CONST, n, m)


@settings(max_examples=40, deadline=None)
@given(schedules, st.integers(1, 12), st.integers(1, 30))
def test_grid_invariants(s, n_coarse, M):
    g = build_grid(s, n_coarse, M)
    assert g.N == n_coarse * M
    assert g.times[0] == s.eps and g.times[-1] == s.T
    assert np.allclose(np.diff(g.times), (s.T - s.eps) / g.N, rtol=1e-9, atol=1e-12)
    assert g.taus[0] == g.times[0] and g.taus[-1] == g.times[-1]
    assert g.dt == pytest.approx((s.T - s.eps) / g.N)


def test_beta_bound_recorded():
    tiny = Schedule.constant(1e-4, 1.0, 0.01)
    assert tiny.satisfies_beta_bound(1, 64)
    assert not Schedule.constant(1.0, 1.0, 0.01).satisfies_beta_bound(1, 64)

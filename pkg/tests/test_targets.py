import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from consistency_lab.schedule import Schedule, mean_coeff, std_coeff
from consistency_lab.targets import (
    Dataset,
    TargetDistribution,
    derive_seed,
    forward_marginal,
    make_dataset,
    sample_target,
    second_moment,
)

TWO = TargetDistribution.two_point(-1.0, 1.0)
BALL2 = TargetDistribution.uniform_ball(2.0, dim=1)
MIX = TargetDistribution.gaussian_mixture([[-2.0, 0.0], [1.0, 1.0]], [0.3, 0.7], [0.5, 1.5])


def test_two_point_support():
    x = sample_target(TWO, 4, seed=3)
    assert x.shape == (4, 1) and set(np.unique(x)) <= {-1.0, 1.0}


def test_ball_support():
    assert np.abs(sample_target(BALL2, 1000, seed=1)).max() <= 2.0
    b3 = TargetDistribution.uniform_ball(1.5, dim=3)
    assert np.linalg.norm(sample_target(b3, 1000, 2), axis=1).max() <= 1.5


def test_mixture_sample_mean():
    m = 100_000
    x = sample_target(MIX, m, seed=7)
    mu = MIX.mean()
    # per-coordinate sd of the mixture from its exact second moments
    p = MIX.params
    means, w, s = np.asarray(p["means"]), np.asarray(p["weights"]), np.asarray(p["std"])
    var = w @ (means**2 + s[:, None] ** 2) - mu**2
    assert np.all(np.abs(x.mean(0) - mu) <= 3 * np.sqrt(var / m))


def test_invalid_params():
    with pytest.raises(ValueError):
        TargetDistribution.gaussian_mixture([[0.0]], [0.5])
    with pytest.raises(ValueError):
        TargetDistribution.uniform_ball(-1.0)
    with pytest.raises(ValueError):
        TargetDistribution.two_point(0.0, 1.0, 1.5)
    with pytest.raises(ValueError):
        sample_target(TWO, 0, 1)


def test_sampling_deterministic():
    for td in (TWO, BALL2, MIX):
        a, b = sample_target(td, 257, 11), sample_target(td, 257, 11)
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(sample_target(td, 257, 12), a) or td is TWO


def test_second_moments():
    assert second_moment(TWO) == 1.0
    assert second_moment(BALL2) == pytest.approx(4.0 / 3.0, rel=1e-14)
    assert second_moment(TargetDistribution.single_gaussian(dim=2)) == 2.0
    x = sample_target(BALL2, 200_000, 5)
    assert np.mean(x**2) == pytest.approx(4.0 / 3.0, rel=0.01)


def test_mixture_second_moment_by_quadrature():
    td = TargetDistribution.gaussian_mixture([[-1.0], [2.0]], [0.25, 0.75], [0.5, 1.0])
    pdf = lambda x: 0.25 * stats.norm.pdf(x, -1, 0.5) + 0.75 * stats.norm.pdf(x, 2, 1.0)
    val, _ = integrate.quad(lambda x: x * x * pdf(x), -np.inf, np.inf)
    assert second_moment(td) == pytest.approx(val, rel=1e-10)


def test_quantile_inverts_cdf():
    u = np.linspace(0.01, 0.99, 41)
    td = TargetDistribution.gaussian_mixture([[-1.0], [2.0]], [0.4, 0.6], [0.3, 1.0])
    np.testing.assert_allclose(td.cdf(td.quantile(u)), u, atol=1e-12)
    np.testing.assert_allclose(BALL2.quantile(u), 2.0 * (2 * u - 1), atol=1e-15)
    q = TargetDistribution.two_point(-1, 1, 0.25).quantile(np.array([0.2, 0.25, 0.3]))
    assert list(q) == [-1.0, -1.0, 1.0]


def test_forward_marginal_t0_identity():
    s = Schedule.constant(1.0, 2.0, 0.01)
    x = sample_target(MIX, 50, 1)
    assert np.array_equal(forward_marginal(x, s, 0.0, 9), x)


def test_forward_marginal_single_atom_variance():
    s = Schedule.constant(1.0, 2.0, 0.01)
    t = 0.7
    out = forward_marginal(np.zeros((100_000, 1)), s, t, 3)
    assert out.var() == pytest.approx(std_coeff(s, t) ** 2, rel=0.05)


def test_forward_marginal_cluster_centers():
    s = Schedule.constant(1.0, 2.0, 0.01)
    t = 2 * math.log(2.0)  # m(t) = 1/2
    assert mean_coeff(s, t) == pytest.approx(0.5)
    x = np.repeat([[-1.0], [1.0]], 50_000, axis=0)
    out = forward_marginal(x, s, t, 4)
    assert out[:50_000].mean() == pytest.approx(-0.5, abs=0.01)
    assert out[50_000:].mean() == pytest.approx(0.5, abs=0.01)


def test_forward_marginal_variance_ordering():
    s = Schedule.linear(0.1, 5.0, 2.0, 0.01)
    m = 100_000
    x = np.zeros((m, 1))
    v1 = forward_marginal(x, s, 0.3, 1).var()
    v2 = forward_marginal(x, s, 0.6, 2).var()
    s1, s2 = std_coeff(s, 0.3) ** 2, std_coeff(s, 0.6) ** 2
    # sample variance of a Gaussian has sd sigma^2 sqrt(2/m)
    se = math.sqrt(2.0 / m) * math.hypot(s1, s2)
    assert s1 < s2
    assert v2 - v1 > (s2 - s1) - 3 * se > 0


def test_gaussian_tail_probe():
    m = 200_000
    x = sample_target(MIX, m, 21)
    norms = np.linalg.norm(x, axis=1)
    for r in [2.0, 3.0, 4.0, 6.0]:
        p = (norms >= r).mean()
        bound = float(MIX.gaussian_tail_bound(r))
        assert p <= bound + 3 * math.sqrt(max(bound, 1 / m) / m)


def test_dataset_roundtrip(tmp_path):
    ds = make_dataset(MIX, 33, 5)
    ds.save(tmp_path / "data.csv")
    assert (tmp_path / "data.csv.json").exists()
    back = Dataset.load(tmp_path / "data.csv")
    assert back.points.tobytes() == ds.points.tobytes()
    assert back.seed == 5 and back.source == MIX
    assert back.radius == float(np.linalg.norm(ds.points, axis=1).max())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**63 - 1), st.lists(st.integers(0, 1000), min_size=1, max_size=3))
def test_derive_seed_stable(base, keys):
    assert derive_seed(base, *keys) == derive_seed(base, *keys)
    assert 0 <= derive_seed(base, *keys) < 2**64

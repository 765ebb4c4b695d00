import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consistency_lab.consistency import (
    ConsistencyNet,
    ConsistencyTrainingError,
    LossValue,
    TrainConfig,
    _step_loss_and_grads,
    consistency_loss,
    default_lipschitz_budget,
    draw_pairs,
    emulate_baseline,
    eval_consistency,
    loss_cd,
    loss_ct,
    one_step_sample,
    train_consistency,
)
from consistency_lab.flow import lipschitz_probe, lipschitz_probe_solver
from consistency_lab.schedule import Schedule, build_grid
from consistency_lab.score import EmpiricalScore
from consistency_lab.targets import TargetDistribution, make_dataset
from consistency_lab.transport import w1

S = Schedule.constant(1.0, 3.0, 0.01)
GRID = build_grid(S, 4, 8)


def random_net(R=5.0, seed=0, dim=1):
    return ConsistencyNet(dim, S, hidden=(16, 16), R=R, seed=seed, zero_init=False)


def test_boundary_is_bitwise_identity():
    net = random_net()
    x = np.random.default_rng(0).standard_normal((25, 1))
    out = eval_consistency(net, x, S.eps)
    assert np.array_equal(out, x) and out is not x


def test_zero_init_is_identity():
    net = ConsistencyNet(2, S, hidden=(8,), R=3.0)
    x = np.random.default_rng(1).standard_normal((10, 2))
    for t in np.linspace(S.eps, S.T, 7):
        assert np.array_equal(net(x, t), x)


def test_domain_error():
    with pytest.raises(ValueError):
        random_net()(np.zeros((1, 1)), S.T + 0.5)
    with pytest.raises(ValueError):
        random_net()(np.zeros((1, 1)), 0.0)


@settings(max_examples=25, deadline=None)
@given(st.floats(1.0, 20.0), st.integers(0, 10_000))
def test_projection_certifies_lipschitz(R, seed):
    net = ConsistencyNet(2, S, hidden=(16, 16), R=R, seed=seed, zero_init=False)
    for W in net.h.weights:
        W *= 10.0
    net.project()
    assert net.certified_lipschitz <= R * (1 + 1e-9)
    probes = np.random.default_rng(seed).standard_normal((1000, 2)) * 2
    for t in [S.eps + 0.1, 1.0, S.T]:
        rho = lipschitz_probe(lambda a: net(a, t), probes, seed=seed)
        assert rho <= R + 1e-6 and rho <= net.certified_lipschitz + 1e-6


def test_default_budget():
    assert default_lipschitz_budget(1, Schedule.constant(0.01, 1.0, 0.1)) == pytest.approx(2 * math.exp(0.1))
    assert default_lipschitz_budget(2, Schedule.constant(1.0, 100.0, 0.1)) == math.inf
    ConsistencyNet(1, Schedule.constant(1.0, 100.0, 0.1), hidden=(4,))


def test_identity_net_loss_is_flow_gap():
    td = TargetDistribution.gaussian_mixture([[0.0]], [1.0], [1.0])
    ds = make_dataset(td, 128, 2)
    score = EmpiricalScore(ds, S)
    grid = build_grid(S, 3, 64)
    ident = ConsistencyNet(1, S, hidden=(4,))
    lv = loss_cd(ident, ds, grid, score, 512, 5)
    pairs = draw_pairs(ds, grid, score, 512, 5)
    for v, (A, B) in zip(lv.per_interval, pairs):
        assert v == pytest.approx(w1(A, B).value, abs=1e-15) and v > 0


def test_single_point_baseline_loss_vanishes():
    pts = np.array([[0.4]])
    base = emulate_baseline("isolate", GRID, dataset=pts)
    exact = EmpiricalScore(pts, S)
    assert loss_cd(base, pts, GRID, exact, 1000, 1).total == 0.0
    ident = ConsistencyNet(1, S, hidden=(4,))
    far = np.mean([loss_cd(ident, pts, GRID, exact, 1000, r, pairing="independent").total for r in range(4)])
    near = [loss_cd(base, pts, GRID, exact, 1000, r, pairing="independent").total for r in range(4)]
    # a single interval gap is ~ 1/sqrt(1000) in W1; the identity is far off
    assert np.mean(near) < 4 * GRID.N_coarse / math.sqrt(1000) < far


def test_one_interval_total():
    grid = build_grid(S, 1, 4)
    lv = loss_ct(random_net(), make_dataset(TargetDistribution.two_point(), 16, 0), grid, 64, 3)
    assert lv.total == lv.per_interval[0] and len(lv.per_interval) == 1
    assert LossValue(0.0, [0.1, 0.2], "x").total == math.fsum([0.1, 0.2])


def test_constant_map_has_zero_loss():
    grid = build_grid(S, 1, 4)
    const = lambda x, t: np.full_like(np.asarray(x, dtype=float), 0.7)
    assert loss_ct(const, make_dataset(TargetDistribution.two_point(), 16, 0), grid, 64, 3).total == 0.0


def _odd_net():
    net = ConsistencyNet(1, S, hidden=(16,), R=10.0, seed=4, zero_init=False)
    # zero biases and no time input give an odd h
    for b in net.h.biases:
        b[:] = 0.0
    net.h.weights[0][:, 1] = 0.0
    return net


def test_sign_flip_invariance():
    net = _odd_net()
    x = np.linspace(-2, 2, 9)[:, None]
    assert np.allclose(net(-x, 1.0), -net(x, 1.0), atol=1e-15)
    pts = make_dataset(TargetDistribution.two_point(-1.0, 0.6, 0.3), 32, 1).points
    grid = build_grid(S, 3, 8)
    a = np.array([loss_ct(net, pts, grid, 512, r).total for r in range(16)])
    b = np.array([loss_ct(net, -pts, grid, 512, r).total for r in range(16)])
    se = math.sqrt((a.var(ddof=1) + b.var(ddof=1)) / 16)
    assert abs(a.mean() - b.mean()) <= 4 * se


def test_sign_flip_pairwise_exact():
    # flipping the data and the noise gives negated clouds, so the loss is unchanged
    net = _odd_net()
    pts = np.array([[-1.0], [0.3], [0.9]])
    grid = build_grid(S, 3, 8)
    pairs = draw_pairs(pts, grid, EmpiricalScore(pts, S), 64, 9)
    flipped = [(-A, -B) for A, B in pairs]
    per = [w1(net(A, grid.taus[k]), net(B, grid.taus[k - 1])).value for k, (A, B) in enumerate(pairs, 1)]
    per_f = [w1(net(A, grid.taus[k]), net(B, grid.taus[k - 1])).value for k, (A, B) in enumerate(flipped, 1)]
    np.testing.assert_allclose(per, per_f, rtol=1e-12)
    B0 = pairs[0][1]
    np.testing.assert_allclose(EmpiricalScore(-pts, S)(-B0, 0.5), -EmpiricalScore(pts, S)(B0, 0.5), rtol=1e-12)


def test_consistency_loss_dispatch():
    ds = make_dataset(TargetDistribution.two_point(), 16, 0)
    with pytest.raises(ValueError):
        consistency_loss("cd", random_net(), ds, GRID, 32, 0)
    with pytest.raises(ValueError):
        consistency_loss("xx", random_net(), ds, GRID, 32, 0)
    with pytest.raises(ValueError):
        draw_pairs(ds, GRID, None, 1, 0)


def test_gradient_matches_finite_differences():
    net = ConsistencyNet(1, S, hidden=(6,), R=math.inf, seed=3, zero_init=False)
    ds = make_dataset(TargetDistribution.two_point(), 8, 0)
    grid = build_grid(S, 3, 4)
    batch = draw_pairs(ds, grid, EmpiricalScore(ds, S), 16, 2)
    per, grads = _step_loss_and_grads(net, batch, grid.taus)
    h = 1e-6
    for p, g in zip(net.h.params, grads):
        for idx in list(np.ndindex(p.shape))[:6]:
            old = p[idx]
            p[idx] = old + h
            up = sum(_step_loss_and_grads(net, batch, grid.taus)[0])
            p[idx] = old - h
            dn = sum(_step_loss_and_grads(net, batch, grid.taus)[0])
            p[idx] = old
            assert g[idx] == pytest.approx((up - dn) / (2 * h), rel=1e-4, abs=1e-7)


def test_zero_steps_keeps_net():
    net = random_net()
    before = net.to_dict()
    res = train_consistency(net, "ct", np.array([[0.1], [0.5]]), GRID, TrainConfig(steps=0), seed=1)
    assert res.net.to_dict() == before and res.trace == []


def test_training_keeps_invariants(tmp_path):
    net = ConsistencyNet(1, S, hidden=(8, 8), R=3.0, seed=0)
    ds = make_dataset(TargetDistribution.two_point(), 16, 0)
    res = train_consistency(net, "ct", ds, GRID,
                            TrainConfig(steps=30, lr=0.05, m_batch=32, bank=256, smooth=5,
                                        check_improvement=False), seed=2)
    assert len(res.trace) == 30
    x = np.random.default_rng(0).standard_normal((10, 1))
    assert np.array_equal(net(x, S.eps), x)
    assert net.certified_lipschitz <= 3.0 * (1 + 1e-9)
    res.save_trace(tmp_path / "trace.csv")
    rows = list(csv.reader(open(tmp_path / "trace.csv")))
    assert rows[0] == ["step", "total", "interval_1", "interval_2", "interval_3", "interval_4"]
    assert len(rows) == 31


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_trace():
    net = ConsistencyNet(1, S, hidden=(8,), R=math.inf, seed=0, zero_init=False)
    ds = make_dataset(TargetDistribution.two_point(), 16, 0)
    with pytest.raises(ConsistencyTrainingError) as info:
        train_consistency(net, "ct", ds, GRID, TrainConfig(steps=5, lr=1e300, m_batch=16, bank=64), seed=0)
    assert info.value.trace is not None and len(info.value.trace) >= 1


def test_cd_requires_score():
    with pytest.raises(ValueError):
        train_consistency(random_net(), "cd", np.zeros((2, 1)), GRID, TrainConfig(steps=1))


def test_single_point_training_reaches_atom():
    s = Schedule.constant(1.0, 3.0, 2e-3)
    grid = build_grid(s, 4, 512)
    pts = np.array([[0.5]])
    net = ConsistencyNet(1, s, hidden=(32, 32), R=50.0, seed=0)
    train_consistency(net, "ct", pts, grid, TrainConfig(steps=2000, lr=0.01, m_batch=128, bank=2048), seed=1)
    cloud = one_step_sample(net, 4096, 2)
    assert w1(cloud, np.full_like(cloud, 0.5)).value <= 0.05


def test_one_step_sample_identity_and_determinism():
    net = ConsistencyNet(2, S, hidden=(4,))
    z = np.random.default_rng(7).standard_normal((100, 2))
    assert np.array_equal(one_step_sample(net, 100, 7), z)
    trained = random_net(dim=2)
    assert one_step_sample(trained, 50, 3).tobytes() == one_step_sample(trained, 50, 3).tobytes()


def test_baseline_properties():
    ds = make_dataset(TargetDistribution.two_point(), 32, 1)
    base = emulate_baseline("isolate", GRID, dataset=ds)
    x = np.random.default_rng(0).standard_normal((20, 1))
    assert np.array_equal(base(x, S.eps), x)
    lv = loss_ct(base, ds, GRID, 1000, 4)
    assert lv.per_interval == [0.0] * GRID.N_coarse
    indep = loss_ct(base, ds, GRID, 1000, 4, pairing="independent")
    assert max(indep.per_interval) < 5 / math.sqrt(1000)
    rep = lipschitz_probe_solver(base, np.random.default_rng(1).standard_normal((500, 1)))
    assert rep["ok"]
    with pytest.raises(ValueError):
        emulate_baseline("isolate", GRID)
    with pytest.raises(ValueError):
        emulate_baseline("distill", GRID)


def test_checkpoint_roundtrip(tmp_path):
    net = random_net(R=7.0, seed=5)
    net.save(tmp_path / "net.json")
    back = ConsistencyNet.load(tmp_path / "net.json")
    x = np.random.default_rng(0).standard_normal((9, 1))
    assert np.array_equal(back(x, 1.3), net(x, 1.3)) and back.R == 7.0
    free = ConsistencyNet(1, Schedule.constant(1.0, 100.0, 0.1), hidden=(4,))
    assert free.to_dict()["R"] is None and ConsistencyNet.from_dict(free.to_dict()).R == math.inf

"""The empirical score memorises: run the probability flow with it and the
samples pile up around the training points.

    python3 demos/01_empirical_score.py
"""
import numpy as np

from consistency_lab import (
    Schedule,
    build_grid,
    isolate,
    lipschitz_certificate,
    make_dataset,
    mixture_score_jacobian,
    posterior_mean,
    empirical_score,
)
from consistency_lab.targets import TargetDistribution

s = Schedule("constant", 1.0, 1.0, T=4.0, eps=1e-3)
td = TargetDistribution.from_dict({"kind": "uniform_ball", "dim": 1, "params": {"radius": 1.0}})
ds = make_dataset(td, 8, seed=3)
print("training points:", np.round(np.sort(ds.points[:, 0]), 3))

# Score and posterior mean are two views of the same softmax.
x = np.array([[0.3]])
for t in (0.01, 0.5, 2.0):
    sc = empirical_score(ds, s, x, t)
    pm = posterior_mean(ds, s, x, t)
    jac = mixture_score_jacobian(ds, s, x, t)
    print(f"t={t:4.2f}  score={sc[0, 0]:+.4f}  E[x0|xt]={pm[0, 0]:+.4f}  dscore/dx={jac[0, 0, 0]:+.3f}")

# The Jacobian blows up as t -> eps; the certificate tracks it.
for t in (1e-3, 1e-2, 1e-1, 1.0):
    c = lipschitz_certificate(ds, s, t, n_probes=2000)
    print(f"t={t:6.3f}  certified {c.bound:10.3g}  probed {c.probed:10.3g}")

solver = isolate(ds, build_grid(s, 8, 64))
z = np.random.default_rng(0).standard_normal((2000, 1))
out = solver.solve(z)
gaps = np.abs(out - ds.points[:, 0][None, :]).min(1)
print(f"one-step samples: median distance to nearest training point {np.median(gaps):.2e}")

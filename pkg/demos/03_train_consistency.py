"""Train a one-step consistency net with the isolation (CT) loss and compare
it with the multi-step baseline it is meant to reproduce.

    python3 demos/03_train_consistency.py   # about half a minute
"""
import numpy as np

from consistency_lab import (
    ConsistencyNet,
    Schedule,
    TrainConfig,
    build_grid,
    emulate_baseline,
    loss_ct,
    make_dataset,
    one_step_sample,
    train_consistency,
)
from consistency_lab.targets import TargetDistribution
from consistency_lab.transport import w1_to_target_1d

s = Schedule("constant", 1.0, 1.0, T=6.0, eps=0.01)
grid = build_grid(s, 6, 32)
td = TargetDistribution.from_dict({"kind": "two_point", "dim": 1, "params": {"a": [-1.0], "b": [1.0]}})
ds = make_dataset(td, 64, seed=1)

net = ConsistencyNet(1, s, hidden=(32, 32), R=50.0, seed=2)
res = train_consistency(net, "ct", ds, grid, TrainConfig(steps=2000, lr=0.01, pairing="independent"), seed=3)
print(f"loss: first 50 steps {res.losses[:50].mean():.3f}, last 50 steps {res.losses[-50:].mean():.3f}")

base = emulate_baseline("isolate", grid, dataset=ds)
for name, f in (("trained", res.net), ("baseline", base)):
    loss = np.mean([loss_ct(f, ds, grid, 256, seed=100 + r, pairing="independent").total for r in range(8)])
    w = w1_to_target_1d(one_step_sample(f, 4096, seed=9, dim=1), td)
    print(f"{name:9s} CT loss {loss:.3f}   one-step W1 to target {w:.3f}")
print(f"certified Lipschitz constant of the net: {res.net.certified_lipschitz:.2f} (cap {res.net.R})")

"""Consistency functions, W1 consistency losses and training.

The trainable map is

    f(x, t) = x + s(t) h(x, s(t)),     s(t) = (t - eps) / (T - eps),

with ``h`` a tanh MLP. ``s(eps) = 0`` pins the boundary ``f(., eps) = id``
and a zero last layer starts training at the identity. A certified
Lipschitz bound in ``x`` is maintained by rescaling layer operator norms.

Losses compare, for every coarse interval ``k``, the pushforwards
``f(., tau_k) # A_k`` and ``f(., tau_{k-1}) # B_k`` in W1, where ``A_k`` is a
draw of the noised empirical marginal at ``tau_k`` and ``B_k`` comes from
``M`` Euler steps (coupled pairing) or a fresh draw at ``tau_{k-1}``
(independent pairing).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .flow import DDPMSolver, FlowStep, distill, isolate
from .nn import MLP, Adam
from .schedule import Schedule, TimeGrid
from .score import EmpiricalScore
from .targets import Dataset, as_cloud, derive_seed, forward_marginal, resample
from .transport import optimal_matching, w1

__all__ = [
    "ConsistencyNet",
    "ConsistencyTrainingError",
    "LossValue",
    "PairBank",
    "TrainConfig",
    "TrainResult",
    "default_lipschitz_budget",
    "eval_consistency",
    "draw_pairs",
    "loss_cd",
    "loss_ct",
    "consistency_loss",
    "train_consistency",
    "one_step_sample",
    "emulate_baseline",
]

PAIRINGS = ("coupled", "independent")


class ConsistencyTrainingError(RuntimeError):
    def __init__(self, msg: str, trace=None):
        super().__init__(msg)
        self.trace = trace


def default_lipschitz_budget(d: int, schedule: Schedule, score_lipschitz: float = 0.0) -> float:
    """``2 exp(C d beta_max T)`` with ``C = 10 (1 + L)``; ``inf`` when it overflows."""
    log_r = math.log(2.0) + 10.0 * (1.0 + score_lipschitz) * d * schedule.beta_max * schedule.T
    return math.exp(log_r) if log_r < 700 else math.inf


class ConsistencyNet:
    def __init__(self, dim: int, schedule: Schedule, hidden=(64, 64), R: float | None = None,
                 seed: int = 0, zero_init: bool = True):
        self.dim = int(dim)
        self.schedule = schedule
        self.R = default_lipschitz_budget(self.dim, schedule) if R is None else float(R)
        if not self.R >= 1.0:
            raise ValueError("Lipschitz budget R must be at least 1 (the identity lies in the class)")
        self.h = MLP([self.dim + 1, *hidden, self.dim], seed=seed, zero_last=zero_init)
        self.project()

    # -- evaluation -------------------------------------------------------
    def _s(self, t: float) -> float:
        s = self.schedule
        if not (s.eps - 1e-12 <= t <= s.T + 1e-12):
            raise ValueError(f"time {t} outside [eps={s.eps}, T={s.T}]")
        return min(max((t - s.eps) / (s.T - s.eps), 0.0), 1.0)

    def _inputs(self, X, s):
        return np.column_stack([X, np.full(X.shape[0], s)])

    def __call__(self, x, t: float):
        x = np.asarray(x, dtype=float)
        if t == self.schedule.eps:
            return x.copy()
        s = self._s(t)
        X = x.reshape(-1, self.dim)
        out = X + s * self.h(self._inputs(X, s))
        return out.reshape(x.shape)

    def forward_keep(self, X, t: float):
        """Returns ``(f, s, acts)`` for a later call to :meth:`grad`."""
        s = self._s(t)
        y, acts = self.h.forward(self._inputs(X, s), keep=True)
        return X + s * y, s, acts

    def grad(self, acts, s: float, dF):
        """Parameter gradients of ``sum(dF * f)`` given cached activations."""
        return self.h.backward(acts, s * dF)

    # -- Lipschitz control ------------------------------------------------
    def h_lipschitz_bound(self) -> float:
        return float(np.prod(self.h.layer_norms(slice(0, self.dim))))

    @property
    def certified_lipschitz(self) -> float:
        """``1 + prod ||W_l||`` with the first layer restricted to the ``x`` columns."""
        return 1.0 + self.h_lipschitz_bound()

    def project(self) -> None:
        """Rescale layers so that :attr:`certified_lipschitz` is at most ``R``."""
        if not math.isfinite(self.R):
            return
        budget = self.R - 1.0
        norms = self.h.layer_norms(slice(0, self.dim))
        prod = float(np.prod(norms))
        if prod <= budget:
            return
        if budget == 0.0:
            self.h.weights[-1][:] = 0.0
            self.h.biases[-1][:] = 0.0
            return
        # equal share per layer; the first layer is scaled as a whole
        scale = (budget / prod) ** (1.0 / len(norms)) * (1.0 - 1e-12)
        for W in self.h.weights:
            W *= scale

    # -- persistence ------------------------------------------------------
    def to_dict(self) -> dict:
        d = self.h.to_dict()
        d.update(kind="consistency_net", dim=self.dim, R=self.R if math.isfinite(self.R) else None,
                 schedule=self.schedule.to_dict())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConsistencyNet":
        net = cls.__new__(cls)
        net.dim = int(d["dim"])
        net.schedule = Schedule.from_dict(d["schedule"])
        net.R = math.inf if d.get("R") is None else float(d["R"])
        net.h = MLP.from_dict(d)
        return net

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ConsistencyNet":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def copy(self) -> "ConsistencyNet":
        return ConsistencyNet.from_dict(self.to_dict())


def eval_consistency(net, x, t: float):
    return net(x, t)


# -- losses -----------------------------------------------------------------


@dataclass
class LossValue:
    total: float
    per_interval: list
    method: str

    def __post_init__(self):
        self.total = float(math.fsum(self.per_interval))


def _points(ds):
    return ds.points if isinstance(ds, Dataset) else as_cloud(ds)


def draw_pairs(ds, grid: TimeGrid, score, m: int, seed: int, pairing: str = "coupled"):
    """``[(A_k, B_k)]`` for ``k = 1..N'``.

    ``A_k`` is a draw of the noised empirical marginal at ``tau_k``. Coupled
    pairing sets ``B_k = G_(M)(A_k)`` under ``score``; independent pairing
    draws ``B_k`` afresh at ``tau_{k-1}``.
    """
    if pairing not in PAIRINGS:
        raise ValueError(f"pairing must be one of {PAIRINGS}")
    if m < 2:
        raise ValueError("batch size must be at least 2")
    pts = _points(ds)
    fs = FlowStep(grid.schedule, score, grid) if pairing == "coupled" else None
    taus = grid.taus
    out = []
    for k in range(1, grid.N_coarse + 1):
        A = forward_marginal(resample(pts, m, derive_seed(seed, k, 0)), grid.schedule, taus[k],
                             derive_seed(seed, k, 1))
        if pairing == "coupled":
            B = fs.g_multi(A, k)
        else:
            B = forward_marginal(resample(pts, m, derive_seed(seed, k, 2)), grid.schedule,
                                 taus[k - 1], derive_seed(seed, k, 3))
        out.append((A, B))
    return out


def _loss_from_pairs(f, pairs, taus, method: str) -> LossValue:
    vals = []
    used = method
    for k, (A, B) in enumerate(pairs, start=1):
        est = w1(f(A, taus[k]), f(B, taus[k - 1]), method)
        vals.append(est.value)
        used = est.method
    return LossValue(0.0, vals, used)


def loss_ct(net, ds, grid: TimeGrid, m_batch: int, seed: int, pairing: str = "coupled",
            method: str = "auto") -> LossValue:
    """Isolation loss; the ODE steps use the exact empirical score."""
    score = EmpiricalScore(_points(ds), grid.schedule)
    return _loss_from_pairs(net, draw_pairs(ds, grid, score, m_batch, seed, pairing), grid.taus, method)


def loss_cd(net, ds, grid: TimeGrid, score, m_batch: int, seed: int, pairing: str = "coupled",
            method: str = "auto") -> LossValue:
    """Distillation loss; the ODE steps use the supplied (plug-in) score."""
    own = getattr(score, "schedule", None)
    if own is not None and (own.T != grid.schedule.T or own.eps != grid.schedule.eps):
        raise ValueError("score and grid schedules differ")
    return _loss_from_pairs(net, draw_pairs(ds, grid, score, m_batch, seed, pairing), grid.taus, method)


def consistency_loss(kind: str, net, ds, grid: TimeGrid, m_batch: int, seed: int, score=None,
                     pairing: str = "coupled", method: str = "auto") -> LossValue:
    if kind == "ct":
        return loss_ct(net, ds, grid, m_batch, seed, pairing, method)
    if kind == "cd":
        if score is None:
            raise ValueError("distillation needs a score field")
        return loss_cd(net, ds, grid, score, m_batch, seed, pairing, method)
    raise ValueError(f"unknown loss kind {kind!r}")


# -- training ---------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 3e-3
    m_batch: int = 256
    bank: int = 8192
    pairing: str = "coupled"
    smooth: int = 50
    check_improvement: bool = True


class PairBank:
    """Precomputed ``(A_k, B_k)`` rows; minibatches are row subsets.

    The flow does not depend on the network, so pairs are drawn once.
    """

    def __init__(self, ds, grid: TimeGrid, score, size: int, seed: int, pairing: str):
        self.pairs = draw_pairs(ds, grid, score, size, seed, pairing)
        self.size = size
        self.coupled = pairing == "coupled"

    def batch(self, rng: np.random.Generator, m: int):
        out = []
        for A, B in self.pairs:
            ia = rng.choice(self.size, m, replace=False)
            ib = ia if self.coupled else rng.choice(self.size, m, replace=False)
            out.append((A[ia], B[ib]))
        return out


@dataclass
class TrainResult:
    net: ConsistencyNet
    trace: list = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([row[1] for row in self.trace])

    def smoothed(self, window: int) -> tuple[float, float]:
        ls = self.losses
        w = max(1, min(window, len(ls)))
        return float(ls[:w].mean()), float(ls[-w:].mean())

    def save_trace(self, path) -> None:
        n_int = len(self.trace[0][2]) if self.trace else 0
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "total"] + [f"interval_{k}" for k in range(1, n_int + 1)])
            for step, total, per in self.trace:
                wr.writerow([step, repr(total)] + [repr(v) for v in per])


def _step_loss_and_grads(net: ConsistencyNet, batch, taus):
    """W1 loss over all intervals and its subgradient through the frozen matching."""
    grads = [np.zeros_like(p) for p in net.h.params]
    per = []
    for k, (A, B) in enumerate(batch, start=1):
        FA, sA, actsA = net.forward_keep(A, taus[k])
        if k - 1 == 0:
            FB, sB, actsB = B, 0.0, None
        else:
            FB, sB, actsB = net.forward_keep(B, taus[k - 1])
        perm = optimal_matching(FA, FB)
        diff = FA - FB[perm]
        dist = np.linalg.norm(diff, axis=1)
        per.append(float(dist.mean()))
        u = diff / np.maximum(dist, 1e-12)[:, None] / A.shape[0]
        u[dist == 0.0] = 0.0
        for g, gk in zip(grads, net.grad(actsA, sA, u)):
            g += gk
        if actsB is not None:
            dB = np.empty_like(u)
            dB[perm] = -u
            for g, gk in zip(grads, net.grad(actsB, sB, dB)):
                g += gk
    return per, grads


def train_consistency(net: ConsistencyNet, kind: str, ds, grid: TimeGrid, cfg: TrainConfig | None = None,
                      seed: int = 0, score=None) -> TrainResult:
    """Minimise the CT (``kind='ct'``) or CD (``kind='cd'``, needs ``score``) loss.

    Each step samples a minibatch per interval, freezes the W1 matching,
    backpropagates the matched distances, takes an Adam step and projects
    back into the Lipschitz ball.
    """
    cfg = cfg or TrainConfig()
    if grid.schedule != net.schedule:
        raise ValueError("net and grid schedules differ")
    if kind == "ct":
        score = EmpiricalScore(_points(ds), grid.schedule)
    elif kind == "cd":
        if score is None:
            raise ValueError("distillation needs a score field")
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    result = TrainResult(net)
    if cfg.steps == 0:
        return result
    bank = PairBank(ds, grid, score, max(cfg.bank, cfg.m_batch), derive_seed(seed, 0), cfg.pairing)
    rng = np.random.default_rng(derive_seed(seed, 1))
    opt = Adam(net.h.params, lr=cfg.lr)
    taus = grid.taus
    for step in range(cfg.steps):
        per, grads = _step_loss_and_grads(net, bank.batch(rng, cfg.m_batch), taus)
        total = float(math.fsum(per))
        result.trace.append((step, total, per))
        if not math.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads):
            raise ConsistencyTrainingError(f"non-finite loss at step {step}", result.trace)
        lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / cfg.steps))
        opt.step(grads, lr=lr)
        net.project()
    if cfg.check_improvement:
        first, last = result.smoothed(cfg.smooth)
        if last > first:
            raise ConsistencyTrainingError(
                f"smoothed loss rose from {first:.4g} to {last:.4g}", result.trace)
    return result


def one_step_sample(net, m: int, seed: int, dim: int | None = None) -> np.ndarray:
    """Push ``m`` standard normal draws through ``f(., T)`` once."""
    d = dim if dim is not None else getattr(net, "dim", None)
    if d is None:
        raise ValueError("dimension unknown; pass dim")
    z = np.random.default_rng(seed).standard_normal((m, d))
    return net(z, net.schedule.T)


def emulate_baseline(kind: str, grid: TimeGrid, *, dataset=None, score=None) -> DDPMSolver:
    """The DDPM solver ``f*(x, t)`` as a consistency function.

    ``kind='isolate'`` uses the exact empirical score of ``dataset``;
    ``kind='distill'`` uses ``score``.
    """
    if kind == "isolate":
        if dataset is None:
            raise ValueError("isolation baseline needs a dataset")
        return isolate(dataset, grid)
    if kind == "distill":
        if score is None:
            raise ValueError("distillation baseline needs a score field")
        return distill(score, grid)
    raise ValueError(f"unknown solver kind {kind!r}")

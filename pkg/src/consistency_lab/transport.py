"""Wasserstein-1 estimators and tail-truncation diagnostics.

Clouds are ``(m, d)`` arrays with uniform weights. In one dimension the
monotone coupling is optimal, so ``w1_1d`` is exact; in higher dimensions
``w1_assignment`` solves the matching exactly for small clouds and
``w1_sliced`` gives a cheap lower-bounding surrogate.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .targets import TargetDistribution, as_cloud, derive_seed

__all__ = [
    "W1MethodError",
    "W1Estimate",
    "w1_1d",
    "w1_assignment",
    "w1_sliced",
    "w1",
    "w1_to_target_1d",
    "optimal_matching",
    "truncate_cloud",
    "TailReport",
    "tail_decay_check",
    "ASSIGNMENT_CAP",
]

ASSIGNMENT_CAP = 512


class W1MethodError(ValueError):
    pass


@dataclass(frozen=True)
class W1Estimate:
    value: float
    method: str
    n_a: int
    n_b: int
    stderr: float | None = None
    detail: dict = field(default_factory=dict)

    def __float__(self) -> float:
        return self.value

    def to_json(self) -> dict:
        out = {"value": self.value, "method": self.method}
        if self.stderr is not None:
            out["stderr"] = self.stderr
        out.update(n_a=self.n_a, n_b=self.n_b)
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def _line(a) -> np.ndarray:
    a = as_cloud(a)
    if a.shape[1] != 1:
        raise W1MethodError(f"sorted W1 needs 1-d clouds, got d={a.shape[1]}")
    return a[:, 0]


def _sorted_w1(x: np.ndarray, y: np.ndarray) -> float:
    """Exact W1 between 1-d empirical measures, any sizes."""
    x, y = np.sort(x), np.sort(y)
    if x.size == y.size:
        return float(np.mean(np.abs(x - y)))
    # both quantile functions are step functions; integrate on the union of breakpoints
    u = np.union1d(np.arange(1, x.size) / x.size, np.arange(1, y.size) / y.size)
    u = np.concatenate([[0.0], u, [1.0]])
    mid = 0.5 * (u[:-1] + u[1:])
    qx = x[np.minimum((mid * x.size).astype(np.int64), x.size - 1)]
    qy = y[np.minimum((mid * y.size).astype(np.int64), y.size - 1)]
    return float(np.sum(np.diff(u) * np.abs(qx - qy)))


def w1_1d(a, b) -> W1Estimate:
    x, y = _line(a), _line(b)
    return W1Estimate(_sorted_w1(x, y), "sorted_1d", x.size, y.size)


def optimal_matching(a, b, cap: int = ASSIGNMENT_CAP) -> np.ndarray:
    """Permutation ``p`` with ``a[i] <-> b[p[i]]`` minimising total Euclidean cost."""
    a, b = as_cloud(a), as_cloud(b)
    if a.shape != b.shape:
        raise W1MethodError(f"matching needs equal shapes, got {a.shape} and {b.shape}")
    if a.shape[1] == 1:
        # sorted coupling: i-th smallest of a to i-th smallest of b
        ia, ib = np.argsort(a[:, 0], kind="stable"), np.argsort(b[:, 0], kind="stable")
        p = np.empty(a.shape[0], dtype=np.int64)
        p[ia] = ib
        return p
    if a.shape[0] > cap:
        raise W1MethodError(f"assignment limited to {cap} points, got {a.shape[0]}")
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    _, cols = linear_sum_assignment(cost)
    return cols


def w1_assignment(a, b, cap: int = ASSIGNMENT_CAP) -> W1Estimate:
    a, b = as_cloud(a), as_cloud(b)
    if a.shape[0] != b.shape[0]:
        raise W1MethodError(f"assignment needs equal sizes, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[0] > cap:
        raise W1MethodError(f"assignment limited to {cap} points, got {a.shape[0]}")
    if a.shape[1] != b.shape[1]:
        raise W1MethodError("dimension mismatch")
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return W1Estimate(float(cost[rows, cols].mean()), "assignment", a.shape[0], b.shape[0])


def w1_sliced(a, b, n_proj: int = 64, seed: int = 0) -> W1Estimate:
    a, b = as_cloud(a), as_cloud(b)
    if n_proj < 1:
        raise ValueError("n_proj must be >= 1")
    if a.shape[1] != b.shape[1]:
        raise W1MethodError("dimension mismatch")
    d = a.shape[1]
    vals = np.empty(n_proj)
    for i in range(n_proj):
        v = np.random.default_rng(derive_seed(seed, i)).standard_normal(d)
        v /= np.linalg.norm(v)
        vals[i] = _sorted_w1(a @ v, b @ v)
    se = float(vals.std(ddof=1) / math.sqrt(n_proj)) if n_proj > 1 else 0.0
    return W1Estimate(float(vals.mean()), "sliced", a.shape[0], b.shape[0], se, {"n_proj": n_proj})


def w1(a, b, method: str = "auto", **kw) -> W1Estimate:
    """Dispatch: ``auto`` picks sorted in 1-d, assignment up to the cap, sliced beyond."""
    a, b = as_cloud(a), as_cloud(b)
    if method == "auto":
        if a.shape[1] == 1:
            method = "sorted_1d"
        elif a.shape[0] == b.shape[0] and a.shape[0] <= kw.get("cap", ASSIGNMENT_CAP):
            method = "assignment"
        else:
            method = "sliced"
    if method == "sorted_1d":
        return w1_1d(a, b)
    if method == "assignment":
        return w1_assignment(a, b, **kw)
    if method == "sliced":
        return w1_sliced(a, b, **kw)
    raise W1MethodError(f"unknown W1 method {method!r}")


def w1_to_target_1d(a, td: TargetDistribution, quad_points: int = 1 << 16) -> float:
    """``int_0^1 |F_a^{-1}(u) - F^{-1}(u)| du`` by the midpoint rule."""
    x = np.sort(_line(a))
    if td.dim != 1 or not td.has_quantile:
        raise W1MethodError("target has no exact 1-d quantile function")
    u = (np.arange(quad_points) + 0.5) / quad_points
    qa = x[np.minimum((u * x.size).astype(np.int64), x.size - 1)]
    return float(np.mean(np.abs(qa - td.quantile(u))))


def truncate_cloud(a, R0: float) -> np.ndarray:
    """Replace every point with norm above ``R0`` by the origin."""
    if not R0 > 0:
        raise ValueError("R0 must be positive")
    a = as_cloud(a)
    out = a.copy()
    out[np.linalg.norm(a, axis=1) > R0] = 0.0
    return out


@dataclass
class TailReport:
    R0: list
    replaced_mass: list
    w1: list
    tail_mean: list
    chain_ok: bool
    monotone: bool
    tail_bound_ok: bool

    @property
    def ok(self) -> bool:
        return self.chain_ok and self.monotone and self.tail_bound_ok

    def to_json(self) -> dict:
        return dict(self.__dict__, ok=self.ok)


def _tail_dominated(td: TargetDistribution, R0, mass, m: int) -> bool:
    """Measured exceedance stays under the Gaussian-tail bound up to a binomial band."""
    if td.support_radius is not None:
        return all(p == 0.0 for r, p in zip(R0, mass) if r >= td.support_radius)
    bound = np.minimum(np.asarray(td.gaussian_tail_bound(np.asarray(R0))), 1.0)
    band = 3.0 * np.sqrt(bound * (1.0 - bound) / m) + 1.0 / m
    return bool(np.all(np.asarray(mass) <= bound + band))


def tail_decay_check(td: TargetDistribution, R0_grid, m: int, seed: int) -> TailReport:
    """Replaced mass and ``W1(a, truncate(a))`` across a grid of radii."""
    R0_grid = [float(r) for r in R0_grid]
    if any(b <= a for a, b in zip(R0_grid, R0_grid[1:])):
        raise ValueError("R0 grid must be strictly increasing")
    a = td.sample(m, seed)
    norms = np.linalg.norm(a, axis=1)
    mass, dist, tmean = [], [], []
    for r in R0_grid:
        out = norms > r
        mass.append(float(out.mean()))
        # the coupling x <-> truncate(x) is feasible, so W1 <= E|x| 1{|x| > R0}
        tmean.append(float(np.where(out, norms, 0.0).mean()))
        dist.append(w1(a, truncate_cloud(a, r)).value)
    chain_ok = all(w <= t + 1e-12 for w, t in zip(dist, tmean))
    monotone = all(b <= a for a, b in zip(mass, mass[1:])) and all(b <= a + 1e-12 for a, b in zip(dist, dist[1:]))
    return TailReport(R0_grid, mass, dist, tmean, chain_ok, monotone,
                      _tail_dominated(td, R0_grid, mass, m))

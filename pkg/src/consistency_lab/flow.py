"""Backward probability-flow maps.

The VP probability-flow ODE is integrated backward in time with explicit
Euler steps

    G(x, t_k) = x - dt * Phi(x, t_k),   Phi(x, t) = -beta(t)/2 (x + score(x, t)).

``G_(M)`` composes the ``M`` fine steps between two coarse points, and the
DDPM solver ``f*(x, t)`` composes steps all the way down to ``eps``. All maps
are deterministic and act row-wise on ``(m, d)`` clouds.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .schedule import Schedule, TimeGrid, beta_at, mean_coeff, std_coeff
from .score import EmpiricalScore
from .targets import Dataset, as_cloud

__all__ = [
    "SolverDivergence",
    "FlowStep",
    "DDPMSolver",
    "distill",
    "isolate",
    "phi",
    "g_step",
    "g_multi",
    "ddpm_solve",
    "ddpm_solve_from",
    "push_cloud",
    "lipschitz_probe",
    "lipschitz_probe_solver",
    "corollary_ceiling_log",
    "single_point_flow",
]

DIVERGENCE_NORM = 1e6


class SolverDivergence(ArithmeticError):
    def __init__(self, step: int, t: float, norm: float):
        super().__init__(f"backward flow diverged at fine step {step} (t={t:.6g}, max norm {norm:.3g})")
        self.step, self.t, self.norm = step, t, norm


class _ZeroScore:
    def __call__(self, x, t):
        return np.zeros_like(np.asarray(x, dtype=float))


@dataclass
class FlowStep:
    schedule: Schedule
    score: object
    grid: TimeGrid

    def __post_init__(self):
        if self.grid.schedule != self.schedule:
            raise ValueError("grid was built for a different schedule")
        own = getattr(self.score, "schedule", None)
        if own is not None and (own.T != self.schedule.T or own.eps != self.schedule.eps):
            raise ValueError("score field schedule does not match the flow schedule")

    @classmethod
    def drift_only(cls, grid: TimeGrid) -> "FlowStep":
        return cls(grid.schedule, _ZeroScore(), grid)

    def phi(self, x, t):
        b = beta_at(self.schedule, t)
        return -0.5 * b * (np.asarray(x, dtype=float) + self.score(x, t))

    def g_step(self, x, k: int):
        if not 1 <= k <= self.grid.N:
            raise IndexError(f"fine index {k} outside [1, {self.grid.N}]")
        x = np.asarray(x, dtype=float)
        return x - self.grid.dt * self.phi(x, self.grid.times[k])

    def _descend(self, x, k_hi: int, k_lo: int, trace=None):
        """Fine steps ``k_hi, k_hi - 1, ..., k_lo + 1``."""
        x = np.asarray(x, dtype=float)
        for k in range(k_hi, k_lo, -1):
            x = self.g_step(x, k)
            _guard(x, k, self.grid.times[k - 1])
            if trace is not None:
                trace.append((k - 1, self.grid.times[k - 1], x.copy()))
        return x

    def g_multi(self, x, k_coarse: int):
        if not 1 <= k_coarse <= self.grid.N_coarse:
            raise IndexError(f"coarse index {k_coarse} outside [1, {self.grid.N_coarse}]")
        M = self.grid.M
        return self._descend(x, k_coarse * M, (k_coarse - 1) * M)


def _guard(x, k, t):
    norm = float(np.max(np.abs(x))) if x.size else 0.0
    if not math.isfinite(norm) or norm > DIVERGENCE_NORM:
        raise SolverDivergence(k, t, norm)


class DDPMSolver:
    """Baseline consistency function ``f*(x, t)`` built from Euler steps.

    ``f*(x, t) = f*(G(x, t), t - dt)`` above ``t_1`` and
    ``f*(x, t) = x - (t - eps) Phi(x, t)`` on ``[eps, t_1]``; on grid times this
    is exactly the composition of fine steps ``k, ..., 1``.
    """

    def __init__(self, step: FlowStep, kind: str = "distill", dim: int | None = None):
        self.step = step
        self.kind = kind
        self.dim = dim

    @property
    def grid(self) -> TimeGrid:
        return self.step.grid

    @property
    def schedule(self) -> Schedule:
        return self.step.schedule

    def solve_index(self, x, k: int, trace=None):
        if not 0 <= k <= self.grid.N:
            raise IndexError(f"fine index {k} outside [0, {self.grid.N}]")
        return self.step._descend(x, k, 0, trace)

    def solve(self, x, trace=None):
        return self.solve_index(x, self.grid.N, trace)

    def solve_from(self, x, t: float):
        s = self.schedule
        if not (s.eps - 1e-12 <= t <= s.T + 1e-12):
            raise ValueError(f"time {t} outside [eps, T]")
        k = self.grid.index_of(t)
        if k is not None:
            return self.solve_index(x, k)
        # off-grid: unit steps down to [eps, t_1], then a partial step
        dt, t1 = self.grid.dt, self.grid.times[1]
        x = np.asarray(x, dtype=float)
        steps = 0
        while t > t1:
            x = x - dt * self.step.phi(x, t)
            t -= dt
            steps += 1
            _guard(x, steps, t)
        return x - (t - s.eps) * self.step.phi(x, t)

    def __call__(self, x, t: float):
        return self.solve_from(x, t)

    def dump_trajectory(self, x, path) -> None:
        """Write ``step, t, x0, x1, ...`` rows for a single start point."""
        x = np.asarray(x, dtype=float).reshape(1, -1)
        trace = [(self.grid.N, self.grid.times[-1], x.copy())]
        self.solve(x, trace)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "t"] + [f"x{i}" for i in range(x.shape[1])])
            for k, t, xk in trace:
                w.writerow([k, repr(float(t))] + [repr(float(v)) for v in xk[0]])


def distill(score, grid: TimeGrid) -> DDPMSolver:
    return DDPMSolver(FlowStep(grid.schedule, score, grid), "distill")


def isolate(ds, grid: TimeGrid) -> DDPMSolver:
    pts = ds.points if isinstance(ds, Dataset) else ds
    score = EmpiricalScore(pts, grid.schedule)
    return DDPMSolver(FlowStep(grid.schedule, score, grid), "isolate", score.points.shape[1])


def phi(fs: FlowStep, x, t):
    return fs.phi(x, t)


def g_step(fs: FlowStep, x, k: int):
    return fs.g_step(x, k)


def g_multi(fs: FlowStep, x, k_coarse: int):
    return fs.g_multi(x, k_coarse)


def ddpm_solve(solver: DDPMSolver, x):
    return solver.solve(x)


def ddpm_solve_from(solver: DDPMSolver, x, t: float):
    return solver.solve_from(x, t)


def push_cloud(fn, cloud, threads: int = 1, chunk: int = 4096) -> np.ndarray:
    """Apply a row-wise map to every point; output order matches input order."""
    X = as_cloud(cloud)
    if threads <= 1 or X.shape[0] <= chunk:
        return np.asarray(fn(X), dtype=float).reshape(X.shape[0], -1)
    out = np.empty_like(X)
    bounds = [(lo, min(lo + chunk, X.shape[0])) for lo in range(0, X.shape[0], chunk)]

    def work(b):
        out[b[0]:b[1]] = fn(X[b[0]:b[1]])

    with ThreadPoolExecutor(threads) as pool:
        list(pool.map(work, bounds))
    return out


def lipschitz_probe(fn, probes, pair_radius: float = 1e-3, seed: int = 0) -> float:
    """Largest difference quotient ``|f(x) - f(y)| / |x - y|`` over random pairs.

    Each probe ``x`` is paired with ``y = x + r u`` for a random unit ``u``.
    """
    X = as_cloud(probes)
    if X.shape[0] < 2 and pair_radius <= 0:
        raise ValueError("need at least two probes")
    u = np.random.default_rng(seed).standard_normal(X.shape)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    Y = X + pair_radius * u
    num = np.linalg.norm(fn(X) - fn(Y), axis=1)
    den = np.linalg.norm(X - Y, axis=1)
    return float((num / den).max())


def corollary_ceiling_log(d: int, beta_max: float, T: float, L: float) -> float:
    """``log exp(C d beta_max T)`` with ``C = 10 (1 + L)``."""
    return 10.0 * (1.0 + L) * d * beta_max * T


def lipschitz_probe_solver(solver: DDPMSolver, probes, pair_radius: float = 1e-3, seed: int = 0,
                           score_lipschitz: float | None = None) -> dict:
    """Probe ``f*(., T)`` and compare with the ``exp(C d beta_max T)`` ceiling.

    ``score_lipschitz`` defaults to the mixture certificate at ``eps`` for
    isolation solvers and 0 otherwise.
    """
    s = solver.schedule
    X = as_cloud(probes)
    d = X.shape[1]
    if score_lipschitz is None:
        score = solver.step.score
        if isinstance(score, EmpiricalScore):
            m, sig = mean_coeff(s, s.eps), std_coeff(s, s.eps)
            r = m * score.radius
            score_lipschitz = max(r * r / sig**4, 1.0 / sig**2)
        else:
            score_lipschitz = 0.0
    probed = lipschitz_probe(solver.solve, X, pair_radius, seed)
    log_ceiling = corollary_ceiling_log(d, s.beta_max, s.T, score_lipschitz)
    return {
        "probed": probed,
        "log_ceiling": log_ceiling,
        "ceiling": math.exp(log_ceiling) if log_ceiling < 700 else math.inf,
        "ok": math.log(probed) <= log_ceiling if probed > 0 else True,
    }


def single_point_flow(c, s: Schedule, x, t_from: float, t_to: float):
    """Exact probability-flow map for a single-atom dataset at ``c``.

    The marginal is ``N(m c, sigma^2 I)`` so ``(x_t - m(t) c) / sigma(t)`` is
    conserved along the flow.
    """
    c = np.asarray(c, dtype=float)
    x = np.asarray(x, dtype=float)
    ratio = std_coeff(s, t_to) / std_coeff(s, t_from)
    return mean_coeff(s, t_to) * c + ratio * (x - mean_coeff(s, t_from) * c)

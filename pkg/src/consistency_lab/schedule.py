"""Variance-preserving noise schedules and uniform time grids.

The forward process is ``dx = -beta(t)/2 x dt + sqrt(beta(t)) dW`` whose
transition kernel is ``N(m(t) x0, sigma(t)^2 I)`` with

    m(t) = exp(-1/2 int_0^t beta(s) ds),   sigma(t)^2 = 1 - m(t)^2.

Only constant and linear ``beta`` are supported; both have closed-form
integrals, which are the canonical implementation here.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Schedule",
    "TimeGrid",
    "beta_at",
    "mean_coeff",
    "std_coeff",
    "integrated_beta",
    "build_grid",
]

_KINDS = ("constant", "linear")


@dataclass(frozen=True)
class Schedule:
    kind: str = "constant"
    beta_min: float = 1.0
    beta_max: float = 1.0
    T: float = 1.0
    eps: float = 1e-3

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {_KINDS}")
        if not (0 < self.eps < self.T):
            raise ValueError(f"need 0 < eps < T, got eps={self.eps}, T={self.T}")
        if not (0 < self.beta_min <= self.beta_max):
            raise ValueError(
                f"need 0 < beta_min <= beta_max, got {self.beta_min}, {self.beta_max}"
            )
        if self.kind == "constant" and self.beta_min != self.beta_max:
            raise ValueError("constant schedule requires beta_min == beta_max")

    @classmethod
    def constant(cls, beta: float, T: float, eps: float) -> "Schedule":
        return cls("constant", beta, beta, T, eps)

    @classmethod
    def linear(cls, beta_min: float, beta_max: float, T: float, eps: float) -> "Schedule":
        return cls("linear", beta_min, beta_max, T, eps)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
            "T": self.T,
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        return cls(d["kind"], float(d["beta_min"]), float(d["beta_max"]), float(d["T"]), float(d["eps"]))

    def satisfies_beta_bound(self, d: int, n: int) -> bool:
        """Whether ``beta_max < 1 / (d log n + d^2 log(d/eps))`` holds.

        Recorded by the harness rather than enforced; at desk scale the bound
        is usually far below any useful beta.
        """
        denom = d * np.log(n) + d * d * np.log(d / self.eps)
        return bool(denom > 0 and self.beta_max < 1.0 / denom)

    # convenience bound methods
    def beta(self, t):
        return beta_at(self, t)

    def m(self, t):
        return mean_coeff(self, t)

    def sigma(self, t):
        return std_coeff(self, t)


def _check_time(s: Schedule, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    # a few ulps of slack for grids built by accumulation
    tol = 1e-12 * max(1.0, s.T)
    if np.any(t < -tol) or np.any(t > s.T + tol) or np.any(~np.isfinite(t)):
        raise ValueError(f"time outside [0, T={s.T}]: {t}")
    return np.clip(t, 0.0, s.T)


def _scalarize(x: np.ndarray):
    return float(x) if x.ndim == 0 else x


def beta_at(s: Schedule, t):
    t = _check_time(s, t)
    if s.kind == "constant":
        out = np.full_like(t, s.beta_min)
    else:
        out = s.beta_min + (s.beta_max - s.beta_min) * t / s.T
    return _scalarize(out)


def integrated_beta(s: Schedule, t):
    """Closed-form ``int_0^t beta(u) du``."""
    t = _check_time(s, t)
    if s.kind == "constant":
        out = s.beta_min * t
    else:
        out = s.beta_min * t + (s.beta_max - s.beta_min) * t * t / (2.0 * s.T)
    return _scalarize(out)


def mean_coeff(s: Schedule, t):
    return _scalarize(np.exp(-0.5 * np.asarray(integrated_beta(s, t))))


def std_coeff(s: Schedule, t):
    # 1 - m^2 = -expm1(-int beta) avoids cancellation at small t
    ib = np.asarray(integrated_beta(s, t))
    return _scalarize(np.sqrt(-np.expm1(-ib)))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``eps = t_0 < ... < t_N = T`` with coarse points ``tau_k = t_{kM}``."""

    schedule: Schedule
    N_coarse: int
    M: int
    times: np.ndarray = field(repr=False)

    @property
    def N(self) -> int:
        return self.N_coarse * self.M

    @property
    def dt(self) -> float:
        return (self.schedule.T - self.schedule.eps) / self.N

    @property
    def coarse_index(self) -> np.ndarray:
        return np.arange(self.N_coarse + 1) * self.M

    @property
    def taus(self) -> np.ndarray:
        return self.times[self.coarse_index]

    def index_of(self, t: float) -> int | None:
        """Fine index ``k`` with ``t_k == t`` up to rounding, else ``None``."""
        k = int(round((t - self.schedule.eps) / self.dt))
        if 0 <= k <= self.N and abs(self.times[k] - t) <= 1e-12 * max(1.0, self.schedule.T):
            return k
        return None


def build_grid(s: Schedule, N_coarse: int, M: int) -> TimeGrid:
    if int(N_coarse) != N_coarse or int(M) != M or N_coarse < 1 or M < 1:
        raise ValueError(f"N_coarse and M must be positive integers, got {N_coarse}, {M}")
    N_coarse, M = int(N_coarse), int(M)
    N = N_coarse * M
    dt = (s.T - s.eps) / N
    times = s.eps + dt * np.arange(N + 1)
    times[0] = s.eps
    times[-1] = s.T
    times.setflags(write=False)
    return TimeGrid(s, N_coarse, M, times)

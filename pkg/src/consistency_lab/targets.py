"""Synthetic targets, datasets and forward-process sampling.

Point clouds are plain ``(m, d)`` float arrays with implicit uniform
weights. Every random draw takes an explicit integer seed; derived streams
for parallel trials come from :func:`derive_seed`.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special, stats

from .schedule import Schedule, mean_coeff, std_coeff

__all__ = [
    "TargetDistribution",
    "Dataset",
    "derive_seed",
    "as_cloud",
    "sample_target",
    "make_dataset",
    "forward_marginal",
    "second_moment",
    "resample",
    "tile_to",
    "expected_gaussian_norm",
]

_KINDS = ("gaussian_mixture", "uniform_ball", "two_point")


def derive_seed(base_seed: int, *keys: int) -> int:
    """Deterministic child seed for ``(base_seed, *keys)``.

    Uses numpy's ``SeedSequence`` hashing so sibling streams are independent.
    """
    ss = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def as_cloud(points) -> np.ndarray:
    a = np.asarray(points, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValueError(f"point cloud must be a non-empty (m, d) array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("point cloud has non-finite coordinates")
    return a


def expected_gaussian_norm(d: int) -> float:
    """``E ||Z||`` for ``Z ~ N(0, I_d)``."""
    return float(math.sqrt(2.0) * math.exp(special.gammaln((d + 1) / 2) - special.gammaln(d / 2)))


@dataclass(frozen=True)
class TargetDistribution:
    kind: str
    dim: int
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown target kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")

    # -- constructors ---------------------------------------------------
    @classmethod
    def gaussian_mixture(cls, means, weights=None, std=1.0) -> "TargetDistribution":
        means = np.atleast_2d(np.asarray(means, dtype=float))
        k, d = means.shape
        weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=float)
        std = np.broadcast_to(np.asarray(std, dtype=float), (k,)).copy()
        if weights.shape != (k,) or np.any(weights < 0) or not np.isclose(weights.sum(), 1.0):
            raise ValueError("mixture weights must be a probability vector")
        if np.any(std <= 0):
            raise ValueError("component std must be positive")
        return cls("gaussian_mixture", d, {"means": means.tolist(), "weights": weights.tolist(), "std": std.tolist()})

    @classmethod
    def uniform_ball(cls, radius: float = 1.0, dim: int = 1) -> "TargetDistribution":
        if radius <= 0:
            raise ValueError("radius must be positive")
        return cls("uniform_ball", int(dim), {"radius": float(radius)})

    @classmethod
    def two_point(cls, a=-1.0, b=1.0, weight_a: float = 0.5) -> "TargetDistribution":
        a = np.atleast_1d(np.asarray(a, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        if a.shape != b.shape or a.ndim != 1:
            raise ValueError("two_point locations must be vectors of equal length")
        if not 0.0 <= weight_a <= 1.0:
            raise ValueError("weight_a must lie in [0, 1]")
        return cls("two_point", a.size, {"a": a.tolist(), "b": b.tolist(), "weight_a": float(weight_a)})

    @classmethod
    def single_gaussian(cls, dim: int = 1, std: float = 1.0) -> "TargetDistribution":
        return cls.gaussian_mixture(np.zeros((1, dim)), [1.0], std)

    @classmethod
    def single_point(cls, c) -> "TargetDistribution":
        return cls.two_point(c, c, 1.0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "params": self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "TargetDistribution":
        kind, p = d["kind"], d.get("params", {})
        if kind == "gaussian_mixture":
            return cls.gaussian_mixture(p["means"], p.get("weights"), p.get("std", 1.0))
        if kind == "uniform_ball":
            return cls.uniform_ball(p.get("radius", 1.0), d.get("dim", 1))
        if kind == "two_point":
            return cls.two_point(p.get("a", -1.0), p.get("b", 1.0), p.get("weight_a", 0.5))
        raise ValueError(f"unknown target kind {kind!r}")

    # -- properties -----------------------------------------------------
    @property
    def support_radius(self) -> float | None:
        """Almost-sure bound on ``||X||``; ``None`` for unbounded kinds."""
        p = self.params
        if self.kind == "uniform_ball":
            return p["radius"]
        if self.kind == "two_point":
            return float(max(np.linalg.norm(p["a"]), np.linalg.norm(p["b"])))
        return None

    def mean(self) -> np.ndarray:
        p = self.params
        if self.kind == "gaussian_mixture":
            return np.asarray(p["weights"]) @ np.asarray(p["means"])
        if self.kind == "uniform_ball":
            return np.zeros(self.dim)
        w = p["weight_a"]
        return w * np.asarray(p["a"]) + (1 - w) * np.asarray(p["b"])

    def gaussian_tail_constants(self) -> tuple[float, float]:
        """``(alpha1, alpha2)`` with ``P[||X|| >= r] <= P[||Z|| >= (r - alpha1) / alpha2]``.

        For a mixture ``||X|| <= max ||mu_k|| + max s_k ||Z||``, so the pair
        (max mean norm, max std) works with unit prefactor. Bounded kinds use
        their radius and a nominal unit scale.
        """
        if self.kind == "gaussian_mixture":
            means = np.asarray(self.params["means"])
            return float(np.linalg.norm(means, axis=1).max()), float(max(self.params["std"]))
        return float(self.support_radius), 1.0

    def gaussian_tail_bound(self, r) -> np.ndarray:
        a1, a2 = self.gaussian_tail_constants()
        r = np.asarray(r, dtype=float)
        z = np.maximum((r - a1) / a2, 0.0)
        return stats.chi(self.dim).sf(z)

    # -- sampling -------------------------------------------------------
    def sample(self, m: int, seed: int) -> np.ndarray:
        if int(m) != m or m < 1:
            raise ValueError(f"sample size must be a positive integer, got {m}")
        rng = np.random.default_rng(seed)
        p, d = self.params, self.dim
        if self.kind == "gaussian_mixture":
            means, w, std = np.asarray(p["means"]), np.asarray(p["weights"]), np.asarray(p["std"])
            comp = rng.choice(len(w), size=m, p=w)
            return means[comp] + std[comp, None] * rng.standard_normal((m, d))
        if self.kind == "uniform_ball":
            z = rng.standard_normal((m, d))
            z /= np.linalg.norm(z, axis=1, keepdims=True)
            r = p["radius"] * rng.random(m) ** (1.0 / d)
            return z * r[:, None]
        pick_a = rng.random(m) < p["weight_a"]
        return np.where(pick_a[:, None], np.asarray(p["a"])[None, :], np.asarray(p["b"])[None, :])

    # -- 1-d distribution functions --------------------------------------
    @property
    def has_quantile(self) -> bool:
        return self.dim == 1

    def cdf(self, x) -> np.ndarray:
        self._need_1d()
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "gaussian_mixture":
            mu = np.asarray(p["means"])[:, 0]
            w, s = np.asarray(p["weights"]), np.asarray(p["std"])
            return (w * stats.norm.cdf((x[..., None] - mu) / s)).sum(-1)
        if self.kind == "uniform_ball":
            r = p["radius"]
            return np.clip((x + r) / (2 * r), 0.0, 1.0)
        (lo, w_lo), (hi, _) = self._sorted_atoms()
        return np.where(x < lo, 0.0, np.where(x < hi, w_lo, 1.0))

    def quantile(self, u) -> np.ndarray:
        """Left-continuous inverse CDF on ``(0, 1)``."""
        self._need_1d()
        u = np.asarray(u, dtype=float)
        if np.any((u <= 0) | (u >= 1)):
            raise ValueError("quantile levels must lie in (0, 1)")
        p = self.params
        if self.kind == "uniform_ball":
            return p["radius"] * (2.0 * u - 1.0)
        if self.kind == "two_point":
            (lo, w_lo), (hi, _) = self._sorted_atoms()
            return np.where(u <= w_lo, lo, hi)
        return self._mixture_quantile(u)

    def _sorted_atoms(self):
        p = self.params
        a, b, w = p["a"][0], p["b"][0], p["weight_a"]
        return ((a, w), (b, 1 - w)) if a <= b else ((b, 1 - w), (a, w))

    def _mixture_quantile(self, u):
        p = self.params
        mu = np.asarray(p["means"])[:, 0]
        s = np.asarray(p["std"])
        lo = np.full(u.shape, (mu - 40 * s).min())
        hi = np.full(u.shape, (mu + 40 * s).max())
        # bisection to ~1e-15 relative width in at most 200 rounds
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < u
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo <= 1e-13 * np.maximum(1.0, np.abs(mid))):
                break
        return 0.5 * (lo + hi)

    def _need_1d(self):
        if self.dim != 1:
            raise ValueError(f"distribution functions need dim == 1, target has dim {self.dim}")


def sample_target(td: TargetDistribution, m: int, seed: int) -> np.ndarray:
    return td.sample(m, seed)


def second_moment(td: TargetDistribution) -> float:
    """Exact ``E ||X||^2``."""
    p, d = td.params, td.dim
    if td.kind == "gaussian_mixture":
        means, w, s = np.asarray(p["means"]), np.asarray(p["weights"]), np.asarray(p["std"])
        return float(w @ ((means**2).sum(1) + d * s**2))
    if td.kind == "uniform_ball":
        return d / (d + 2.0) * p["radius"] ** 2
    w = p["weight_a"]
    return float(w * np.sum(np.square(p["a"])) + (1 - w) * np.sum(np.square(p["b"])))


@dataclass
class Dataset:
    """``n`` i.i.d. draws from ``source`` under ``seed``."""

    points: np.ndarray
    seed: int
    source: TargetDistribution

    def __post_init__(self):
        self.points = as_cloud(self.points)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def radius(self) -> float:
        return float(np.linalg.norm(self.points, axis=1).max())

    def save(self, path) -> None:
        """Write ``path`` as CSV (one row per point) plus ``path.json`` sidecar."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(self.dim)])
            for row in self.points:
                w.writerow([repr(float(v)) for v in row])
        meta = {"seed": self.seed, "n": self.n, "source": self.source.to_dict()}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        pts = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(pts, int(meta["seed"]), TargetDistribution.from_dict(meta["source"]))


def make_dataset(td: TargetDistribution, n: int, seed: int) -> Dataset:
    return Dataset(td.sample(n, seed), seed, td)


def forward_marginal(cloud, s: Schedule, t: float, seed: int) -> np.ndarray:
    """One draw of ``m(t) x + sigma(t) z`` per input point."""
    x = as_cloud(cloud)
    m, sig = mean_coeff(s, t), std_coeff(s, t)
    if sig == 0.0:
        return x.copy()
    z = np.random.default_rng(seed).standard_normal(x.shape)
    return m * x + sig * z


def resample(points, m: int, seed: int) -> np.ndarray:
    """``m`` uniform draws (with replacement) from the rows of ``points``."""
    points = as_cloud(points)
    idx = np.random.default_rng(seed).integers(0, points.shape[0], size=m)
    return points[idx]


def tile_to(points, m: int) -> np.ndarray:
    """Repeat rows cyclically to exactly ``m`` rows (exact proportions when ``n | m``)."""
    points = as_cloud(points)
    reps = -(-m // points.shape[0])
    return np.tile(points, (reps, 1))[:m]

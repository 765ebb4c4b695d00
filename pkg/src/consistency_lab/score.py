"""Score fields for the time-``t`` marginals.

Three variants share the call signature ``field(x, t) -> array like x``:

* :class:`EmpiricalScore` -- exact score of ``m(t) p_hat * N(0, sigma(t)^2 I)``,
  a Gaussian mixture centred at the scaled data ``m(t) x^j``.
* :class:`AnalyticScore` -- exact population score for closed-form targets.
* :class:`PluginScore` -- a small network trained by denoising score matching.

``x`` may be a single point ``(d,)`` or a batch ``(B, d)``; ``t`` a scalar or
one time per row.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import special

from .nn import MLP, Adam
from .schedule import Schedule, mean_coeff, std_coeff
from .targets import Dataset, TargetDistribution, as_cloud, derive_seed, resample

__all__ = [
    "SingularTimeError",
    "ScoreTrainingError",
    "EmpiricalScore",
    "AnalyticScore",
    "PluginScore",
    "ScoreTrainConfig",
    "LipschitzCertificate",
    "Estimate",
    "empirical_score",
    "posterior_mean",
    "mixture_score_jacobian",
    "mixture_log_density",
    "lipschitz_certificate",
    "default_score_cap",
    "train_plugin_score",
    "score_mse",
]

# rows x atoms processed per chunk
_CHUNK_ELEMS = 1 << 18


class SingularTimeError(ValueError):
    """Raised when a score is requested where ``sigma(t) = 0``."""


class ScoreTrainingError(RuntimeError):
    pass


class Estimate(NamedTuple):
    value: float
    stderr: float


def _batch(x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    return (x[None, :] if single else x), single


def _coeffs(s: Schedule, t, rows: int):
    t = np.broadcast_to(np.asarray(t, dtype=float), (rows,))
    if np.any(t <= 0):
        raise SingularTimeError("score undefined at t = 0 (sigma = 0)")
    m = np.asarray(mean_coeff(s, t), dtype=float)
    sig = np.asarray(std_coeff(s, t), dtype=float)
    if np.any(sig == 0):
        raise SingularTimeError("score undefined where sigma(t) = 0")
    return m, sig


class EmpiricalScore:
    """Exact score of the smoothed empirical distribution."""

    def __init__(self, points, schedule: Schedule):
        self.points = as_cloud(points.points if isinstance(points, Dataset) else points)
        self.schedule = schedule
        self._sqnorm = (self.points**2).sum(1)
        self.radius = float(np.sqrt(self._sqnorm.max()))

    def _weights(self, X, m, sig, normalize: bool = True):
        # -||m c - x||^2 / 2s^2 up to a per-row constant: (m x.c - m^2 |c|^2 / 2) / s^2
        if np.all(m == m[0]) and np.all(sig == sig[0]):
            a, s2 = m[0], sig[0] ** 2
            logits = X @ (self.points.T * (a / s2))
            logits += (-0.5 * a * a / s2) * self._sqnorm
        else:
            logits = (X @ self.points.T) * m[:, None] - 0.5 * (m * m)[:, None] * self._sqnorm[None, :]
            logits /= (sig * sig)[:, None]
        logits -= logits.max(axis=1, keepdims=True)
        np.exp(logits, out=logits)
        if normalize:
            logits /= logits.sum(axis=1, keepdims=True)
        return logits

    def _chunks(self, rows):
        step = max(1, _CHUNK_ELEMS // self.points.shape[0])
        for lo in range(0, rows, step):
            yield slice(lo, min(rows, lo + step))

    def _posterior_mean(self, X, m, sig):
        out = np.empty_like(X)
        for sl in self._chunks(X.shape[0]):
            e = self._weights(X[sl], m[sl], sig[sl], normalize=False)
            out[sl] = (e @ self.points) / e.sum(axis=1, keepdims=True)
        return out

    def posterior_mean(self, x, t):
        X, single = _batch(x)
        m, sig = _coeffs(self.schedule, t, X.shape[0])
        out = self._posterior_mean(X, m, sig)
        return out[0] if single else out

    def __call__(self, x, t):
        X, single = _batch(x)
        m, sig = _coeffs(self.schedule, t, X.shape[0])
        # sum_j p_j (m c_j - x) / s^2, with sum_j p_j = 1
        out = (m[:, None] * self._posterior_mean(X, m, sig) - X) / (sig**2)[:, None]
        return out[0] if single else out

    def jacobian(self, x, t):
        """``-I/s^2 + (m^2/s^4) Cov_p[c]`` for each row; shape ``(d, d)`` or ``(B, d, d)``."""
        X, single = _batch(x)
        B, d = X.shape
        m, sig = _coeffs(self.schedule, t, B)
        out = np.empty((B, d, d))
        eye = np.eye(d)
        for sl in self._chunks(B):
            w = self._weights(X[sl], m[sl], sig[sl])
            mean = w @ self.points
            second = np.einsum("bj,jk,jl->bkl", w, self.points, self.points)
            cov = second - mean[:, :, None] * mean[:, None, :]
            s2 = (sig[sl] ** 2)[:, None, None]
            out[sl] = -eye / s2 + (m[sl] ** 2)[:, None, None] * cov / (s2 * s2)
        return out[0] if single else out


def mixture_log_density(points, s: Schedule, x, t) -> np.ndarray:
    """``log (1/n) sum_j N(x; m(t) x^j, sigma(t)^2 I)`` by direct summation."""
    P = as_cloud(points)
    X, single = _batch(x)
    m, sig = mean_coeff(s, t), std_coeff(s, t)
    d = P.shape[1]
    sq = ((X[:, None, :] - m * P[None, :, :]) ** 2).sum(-1)
    logk = -sq / (2 * sig**2) - 0.5 * d * math.log(2 * math.pi * sig**2)
    out = special.logsumexp(logk, axis=1) - math.log(P.shape[0])
    return out[0] if single else out


def _points(ds):
    return ds.points if isinstance(ds, Dataset) else as_cloud(ds)


def empirical_score(ds, s: Schedule, x, t):
    return EmpiricalScore(_points(ds), s)(x, t)


def posterior_mean(ds, s: Schedule, x, t):
    return EmpiricalScore(_points(ds), s).posterior_mean(x, t)


def mixture_score_jacobian(ds, s: Schedule, x, t):
    return EmpiricalScore(_points(ds), s).jacobian(x, t)


@dataclass
class LipschitzCertificate:
    bound: float
    t: float
    method: str = "analytic_mixture"
    probed: float | None = None
    violations: int = 0

    @property
    def ok(self) -> bool:
        return self.violations == 0


def lipschitz_certificate(ds, s: Schedule, t: float, probes=None, seed: int = 0,
                          n_probes: int = 0) -> LipschitzCertificate:
    """Analytic bound ``max(R^2 / sigma^4, 1 / sigma^2)`` with ``R = m(t) max ||x^j||``.

    If ``probes`` (or ``n_probes > 0``) is given, the maximal spectral norm of
    the mixture-score Jacobian over the probes is recorded as well.
    """
    field_ = EmpiricalScore(_points(ds), s)
    m, sig = mean_coeff(s, t), std_coeff(s, t)
    if sig == 0:
        raise SingularTimeError("certificate undefined at sigma = 0")
    r = m * field_.radius
    bound = max(r * r / sig**4, 1.0 / sig**2)
    cert = LipschitzCertificate(bound, float(t))
    if probes is None and n_probes > 0:
        rng = np.random.default_rng(seed)
        # probes around the mixture support plus a far shell
        centers = resample(field_.points, n_probes, derive_seed(seed, 1)) * m
        scale = np.where(rng.random(n_probes) < 0.8, sig, 3.0 * (1.0 + r))
        probes = centers + scale[:, None] * rng.standard_normal(centers.shape)
    if probes is not None:
        J = field_.jacobian(as_cloud(probes), t)
        # symmetric: spectral norm = max |eigenvalue|
        norms = np.abs(np.linalg.eigvalsh(J)).max(axis=1)
        cert.probed = float(norms.max())
        cert.violations = int((norms > bound * (1 + 1e-12)).sum())
        cert.method = "probed"
    return cert


# ---------------------------------------------------------------------------
# analytic population scores


class AnalyticScore:
    """Exact score of ``X_t`` for closed-form targets.

    Gaussian mixtures and two-point targets stay mixtures of Gaussians; the
    1-d uniform target uses the closed-form Gaussian-smoothed box density.
    """

    def __init__(self, target: TargetDistribution, schedule: Schedule):
        self.target = target
        self.schedule = schedule
        if target.kind == "uniform_ball" and target.dim != 1:
            raise ValueError("analytic score for uniform_ball implemented for dim == 1 only")

    def __call__(self, x, t):
        X, single = _batch(x)
        m, sig = _coeffs(self.schedule, t, X.shape[0])
        p = self.target.params
        if self.target.kind == "uniform_ball":
            out = _smoothed_box_score(X[:, 0], m * p["radius"], sig)[:, None]
        else:
            if self.target.kind == "gaussian_mixture":
                means, w, std = np.asarray(p["means"]), np.asarray(p["weights"]), np.asarray(p["std"])
            else:
                means = np.array([p["a"], p["b"]])
                w = np.array([p["weight_a"], 1 - p["weight_a"]])
                std = np.zeros(2)
            out = _gauss_mixture_score(X, means, w, std, m, sig)
        return out[0] if single else out


def _gauss_mixture_score(X, means, w, std, m, sig):
    d = X.shape[1]
    var = (m[:, None] * std[None, :]) ** 2 + (sig**2)[:, None]  # (B, K)
    diff = m[:, None, None] * means[None, :, :] - X[:, None, :]  # (B, K, d)
    with np.errstate(divide="ignore"):
        logw = np.log(w)[None, :]
    logits = logw - 0.5 * (diff**2).sum(-1) / var - 0.5 * d * np.log(var)
    logits -= logits.max(axis=1, keepdims=True)
    r = np.exp(logits)
    r /= r.sum(1, keepdims=True)
    return (r[:, :, None] * diff / var[:, :, None]).sum(1)


def _smoothed_box_score(x, half_width, sig):
    # density ∝ Phi(a) - Phi(b), a = (h - x)/s, b = (-h - x)/s; odd in x
    sgn = np.where(x < 0, -1.0, 1.0)
    ax = np.abs(x)
    a = (half_width - ax) / sig
    b = (-half_width - ax) / sig
    la, lb = special.log_ndtr(a), special.log_ndtr(b)
    log_mass = la + np.log1p(-np.exp(lb - la))
    log_phi = lambda z: -0.5 * z * z - 0.5 * math.log(2 * math.pi)
    val = (np.exp(log_phi(b) - log_mass) - np.exp(log_phi(a) - log_mass)) / sig
    return sgn * val


# ---------------------------------------------------------------------------
# plug-in estimator


def default_score_cap(d: int, n: int, eps: float) -> float:
    """``2 d log n + 2 d^2 log(d / eps)``, floored at 1."""
    return float(max(1.0, 2 * d * math.log(max(n, 2)) + 2 * d * d * math.log(d / eps)))


@dataclass
class ScoreTrainConfig:
    width: int = 64
    depth: int = 2
    steps: int = 2000
    lr: float = 2e-3
    batch: int = 256
    t_range: tuple[float, float] | None = None
    cap: float | None = None
    snapshot_every: int = 0


def _features(X, t, s: Schedule):
    t = np.broadcast_to(np.asarray(t, dtype=float), (X.shape[0],))
    tau = (t - s.eps) / (s.T - s.eps)
    logsig = np.log(np.asarray(std_coeff(s, t), dtype=float))
    return np.column_stack([X, tau, 0.25 * logsig])


class PluginScore:
    """``s(x, t) = net(x, t) / sigma(t)``, norm-clipped at ``cap``."""

    def __init__(self, net: MLP, schedule: Schedule, cap: float):
        self.net = net
        self.schedule = schedule
        self.cap = float(cap)
        self.history: list[tuple[int, float]] = []
        self.snapshots: list[tuple[int, "PluginScore"]] = []

    @classmethod
    def init(cls, d: int, schedule: Schedule, width=64, depth=2, cap=1e3, seed=0):
        net = MLP([d + 2] + [width] * depth + [d], seed=seed)
        return cls(net, schedule, cap)

    def raw(self, X, t):
        return self.net(_features(X, t, self.schedule))

    def __call__(self, x, t):
        X, single = _batch(x)
        _, sig = _coeffs(self.schedule, t, X.shape[0])
        out = self.raw(X, t) / sig[:, None]
        norm = np.linalg.norm(out, axis=1, keepdims=True)
        out = np.where(norm > self.cap, out * (self.cap / np.maximum(norm, 1e-300)), out)
        return out[0] if single else out

    def to_dict(self) -> dict:
        d = self.net.to_dict()
        d.update(kind="plugin_score", schedule=self.schedule.to_dict(), cap=self.cap)
        return d

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "PluginScore":
        with open(path) as fh:
            d = json.load(fh)
        return cls(MLP.from_dict(d), Schedule.from_dict(d["schedule"]), d["cap"])

    def copy(self) -> "PluginScore":
        return PluginScore(self.net.copy(), self.schedule, self.cap)


def train_plugin_score(ds, s: Schedule, cfg: ScoreTrainConfig | None = None, seed: int = 0) -> PluginScore:
    """Denoising score matching in noise-prediction form.

    Minimises ``E || net(x_t, t) + z ||^2`` with ``x_t = m x0 + sigma z``, i.e.
    ``sigma^2 E || s(x_t, t) + (x_t - m x0) / sigma^2 ||^2``.
    """
    cfg = cfg or ScoreTrainConfig()
    pts = _points(ds)
    n, d = pts.shape
    cap = cfg.cap if cfg.cap is not None else default_score_cap(d, n, s.eps)
    field_ = PluginScore.init(d, s, cfg.width, cfg.depth, cap, seed=derive_seed(seed, 0))
    t_lo, t_hi = cfg.t_range or (s.eps, s.T)
    rng = np.random.default_rng(derive_seed(seed, 1))
    opt = Adam(field_.net.params, lr=cfg.lr)
    ema = None
    for step in range(cfg.steps):
        if cfg.snapshot_every and step % cfg.snapshot_every == 0:
            field_.snapshots.append((step, field_.copy()))
        x0 = pts[rng.integers(0, n, cfg.batch)]
        t = rng.uniform(t_lo, t_hi, cfg.batch)
        z = rng.standard_normal((cfg.batch, d))
        xt = mean_coeff(s, t)[:, None] * x0 + std_coeff(s, t)[:, None] * z
        out, acts = field_.net.forward(_features(xt, t, s), keep=True)
        resid = out + z
        loss = float((resid**2).sum(1).mean())
        if not math.isfinite(loss):
            raise ScoreTrainingError(f"non-finite DSM loss at step {step}; last smoothed loss {ema}")
        ema = loss if ema is None else 0.98 * ema + 0.02 * loss
        field_.history.append((step, loss))
        lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / max(cfg.steps, 1)))
        opt.step(field_.net.backward(acts, 2.0 * resid / cfg.batch), lr=lr)
    if cfg.snapshot_every:
        field_.snapshots.append((cfg.steps, field_.copy()))
    return field_


def score_mse(fld, reference, cloud_source, s: Schedule, t_a: float, t_b: float,
              m_probes: int = 4096, seed: int = 0) -> Estimate:
    """Monte Carlo time-averaged ``|| fld - reference ||^2_{L^2(X_t)}``.

    Probes are ``x_t = m(t) x0 + sigma(t) z`` with ``x0`` drawn from
    ``cloud_source`` (an array or dataset) and ``t ~ U[t_a, t_b]``.
    """
    if not (s.eps <= t_a < t_b <= s.T):
        raise ValueError("need eps <= t_a < t_b <= T")
    x0 = resample(_points(cloud_source), m_probes, derive_seed(seed, 0))
    t = np.random.default_rng(derive_seed(seed, 1)).uniform(t_a, t_b, m_probes)
    z = np.random.default_rng(derive_seed(seed, 2)).standard_normal(x0.shape)
    xt = mean_coeff(s, t)[:, None] * x0 + std_coeff(s, t)[:, None] * z
    err = ((fld(xt, t) - reference(xt, t)) ** 2).sum(1)
    return Estimate(float(err.mean()), float(err.std(ddof=1) / math.sqrt(m_probes)) if m_probes > 1 else 0.0)

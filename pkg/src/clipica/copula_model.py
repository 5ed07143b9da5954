"""Joint likelihood of two linked ICA models.

Sources of each modality have logistic marginals; source ``i`` of modality 1
and source ``i`` of modality 2 are coupled by a bivariate Gaussian copula with
correlation ``sigma[i]``. Sources are computed as ``y = w @ x`` with ``x`` of
shape (c, b): one column per voxel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numcore import log_abs_det, std_normal_inv_cdf

__all__ = [
    "MarginalModel",
    "CopulaSpec",
    "NllBreakdown",
    "U_CLAMP",
    "logistic_log_pdf",
    "logistic_cdf",
    "gaussian_copula_log_density",
    "joint_nll",
    "nll_gradient",
    "nll_and_gradient",
    "single_modality_nll",
]

U_CLAMP = 1e-7
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MarginalModel:
    location: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("logistic scale must be positive")


@dataclass(frozen=True)
class CopulaSpec:
    """Per-pair dependency parameters of the Gaussian copula."""

    sigma: np.ndarray = field(repr=True)

    def __post_init__(self):
        s = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        if s.ndim != 1 or s.size == 0:
            raise ValueError("sigma must be a non-empty vector")
        if np.any(np.abs(s) > 1):
            raise ValueError("copula dependencies must satisfy |sigma| <= 1")
        object.__setattr__(self, "sigma", s)

    @property
    def c(self) -> int:
        return self.sigma.size

    @classmethod
    def constant(cls, c: int, value: float) -> "CopulaSpec":
        return cls(np.full(c, float(value)))

    def correlation_matrix(self) -> np.ndarray:
        """The 2c x 2c matrix R: unit diagonal, sigma at (i, i+c) and (i+c, i)."""
        c = self.c
        r = np.eye(2 * c)
        idx = np.arange(c)
        r[idx, idx + c] = self.sigma
        r[idx + c, idx] = self.sigma
        return r


@dataclass(frozen=True)
class NllBreakdown:
    total: float
    marginal_term: float
    copula_term: float
    logdet_term: float


def _scaled(y, m):
    return (np.asarray(y, dtype=np.float64) - m.location) / m.scale


def logistic_log_pdf(y, m: MarginalModel = MarginalModel()):
    """Log density of the logistic distribution, overflow free."""
    a = np.abs(_scaled(y, m))
    out = -a - 2.0 * np.log1p(np.exp(-a)) - math.log(m.scale)
    return float(out) if np.ndim(out) == 0 else out


def _logistic_score(y, m):
    # d/dy log pdf
    return -np.tanh(0.5 * _scaled(y, m)) / m.scale


def logistic_cdf(y, m: MarginalModel = MarginalModel(), clamp: bool = True):
    """Logistic CDF; clamped to ``[U_CLAMP, 1 - U_CLAMP]`` unless ``clamp=False``."""
    z = _scaled(y, m)
    u = 0.5 * (1.0 + np.tanh(0.5 * z))
    if clamp:
        u = np.clip(u, U_CLAMP, 1.0 - U_CLAMP)
    return float(u) if np.ndim(u) == 0 else u


def _check_sigma(sigma):
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(np.abs(s) >= 1):
        raise ValueError("degenerate copula correlation")
    return s


def _copula_from_normal(z1, z2, sigma):
    s2 = sigma * sigma
    om = 1.0 - s2
    quad = (s2 * (z1 * z1 + z2 * z2) - 2.0 * sigma * (z1 * z2)) / om
    return -0.5 * np.log(om) - 0.5 * quad


def gaussian_copula_log_density(u1, u2, sigma):
    """Log density of the bivariate Gaussian copula at ``(u1, u2)``."""
    sigma = _check_sigma(sigma)
    z1 = std_normal_inv_cdf(u1)
    z2 = std_normal_inv_cdf(u2)
    out = _copula_from_normal(np.asarray(z1), np.asarray(z2), sigma)
    return float(out) if np.ndim(out) == 0 else out


def _check_shapes(w1, w2, x1, x2, spec):
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    c = spec.c
    for name, w in (("w1", w1), ("w2", w2)):
        if w.shape != (c, c):
            raise ValueError(f"{name} has shape {w.shape}, expected {(c, c)}")
    for name, x in (("x1", x1), ("x2", x2)):
        if x.ndim != 2 or x.shape[0] != c:
            raise ValueError(f"{name} has shape {x.shape}, expected ({c}, b)")
    if x1.shape[1] != x2.shape[1] or x1.shape[1] < 1:
        raise ValueError(f"batch sizes differ: {x1.shape[1]} vs {x2.shape[1]}")
    return w1, w2, x1, x2


def _transform(y, m):
    """Marginal log-density, normal scores and dz/dy (zero where clamped)."""
    lp = logistic_log_pdf(y, m)
    u_raw = logistic_cdf(y, m, clamp=False)
    clamped = (u_raw < U_CLAMP) | (u_raw > 1.0 - U_CLAMP)
    z = std_normal_inv_cdf(np.clip(u_raw, U_CLAMP, 1.0 - U_CLAMP))
    # du/dy = pdf(y); dz/du = 1 / phi(z)
    dz = np.exp(lp + 0.5 * z * z + _LOG_SQRT_2PI)
    dz[clamped] = 0.0
    return lp, z, dz


def _partial_terms(w1, w2, x1, x2, sigma, m, with_grad):
    y1 = w1 @ x1
    y2 = w2 @ x2
    lp1, z1, dz1 = _transform(y1, m)
    lp2, z2, dz2 = _transform(y2, m)
    s = sigma[:, None]
    lc = _copula_from_normal(z1, z2, s)
    marg = math.fsum((lp1.sum(axis=0) + lp2.sum(axis=0)).tolist())
    cop = math.fsum(lc.sum(axis=0).tolist())
    if not with_grad:
        return marg, cop, None, None
    om = 1.0 - s * s
    dlc1 = -(s * s * z1 - s * z2) / om
    dlc2 = -(s * s * z2 - s * z1) / om
    # gradient of the negative log-likelihood w.r.t. the sources
    g1 = -(_logistic_score(y1, m) + dlc1 * dz1)
    g2 = -(_logistic_score(y2, m) + dlc2 * dz2)
    return marg, cop, g1 @ x1.T, g2 @ x2.T


_CHUNK = 512


def _chunks(b):
    return [slice(i, min(i + _CHUNK, b)) for i in range(0, b, _CHUNK)]


def _evaluate(w1, w2, x1, x2, spec, m, with_grad, executor=None):
    sigma = _check_sigma(spec.sigma)
    w1, w2, x1, x2 = _check_shapes(w1, w2, x1, x2, spec)
    b = x1.shape[1]
    ld = log_abs_det(w1) + log_abs_det(w2)
    # fixed chunk layout and ordered reduction keep results independent of
    # how many workers evaluate the chunks
    parts = [(w1, w2, x1[:, sl], x2[:, sl], sigma, m, with_grad) for sl in _chunks(b)]
    if executor is None:
        results = [_partial_terms(*p) for p in parts]
    else:
        results = list(executor.map(lambda p: _partial_terms(*p), parts))
    marg = math.fsum(r[0] for r in results)
    cop = math.fsum(r[1] for r in results)
    logdet = b * ld
    nll = NllBreakdown(-(marg + cop + logdet), marg, cop, logdet)
    if not with_grad:
        return nll, None, None
    g1 = results[0][2].copy()
    g2 = results[0][3].copy()
    for r in results[1:]:
        g1 += r[2]
        g2 += r[3]
    g1 -= b * np.linalg.inv(w1).T
    g2 -= b * np.linalg.inv(w2).T
    return nll, g1, g2


def joint_nll(w1, w2, x1, x2, spec: CopulaSpec, m: MarginalModel = MarginalModel(),
              executor=None) -> NllBreakdown:
    """Negative log-likelihood summed over the ``b`` voxel columns.

    ``total = -(marginal_term + copula_term + logdet_term)`` where
    ``logdet_term = b * (log|det w1| + log|det w2|)``.
    """
    return _evaluate(w1, w2, x1, x2, spec, m, False, executor)[0]


def nll_gradient(w1, w2, x1, x2, spec: CopulaSpec, m: MarginalModel = MarginalModel(),
                 executor=None):
    """Analytic gradient of ``joint_nll(...).total`` w.r.t. ``w1`` and ``w2``."""
    _, g1, g2 = _evaluate(w1, w2, x1, x2, spec, m, True, executor)
    return g1, g2


def nll_and_gradient(w1, w2, x1, x2, spec: CopulaSpec, m: MarginalModel = MarginalModel(),
                     executor=None):
    return _evaluate(w1, w2, x1, x2, spec, m, True, executor)


def single_modality_nll(w, x, m: MarginalModel = MarginalModel()) -> float:
    """Logistic-prior ICA loss of one modality: ``-sum log p(w x) - b log|det w|``."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    lp = logistic_log_pdf(w @ x, m)
    return -(math.fsum(lp.sum(axis=0).tolist()) + x.shape[1] * log_abs_det(w))

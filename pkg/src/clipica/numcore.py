"""Numerical primitives shared by the rest of the package.

Everything here is a pure function of its inputs. Variances and standard
deviations use the sample (n - 1) denominator.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.linalg import LinAlgWarning, lu_factor

__all__ = [
    "PcaResult",
    "pca_reduce",
    "two_stage_pca",
    "zscore_rows",
    "std_normal_cdf",
    "std_normal_inv_cdf",
    "log_abs_det",
    "pearson_corr",
    "corr_rows",
    "skewness",
    "student_t_sf",
    "student_t_two_sided_p",
    "normal_two_sided_p",
]


@dataclass(frozen=True)
class PcaResult:
    """Output of :func:`pca_reduce`.

    Attributes
    ----------
    components : (k, v) array
        Reduced data, one retained direction per row.
    basis : (k, n) array
        Orthonormal projection applied to the centered observation axis.
    mean : (v,) array
        Per-column mean removed before projection.
    explained_variance : (k,) array
        Squared singular values divided by ``v - 1``, non-increasing.
    """

    components: np.ndarray
    basis: np.ndarray
    mean: np.ndarray
    explained_variance: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.basis.T @ self.components + self.mean


def _as_finite_2d(x, name="x"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        r, c = np.argwhere(~np.isfinite(x))[0]
        raise ValueError(f"{name} contains non-finite value at row {r}, col {c}")
    return x


def pca_reduce(x, k: int, center: bool = True) -> PcaResult:
    """Reduce the observation axis of ``x`` (n x v) to ``k`` directions.

    The per-column mean is subtracted (unless ``center=False``) and the
    centered matrix is decomposed by SVD. ``components = basis @ (x - mean)``.
    """
    x = _as_finite_2d(x)
    n, v = x.shape
    if not 1 <= k <= min(n, v):
        raise ValueError(f"k={k} out of range [1, {min(n, v)}]")
    mean = x.mean(axis=0) if center else np.zeros(v)
    xc = x - mean
    u, s, _ = np.linalg.svd(xc, full_matrices=False)
    # deterministic sign: largest-magnitude entry of each basis vector positive
    idx = np.argmax(np.abs(u[:, :k]), axis=0)
    signs = np.sign(u[idx, np.arange(k)])
    signs[signs == 0] = 1.0
    basis = (u[:, :k] * signs).T
    components = basis @ xc
    explained = s[:k] ** 2 / max(v - 1, 1)
    return PcaResult(components, basis, mean, explained)


def zscore_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, ddof=1, keepdims=True)
    bad = np.flatnonzero(~(sd[:, 0] > 0))
    if bad.size:
        raise ValueError(f"constant row {bad[0]}")
    return (x - mu) / sd


def two_stage_pca(subjects, k_subject: int, k_group: int) -> PcaResult:
    """Subject-level PCA, row z-scoring, concatenation, then group PCA.

    Each element of ``subjects`` is an (n_i x v) matrix sharing the voxel
    axis. The returned basis maps the stacked z-scored subject components
    (``len(subjects) * k_subject`` rows) to the group components.
    """
    reduced = [zscore_rows(pca_reduce(s, k_subject).components) for s in subjects]
    return pca_reduce(np.vstack(reduced), k_group)


# Acklam's rational approximation to the normal quantile.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def std_normal_cdf(z):
    """Standard normal CDF through ``erfc`` (accurate in both tails)."""
    return 0.5 * special.erfc(-np.asarray(z, dtype=np.float64) / math.sqrt(2.0))


def _acklam(p):
    q = np.where(p < 0.5, p, 1.0 - p)
    out = np.empty_like(p)
    tail = q < _P_LOW
    if np.any(tail):
        t = np.sqrt(-2.0 * np.log(q[tail]))
        num = ((((_C[0] * t + _C[1]) * t + _C[2]) * t + _C[3]) * t + _C[4]) * t + _C[5]
        den = (((_D[0] * t + _D[1]) * t + _D[2]) * t + _D[3]) * t + 1.0
        out[tail] = num / den
    mid = ~tail
    if np.any(mid):
        r = q[mid] - 0.5
        s = r * r
        num = (((((_A[0] * s + _A[1]) * s + _A[2]) * s + _A[3]) * s + _A[4]) * s + _A[5]) * r
        den = ((((_B[0] * s + _B[1]) * s + _B[2]) * s + _B[3]) * s + _B[4]) * s + 1.0
        out[mid] = num / den
    # computed on the lower half; reflect
    return np.where(p < 0.5, out, -out)


def std_normal_inv_cdf(p):
    """Inverse standard normal CDF.

    Rational approximation (relative error ~1e-9) polished by one Halley
    step against the erf-based CDF. Accepts scalars or arrays; raises if any
    value lies outside the open interval (0, 1).
    """
    scalar = np.ndim(p) == 0
    p = np.asarray(p, dtype=np.float64)
    if not np.all((p > 0.0) & (p < 1.0)):
        raise ValueError("probability must lie in (0, 1)")
    z = _acklam(p)
    # refine on the lower half so the residual never suffers cancellation near 1
    lo = np.where(p < 0.5, p, 1.0 - p)
    zl = -np.abs(z)
    e = std_normal_cdf(zl) - lo
    dens = np.exp(-0.5 * zl * zl) / math.sqrt(2.0 * math.pi)
    step = e / dens
    zl = zl - step / (1.0 + 0.5 * zl * step)
    z = np.where(p < 0.5, zl, -zl)
    z = np.where(p == 0.5, 0.0, z)
    return float(z) if scalar else z


def log_abs_det(w) -> float:
    """``log|det w|`` from an LU factorization."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"matrix must be square, got shape {w.shape}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, _ = lu_factor(w, check_finite=True)
    piv = np.abs(np.diag(lu))
    if np.any(piv < 1e-300):
        raise np.linalg.LinAlgError("singular unmixing matrix")
    return float(np.sum(np.log(piv)))


def pearson_corr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("inputs must have equal length")
    if a.size < 3:
        raise ValueError("need at least 3 samples")
    da = a - a.mean()
    db = b - b.mean()
    na = math.sqrt(float(da @ da))
    nb = math.sqrt(float(db @ db))
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero-variance input")
    r = float(da @ db) / (na * nb)
    return min(1.0, max(-1.0, r))


def corr_rows(a, b=None, *, strict: bool = True) -> np.ndarray:
    """Pearson correlation between every row of ``a`` and every row of ``b``.

    With ``strict=False`` zero-variance rows yield NaN instead of raising.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = a if b is None else np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError("row lengths differ")
    da = a - a.mean(axis=1, keepdims=True)
    db = b - b.mean(axis=1, keepdims=True)
    na = np.sqrt(np.einsum("ij,ij->i", da, da))
    nb = np.sqrt(np.einsum("ij,ij->i", db, db))
    if strict and (np.any(na == 0) or np.any(nb == 0)):
        raise ValueError("zero-variance row")
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (da @ db.T) / np.outer(na, nb)
    return np.clip(r, -1.0, 1.0)


def skewness(a) -> float:
    """Standardized third central moment (population moments)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    if a.size < 3:
        raise ValueError("need at least 3 samples")
    d = a - a.mean()
    m2 = float(np.mean(d * d))
    if m2 == 0.0:
        raise ValueError("zero variance")
    return float(np.mean(d ** 3)) / m2 ** 1.5


def student_t_sf(t, df):
    """Upper tail ``P(T > t)`` of Student's t via the regularized incomplete beta."""
    if df <= 0:
        raise ValueError("df must be positive")
    t = np.asarray(t, dtype=np.float64)
    tail = 0.5 * special.betainc(0.5 * df, 0.5, df / (df + t * t))
    return np.where(t >= 0, tail, 1.0 - tail)


def student_t_two_sided_p(t, df) -> float:
    if df <= 0:
        raise ValueError("df must be positive")
    t = float(t)
    p = float(special.betainc(0.5 * df, 0.5, df / (df + t * t)))
    return min(1.0, p)


def normal_two_sided_p(z) -> float:
    return float(special.erfc(abs(float(z)) / math.sqrt(2.0)))

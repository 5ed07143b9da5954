"""Back-reconstruction, connectivity and group statistics.

Subject time-courses and loadings come from least-squares projection of the
subject data onto the group component maps (dual regression, first stage).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .numcore import corr_rows, normal_two_sided_p, student_t_sf, student_t_two_sided_p

__all__ = [
    "back_reconstruct_fmri",
    "back_reconstruct_smri",
    "detrend_linear",
    "despike",
    "bandpass",
    "preprocess_timecourse",
    "fnc",
    "SncMatrix",
    "snc",
    "two_sample_ttest",
    "fdr_bh",
    "fisher_z_test",
    "signed_log_p",
    "GroupStatsResult",
    "group_stats",
    "upper_triangle",
]

MAD_SCALE = 1.4826
SPIKE_THRESHOLD = 3.5


def _project(data, maps, what):
    data = np.asarray(data, dtype=np.float64)
    maps = np.asarray(maps, dtype=np.float64)
    if data.ndim != 2 or maps.ndim != 2 or data.shape[1] != maps.shape[1]:
        raise ValueError(f"{what}: voxel counts differ ({data.shape} vs {maps.shape})")
    c = maps.shape[0]
    if np.linalg.matrix_rank(maps) < c:
        raise np.linalg.LinAlgError("group maps are rank deficient")
    # least squares: data ~ tc @ maps
    return np.linalg.lstsq(maps.T, data.T, rcond=None)[0].T


def back_reconstruct_fmri(subject_data, group_maps) -> np.ndarray:
    """Subject time-courses (T x c) such that ``subject_data ~ tc @ group_maps``."""
    return _project(subject_data, group_maps, "fmri")


def back_reconstruct_smri(group_smri, group_maps) -> np.ndarray:
    """Per-subject loadings (n_subj x c) on the structural group maps."""
    return _project(group_smri, group_maps, "smri")


def detrend_linear(tc) -> np.ndarray:
    tc = np.asarray(tc, dtype=np.float64)
    t = np.arange(tc.size, dtype=np.float64)
    design = np.column_stack([np.ones_like(t), t])
    coef = np.linalg.lstsq(design, tc, rcond=None)[0]
    return tc - design @ coef


def despike(tc, threshold: float = SPIKE_THRESHOLD) -> np.ndarray:
    """Replace outlying samples by linear interpolation of their neighbours.

    A sample is a spike when its detrended value sits more than ``threshold``
    scaled MADs from the detrended median.
    """
    tc = np.asarray(tc, dtype=np.float64)
    resid = detrend_linear(tc)
    med = np.median(resid)
    mad = MAD_SCALE * np.median(np.abs(resid - med))
    if mad == 0:
        return tc.copy()
    spikes = np.abs(resid - med) > threshold * mad
    if not spikes.any() or spikes.all():
        return tc.copy()
    t = np.arange(tc.size)
    out = tc.copy()
    out[spikes] = np.interp(t[spikes], t[~spikes], tc[~spikes])
    return out


def bandpass(tc, tr_seconds: float = 2.0, lo: float = 0.01, hi: float = 0.15,
             order: int = 5) -> np.ndarray:
    """Zero-phase Butterworth band-pass (forward-backward)."""
    nyquist = 0.5 / tr_seconds
    if not 0 < lo < hi < nyquist:
        raise ValueError(f"band [{lo}, {hi}] Hz must lie inside (0, {nyquist}) Hz")
    sos = signal.butter(order, [lo, hi], btype="bandpass", fs=1.0 / tr_seconds, output="sos")
    return signal.sosfiltfilt(sos, np.asarray(tc, dtype=np.float64))


def preprocess_timecourse(tc, tr_seconds=2.0, lo=0.01, hi=0.15,
                          order: str = "despike_first") -> np.ndarray:
    """Detrend, despike and band-pass one time-course.

    ``order="filter_first"`` band-passes before despiking instead.
    """
    x = detrend_linear(tc)
    if order == "despike_first":
        return bandpass(despike(x), tr_seconds, lo, hi)
    if order == "filter_first":
        return despike(bandpass(x, tr_seconds, lo, hi))
    raise ValueError(f"unknown order {order!r}")


def _corr_matrix(cols):
    r = corr_rows(np.asarray(cols, dtype=np.float64).T)
    r = 0.5 * (r + r.T)
    np.fill_diagonal(r, 1.0)
    return r


def fnc(tc) -> np.ndarray:
    """Pearson correlation between the columns of a (T x c) time-course matrix."""
    return _corr_matrix(tc)


def upper_triangle(m) -> np.ndarray:
    m = np.asarray(m)
    return m[np.triu_indices(m.shape[0], k=1)]


@dataclass
class SncMatrix:
    r: np.ndarray
    p: np.ndarray
    mask: np.ndarray


def snc(loadings, alpha: float = 0.05) -> SncMatrix:
    """Correlation of loading columns with one-sided p-values for ``r > 0``."""
    loadings = np.asarray(loadings, dtype=np.float64)
    n = loadings.shape[0]
    if n < 3:
        raise ValueError("need at least 3 subjects")
    r = _corr_matrix(loadings)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = r * np.sqrt((n - 2) / (1.0 - r * r))
    t = np.where(np.abs(r) >= 1.0, np.sign(r) * np.inf, t)
    p = student_t_sf(t, n - 2)
    mask = p < alpha
    np.fill_diagonal(mask, False)
    return SncMatrix(r, p, mask)


def two_sample_ttest(group_a, group_b, equal_var: bool = True):
    """Two-sample t statistic and two-sided p (pooled variance, or Welch)."""
    a = np.asarray(group_a, dtype=np.float64).ravel()
    b = np.asarray(group_b, dtype=np.float64).ravel()
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise ValueError("each group needs at least 2 samples")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    diff = a.mean() - b.mean()
    if equal_var:
        pooled = ((na - 1) * va + (nb - 1) * vb) / (na + nb - 2)
        if pooled == 0:
            raise ValueError("zero pooled variance")
        se = math.sqrt(pooled * (1.0 / na + 1.0 / nb))
        df = na + nb - 2
    else:
        qa, qb = va / na, vb / nb
        if qa + qb == 0:
            raise ValueError("zero variance in both groups")
        se = math.sqrt(qa + qb)
        df = (qa + qb) ** 2 / (qa * qa / (na - 1) + qb * qb / (nb - 1))
    t = diff / se
    return t, student_t_two_sided_p(t, df)


def fdr_bh(p_values, q: float = 0.05) -> np.ndarray:
    """Benjamini-Hochberg step-up rejection mask."""
    p = np.asarray(p_values, dtype=np.float64)
    flat = p.ravel()
    m = flat.size
    mask = np.zeros(m, dtype=bool)
    if m == 0:
        return mask.reshape(p.shape)
    order = np.argsort(flat, kind="stable")
    passing = np.flatnonzero(flat[order] <= q * np.arange(1, m + 1) / m)
    if passing.size:
        mask[order[: passing[-1] + 1]] = True
    return mask.reshape(p.shape)


def fisher_z_test(r1, n1, r2, n2):
    if abs(r1) >= 1 or abs(r2) >= 1:
        raise ValueError("correlations must satisfy |r| < 1")
    if n1 <= 3 or n2 <= 3:
        raise ValueError("sample sizes must exceed 3")
    z = (math.atanh(r1) - math.atanh(r2)) / math.sqrt(1.0 / (n1 - 3) + 1.0 / (n2 - 3))
    return z, normal_two_sided_p(z)


def signed_log_p(t, p) -> float:
    if t == 0:
        return 0.0
    return -math.copysign(1.0, t) * math.log10(p)


@dataclass
class GroupStatsResult:
    t: np.ndarray
    p: np.ndarray
    significant: np.ndarray
    signed_log_p: np.ndarray


def group_stats(group_a, group_b, q: float = 0.05, equal_var: bool = True) -> GroupStatsResult:
    """Column-wise two-sample tests between (n_a x m) and (n_b x m), BH-corrected."""
    a = np.atleast_2d(np.asarray(group_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(group_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature counts differ: {a.shape[1]} vs {b.shape[1]}")
    res = [two_sample_ttest(a[:, j], b[:, j], equal_var) for j in range(a.shape[1])]
    t = np.array([x[0] for x in res])
    p = np.array([x[1] for x in res])
    slp = np.array([signed_log_p(ti, pi) for ti, pi in zip(t, p)])
    return GroupStatsResult(t, p, fdr_bh(p, q), slp)

"""Synthetic two-modality data with blob-shaped, logistic-distributed sources."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .numcore import corr_rows

__all__ = [
    "SimSpec",
    "SimDataset",
    "logistic_quantile_map",
    "generate_blob_sources",
    "generate_linked_sources",
    "generate_mixing",
    "simulate",
    "match_and_score",
]

DEFAULT_TARGETS = (0.94, 0.94, 0.91, 0.02)


@dataclass(frozen=True)
class SimSpec:
    grid: int = 60
    n_comp: int = 4
    target_corr: tuple = DEFAULT_TARGETS
    n_rows_1: int = 300
    n_rows_2: int = 10
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        t = tuple(float(x) for x in np.atleast_1d(self.target_corr))
        object.__setattr__(self, "target_corr", t)
        if len(t) != self.n_comp:
            raise ValueError("target_corr must have n_comp entries")
        if any(abs(x) > 1 for x in t):
            raise ValueError("target correlations must lie in [-1, 1]")
        if min(self.n_rows_1, self.n_rows_2) < self.n_comp:
            raise ValueError("observation rows must be >= n_comp")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @property
    def n_voxels(self) -> int:
        return self.grid * self.grid


@dataclass
class SimDataset:
    s1: np.ndarray
    s2: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    achieved_corr: np.ndarray
    spec: SimSpec = field(default_factory=SimSpec)


def logistic_quantile_map(values) -> np.ndarray:
    """Replace each value by the logistic quantile of its rank.

    Ranks ``r = 0..v-1`` map to ``logit((r + 0.5) / v)`` (zero mean, unit scale).
    Ties are broken by position so the map is deterministic.
    """
    values = np.asarray(values, dtype=np.float64)
    v = values.size
    ranks = np.empty(v, dtype=np.int64)
    ranks[np.argsort(values, kind="stable")] = np.arange(v)
    p = (ranks + 0.5) / v
    return np.log(p) - np.log1p(-p)


# Background noise keeps voxels away from the blobs in random rank order, so
# distinct components stay uncorrelated after the rank mapping.
_BACKGROUND_STD = 0.2
_MAX_PAIR_CORR = 0.1


def _blob_field(grid, rng, taken, min_sep):
    yy, xx = np.mgrid[0:grid, 0:grid].astype(np.float64)
    out = np.zeros((grid, grid))
    n_blobs = int(rng.integers(1, 4))
    margin = max(3, grid // 10)
    for _ in range(n_blobs):
        for _attempt in range(1000):
            cy, cx = rng.uniform(margin, grid - 1 - margin, size=2)
            if all(math.hypot(cy - ty, cx - tx) >= min_sep for ty, tx in taken):
                break
        else:
            raise RuntimeError("could not place non-overlapping blob centers")
        taken.append((cy, cx))
        width = rng.uniform(0.04, 0.07) * grid
        amp = rng.uniform(0.6, 1.0)
        out += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width ** 2))
    out += rng.normal(0.0, _BACKGROUND_STD, size=out.shape)
    return logistic_quantile_map(out.ravel())


def generate_blob_sources(spec: SimSpec, rng=None, n: int | None = None) -> np.ndarray:
    """Blob-structured sources with logistic marginals, shape (n_comp, grid**2)."""
    if spec.grid < 16:
        raise ValueError("grid must be >= 16")
    if rng is None:
        rng = np.random.default_rng([spec.seed, 0])
    n = spec.n_comp if n is None else n
    taken = []
    min_sep = 0.16 * spec.grid
    rows = []
    for _ in range(n):
        # redraw components that happen to overlap an earlier one in correlation
        for _attempt in range(50):
            mark = len(taken)
            row = _blob_field(spec.grid, rng, taken, min_sep)
            if not rows or np.abs(corr_rows(row, np.vstack(rows))).max() < _MAX_PAIR_CORR:
                break
            del taken[mark:]
        rows.append(row)
    return np.vstack(rows)


def _blend(a, f, theta):
    return logistic_quantile_map(math.cos(theta) * a + math.sin(theta) * f)


def generate_linked_sources(s1, target_corr, seed=0, grid: int | None = None,
                            fresh=None, tol: float = 1e-4) -> np.ndarray:
    """Second source set with prescribed row-wise Pearson correlation to ``s1``.

    Row ``i`` is the rank-mapped blend ``cos(t) s1[i] + sin(t) f_i`` of the
    partner row and a fresh independent blob map; ``t`` in ``[0, pi]`` is
    found by bisection so the mapped row hits ``target_corr[i]``.
    """
    s1 = np.asarray(s1, dtype=np.float64)
    targets = np.atleast_1d(np.asarray(target_corr, dtype=np.float64))
    c, v = s1.shape
    if targets.size != c:
        raise ValueError("one target correlation per row required")
    if np.any(np.abs(targets) > 1):
        raise ValueError("target correlations must lie in [-1, 1]")
    if fresh is None:
        grid = int(round(math.sqrt(v))) if grid is None else grid
        if grid * grid != v:
            raise ValueError("cannot infer square grid from column count")
        spec = SimSpec(grid=grid, n_comp=c, target_corr=tuple(np.zeros(c)), seed=0)
        fresh = generate_blob_sources(spec, rng=np.random.default_rng([seed, 1]))
    out = np.empty_like(s1)
    for i in range(c):
        a = (s1[i] - s1[i].mean()) / s1[i].std()
        f = (fresh[i] - fresh[i].mean()) / fresh[i].std()
        # remove the chance overlap so the blend sweeps the full range monotonically
        f = f - (a @ f / (a @ a)) * a
        f /= f.std()

        def corr_at(theta):
            return corr_rows(s1[i], _blend(a, f, theta))[0, 0]

        lo, hi = 0.0, math.pi
        c_lo, c_hi = corr_at(lo), corr_at(hi)
        t = targets[i]
        if not c_hi - tol <= t <= c_lo + tol:
            raise RuntimeError(f"cannot bracket target correlation {t} for row {i}")
        if t >= c_lo:
            out[i] = _blend(a, f, lo)
            continue
        if t <= c_hi:
            out[i] = _blend(a, f, hi)
            continue
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            cm = corr_at(mid)
            if abs(cm - t) <= tol:
                break
            if cm > t:
                lo = mid
            else:
                hi = mid
        out[i] = _blend(a, f, mid)
    return out


def generate_mixing(rows: int, cols: int, seed, max_cond: float = 100.0,
                    max_tries: int = 100) -> np.ndarray:
    if rows < cols:
        raise ValueError("mixing needs rows >= cols")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        a = rng.standard_normal((rows, cols))
        if np.linalg.cond(a) < max_cond:
            return a
    raise RuntimeError(f"no mixing with condition number < {max_cond} in {max_tries} draws")


def simulate(spec: SimSpec = SimSpec()) -> SimDataset:
    """Build the full two-modality dataset described by ``spec``."""
    rng = np.random.default_rng([spec.seed, 0])
    s1 = generate_blob_sources(spec, rng=rng)
    fresh = generate_blob_sources(spec, rng=rng)
    s2 = generate_linked_sources(s1, spec.target_corr, fresh=fresh)
    a1 = generate_mixing(spec.n_rows_1, spec.n_comp, [spec.seed, 2])
    a2 = generate_mixing(spec.n_rows_2, spec.n_comp, [spec.seed, 3])
    x1 = a1 @ s1
    x2 = a2 @ s2
    if spec.noise_std > 0:
        noise = np.random.default_rng([spec.seed, 4])
        x1 = x1 + noise.normal(0.0, spec.noise_std, size=x1.shape)
        x2 = x2 + noise.normal(0.0, spec.noise_std, size=x2.shape)
    achieved = np.array([corr_rows(a, b)[0, 0] for a, b in zip(s1, s2)])
    return SimDataset(s1, s2, a1, a2, x1, x2, achieved, spec)


def match_and_score(estimated, truth):
    """Match estimated rows to ground-truth rows by maximum total |corr|.

    Returns ``(perm, signs, corr)`` indexed by truth row: ``perm[j]`` is the
    estimated row matched to truth row ``j`` and ``corr[j]`` the correlation
    after multiplying that row by ``signs[j]``.
    """
    estimated = np.asarray(estimated, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimated.shape != truth.shape:
        raise ValueError("shapes differ")
    r = corr_rows(truth, estimated)
    rows, cols = linear_sum_assignment(np.abs(r), maximize=True)
    perm = np.empty(truth.shape[0], dtype=int)
    perm[rows] = cols
    signed = r[np.arange(truth.shape[0]), perm]
    signs = np.where(signed < 0, -1.0, 1.0)
    return perm, signs, np.abs(signed)

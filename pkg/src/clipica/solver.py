"""Mini-batch Adam fit of the linked unmixing matrices."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .copula_model import CopulaSpec, MarginalModel, joint_nll, nll_and_gradient
from .numcore import corr_rows, skewness

__all__ = [
    "UnmixingPair",
    "FitConfig",
    "FitResult",
    "DivergenceError",
    "init_unmixing",
    "align_components",
    "fit",
    "sign_calibrate_by_skewness",
    "skewness_signs",
    "compute_pair_correlations",
]

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, epoch, learning_rate):
        super().__init__(
            f"non-finite loss at epoch {epoch}; try a learning_rate below {learning_rate:g}"
        )
        self.epoch = epoch


@dataclass
class UnmixingPair:
    w1: np.ndarray
    w2: np.ndarray

    def copy(self) -> "UnmixingPair":
        return UnmixingPair(self.w1.copy(), self.w2.copy())


@dataclass(frozen=True)
class FitConfig:
    epochs: int = 600
    batch_size: int = 512
    learning_rate: float = 2e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    align_epochs: int = 5
    seed: int = 0
    tol_rel: float = 1e-6
    tol_window: int = 10
    n_workers: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.align_epochs <= self.epochs:
            raise ValueError("align_epochs must lie in [0, epochs]")
        if self.batch_size < 1 or self.tol_window < 1 or self.n_workers < 1:
            raise ValueError("batch_size, tol_window and n_workers must be >= 1")


@dataclass
class FitResult:
    pair: UnmixingPair
    y1: np.ndarray
    y2: np.ndarray
    nll_trace: np.ndarray
    pair_corr: np.ndarray
    permutation_log: list = field(default_factory=list)
    stopped_early: bool = False


def init_unmixing(c: int, seed) -> UnmixingPair:
    """Two orthonormal matrices from the QR factors of seeded Gaussian draws."""
    if c < 1:
        raise ValueError("model order must be >= 1")
    rng = np.random.default_rng(seed)
    ws = []
    for _ in range(2):
        q, r = np.linalg.qr(rng.standard_normal((c, c)))
        d = np.sign(np.diag(r))
        d[d == 0] = 1.0
        ws.append(q * d)
    return UnmixingPair(ws[0], ws[1])


def _assign(sim):
    """Row-to-column assignment maximizing total similarity."""
    rows, cols = linear_sum_assignment(sim, maximize=True)
    perm = np.empty(sim.shape[0], dtype=int)
    perm[rows] = cols
    return perm


def align_components(pair: UnmixingPair, y1, y2):
    """Reorder and sign-flip modality-2 components to match modality 1.

    Returns ``(new_pair, perm, signs)`` where row ``i`` of the new ``w2`` is
    ``signs[i] * w2[perm[i]]``. Zero-variance rows stay in place and are
    listed on the returned pair as ``pair.degenerate``.
    """
    y1 = np.asarray(y1, dtype=np.float64)
    y2 = np.asarray(y2, dtype=np.float64)
    c = y1.shape[0]
    if y1.shape != y2.shape or y1.shape[1] < 3:
        raise ValueError("y1 and y2 must share shape (c, v) with v >= 3")
    flat1 = np.ptp(y1, axis=1) == 0
    flat2 = np.ptp(y2, axis=1) == 0
    degenerate = np.flatnonzero(flat1 | flat2)
    perm = np.arange(c)
    signs = np.ones(c)
    free = np.setdiff1d(np.arange(c), degenerate)
    if free.size:
        r = corr_rows(y1[free], y2[free])
        local = _assign(np.abs(r))
        perm[free] = free[local]
        signs[free] = np.where(r[np.arange(free.size), local] < 0, -1.0, 1.0)
    if degenerate.size:
        log.warning("alignment skipped degenerate components %s", degenerate.tolist())
    new = UnmixingPair(pair.w1.copy(), signs[:, None] * pair.w2[perm])
    new.degenerate = degenerate
    return new, perm, signs


def compute_pair_correlations(y1, y2) -> np.ndarray:
    y1 = np.asarray(y1, dtype=np.float64)
    y2 = np.asarray(y2, dtype=np.float64)
    if y1.shape != y2.shape or y1.shape[1] < 3:
        raise ValueError("y1 and y2 must share shape (c, v) with v >= 3")
    return np.array([corr_rows(a, b)[0, 0] for a, b in zip(y1, y2)])


def skewness_signs(sources) -> np.ndarray:
    return np.array([-1.0 if skewness(row) < 0 else 1.0 for row in np.asarray(sources)])


def sign_calibrate_by_skewness(sources, mixing_like):
    """Negate negatively skewed sources together with their mixing columns."""
    sources = np.asarray(sources, dtype=np.float64)
    mixing_like = np.asarray(mixing_like, dtype=np.float64)
    s = skewness_signs(sources)
    return sources * s[:, None], mixing_like * s[None, :]


class _Adam:
    def __init__(self, shapes, cfg: FitConfig):
        self.cfg = cfg
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        cfg = self.cfg
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def _usable(pair):
    # huge but finite weights overflow the sources on the next evaluation
    return all(np.all(np.isfinite(w)) and np.abs(w).max() < 1e150 for w in (pair.w1, pair.w2))


def fit(x1_reduced, x2_reduced, spec: CopulaSpec, cfg: FitConfig = FitConfig(),
        marginal: MarginalModel = MarginalModel()) -> FitResult:
    """Estimate the unmixing pair by minimizing the joint negative log-likelihood.

    Voxel columns are shuffled each epoch and visited in mini-batches. After
    each of the first ``cfg.align_epochs`` epochs the modality-2 components
    (and the matching Adam moments) are permuted and sign-flipped to follow
    modality 1.
    """
    x1 = np.asarray(x1_reduced, dtype=np.float64)
    x2 = np.asarray(x2_reduced, dtype=np.float64)
    if x1.ndim != 2 or x2.ndim != 2:
        raise ValueError("inputs must be 2-D")
    if x1.shape[1] != x2.shape[1]:
        raise ValueError(f"column counts differ: {x1.shape[1]} vs {x2.shape[1]}")
    c, v = x1.shape
    if x2.shape[0] != c or spec.c != c:
        raise ValueError(f"model order mismatch: x1 {c}, x2 {x2.shape[0]}, spec {spec.c}")

    pair = init_unmixing(c, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    adam = _Adam([(c, c), (c, c)], cfg)
    trace = []
    perm_log = []
    stopped = False
    executor = ThreadPoolExecutor(cfg.n_workers) if cfg.n_workers > 1 else None
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(v)
            parts = []
            for start in range(0, v, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                nll, g1, g2 = nll_and_gradient(pair.w1, pair.w2, x1[:, idx], x2[:, idx],
                                               spec, marginal, executor)
                if not (math.isfinite(nll.total) and np.all(np.isfinite(g1))
                        and np.all(np.isfinite(g2))):
                    raise DivergenceError(epoch, cfg.learning_rate)
                parts.append(nll.total)
                b = idx.size
                adam.step([pair.w1, pair.w2], [g1 / b, g2 / b])
                if not _usable(pair):
                    raise DivergenceError(epoch, cfg.learning_rate)
            trace.append(math.fsum(parts) / v)

            if epoch < cfg.align_epochs:
                before = joint_nll(pair.w1, pair.w2, x1, x2, spec, marginal, executor)
                if not math.isfinite(before.total):
                    raise DivergenceError(epoch, cfg.learning_rate)
                pair, perm, signs = align_components(pair, pair.w1 @ x1, pair.w2 @ x2)
                for buf in (adam.m, adam.v):
                    buf[1][:] = buf[1][perm]
                adam.m[1] *= signs[:, None]
                after = joint_nll(pair.w1, pair.w2, x1, x2, spec, marginal, executor)
                perm_log.append({
                    "epoch": epoch,
                    "perm": perm.tolist(),
                    "signs": signs.astype(int).tolist(),
                    "copula_before": before.copula_term,
                    "copula_after": after.copula_term,
                })
            elif len(trace) > cfg.tol_window + cfg.align_epochs:
                w = np.asarray(trace[-cfg.tol_window - 1:])
                rel = np.abs(np.diff(w)) / np.maximum(np.abs(w[:-1]), 1e-300)
                if rel.max() < cfg.tol_rel:
                    stopped = True
                    break
    finally:
        if executor is not None:
            executor.shutdown()

    y1 = pair.w1 @ x1
    y2 = pair.w2 @ x2
    return FitResult(pair, y1, y2, np.asarray(trace), compute_pair_correlations(y1, y2),
                     perm_log, stopped)

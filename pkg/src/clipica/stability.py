"""Multi-run reliability of the decomposition (ICASSO-style).

Components from every run are assigned one-to-one to the components of run 0,
so each cluster holds exactly one member per run. The stability index of a
cluster is its mean within-cluster similarity minus its mean similarity to
everything outside it, with similarity = |Pearson correlation| of maps.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .copula_model import CopulaSpec
from .numcore import corr_rows
from .solver import FitConfig, FitResult, fit

__all__ = [
    "RunCollection",
    "ClusterReport",
    "run_multi",
    "cluster_components",
    "select_centroid_run",
    "format_report",
]

log = logging.getLogger(__name__)


@dataclass
class RunCollection:
    runs: list
    seeds: list
    failures: dict = field(default_factory=dict)

    def sources(self, modality: int) -> list:
        if modality not in (1, 2):
            raise ValueError("modality must be 1 or 2")
        return [r.y1 if modality == 1 else r.y2 for r in self.runs]


@dataclass
class ClusterReport:
    """Per-modality clustering of components across runs.

    ``members[i, r]`` is the component index of run ``r`` placed in cluster
    ``i``; ``centrotype[i]`` the run whose member is most central.
    """

    modality: int
    members: np.ndarray
    iq: np.ndarray
    centrotype: np.ndarray
    similarity_to_centrotype: np.ndarray  # (c, R)
    selected_run: int = 0

    @property
    def n_runs(self) -> int:
        return self.members.shape[1]


def run_multi(x1, x2, spec: CopulaSpec, cfg: FitConfig, n_runs: int, base_seed: int = 0,
              n_workers: int = 1) -> RunCollection:
    """Fit ``n_runs`` times with seeds ``base_seed + r``; failed fits are dropped."""
    if n_runs < 2:
        raise ValueError("n_runs must be >= 2")
    seeds = [base_seed + r for r in range(n_runs)]

    def one(seed):
        try:
            return fit(x1, x2, spec, FitConfig(**{**cfg.__dict__, "seed": seed}))
        except (FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
            return exc

    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(s) for s in seeds]
    runs, ok_seeds, failures = [], [], {}
    for seed, res in zip(seeds, results):
        if isinstance(res, FitResult):
            runs.append(res)
            ok_seeds.append(seed)
        else:
            log.warning("run with seed %d failed: %s", seed, res)
            failures[seed] = str(res)
    if len(runs) < 2:
        raise RuntimeError(f"only {len(runs)} of {n_runs} runs succeeded: {failures}")
    return RunCollection(runs, ok_seeds, failures)


def _cluster_maps(maps):
    """Cluster a list of (c, v) component maps, one per run."""
    n_runs = len(maps)
    c = maps[0].shape[0]
    if any(m.shape != maps[0].shape for m in maps):
        raise ValueError("all runs must share (c, v)")
    allmaps = np.vstack(maps)
    try:
        sim = np.abs(corr_rows(allmaps))
    except ValueError as exc:
        raise ValueError("degenerate component (zero variance)") from exc
    members = np.empty((c, n_runs), dtype=int)
    members[:, 0] = np.arange(c)
    for r in range(1, n_runs):
        block = sim[:c, r * c:(r + 1) * c]
        rows, cols = linear_sum_assignment(block, maximize=True)
        members[rows, r] = cols
    flat = members + (np.arange(n_runs) * c)[None, :]
    iq = np.empty(c)
    centro = np.empty(c, dtype=int)
    to_centro = np.empty((c, n_runs))
    everything = np.arange(n_runs * c)
    for i in range(c):
        idx = flat[i]
        inner = sim[np.ix_(idx, idx)]
        within = (inner.sum() - np.trace(inner)) / (n_runs * (n_runs - 1))
        outside = np.setdiff1d(everything, idx)
        between = sim[np.ix_(idx, outside)].mean() if outside.size else 0.0
        iq[i] = within - between
        centro[i] = int(np.argmax(inner.sum(axis=1)))
        to_centro[i] = inner[centro[i]]
    return members, iq, centro, to_centro


def cluster_components(coll: RunCollection, modality: int) -> ClusterReport:
    members, iq, centro, to_centro = _cluster_maps(coll.sources(modality))
    return ClusterReport(modality, members, iq, centro, to_centro)


def _run_scores(report1: ClusterReport, report2: ClusterReport) -> np.ndarray:
    if report1.n_runs != report2.n_runs:
        raise ValueError("reports come from different collections")
    return (report1.similarity_to_centrotype.sum(axis=0)
            + report2.similarity_to_centrotype.sum(axis=0))


def select_centroid_run(report1: ClusterReport, report2: ClusterReport) -> int:
    """Run whose members sit closest to the cluster centrotypes (lowest index on ties)."""
    run = int(np.argmax(_run_scores(report1, report2)))
    report1.selected_run = report2.selected_run = run
    return run


def format_report(report1: ClusterReport, report2: ClusterReport, seeds=None) -> str:
    scores = _run_scores(report1, report2)
    n = report1.n_runs
    run = int(np.argmax(scores))
    lines = [f"runs = {n}", f"selected_run = {run}"]
    if seeds is not None:
        lines.append(f"selected_seed = {seeds[run]}")
    lines.append("component\tiq_modality1\tiq_modality2")
    for i, (a, b) in enumerate(zip(report1.iq, report2.iq)):
        lines.append(f"{i}\t{a:.6f}\t{b:.6f}")
    lines.append("run\tmean_similarity_to_centrotype")
    c = report1.iq.size
    for r, s in enumerate(scores):
        lines.append(f"{r}\t{s / (2 * c):.6f}")
    return "\n".join(lines) + "\n"

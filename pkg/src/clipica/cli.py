"""Command-line entry point: ``clipica <subcommand> ...``.

Failures print one line ``clipica: error[<kind>]: <message>`` to stderr and
exit with the code listed in ``EXIT_CODES``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import postproc
from .config import ConfigError, RunConfig, load_config
from .copula_model import CopulaSpec
from .fileio import MatrixFileError, atomic_write_text, read_matrix, write_manifest, write_matrix
from .heatmap import heatmap_svg
from .numcore import pca_reduce, two_stage_pca, zscore_rows
from .simulation import DEFAULT_TARGETS, SimSpec, simulate
from .solver import DivergenceError, FitConfig, fit, skewness_signs
from .stability import cluster_components, format_report, run_multi, select_centroid_run

log = logging.getLogger("clipica")

EXIT_CODES = {
    "usage": 2,
    "unreadable_input": 3,
    "invalid_input": 4,
    "shape_mismatch": 5,
    "numerical_failure": 6,
}


class ShapeMismatch(ValueError):
    pass


def _fail(kind: str, message: str) -> int:
    print(f"clipica: error[{kind}]: {' '.join(str(message).split())}", file=sys.stderr)
    return EXIT_CODES[kind]


def _config_text(path) -> str:
    return Path(path).read_text(encoding="utf-8") if path else ""


def _fit_config(cfg: RunConfig, workers: int = 1, seed=None) -> FitConfig:
    return FitConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        align_epochs=min(cfg.align_epochs, cfg.epochs),
        seed=cfg.seed if seed is None else seed,
        n_workers=workers,
    )


def _reduce(paths, c, k_subject=None, k_group=None):
    mats = [read_matrix(p) for p in paths]
    if len({m.shape[1] for m in mats}) != 1:
        raise ShapeMismatch("input matrices do not share a voxel axis")
    if k_subject is not None:
        res = two_stage_pca(mats, k_subject, k_group or c)
    else:
        res = pca_reduce(np.vstack(mats), c)
    if res.components.shape[0] != c:
        raise ShapeMismatch(f"reduced order {res.components.shape[0]} != model_order {c}")
    return zscore_rows(res.components)


def _load_pair(args, cfg):
    x1 = _reduce(args.x1, cfg.model_order, args.subject_pca, args.group_pca)
    x2 = _reduce(args.x2, cfg.model_order)
    if x1.shape[1] != x2.shape[1]:
        raise ShapeMismatch(f"voxel counts differ: x1 has {x1.shape[1]}, x2 has {x2.shape[1]}")
    return x1, x2


def _write_vector_csv(path, header, values):
    lines = [header] + [f"{i},{float(v)!r}" for i, v in enumerate(values)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def cmd_simulate(args):
    targets = tuple(args.targets) if args.targets else DEFAULT_TARGETS
    spec = SimSpec(grid=args.grid, n_comp=len(targets), target_corr=targets,
                   n_rows_1=args.rows1, n_rows_2=args.rows2, noise_std=args.noise_std,
                   seed=args.seed)
    d = simulate(spec)
    out = Path(args.out)
    for name in ("s1", "s2", "a1", "a2", "x1", "x2"):
        write_matrix(out / f"{name}.clp", getattr(d, name))
    extra = {
        "grid": spec.grid,
        "n_comp": spec.n_comp,
        "target_corr": " ".join(f"{t:g}" for t in spec.target_corr),
        "n_rows_1": spec.n_rows_1,
        "n_rows_2": spec.n_rows_2,
        "noise_std": f"{spec.noise_std:g}",
        "achieved_corr": " ".join(f"{c:.6f}" for c in d.achieved_corr),
    }
    write_manifest(out, "simulate", seed=spec.seed, extra=extra)


def cmd_fit(args):
    cfg = load_config(args.config)
    x1, x2 = _load_pair(args, cfg)
    res = fit(x1, x2, CopulaSpec(cfg.sigma()), _fit_config(cfg, args.workers))
    out = Path(args.out)
    write_matrix(out / "w1.clp", res.pair.w1)
    write_matrix(out / "w2.clp", res.pair.w2)
    write_matrix(out / "y1.clp", res.y1)
    write_matrix(out / "y2.clp", res.y2)
    _write_vector_csv(out / "pair_corr.csv", "component,pair_corr", res.pair_corr)
    _write_vector_csv(out / "nll_trace.csv", "epoch,nll", res.nll_trace)
    write_manifest(out, "fit", [*args.x1, *args.x2, args.config], _config_text(args.config),
                   cfg.seed, {"epochs_run": res.nll_trace.size})


def cmd_stability(args):
    cfg = load_config(args.config)
    x1, x2 = _load_pair(args, cfg)
    n_runs = args.n_runs or cfg.n_runs
    coll = run_multi(x1, x2, CopulaSpec(cfg.sigma()), _fit_config(cfg), n_runs,
                     base_seed=cfg.seed, n_workers=args.workers)
    rep1 = cluster_components(coll, 1)
    rep2 = cluster_components(coll, 2)
    run = select_centroid_run(rep1, rep2)
    best = coll.runs[run]
    s1 = skewness_signs(best.y1)
    s2 = skewness_signs(best.y2)
    out = Path(args.out)
    write_matrix(out / "y1.clp", best.y1 * s1[:, None])
    write_matrix(out / "y2.clp", best.y2 * s2[:, None])
    write_matrix(out / "w1.clp", best.pair.w1 * s1[:, None])
    write_matrix(out / "w2.clp", best.pair.w2 * s2[:, None])
    report = format_report(rep1, rep2, coll.seeds)
    if coll.failures:
        report += "".join(f"failed_seed {s}: {msg}\n" for s, msg in coll.failures.items())
    atomic_write_text(out / "stability.txt", report)
    write_manifest(out, "stability", [*args.x1, *args.x2, args.config],
                   _config_text(args.config), cfg.seed,
                   {"n_runs": n_runs, "selected_run": run})


def cmd_backrecon(args):
    maps = read_matrix(args.maps)
    out = Path(args.out)
    if args.kind == "smri":
        if len(args.data) != 1:
            raise ShapeMismatch("smri back-reconstruction takes one subjects x voxels matrix")
        data = read_matrix(args.data[0])
        if data.shape[1] != maps.shape[1]:
            raise ShapeMismatch(f"voxel counts differ: {data.shape[1]} vs {maps.shape[1]}")
        write_matrix(out / "loadings.clp", postproc.back_reconstruct_smri(data, maps))
    else:
        for p in args.data:
            data = read_matrix(p)
            if data.shape[1] != maps.shape[1]:
                raise ShapeMismatch(f"{p}: voxel counts differ: {data.shape[1]} vs {maps.shape[1]}")
            write_matrix(out / f"tc_{Path(p).stem}.clp",
                         postproc.back_reconstruct_fmri(data, maps))
    write_manifest(out, f"backrecon {args.kind}", [args.maps, *args.data])


def cmd_fnc(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    tr = args.tr if args.tr is not None else cfg.tr_seconds
    out = Path(args.out)
    vectors = []
    mats = []
    for p in args.tc:
        tc = read_matrix(p)
        if mats and tc.shape[1] != mats[0].shape[0]:
            raise ShapeMismatch(f"{p}: {tc.shape[1]} components, expected {mats[0].shape[0]}")
        clean = np.column_stack([
            postproc.preprocess_timecourse(col, tr, cfg.band_lo, cfg.band_hi, cfg.fnc_order)
            for col in tc.T
        ])
        m = postproc.fnc(clean)
        write_matrix(out / f"fnc_{Path(p).stem}.clp", m)
        mats.append(m)
        vectors.append(postproc.upper_triangle(m))
    write_matrix(out / "fnc_vectors.clp", np.vstack(vectors))
    write_matrix(out / "fnc_mean.clp", np.mean(mats, axis=0))
    write_manifest(out, "fnc", [*args.tc, *([args.config] if args.config else [])],
                   _config_text(args.config), extra={"tr_seconds": f"{tr:g}"})


def cmd_snc(args):
    loadings = read_matrix(args.loadings)
    res = postproc.snc(loadings, args.alpha)
    out = Path(args.out)
    write_matrix(out / "snc.clp", res.r)
    lines = ["component_i,component_j,r,p,significant"]
    for i, j in zip(*np.triu_indices(res.r.shape[0], k=1)):
        lines.append(f"{i},{j},{res.r[i, j]!r},{res.p[i, j]!r},{int(res.mask[i, j])}")
    atomic_write_text(out / "snc.csv", "\n".join(lines) + "\n")
    write_manifest(out, "snc", [args.loadings], extra={"alpha": f"{args.alpha:g}"})


def _pair_labels(m, kind):
    if kind == "features":
        return [(j, j) for j in range(m)]
    c = int(round((1 + np.sqrt(1 + 8 * m)) / 2))
    if c * (c - 1) // 2 != m:
        raise ShapeMismatch(f"{m} columns is not an upper triangle of a square matrix")
    return list(zip(*np.triu_indices(c, k=1)))


def cmd_stats(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    a = read_matrix(args.a)
    b = read_matrix(args.b)
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"feature counts differ: {a.shape[1]} vs {b.shape[1]}")
    labels = _pair_labels(a.shape[1], args.kind)
    res = postproc.group_stats(a, b, args.q, equal_var=cfg.ttest_variant == "pooled")
    lines = ["component_i,component_j,t,p,significant,signed_log_p"]
    for (i, j), t, p, s, slp in zip(labels, res.t, res.p, res.significant, res.signed_log_p):
        lines.append(f"{i},{j},{float(t)!r},{float(p)!r},{int(s)},{float(slp)!r}")
    out = Path(args.out)
    atomic_write_text(out / "stats.csv", "\n".join(lines) + "\n")
    write_manifest(out, "stats", [args.a, args.b, *([args.config] if args.config else [])],
                   _config_text(args.config),
                   extra={"q": f"{args.q:g}", "n_significant": int(res.significant.sum())})


def cmd_heatmap(args):
    m = read_matrix(args.matrix)
    labels = None
    if args.labels:
        labels = [ln.strip() for ln in Path(args.labels).read_text().splitlines() if ln.strip()]
        if len(labels) != m.shape[0]:
            raise ShapeMismatch(f"{len(labels)} labels for {m.shape[0]} rows")
    rng = None if args.range == "auto" else float(args.range)
    svg = heatmap_svg(m, rng, labels, title=args.title)
    atomic_write_text(args.out, svg)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clipica", description="Copula-linked parallel ICA")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    s = sub.add_parser("simulate", help="generate a synthetic two-modality dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--grid", type=int, default=60)
    s.add_argument("--targets", type=float, nargs="+")
    s.add_argument("--rows1", type=int, default=300)
    s.add_argument("--rows2", type=int, default=10)
    s.add_argument("--noise-std", type=float, default=0.0)
    s.set_defaults(func=cmd_simulate)

    for name, func, hlp in (("fit", cmd_fit, "estimate the linked unmixing matrices"),
                            ("stability", cmd_stability, "repeat fits and score stability")):
        f = sub.add_parser(name, help=hlp)
        f.add_argument("--config", required=True)
        f.add_argument("--x1", required=True, nargs="+",
                       help="modality-1 matrix (or per-subject matrices with --subject-pca)")
        f.add_argument("--x2", required=True, nargs="+")
        f.add_argument("--out", required=True)
        f.add_argument("--subject-pca", type=int)
        f.add_argument("--group-pca", type=int)
        f.add_argument("--workers", type=int, default=1)
        if name == "stability":
            f.add_argument("--n-runs", type=int)
        f.set_defaults(func=func)

    b = sub.add_parser("backrecon", help="subject time-courses or loadings from group maps")
    b.add_argument("--maps", required=True)
    b.add_argument("--data", required=True, nargs="+")
    b.add_argument("--kind", choices=("fmri", "smri"), default="fmri")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_backrecon)

    n = sub.add_parser("fnc", help="functional network connectivity per subject")
    n.add_argument("--tc", required=True, nargs="+")
    n.add_argument("--config")
    n.add_argument("--tr", type=float)
    n.add_argument("--out", required=True)
    n.set_defaults(func=cmd_fnc)

    c = sub.add_parser("snc", help="structural network covariation of loadings")
    c.add_argument("--loadings", required=True)
    c.add_argument("--alpha", type=float, default=0.05)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_snc)

    t = sub.add_parser("stats", help="two-sample tests with FDR correction")
    t.add_argument("--a", required=True)
    t.add_argument("--b", required=True)
    t.add_argument("--kind", choices=("fnc", "features"), default="fnc")
    t.add_argument("--q", type=float, default=0.05)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_stats)

    h = sub.add_parser("heatmap", help="render a matrix as SVG")
    h.add_argument("--matrix", required=True)
    h.add_argument("--out", required=True)
    h.add_argument("--range", default="auto", help="'auto' or a positive number")
    h.add_argument("--labels")
    h.add_argument("--title")
    h.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        return _fail("unreadable_input", exc)
    except (MatrixFileError, ConfigError) as exc:
        return _fail("invalid_input", exc)
    except ShapeMismatch as exc:
        return _fail("shape_mismatch", exc)
    except (DivergenceError, np.linalg.LinAlgError, RuntimeError) as exc:
        return _fail("numerical_failure", exc)
    except ValueError as exc:
        return _fail("invalid_input", exc)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

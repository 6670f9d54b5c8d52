"""Command line entry point: ``stabgeo <subcommand> --config run.yaml [--seed S] [--threads T] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import EXPERIMENTS, ExperimentConfig, parse_config
from .errors import ConfigParseError, ConfigValidationError, StabGeoError
from .estimators import (
    EstimatorConfig,
    alpha_hat,
    covariance_curve,
    direct_variance,
    sample_functional,
    sigma2_hat,
    tau2_hat,
)
from .experiments import clt_experiment, lil_experiment, sip_experiment
from .functionals import KnnLength, parse_functional
from .output import OutputDir
from .point_process import Cubic, ProcessKey, Stretched, coupled_binomial, poisson_window
from .stabilization import certified_radius, empirical_radii, knn_triangle_radius, radius_tail_fit

log = logging.getLogger("stabgeo")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _geometry(cfg: ExperimentConfig):
    g = cfg.geometry
    if g["kind"] == "stretched":
        return Stretched(tuple(g["base"]), g["n"])
    return Cubic(g["n"], cfg.d)


def _est_cfg(cfg: ExperimentConfig) -> EstimatorConfig:
    return EstimatorConfig(replicates=cfg.replicates, seed=cfg.seed, d=cfg.d, R=cfg.options.get("R"),
                           threads=cfg.threads, config_hash=cfg.config_hash)


def _plot_rows(experiment, triples):
    return [(experiment, n, series, value) for n, series, value in triples]


PLOT_HEADER = ["experiment", "n", "series", "value"]


# ---------------------------------------------------------------- subcommands


def _run_sample(cfg, out: OutputDir):
    geom = _geometry(cfg)
    key = ProcessKey(cfg.seed, 0, int(cfg.options.get("replicate_id", 0)))
    if cfg.process == "binomial":
        cloud = coupled_binomial(key, geom, int(round(geom.volume)))
    else:
        cloud = poisson_window(key, geom)
    out.write_csv("points.csv", [f"x{i}" for i in range(cloud.d)], cloud.points.tolist())
    if cfg.options.get("binary"):
        out.write_bytes("points.sgpc", cloud.to_bytes())
    out.write_jsonl("summary.jsonl", [{"experiment": "sample", "process": cfg.process, "n": geom.volume,
                                       "points": len(cloud)}])
    out.write_csv("plot.csv", PLOT_HEADER, _plot_rows("sample", [(geom.volume, "count", len(cloud))]))


def _run_functional(cfg, out: OutputDir):
    geom = _geometry(cfg)
    spec = cfg.spec
    h = sample_functional(spec, cfg.seed, np.arange(cfg.replicates), geom, cfg.process)
    out.write_csv("values.csv", ["replicate", "value"], enumerate(h.tolist()))
    out.write_jsonl("summary.jsonl", [{"experiment": "functional", "functional": cfg.functional,
                                       "process": cfg.process, "n": geom.volume, "mean": float(h.mean()),
                                       "sd": float(h.std(ddof=1)), "replicates": cfg.replicates}])
    out.write_csv("plot.csv", PLOT_HEADER, _plot_rows("functional", [(geom.volume, "mean", float(h.mean()))]))


def _run_stabilize(cfg, out: OutputDir):
    spec = cfg.spec
    method = cfg.options.get("method", "certified")
    records, plot = [], []
    if method == "certified":
        cert = certified_radius(spec)
        records.append({"experiment": "stabilize", "method": method, "functional": cfg.functional,
                        "radius": None if cert is None else cert.radius, "kind": None if cert is None else cert.kind})
        if cert is not None:
            plot.append((0, "certified_radius", cert.radius))
    else:
        reps = np.arange(cfg.replicates)
        if method == "triangle":
            if not isinstance(spec, KnnLength):
                raise StabGeoError("the triangle criterion applies to knn functionals")
            geom = _geometry(cfg)
            radii = np.array([
                knn_triangle_radius(poisson_window(ProcessKey(cfg.seed, 0, int(r)), geom), spec.k).radius
                for r in reps
            ])
        else:
            schedule = cfg.options.get("schedule")
            kwargs = {"r_schedule": tuple(schedule)} if schedule else {}
            radii = empirical_radii(spec, cfg.seed, reps, int(cfg.options.get("trials", 20)),
                                    origin=(0.0,) * cfg.d, **kwargs)
        out.write_csv("radii.csv", ["replicate", "radius"], zip(reps.tolist(), radii.tolist()))
        rec = {"experiment": "stabilize", "method": method, "functional": cfg.functional,
               "mean_radius": float(radii.mean()), "max_radius": float(radii.max())}
        if cfg.options.get("tail") and len(radii) >= 50:
            c1, c2, r2 = radius_tail_fit(radii)
            out.write_csv("fit.csv", ["c1", "c2", "r_squared", "n_samples"], [(c1, c2, r2, len(radii))])
            rec.update(c1=c1, c2=c2, r_squared=r2)
        records.append(rec)
        # empirical survival P(S > r) at each distinct radius
        values = np.unique(radii)
        surv = 1.0 - np.searchsorted(np.sort(radii), values, side="right") / len(radii)
        plot += [(r, "survival", s) for r, s in zip(values.tolist(), surv.tolist())]
    out.write_jsonl("summary.jsonl", records)
    out.write_csv("plot.csv", PLOT_HEADER, _plot_rows("stabilize", plot))


def _run_estimate(cfg, out: OutputDir):
    spec = cfg.spec
    ecfg = _est_cfg(cfg)
    quantities = cfg.options.get("quantities", ["alpha", "sigma2", "tau2"])
    fns = {"alpha": alpha_hat, "sigma2": sigma2_hat, "tau2": tau2_hat}
    reports = []
    for q in quantities:
        if q not in fns:
            raise StabGeoError(f"unknown quantity {q!r}")
        reports.append(fns[q](spec, ecfg))
    rows = [(r.method, r.estimate, r.std_error, r.replicates) for r in reports]
    out.write_csv("estimates.csv", ["method", "estimate", "se", "replicates"], rows)
    out.write_jsonl("estimates.jsonl", [r.to_record(spec.params()) for r in reports])
    plot = [(0, r.method, r.estimate) for r in reports]
    grid = cfg.options.get("variance_grid")
    if grid:
        curve = direct_variance(spec, cfg.process, grid, int(cfg.options.get("variance_replicates", 200)),
                                cfg.seed, cfg.d, cfg.threads)
        out.write_csv("variance_curve.csv", ["n", "var_over_n", "se"], curve.rows())
        plot += [(n, "var_over_n", v) for n, v, _ in curve.rows()]
    lags = cfg.options.get("lags")
    if lags:
        cov = covariance_curve(spec, ecfg, lags, int(cfg.options.get("inner", 4)))
        out.write_csv("covariance.csv", ["lag", "cov", "se"], [(" ".join(map(str, z)), c, s) for z, c, s, _ in cov])
        plot += [(float(np.linalg.norm(z)), "cov", c) for z, c, _, _ in cov]
    out.write_csv("plot.csv", PLOT_HEADER, _plot_rows("estimate", plot))


def _run_lil(cfg, out: OutputDir):
    spec = cfg.spec
    opts = cfg.options
    res = lil_experiment(spec, cfg.process, cfg.n_grid, cfg.paths, cfg.seed, _geometry(cfg).resized(1.0),
                         cfg.pool_replicates, opts.get("n0"), opts.get("sigma"),
                         estimator_replicates=int(opts.get("estimator_replicates", 20_000)),
                         fixed_envelope=float(opts.get("fixed_envelope", 1.3)),
                         quantile=float(opts.get("quantile", 0.99)), threads=cfg.threads)
    rows = [(p.replicate_id, n, c, r) for p in res.paths for n, c, r in zip(p.n, p.centered, p.R)]
    out.write_csv("paths.csv", ["replicate", "n", "centered", "R"], rows)
    out.write_csv("tail_max.csv", ["replicate", "tail_max"], enumerate(res.tail_max))
    out.write_csv("mean_curve.csv", ["n", "mean", "se"], zip(res.mean.n, res.mean.mean, res.mean.se))
    out.write_jsonl("summary.jsonl", [{
        "experiment": "lil", "functional": cfg.functional, "process": cfg.process, "sigma": res.sigma,
        "sigma_se": res.sigma_se, "envelope": res.envelope, "fraction_within": res.fraction_within,
        "fixed_envelope": res.fixed_envelope, "fraction_within_fixed": res.fraction_within_fixed, "n0": res.n0,
        **res.extra}])
    out.write_csv("plot.csv", PLOT_HEADER, _plot_rows("lil", [(n, f"R_{p.replicate_id}", r)
                                                              for p in res.paths for n, r in zip(p.n, p.R)]))


def _run_clt(cfg, out: OutputDir):
    n = float(cfg.options.get("n", cfg.geometry["n"]))
    res = clt_experiment(cfg.spec, cfg.process, n, cfg.replicates, cfg.seed, cfg.d,
                         cfg.options.get("pool_replicates"),
                         estimator_replicates=int(cfg.options.get("estimator_replicates", 20_000)),
                         threads=cfg.threads)
    out.write_csv("clt.csv", ["n", "ks_statistic", "sigma_used", "ks_studentized"],
                  [(n, res.ks_statistic, res.sigma_used, res.ks_studentized)])
    out.write_jsonl("summary.jsonl", [{"experiment": "clt", "functional": cfg.functional, "process": cfg.process,
                                       "n": n, "ks_statistic": res.ks_statistic, "sigma_used": res.sigma_used,
                                       "ks_studentized": res.ks_studentized, "replicates": res.replicates}])
    out.write_csv("plot.csv", PLOT_HEADER, _plot_rows("clt", [(n, "ks", res.ks_statistic)]))


def _run_sip(cfg, out: OutputDir):
    opts = cfg.options
    defect = opts.get("defect")
    rep = sip_experiment(cfg.spec, tuple(opts.get("base", [1.0] * (cfg.d - 1))), float(opts.get("n_max", 5000)),
                         float(opts.get("block_len", 500)), cfg.paths, cfg.seed,
                         defect_spec=parse_functional(defect) if defect else None,
                         defect_grid=opts.get("defect_grid"),
                         defect_replicates=int(opts.get("defect_replicates", 400)), threads=cfg.threads)
    out.write_csv("variance.csv", ["n", "var", "se"], zip(rep.n_var, rep.var, rep.var_se))
    nb = len(rep.corr)
    out.write_csv("correlations.csv", ["block_i", "block_j", "corr", "se"],
                  [(i, j, rep.corr[i, j], rep.corr_se[i, j]) for i in range(nb) for j in range(i + 1, nb)])
    out.write_csv("block_ks.csv", ["block", "ks"], enumerate(rep.block_ks))
    plot = [(n, "var", v) for n, v in zip(rep.n_var, rep.var)]
    if rep.defect_n:
        out.write_csv("defect.csv", ["n", "raw_defect", "defect", "se", "abs_defect"],
                      zip(rep.defect_n, rep.raw_defect, rep.defect, rep.defect_se, rep.abs_defect))
        plot += [(n, "defect", v) for n, v in zip(rep.defect_n, rep.defect)]
    out.write_jsonl("summary.jsonl", [{
        "experiment": "sip", "functional": cfg.functional, "slope": rep.slope, "slope_se": rep.slope_se,
        "r_squared": rep.r_squared, "max_offdiag_z": float(rep.all_offdiag_z().max()),
        "max_block_ks": float(max(rep.block_ks)), "defect_exponent": rep.defect_exponent,
        "defect_r_squared": rep.defect_r_squared, "abs_defect_exponent": rep.abs_defect_exponent,
        "abs_defect_r_squared": rep.abs_defect_r_squared}])
    out.write_csv("plot.csv", PLOT_HEADER, _plot_rows("sip", plot))


RUNNERS = {
    "sample": _run_sample,
    "functional": _run_functional,
    "stabilize": _run_stabilize,
    "estimate": _run_estimate,
    "lil": _run_lil,
    "clt": _run_clt,
    "sip": _run_sip,
}


def run(cfg: ExperimentConfig) -> dict:
    """Execute one configured experiment; the manifest is written only after every data file."""
    started = datetime.now(timezone.utc).isoformat()
    out = OutputDir(Path(cfg.output), cfg.format, cfg.config_hash)
    try:
        RUNNERS[cfg.experiment](cfg, out)
    except StabGeoError as exc:
        raise StabGeoError(f"{cfg.experiment}: {exc}") from exc
    return out.write_manifest(__version__, started, datetime.now(timezone.utc).isoformat())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stabgeo", description=__doc__)
    p.add_argument("command", choices=EXPERIMENTS)
    p.add_argument("--config", required=True, help="YAML experiment configuration")
    p.add_argument("--seed", type=int, help="override the master seed (unsigned 64-bit)")
    p.add_argument("--threads", type=int, help="worker threads (results do not depend on this)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=("csv", "jsonl", "both"))
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        text = Path(args.config).read_text()
        cfg = parse_config(text)
        if cfg.experiment != args.command:
            raise ConfigValidationError([f"config describes '{cfg.experiment}' but the command is '{args.command}'"])
        overrides = {k: v for k, v in (("seed", args.seed), ("threads", args.threads), ("output", args.out),
                                       ("format", args.format)) if v is not None}
        if overrides:
            from .config import validate

            cfg = validate({**_as_input(cfg), **overrides})
    except (ConfigParseError, ConfigValidationError, OSError) as exc:
        for line in getattr(exc, "violations", [str(exc)]):
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        manifest = run(cfg)
    except (StabGeoError, ValueError, MemoryError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("wrote %d files to %s", len(manifest["files"]), cfg.output)
    return EXIT_OK


def _as_input(cfg: ExperimentConfig) -> dict:
    data = dict(vars(replace(cfg)))
    if not data["n_grid"]:
        data.pop("n_grid")
    return data


if __name__ == "__main__":
    sys.exit(main())

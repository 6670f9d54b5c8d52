"""Monte Carlo estimators of alpha, sigma^2, tau^2, variance curves, covariance decay and normality.

Every estimator is a deterministic function of ``(seed, config)``.  Replicates
are processed in fixed-size chunks so results do not depend on the worker count.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import rng
from .errors import ConvergenceNotReached, DegenerateSample, NonPositiveEstimate
from .functionals import Count, Euler, FunctionalSpec, KnnLength, evaluate_many, format_functional
from .parallel import concat_chunks, map_chunks
from .point_process import STREAM_P, Ball, Cubic, binomial_batch, sample_cubes, window_batch
from .stabilization import (
    PAIR_DRAWS,
    _same,
    certified_radius,
    default_radius,
    sample_delta_batch,
)


@dataclass
class EstimatorConfig:
    replicates: int = 10_000
    seed: int = 0
    d: int = 2
    R: float | None = None
    threads: int = 1
    chunk: int = 1000
    config_hash: str = ""


@dataclass
class EstimateReport:
    estimate: float
    std_error: float
    replicates: int
    method: str
    config_hash: str
    seed: int
    functional: str = ""
    d: int = 2
    checks: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.std_error < 0:
            raise ValueError("std_error must be >= 0")
        if self.replicates < 2:
            raise ValueError("at least 2 replicates are required")

    def to_record(self, params: dict | None = None) -> dict:
        return {
            "method": self.method,
            "functional": self.functional,
            "d": self.d,
            "params": params or {},
            "estimate": self.estimate,
            "se": self.std_error,
            "replicates": self.replicates,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "checks": self.checks,
        }

    def to_jsonl(self, params: dict | None = None) -> str:
        return json.dumps(self.to_record(params), sort_keys=True)


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    return float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(len(x)))


def joint_se(*ses: float) -> float:
    return math.sqrt(sum(s * s for s in ses))


def _origin(d: int) -> tuple[int, ...]:
    return (0,) * d


def _report(values, method, spec, cfg: EstimatorConfig, seed, **checks) -> EstimateReport:
    est, se = _mean_se(values)
    return EstimateReport(est, se, len(values), method, cfg.config_hash, int(seed), format_functional(spec), cfg.d,
                          checks)


# ---------------------------------------------------------------- alpha


def _costs_fixed_radius(spec, seed, reps, d, R) -> np.ndarray:
    """add_one_cost(spec, P within B(0, R), 0) for each replicate."""
    ball = Ball((0.0,) * d, R)
    pts, _, group = window_batch(seed, reps, ball)
    n = len(reps)
    if isinstance(spec, Euler):
        # local formula: 1 - chi(Rips(P within r of 0))
        near = np.einsum("ij,ij->i", pts, pts) <= spec.r * spec.r
        return 1.0 - evaluate_many(spec, pts[near], group[near], n)
    origin = np.zeros((n, d))
    both = np.vstack([pts, pts, origin])
    grp = np.concatenate([2 * group, 2 * group + 1, 2 * np.arange(n) + 1])
    h = evaluate_many(spec, both, grp, 2 * n)
    return h[1::2] - h[0::2]


def add_one_costs(spec: FunctionalSpec, seed: int, replicates, d: int = 2, R: float | None = None,
                  max_doublings: int = 6) -> np.ndarray:
    """Add-one costs at the origin, truncated at a certified R or by doubling until stable."""
    reps = np.asarray(replicates, dtype=np.int64)
    if isinstance(spec, Count):
        return np.ones(len(reps))
    cert = certified_radius(spec)
    if cert is not None:
        return _costs_fixed_radius(spec, seed, reps, d, max(cert.radius, R or 0.0) + 1e-9)
    R = 2.0 + math.sqrt(d) / 2.0 if R is None else float(R)
    vals = _costs_fixed_radius(spec, seed, reps, d, R)
    active = np.arange(len(reps))
    for _ in range(max_doublings):
        R *= 2.0
        nxt = _costs_fixed_radius(spec, seed, reps[active], d, R)
        stable = _same(vals[active], nxt, spec)
        vals[active] = nxt
        active = active[~stable]
        if active.size == 0:
            return vals
    raise ConvergenceNotReached(f"{active.size} add-one cost(s) still changing at radius {R:g}")


def alpha_hat(spec: FunctionalSpec, cfg: EstimatorConfig) -> EstimateReport:
    """alpha = E[add-one cost], with the cross-check E[Delta(0, inf) P(Q_0)] from a disjoint seed."""
    reps = np.arange(cfg.replicates)
    costs = concat_chunks(lambda r: add_one_costs(spec, cfg.seed, r, cfg.d, cfg.R), reps, cfg.threads, cfg.chunk)
    cross_seed = rng.seed_from("alpha-cross", cfg.seed)

    def cross(r):
        b = sample_delta_batch(spec, cross_seed, r, _origin(cfg.d), cfg.R, draws=PAIR_DRAWS[:1])
        return b.values[:, 0] * b.q_count

    prod = concat_chunks(cross, reps, cfg.threads, cfg.chunk)
    est, se = _mean_se(costs)
    c_est, c_se = _mean_se(prod)
    js = joint_se(se, c_se)
    checks = {
        "cross_check": c_est,
        "cross_check_se": c_se,
        "cross_check_agrees": bool(abs(est - c_est) <= 3.0 * js) if js > 0 else bool(est == c_est),
    }
    return EstimateReport(est, se, len(costs), "alpha_add_one_cost", cfg.config_hash, cfg.seed,
                          format_functional(spec), cfg.d, checks)


# ---------------------------------------------------------------- sigma^2 and tau^2


def delta_pairs(spec: FunctionalSpec, seed: int, n: int, d: int = 2, R=None, threads: int = 1, chunk: int = 1000):
    """Paired Delta draws and the matching Delta' values for replicates 0..n-1."""
    parts = map_chunks(lambda r: sample_delta_batch(spec, seed, r, _origin(d), R), np.arange(n), threads, chunk)
    values = np.vstack([p.values for p in parts])
    dprime = np.vstack([p.delta_prime for p in parts])
    return values, dprime


def _warn_nonpositive(rep: EstimateReport, what: str) -> None:
    if rep.estimate <= 0:
        warnings.warn(f"{what} estimate {rep.estimate:g} <= 0", NonPositiveEstimate, stacklevel=3)


def sigma2_hat(spec: FunctionalSpec, cfg: EstimatorConfig) -> EstimateReport:
    """E[E[Delta(0, inf) | F_0]^2] as the mean product of two draws sharing the past."""
    values, _ = delta_pairs(spec, cfg.seed, cfg.replicates, cfg.d, cfg.R, cfg.threads, cfg.chunk)
    rep = _report(values[:, 0] * values[:, 1], "sigma2_paired_product", spec, cfg, cfg.seed)
    _warn_nonpositive(rep, "sigma^2")
    return rep


def tau2_hat(spec: FunctionalSpec, cfg: EstimatorConfig) -> EstimateReport:
    """E[E[Delta - alpha Delta' | F_0]^2] with alpha estimated from an independent seed.

    The plug-in inflates the mean by Var(alpha_hat) (since E[E[Delta'|F_0]^2] = 1),
    which is subtracted.  The report also carries the identity check sigma^2 - alpha^2.
    """
    a_cfg = EstimatorConfig(**{**asdict(cfg), "seed": rng.seed_from("tau-alpha", cfg.seed)})
    alpha = alpha_hat(spec, a_cfg)
    values, dprime = delta_pairs(spec, cfg.seed, cfg.replicates, cfg.d, cfg.R, cfg.threads, cfg.chunk)
    resid = values - alpha.estimate * dprime
    est, se = _mean_se(resid[:, 0] * resid[:, 1])
    est -= alpha.std_error**2

    s_cfg = EstimatorConfig(**{**asdict(cfg), "seed": rng.seed_from("tau-sigma", cfg.seed)})
    sigma2 = sigma2_hat(spec, s_cfg)
    ident = sigma2.estimate - (alpha.estimate**2 - alpha.std_error**2)
    ident_se = joint_se(sigma2.std_error, 2.0 * abs(alpha.estimate) * alpha.std_error)
    js = joint_se(se, ident_se)
    checks = {
        "alpha": alpha.estimate,
        "alpha_se": alpha.std_error,
        "sigma2": sigma2.estimate,
        "sigma2_se": sigma2.std_error,
        "identity": ident,
        "identity_se": ident_se,
        "identity_agrees": bool(abs(est - ident) <= 3.0 * js) if js > 0 else bool(est == ident),
    }
    rep = EstimateReport(est, se, cfg.replicates, "tau2_paired_product", cfg.config_hash, cfg.seed,
                         format_functional(spec), cfg.d, checks)
    _warn_nonpositive(rep, "tau^2")
    return rep


# ---------------------------------------------------------------- variance curves


@dataclass
class VarianceCurve:
    n: list[float]
    value: list[float]
    se: list[float]
    replicates: int
    process: str

    def rows(self):
        return list(zip(self.n, self.value, self.se))


def sample_functional(spec: FunctionalSpec, seed: int, replicates, geometry, process: str = "poisson") -> np.ndarray:
    """H on independent windows (Poisson or the coupled binomial with m = n), one per replicate id."""
    reps = np.asarray(replicates, dtype=np.int64)
    if process == "poisson":
        pts, _, group = window_batch(seed, reps, geometry)
    elif process == "binomial":
        pts, group = binomial_batch(seed, reps, geometry)
    else:
        raise ValueError(f"unknown process {process!r}")
    return evaluate_many(spec, pts, group, len(reps))


def jackknife_variance_se(x: np.ndarray) -> float:
    """Jackknife standard error of the unbiased sample variance."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    s1, s2 = x.sum(), (x * x).sum()
    loo_mean = (s1 - x) / (n - 1)
    loo_var = ((s2 - x * x) - (n - 1) * loo_mean**2) / (n - 2)
    return float(math.sqrt((n - 1) / n * np.sum((loo_var - loo_var.mean()) ** 2)))


def direct_variance(spec: FunctionalSpec, process: str, n_grid, replicates: int, seed: int, d: int = 2,
                    threads: int = 1, chunk: int = 500) -> VarianceCurve:
    """Var(H(X_n)) / n over independent replicates, per n."""
    if replicates < 30:
        raise ValueError("direct_variance needs at least 30 replicates")
    vals, ses = [], []
    for n in n_grid:
        geom = Cubic(float(n), d)
        h = concat_chunks(lambda r: sample_functional(spec, seed, r, geom, process), np.arange(replicates),
                          threads, chunk)
        vals.append(float(np.var(h, ddof=1) / n))
        ses.append(jackknife_variance_se(h) / n)
    return VarianceCurve([float(n) for n in n_grid], vals, ses, replicates, process)


# ---------------------------------------------------------------- covariance decay


def _inner_draws(n_inner: int, offset: int) -> tuple[tuple[int, int], ...]:
    return tuple((offset + 2 * i, offset + 2 * i + 1) for i in range(n_inner))


def covariance_curve(spec: FunctionalSpec, cfg: EstimatorConfig, lags, inner: int = 4) -> list[tuple]:
    """Cov(F_0, F_z) for each lag z from inner-averaged conditional means on a shared realization.

    F_0 and F_z use disjoint inner streams, so for z != 0 the product of the
    two inner means is unbiased for E[F_0 F_z].  Lag 0 uses the paired product
    (the plain square of an inner mean would be biased by inner variance / inner).
    Returns ``(lag, cov, se, extra)`` with the naive lag-0 inner-square in extra.
    """
    lags = [tuple(int(v) for v in z) for z in lags]
    if not lags:
        raise ValueError("lags must be nonempty")
    reps = np.arange(cfg.replicates)
    origin = _origin(cfg.d)

    def fhat(z, offset):
        draws = _inner_draws(inner, offset)
        return concat_chunks(
            lambda r: sample_delta_batch(spec, cfg.seed, r, z, cfg.R, draws).values.mean(axis=1),
            reps, cfg.threads, cfg.chunk)

    f0 = fhat(origin, 2)
    out = []
    for z in lags:
        if z == origin:
            values, _ = delta_pairs(spec, cfg.seed, cfg.replicates, cfg.d, cfg.R, cfg.threads, cfg.chunk)
            prod = values[:, 0] * values[:, 1]
            m0 = float(np.mean(values[:, 0]))
            est, se = _mean_se(prod)
            naive = float(np.mean(f0 * f0))
            out.append((z, est - m0 * m0, se, {"inner_square": naive, "inner_bias_bound": float(np.var(f0))}))
            continue
        fz = fhat(z, 2 + 2 * inner)
        prod = f0 * fz
        est, se = _mean_se(prod)
        cov = est - float(np.mean(f0)) * float(np.mean(fz))
        out.append((z, cov, se, {}))
    return out


# ---------------------------------------------------------------- normality


def ks_normal(samples) -> float:
    """Kolmogorov-Smirnov distance between studentized samples and N(0, 1)."""
    x = np.asarray(samples, dtype=float)
    if len(x) < 100:
        raise ValueError("ks_normal needs at least 100 samples")
    sd = float(np.std(x, ddof=1))
    if sd == 0 or not np.isfinite(sd):
        raise DegenerateSample("sample standard deviation is zero")
    return float(stats.kstest((x - x.mean()) / sd, "norm").statistic)

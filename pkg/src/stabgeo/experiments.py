"""End-to-end checks of the LIL, the CLT and the strong invariance principle at desk scale.

A *path* is one realization of the Poisson process observed on a growing
family of windows.  Because windows are nested, H along a whole grid is
computed from the points of the largest window and their entry times (the
window size at which a point appears): Count, Euler and Components have
exact incremental formulas, the k-NN length is re-evaluated per window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import minimum_spanning_tree

from . import rng
from .errors import DegenerateSample
from .estimators import (
    EstimatorConfig,
    alpha_hat,
    jackknife_variance_se,
    ks_normal,
    sample_functional,
    sigma2_hat,
    tau2_hat,
)
from .functionals import (
    Components,
    Count,
    Euler,
    FunctionalSpec,
    _check_cap,
    _close_pairs,
    evaluate,
    evaluate_many,
    iter_cliques,
)
from .parallel import map_chunks
from .point_process import Cubic, ProcessKey, Stretched, binomial_batch, coupled_binomial, poisson_window

POISSON = "poisson"
BINOMIAL = "binomial"


def geometric_grid(n0: float = 20, n_max: float = 1e5, ratio: float = 1.3) -> list[int]:
    """n_k = ceil(n0 * ratio^k) up to n_max."""
    out, k = [], 0
    while True:
        n = math.ceil(n0 * ratio**k - 1e-9)
        if n > n_max:
            return out
        if not out or n > out[-1]:
            out.append(n)
        k += 1


def _family(geometry, n: float):
    return geometry.resized(float(n))


# ---------------------------------------------------------------- paths


def _msf_weights(n_vertices: int, edges: np.ndarray, entry: np.ndarray) -> np.ndarray:
    """Entry times of the edges of a minimum spanning forest weighted by edge entry time."""
    if len(edges) == 0:
        return np.zeros(0)
    w = np.maximum(entry[edges[:, 0]], entry[edges[:, 1]])
    # shift so no weight is 0 (csgraph treats 0 as a missing edge)
    lo = float(w.min())
    g = coo_matrix((w - lo + 1.0, (edges[:, 0], edges[:, 1])), shape=(n_vertices, n_vertices)).tocsr()
    forest = minimum_spanning_tree(g)
    return np.sort(forest.data + lo - 1.0)


def path_values(spec: FunctionalSpec, points: np.ndarray, entry: np.ndarray, n_grid) -> np.ndarray:
    """H(points with entry <= n) for each n in the grid."""
    grid = np.asarray(n_grid, dtype=float)
    order_entry = np.sort(entry)
    n_pts = np.searchsorted(order_entry, grid, side="right").astype(float)
    if isinstance(spec, Count):
        return n_pts
    if isinstance(spec, Euler):
        _check_cap(spec, points.shape[1])
        edges = _close_pairs(points, spec.r)
        out = np.zeros(len(grid))
        for k, level in enumerate(iter_cliques(len(points), edges, spec.cap)):
            t = np.sort(entry[level].max(axis=1))
            out += (-1) ** k * np.searchsorted(t, grid, side="right")
        return out
    if isinstance(spec, Components):
        edges = _close_pairs(points, spec.r)
        merges = _msf_weights(len(points), edges, entry)
        return n_pts - np.searchsorted(merges, grid, side="right")
    return np.array([evaluate(spec, points[entry <= n]) for n in grid])


def poisson_path(spec: FunctionalSpec, key: ProcessKey, geometry, n_grid) -> np.ndarray:
    big = poisson_window(key, _family(geometry, max(n_grid)))
    return path_values(spec, big.points, _family(geometry, 1.0).entry_time(big.points), n_grid)


def binomial_path(spec: FunctionalSpec, key: ProcessKey, geometry, n_grid) -> np.ndarray:
    return np.array([
        evaluate(spec, coupled_binomial(key, _family(geometry, n), int(round(n)))) for n in n_grid
    ])


def sample_paths(spec, process, seed, replicates, geometry, n_grid, threads=1, chunk=8) -> np.ndarray:
    """Array (len(replicates), len(n_grid)) of H along nested windows, one key per replicate."""
    fn = poisson_path if process == POISSON else binomial_path

    def work(reps):
        return np.array([fn(spec, ProcessKey(seed, 0, int(r)), geometry, n_grid) for r in reps]).reshape(
            len(reps), len(n_grid))

    parts = map_chunks(work, np.asarray(replicates), threads, chunk)
    return np.vstack(parts) if parts else np.zeros((0, len(n_grid)))


# ---------------------------------------------------------------- centering


@dataclass
class MeanCurve:
    n: list[float]
    mean: list[float]
    se: list[float]
    replicates: int


def mean_curve(spec: FunctionalSpec, process: str, n_grid, pool_replicates: int, seed: int,
               geometry=None, threads: int = 1) -> MeanCurve:
    """Replicate means of H per n from a pool whose seed must differ from the path seeds."""
    geometry = geometry or Cubic(1.0, 2)
    if process == POISSON:
        vals = sample_paths(spec, POISSON, seed, np.arange(pool_replicates), geometry, n_grid, threads)
    else:
        vals = np.column_stack([
            sample_functional(spec, seed, np.arange(pool_replicates), _family(geometry, n), BINOMIAL)
            for n in n_grid
        ])
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(pool_replicates)
    return MeanCurve([float(n) for n in n_grid], mean.tolist(), se.tolist(), pool_replicates)


# ---------------------------------------------------------------- LIL


def lil_normalizer(n) -> np.ndarray:
    n = np.asarray(n, dtype=float)
    if np.any(n < 3):
        raise ValueError("the LIL normalization needs n >= 3 (log log n > 0)")
    return np.sqrt(2.0 * n * np.log(np.log(n)))


def lil_statistic(centered, n, scale: float = 1.0) -> np.ndarray:
    """R_n = centered / (scale * sqrt(2 n log log n))."""
    return np.asarray(centered, dtype=float) / (scale * lil_normalizer(n))


@dataclass
class LilPath:
    n: list[float]
    centered: list[float]
    R: list[float]
    replicate_id: int


@dataclass
class LilResult:
    paths: list[LilPath]
    tail_max: list[float]
    sigma: float
    sigma_se: float
    envelope: float
    fixed_envelope: float
    fraction_within: float
    fraction_within_fixed: float
    n0: float
    mean: MeanCurve
    extra: dict = field(default_factory=dict)


def calibrate_envelope(n_grid, n0: float, quantile: float = 0.99, sims: int = 4000, seed: int = 0) -> float:
    """Quantile of max_{n >= n0} |W_n| / sqrt(2 n log log n) for a standard Brownian motion on the grid."""
    grid = np.asarray(n_grid, dtype=float)
    gen = np.random.default_rng(rng.seed_from("envelope", seed))
    steps = np.sqrt(np.diff(np.concatenate([[0.0], grid])))
    w = np.cumsum(gen.standard_normal((sims, len(grid))) * steps, axis=1)
    tail = grid >= n0
    stat = np.max(np.abs(w[:, tail]) / lil_normalizer(grid[tail]), axis=1)
    return float(np.quantile(stat, quantile))


def lil_experiment(spec: FunctionalSpec, process: str, n_grid, paths: int, seed: int, geometry=None,
                   pool_replicates: int = 500, n0: float | None = None, sigma: float | None = None,
                   sigma_se: float = 0.0, estimator_replicates: int = 20_000, fixed_envelope: float = 1.3,
                   quantile: float = 0.99, threads: int = 1) -> LilResult:
    """Track R_n along nested windows for several independent paths.

    The limiting constant is sigma (Poisson) or tau (binomial); for a stretched
    geometry the same estimators give the one-dimensional constant.
    """
    grid = np.asarray(n_grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("n_grid must be increasing")
    if grid.max() < 100:
        raise ValueError("max(n_grid) must be >= 100")
    if paths < 20:
        raise ValueError("at least 20 paths are required")
    geometry = (geometry or Cubic(1.0, 2)).resized(1.0)
    n0 = float(n0 if n0 is not None else 100.0)
    pool = mean_curve(spec, process, grid, pool_replicates, rng.seed_from("lil-pool", seed), geometry, threads)
    if sigma is None:
        if isinstance(spec, Count):
            sigma, sigma_se = (math.sqrt(geometry.volume) if process == POISSON else 0.0), 0.0
        elif isinstance(geometry, Stretched):
            # one-dimensional constant nu^2 from the pool variance at the largest n
            var = (np.asarray(pool.se) ** 2 * pool_replicates)[-1]
            nu2 = var / grid[-1]
            sigma, sigma_se = math.sqrt(nu2), math.sqrt(nu2) / math.sqrt(2.0 * (pool_replicates - 1))
        else:
            cfg = EstimatorConfig(replicates=estimator_replicates, seed=rng.seed_from("lil-sigma", seed),
                                  d=geometry.d, threads=threads)
            rep = sigma2_hat(spec, cfg) if process == POISSON else tau2_hat(spec, cfg)
            sigma = math.sqrt(max(rep.estimate, 0.0))
            sigma_se = rep.std_error / (2 * sigma) if sigma > 0 else float("inf")
    H = sample_paths(spec, process, seed, np.arange(paths), geometry, grid, threads)
    centered = H - np.asarray(pool.mean)
    R = lil_statistic(centered, grid)
    tail = grid >= n0
    tail_max = np.max(np.abs(R[:, tail]), axis=1)
    envelope = calibrate_envelope(grid, n0, quantile, seed=seed)
    if sigma > 0:
        within = float(np.mean(tail_max <= envelope * sigma))
        within_fixed = float(np.mean(tail_max <= fixed_envelope * sigma))
    else:
        within = within_fixed = float(np.mean(tail_max <= 1e-12))
    lil_paths = [LilPath(grid.tolist(), centered[i].tolist(), R[i].tolist(), i) for i in range(paths)]
    return LilResult(lil_paths, tail_max.tolist(), float(sigma), float(sigma_se), envelope, fixed_envelope,
                     within, within_fixed, n0, pool,
                     {"median_tail_max_over_sigma": float(np.median(tail_max) / sigma) if sigma > 0 else 0.0})


# ---------------------------------------------------------------- CLT


@dataclass
class CltResult:
    ks_statistic: float
    sigma_used: float
    ks_studentized: float
    mean_used: float
    replicates: int


def clt_experiment(spec: FunctionalSpec, process: str, n: float, replicates: int, seed: int, d: int = 2,
                   pool_replicates: int | None = None, v_hat: float | None = None,
                   estimator_replicates: int = 20_000, threads: int = 1) -> CltResult:
    """KS distance of (H - E_hat H) / sqrt(n v_hat) to N(0, 1)."""
    if replicates < 500:
        raise ValueError("clt_experiment needs at least 500 replicates")
    geom = Cubic(float(n), d)
    h = sample_functional(spec, seed, np.arange(replicates), geom, process)
    if float(np.std(h)) == 0.0:
        raise DegenerateSample(f"H is constant over {replicates} {process} replicates")
    pool_seed = rng.seed_from("clt-pool", seed)
    mean = float(np.mean(sample_functional(spec, pool_seed, np.arange(pool_replicates or replicates), geom, process)))
    if v_hat is None:
        cfg = EstimatorConfig(replicates=estimator_replicates, seed=rng.seed_from("clt-sigma", seed), d=d,
                              threads=threads)
        if isinstance(spec, Count) and process == POISSON:
            v_hat = 1.0
        else:
            v_hat = (sigma2_hat(spec, cfg) if process == POISSON else tau2_hat(spec, cfg)).estimate
    if v_hat <= 0:
        raise DegenerateSample(f"limit variance estimate {v_hat:g} is not positive")
    z = (h - mean) / math.sqrt(n * v_hat)
    ks = float(stats.kstest(z, "norm").statistic)
    return CltResult(ks, math.sqrt(v_hat), ks_normal(h), mean, replicates)


# ---------------------------------------------------------------- SIP


@dataclass
class SipReport:
    n_var: list[float]
    var: list[float]
    var_se: list[float]
    slope: float
    slope_se: float
    intercept: float
    r_squared: float
    block_len: float
    corr: np.ndarray
    corr_se: np.ndarray
    block_ks: list[float]
    defect_n: list[float] = field(default_factory=list)
    raw_defect: list[float] = field(default_factory=list)
    defect: list[float] = field(default_factory=list)
    defect_se: list[float] = field(default_factory=list)
    defect_exponent: float = float("nan")
    defect_r_squared: float = float("nan")
    abs_defect: list[float] = field(default_factory=list)
    abs_defect_exponent: float = float("nan")
    abs_defect_r_squared: float = float("nan")
    alpha_used: float = float("nan")

    def off_adjacent_z(self) -> np.ndarray:
        """|corr| / se for block pairs at distance >= 2."""
        i, j = np.triu_indices(len(self.corr), 2)
        return np.abs(self.corr[i, j]) / self.corr_se[i, j]

    def all_offdiag_z(self) -> np.ndarray:
        i, j = np.triu_indices(len(self.corr), 1)
        return np.abs(self.corr[i, j]) / self.corr_se[i, j]


def _slope_fit(n: np.ndarray, v: np.ndarray):
    fit = stats.linregress(n, v)
    return fit.slope, fit.intercept, fit.rvalue**2


def _jackknife_slope(n: np.ndarray, H: np.ndarray) -> float:
    P = H.shape[0]
    s1 = H.sum(axis=0)
    s2 = (H * H).sum(axis=0)
    slopes = np.empty(P)
    for i in range(P):
        m = (s1 - H[i]) / (P - 1)
        v = ((s2 - H[i] ** 2) - (P - 1) * m * m) / (P - 2)
        slopes[i] = stats.linregress(n, v).slope
    return float(math.sqrt((P - 1) / P * np.sum((slopes - slopes.mean()) ** 2)))


def _loglog_fit(n: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    keep = y > 0
    if keep.sum() < 3:
        return float("nan"), float("nan")
    fit = stats.linregress(np.log(n[keep]), np.log(y[keep]))
    return float(fit.slope), float(fit.rvalue**2)


def sip_experiment(spec: FunctionalSpec, base=(1.0,), n_max: float = 5000, block_len: float = 500, paths: int = 1000,
                   seed: int = 0, n_var_points: int = 10, defect_spec: FunctionalSpec | None = None,
                   defect_grid=None, defect_replicates: int = 400, alpha: float | None = None,
                   threads: int = 1) -> SipReport:
    """Observable consequences of the strong invariance principle on D x [0, n].

    Variance linearity, block-increment correlations and per-block normality
    come from Poisson paths.  The Poissonization defect
    E[H(U_{n, N_n}) - H(U_{n, n})] is measured for ``defect_spec`` (raw, and
    centered by alpha (N_n - n)) when given.
    """
    base = tuple(float(b) for b in base)
    if len(base) < 1:
        raise ValueError("the stretched domain needs d >= 2")
    if n_max < 10 * block_len:
        raise ValueError("n_max must be at least 10 * block_len")
    geom = Stretched(base, 1.0)
    n_blocks = int(n_max // block_len)
    block_edges = block_len * np.arange(n_blocks + 1)
    n_var = np.linspace(n_max / 10.0, n_max, n_var_points)
    grid = np.unique(np.concatenate([block_edges[1:], n_var]))
    H = sample_paths(spec, POISSON, seed, np.arange(paths), geom, grid, threads)
    at = {float(g): H[:, i] for i, g in enumerate(grid)}

    Hv = np.column_stack([at[float(n)] for n in n_var])
    var = Hv.var(axis=0, ddof=1)
    var_se = np.array([jackknife_variance_se(Hv[:, i]) for i in range(Hv.shape[1])])
    slope, intercept, r2 = _slope_fit(n_var, var)
    slope_se = _jackknife_slope(n_var, Hv)

    cum = np.column_stack([np.zeros(paths)] + [at[float(e)] for e in block_edges[1:]])
    inc = np.diff(cum, axis=1)
    inc_c = inc - inc.mean(axis=0)
    corr = np.corrcoef(inc_c, rowvar=False)
    corr_se = np.sqrt(np.maximum(1.0 - corr**2, 0.0) / (paths - 2))
    block_ks = [ks_normal(inc[:, b]) for b in range(n_blocks)]
    report = SipReport(n_var.tolist(), var.tolist(), var_se.tolist(), float(slope), slope_se, float(intercept),
                       float(r2), float(block_len), corr, corr_se, block_ks)
    if defect_spec is not None:
        _poissonization_defect(report, defect_spec, base, defect_grid, defect_replicates, seed, alpha, threads)
    return report


def _poissonization_defect(report: SipReport, spec, base, grid, replicates, seed, alpha, threads):
    """Centered defect mean(D - alpha (N_n - n)) with D = H(U_{n,N_n}) - H(U_{n,n}).

    E[N_n - n] = 0, so centering keeps the expectation and removes the
    dominant first-order noise.  alpha defaults to the pooled regression
    coefficient of D on N_n - n.
    """
    grid = np.asarray(grid if grid is not None else [50, 100, 200, 400, 800, 1600, 3200], dtype=float)
    dseed = rng.seed_from("defect", seed)
    reps = np.arange(replicates)
    diffs, devs = [], []
    for n in grid:
        geom = Stretched(base, float(n))
        m = int(round(geom.volume))
        h_pois = sample_functional(spec, dseed, reps, geom, POISSON)
        counts = sample_functional(Count(), dseed, reps, geom, POISSON)
        pts, grp = binomial_batch(dseed, reps, geom, m)
        h_bin = evaluate_many(spec, pts, grp, replicates)
        diffs.append(h_pois - h_bin)
        devs.append(counts - m)
    D, C = np.array(diffs), np.array(devs)
    if alpha is None:
        alpha = float(np.sum(D * C) / np.sum(C * C))
    centered = D - alpha * C
    defect = centered.mean(axis=1)
    report.defect_n = grid.tolist()
    report.raw_defect = D.mean(axis=1).tolist()
    report.defect = defect.tolist()
    report.defect_se = (centered.std(axis=1, ddof=1) / math.sqrt(replicates)).tolist()
    report.defect_exponent, report.defect_r_squared = _loglog_fit(grid, np.abs(defect))
    report.abs_defect = np.mean(np.abs(centered), axis=1).tolist()
    report.abs_defect_exponent, report.abs_defect_r_squared = _loglog_fit(grid, np.asarray(report.abs_defect))
    report.alpha_used = float(alpha)

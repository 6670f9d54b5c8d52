"""Radii of stabilization and the cube-resampling differences Delta(z, .).

Delta samples are produced in batches.  For a cube z and truncation radius R
every draw shares the past (cubes y <= z in lexicographic order, taken from
stream 0) and gets its own future cubes and its own replacement of Q_z, each
addressed by a stream id.  Draw ``(0, 1)`` is the canonical pair (P, P').
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import rng
from .errors import ConvergenceNotReached, DegenerateFit, KnnUndefined, NotCertifiable
from .functionals import (
    Components,
    Count,
    Euler,
    FunctionalSpec,
    KnnLength,
    add_one_cost,
    evaluate,
    evaluate_many,
)
from .point_process import (
    STREAM_P,
    STREAM_P_PRIME,
    Ball,
    PointCloud,
    ProcessKey,
    poisson_window,
    resampled_window,
    sample_cubes,
)

HARD_THRESHOLD = "HardThreshold"
TRIANGLE = "TriangleCriterion"
EMPIRICAL = "EmpiricalFalsification"

DEFAULT_SCHEDULE = tuple(0.5 * 2.0**i for i in range(9))
# canonical draw (P, P') and one independent inner draw for the paired product
PAIR_DRAWS = ((STREAM_P, STREAM_P_PRIME), (2, 3))
# annulus configurations for falsification live far away from the estimator streams
STREAM_FALSIFY = 1 << 20


@dataclass(frozen=True)
class RadiusCertificate:
    radius: float
    kind: str
    trials: int = 0
    boundary: bool = False

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("certificate radius must be positive")


@dataclass(frozen=True)
class DeltaSample:
    value: float
    z: tuple[int, ...]
    truncation_radius: float
    kind: str = "Stabilized"  # or "FiniteWindow(n)"


def certified_radius(spec: FunctionalSpec) -> RadiusCertificate | None:
    """Deterministic radius of stabilization, when one exists.

    Euler(r) stabilizes within r.  Count has constant add-one cost so any
    positive radius works.  Components and KnnLength have random radii
    (a chain of points can join two neighbours of x from arbitrarily far).
    """
    if isinstance(spec, Count):
        return RadiusCertificate(np.finfo(float).tiny, HARD_THRESHOLD)
    if isinstance(spec, Euler):
        return RadiusCertificate(spec.r, HARD_THRESHOLD)
    return None


# ---------------------------------------------------------------- triangle criterion


def _hexagon_triangles(origin: np.ndarray, edge: float) -> np.ndarray:
    """Six equilateral triangles of the given edge tiling the hexagon around origin, shape (6, 3, 2)."""
    tris = []
    for j in range(6):
        a = math.pi / 2 + j * math.pi / 3
        v1 = origin + edge * np.array([math.cos(a - math.pi / 6), math.sin(a - math.pi / 6)])
        v2 = origin + edge * np.array([math.cos(a + math.pi / 6), math.sin(a + math.pi / 6)])
        tris.append([origin, v1, v2])
    return np.array(tris)


def points_in_triangle(pts: np.ndarray, tri: np.ndarray) -> np.ndarray:
    a, b, c = tri
    def side(p, q):
        return (q[0] - p[0]) * (pts[:, 1] - p[1]) - (q[1] - p[1]) * (pts[:, 0] - p[0])
    s1, s2, s3 = side(a, b), side(b, c), side(c, a)
    return ((s1 >= 0) & (s2 >= 0) & (s3 >= 0)) | ((s1 <= 0) & (s2 <= 0) & (s3 <= 0))


def knn_triangle_radius(P: PointCloud, k: int, origin=(0.0, 0.0), r0: float = 0.25) -> RadiusCertificate:
    """Smallest grid radius r = r0 * 2^i whose six triangles of edge r/4 each hold k + 1 points.

    The interior certificate is r itself.  When B(origin, r) leaves the
    attached window the conservative multiple 9r is returned and flagged.
    """
    pts = P.points
    if pts.shape[1] != 2:
        raise ValueError("triangle criterion is implemented for d = 2")
    origin = np.asarray(origin, dtype=float)
    if len(pts) < 6 * (k + 1):
        raise NotCertifiable(f"{len(pts)} points cannot fill 6 triangles with {k + 1} each")
    box = getattr(P.geometry, "box", None)
    if box is not None:
        r_max = float(np.linalg.norm(np.subtract(box.hi, box.lo)))
    else:
        r_max = 2.0 * float(np.max(np.linalg.norm(pts - origin, axis=1)))
    r = r0
    while r <= r_max:
        tris = _hexagon_triangles(origin, r / 4.0)
        if all(points_in_triangle(pts, t).sum() >= k + 1 for t in tris):
            inside = box is None or box.boundary_distance(origin.reshape(1, -1))[0] >= r
            if inside:
                return RadiusCertificate(r, TRIANGLE)
            return RadiusCertificate(9.0 * r, TRIANGLE, boundary=True)
        r *= 2.0
    raise NotCertifiable("no grid radius up to the window size satisfies the triangle criterion")


# ---------------------------------------------------------------- falsification


def _annulus_configs(key: ProcessKey, origin: np.ndarray, r: float, trials: int) -> list[np.ndarray]:
    ball = Ball(tuple(origin), 3.0 * r)
    cubes = ball.cube_indices()
    m = len(cubes)
    draw = sample_cubes(
        key.master_seed,
        np.repeat(STREAM_FALSIFY + np.arange(trials), m),
        key.replicate_id,
        np.tile(cubes, (trials, 1)),
    )
    dist = np.linalg.norm(draw.points - origin, axis=1)
    keep = (dist > r) & (dist <= 3.0 * r)
    trial = draw.owner // m
    return [draw.points[keep & (trial == t)] for t in range(trials)]


def empirical_radius(
    spec: FunctionalSpec,
    key: ProcessKey,
    origin=(0.0, 0.0),
    trials: int = 20,
    r_schedule=DEFAULT_SCHEDULE,
) -> RadiusCertificate:
    """First radius in the schedule for which no annulus configuration changes the add-one cost.

    Configurations A are unit-intensity Poisson samples on B(origin, 3r) minus
    B(origin, r) (plus the empty configuration).  Evidence is one-sided.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    origin = np.asarray(origin, dtype=float)
    d = len(origin)
    for r in r_schedule:
        base = poisson_window_ball(key, origin, r)
        configs = [np.zeros((0, d))] + _annulus_configs(key, origin, r, trials)
        try:
            costs = _costs_with(spec, base, configs, origin)
        except KnnUndefined:
            # too few points near the origin for the k-NN graph: not certifiable at this r
            continue
        if np.all(costs == costs[0]) or (
            isinstance(spec, KnnLength) and np.allclose(costs, costs[0], rtol=1e-9, atol=1e-9)
        ):
            return RadiusCertificate(float(r), EMPIRICAL, trials)
    raise NotCertifiable("schedule exhausted without a stable add-one cost")


def poisson_window_ball(key: ProcessKey, origin: np.ndarray, r: float) -> np.ndarray:
    ball = Ball(tuple(np.asarray(origin, dtype=float)), float(r))
    return poisson_window(key, ball).points


def _costs_with(spec: FunctionalSpec, base: np.ndarray, configs: list[np.ndarray], x: np.ndarray) -> np.ndarray:
    """add_one_cost(spec, base + A, x) for every A in configs, evaluated in one batch."""
    if isinstance(spec, Count):
        return np.ones(len(configs))
    if isinstance(spec, Euler):
        # the local formula only sees B(x, r)
        return np.array([add_one_cost(spec, np.vstack([base, a]), x) for a in configs])
    blocks, groups = [], []
    for i, a in enumerate(configs):
        cloud = np.vstack([base, a])
        blocks += [cloud, cloud, x.reshape(1, -1)]
        groups += [np.full(len(cloud), 2 * i), np.full(len(cloud), 2 * i + 1), [2 * i + 1]]
    h = evaluate_many(spec, np.vstack(blocks), np.concatenate(groups), 2 * len(configs))
    return h[1::2] - h[0::2]


# ---------------------------------------------------------------- Delta samples


@dataclass
class DeltaBatch:
    """Delta values for a batch of replicates at one cube z.

    ``values[i, j]`` is draw j of replicate i; ``q_count`` is P(Q_z) (stream 0)
    and ``repl_count[i, j]`` the size of draw j's replacement of Q_z.
    """

    values: np.ndarray
    q_count: np.ndarray
    repl_count: np.ndarray
    radius: np.ndarray
    z: tuple[int, ...]
    replicates: np.ndarray = field(repr=False)

    @property
    def delta_prime(self) -> np.ndarray:
        return self.q_count[:, None] - self.repl_count


def _lex_leq(cubes: np.ndarray, z: np.ndarray) -> np.ndarray:
    out = np.zeros(len(cubes), dtype=bool)
    undecided = np.ones(len(cubes), dtype=bool)
    for c in range(cubes.shape[1]):
        out |= undecided & (cubes[:, c] < z[c])
        undecided &= cubes[:, c] == z[c]
    return out | undecided


def _delta_fixed_radius(spec, seed, reps, z, R, draws):
    z = np.asarray(z, dtype=np.int64)
    d = len(z)
    reps = np.asarray(reps, dtype=np.int64)
    nrep, ndraw = len(reps), len(draws)
    cubes = Ball(tuple(z.astype(float)), R).cube_indices()
    is_z = np.all(cubes == z, axis=1)
    past = _lex_leq(cubes, z) & ~is_z
    future = ~_lex_leq(cubes, z)

    def draw_on(cube_rows, streams):
        """Points of the given cubes for every replicate; returns (points, replicate index)."""
        cs = cubes[cube_rows]
        m = len(cs)
        out = sample_cubes(seed, streams, np.repeat(reps, m), np.tile(cs, (nrep, 1)))
        return out.points, out.owner // max(m, 1)

    past_pts, past_rep = draw_on(past, STREAM_P)
    qz_pts, qz_rep = draw_on(is_z, STREAM_P)
    q_count = np.bincount(qz_rep, minlength=nrep)
    n_groups = nrep * ndraw * 2
    blocks, groups = [], []
    repl_count = np.zeros((nrep, ndraw), dtype=np.int64)
    for j, (fs, rs) in enumerate(draws):
        fut_pts, fut_rep = draw_on(future, fs)
        rep_pts, rep_rep = draw_on(is_z, rs)
        repl_count[:, j] = np.bincount(rep_rep, minlength=nrep)
        g_orig = (np.arange(nrep) * ndraw + j) * 2
        for pts, owner in ((past_pts, past_rep), (fut_pts, fut_rep)):
            blocks += [pts, pts]
            groups += [g_orig[owner], g_orig[owner] + 1]
        blocks += [qz_pts, rep_pts]
        groups += [g_orig[qz_rep], g_orig[rep_rep] + 1]
    pts = np.vstack([b.reshape(-1, d) for b in blocks])
    grp = np.concatenate(groups)
    inside = np.linalg.norm(pts - z, axis=1) <= R
    h = evaluate_many(spec, pts[inside], grp[inside], n_groups).reshape(nrep, ndraw, 2)
    return h[:, :, 0] - h[:, :, 1], q_count, repl_count


def default_radius(spec: FunctionalSpec, d: int) -> float:
    """Truncation radius that makes Delta(z, inf) exact for hard-threshold functionals."""
    cert = certified_radius(spec)
    base = math.sqrt(d) / 2.0
    if cert is not None:
        return (0.0 if isinstance(spec, Count) else cert.radius) + base + 1e-9
    return 2.0 + base


def _same(a: np.ndarray, b: np.ndarray, spec) -> np.ndarray:
    if isinstance(spec, KnnLength):
        return np.abs(a - b) <= 1e-9 * np.maximum(1.0, np.abs(a))
    return a == b


def sample_delta_batch(
    spec: FunctionalSpec,
    seed: int,
    replicates,
    z=(0, 0),
    R: float | None = None,
    draws=PAIR_DRAWS,
    max_doublings: int = 5,
) -> DeltaBatch:
    """Delta(z, inf) for many replicates and draws.

    Hard-threshold functionals use R >= S* + sqrt(d)/2 directly.  Otherwise R
    doubles until every draw of a replicate is unchanged by one more doubling.
    """
    z = tuple(int(v) for v in z)
    d = len(z)
    reps = np.asarray(replicates, dtype=np.int64)
    cert = certified_radius(spec)
    R0 = default_radius(spec, d) if R is None else float(R)
    if cert is not None:
        if R0 < default_radius(spec, d) - 1e-9:
            raise ValueError("R below the certified stabilization range")
        vals, qc, rc = _delta_fixed_radius(spec, seed, reps, z, R0, draws)
        return DeltaBatch(vals, qc, rc, np.full(len(reps), R0), z, reps)
    vals, qc, rc = _delta_fixed_radius(spec, seed, reps, z, R0, draws)
    radius = np.full(len(reps), R0)
    active = np.arange(len(reps))
    R = R0
    for _ in range(max_doublings):
        R *= 2.0
        nxt, _, _ = _delta_fixed_radius(spec, seed, reps[active], z, R, draws)
        stable = np.all(_same(vals[active], nxt, spec), axis=1)
        vals[active] = nxt
        radius[active[~stable]] = R
        active = active[~stable]
        if active.size == 0:
            return DeltaBatch(vals, qc, rc, radius, z, reps)
    raise ConvergenceNotReached(
        f"{active.size} replicate(s) still changing at truncation radius {R:g}"
    )


def sample_delta_pair(spec: FunctionalSpec, key: ProcessKey, z=(0, 0), R: float | None = None):
    """Two Delta(z, inf) draws sharing the past of z (see module docstring)."""
    b = sample_delta_batch(spec, key.master_seed, [key.replicate_id], z, R)
    return tuple(DeltaSample(float(b.values[0, j]), b.z, float(b.radius[0])) for j in range(2))


def sample_delta_prime(key: ProcessKey, z=(0, 0)) -> float:
    """P(Q_z) - P'(Q_z)."""
    zz = np.asarray(z, dtype=np.int64).reshape(1, -1)
    a = sample_cubes(key.master_seed, STREAM_P, key.replicate_id, zz)
    b = sample_cubes(key.master_seed, STREAM_P_PRIME, key.replicate_id, zz)
    return float(len(a.points) - len(b.points))


def sample_delta_window(spec: FunctionalSpec, key: ProcessKey, geometry, z) -> DeltaSample:
    """Delta(z, n) = H(P_n) - H(P''_{n,z}) on a finite window."""
    a = evaluate(spec, poisson_window(key, geometry))
    b = evaluate(spec, resampled_window(key, geometry, z, STREAM_P_PRIME))
    return DeltaSample(a - b, tuple(int(v) for v in z), math.inf, f"FiniteWindow({geometry.n:g})")


# ---------------------------------------------------------------- tail fit


def radius_tail_fit(samples) -> tuple[float, float, float]:
    """Fit log P(S > r) ~ log c1 - c2 r on the range where survival >= 10 / N.

    Returns ``(c1, c2, r_squared)``.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    n = len(x)
    if n < 50:
        raise ValueError("radius_tail_fit needs at least 50 samples")
    if x[0] == x[-1]:
        raise DegenerateFit("all radii are equal")
    values = np.unique(x)
    surv = 1.0 - np.searchsorted(x, values, side="right") / n
    keep = surv >= 10.0 / n
    if keep.sum() < 3:
        raise DegenerateFit("fewer than 3 distinct radii with survival >= 10/N")
    fit = stats.linregress(values[keep], np.log(surv[keep]))
    return float(math.exp(fit.intercept)), float(-fit.slope), float(fit.rvalue**2)


def empirical_radii(spec: FunctionalSpec, seed: int, replicates, trials: int = 20, r_schedule=DEFAULT_SCHEDULE,
                    origin=(0.0, 0.0)) -> np.ndarray:
    return np.array([
        empirical_radius(spec, ProcessKey(seed, STREAM_P, int(i)), origin, trials, r_schedule).radius
        for i in replicates
    ])


def disjoint_seed(label: str, seed: int) -> int:
    return rng.seed_from(label, seed)

"""Geometric functionals H: point count, Rips Euler characteristic, r-graph components, k-NN length.

All functionals are translation invariant.  Besides single-cloud evaluation,
:func:`evaluate_many` evaluates one functional on many independent clouds at
once (points tagged by group id), which is what the Monte Carlo layers use.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import CliqueCapExceeded, KnnUndefined
from .point_process import PointCloud

DEFAULT_CLIQUE_CAP = 16


@dataclass(frozen=True)
class Count:
    name = "count"

    def params(self) -> dict:
        return {}


@dataclass(frozen=True)
class Euler:
    r: float
    cap: int = DEFAULT_CLIQUE_CAP
    name = "euler"

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("euler.r must be > 0")
        if self.cap < 1:
            raise ValueError("euler.cap must be ≥ 1")

    def params(self) -> dict:
        return {"r": self.r, "cap": self.cap}


@dataclass(frozen=True)
class Components:
    r: float
    name = "components"

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("components.r must be > 0")

    def params(self) -> dict:
        return {"r": self.r}


@dataclass(frozen=True)
class KnnLength:
    k: int
    name = "knn"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("knn.k must be ≥ 1")

    def params(self) -> dict:
        return {"k": self.k}


FunctionalSpec = Union[Count, Euler, Components, KnnLength]

_SPEC_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\((.*)\))?\s*$")


def parse_functional(text: str) -> FunctionalSpec:
    """Parse ``count``, ``euler(r=1.0)``, ``euler(r=1, cap=20)``, ``components(r=0.8)``, ``knn(k=2)``."""
    m = _SPEC_RE.match(text)
    if not m:
        raise ValueError(f"cannot parse functional {text!r}")
    name, body = m.group(1), m.group(2)
    kwargs = {}
    if body and body.strip():
        for part in body.split(","):
            key, _, value = part.partition("=")
            if not _:
                raise ValueError(f"expected key=value in {text!r}")
            kwargs[key.strip()] = value.strip()
    try:
        if name == "count" and not kwargs:
            return Count()
        if name == "euler":
            return Euler(float(kwargs.pop("r")), int(kwargs.pop("cap", DEFAULT_CLIQUE_CAP)), **kwargs)
        if name == "components":
            return Components(float(kwargs.pop("r")), **kwargs)
        if name == "knn":
            return KnnLength(int(kwargs.pop("k")), **kwargs)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"bad parameters for {name}: {exc}") from None
    raise ValueError(f"unknown functional {text!r}")


def format_functional(spec: FunctionalSpec) -> str:
    if isinstance(spec, Count):
        return "count"
    inner = ", ".join(f"{k}={v}" for k, v in spec.params().items())
    return f"{spec.name}({inner})"


def stabilization_radius(spec: FunctionalSpec) -> float | None:
    """Deterministic S* for the hard-threshold functionals (None when stabilization is random)."""
    if isinstance(spec, Count):
        return 0.0
    if isinstance(spec, Euler):
        return spec.r
    return None


# ---------------------------------------------------------------- graphs


@dataclass(frozen=True, eq=False)
class GeometricGraph:
    n_vertices: int
    edges: np.ndarray  # (E, 2) int64, i < j, lexicographically sorted
    r: float

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in self.edges}


def _points_of(P) -> np.ndarray:
    return P.points if isinstance(P, PointCloud) else np.atleast_2d(np.asarray(P, dtype=float))


def _sorted_edges(pairs: np.ndarray) -> np.ndarray:
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.sort(pairs.astype(np.int64), axis=1)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order]


def _close_pairs(pts: np.ndarray, r: float, groups: np.ndarray | None = None) -> np.ndarray:
    """All pairs i<j with |p_i - p_j| <= r (and equal group when groups are given)."""
    n = len(pts)
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    search = pts
    if groups is not None:
        # separate the groups along axis 0 for candidate search only
        span = float(np.ptp(pts[:, 0])) + 2.0 * r + 1.0
        search = pts.copy()
        search[:, 0] += groups * span
    slack = r * 1e-9 + 1e-9 * (float(np.max(np.abs(search))) if n else 0.0)
    pairs = cKDTree(search).query_pairs(r + slack, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    diff = pts[pairs[:, 0]] - pts[pairs[:, 1]]
    keep = np.einsum("ij,ij->i", diff, diff) <= r * r
    if groups is not None:
        keep &= groups[pairs[:, 0]] == groups[pairs[:, 1]]
    return _sorted_edges(pairs[keep])


def build_geometric_graph(P, r: float, groups: np.ndarray | None = None) -> GeometricGraph:
    """Exact closed r-neighbourhood graph (edge iff distance <= r)."""
    if not r > 0:
        raise ValueError("r must be > 0")
    pts = _points_of(P)
    return GeometricGraph(len(pts), _close_pairs(pts, r, groups), r)


# ---------------------------------------------------------------- Rips complex


@dataclass(frozen=True)
class SimplexCounts:
    S: tuple[int, ...]
    complete: bool

    @property
    def euler(self) -> int:
        return sum((-1) ** k * s for k, s in enumerate(self.S))


def iter_cliques(n_vertices: int, edges: np.ndarray, cap: int) -> Iterator[np.ndarray]:
    """Yield the cliques of a graph level by level as sorted (M, k+1) index arrays.

    Level 0 (vertices) through the largest clique.  Raises CliqueCapExceeded
    when a clique with cap + 2 vertices exists.
    """
    yield np.arange(n_vertices, dtype=np.int64).reshape(-1, 1)
    if len(edges) == 0:
        return
    N = np.int64(max(n_vertices, 1))
    keys = edges[:, 0] * N + edges[:, 1]  # sorted since edges are lexsorted
    indptr = np.concatenate([[0], np.cumsum(np.bincount(edges[:, 0], minlength=n_vertices))])
    fwd = edges[:, 1]
    level = edges
    size = 2
    while len(level):
        if size > cap + 1:
            raise CliqueCapExceeded(cap)
        yield level
        last = level[:, -1]
        deg = indptr[last + 1] - indptr[last]
        rows = np.repeat(np.arange(len(level)), deg)
        if rows.size == 0:
            return
        starts = np.repeat(indptr[last], deg)
        offs = np.arange(rows.size) - np.repeat(np.cumsum(deg) - deg, deg)
        w = fwd[starts + offs]
        ok = np.ones(rows.size, dtype=bool)
        for c in range(size - 1):
            probe = level[rows, c] * N + w
            pos = np.searchsorted(keys, probe)
            pos[pos == len(keys)] = 0
            ok &= keys[pos] == probe
        rows, w = rows[ok], w[ok]
        level = np.column_stack([level[rows], w])
        size += 1


def rips_simplex_counts(P, r: float, cap: int = DEFAULT_CLIQUE_CAP) -> SimplexCounts:
    """Numbers of k-simplices of the Vietoris-Rips complex at scale r."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    g = build_geometric_graph(P, r)
    counts = [len(level) for level in iter_cliques(g.n_vertices, g.edges, cap)]
    return SimplexCounts(tuple(counts), True)


# ---------------------------------------------------------------- kNN


def knn_edges(pts: np.ndarray, k: int, groups: np.ndarray | None = None) -> np.ndarray:
    """Undirected k-NN graph edges (i < j), ties broken by point index."""
    n = len(pts)
    search = pts
    if groups is not None:
        span = float(np.ptp(pts[:, 0])) + float(np.linalg.norm(np.ptp(pts, axis=0))) + 1.0
        search = pts.copy()
        search[:, 0] += groups * span
    q = min(n, k + 3)
    _, idx = cKDTree(search).query(search, k=q)
    idx = idx.reshape(n, q)
    src = np.repeat(np.arange(n), q)
    dst = idx.ravel()
    valid = dst != src
    if groups is not None:
        valid &= groups[src] == groups[np.minimum(dst, n - 1)]
    diff = pts[src] - pts[np.minimum(dst, n - 1)]
    d2 = np.einsum("ij,ij->i", diff, diff)
    d2[~valid] = np.inf
    # per source: order by exact squared distance, then neighbour index
    order = np.lexsort((dst, d2, src))
    rank = np.empty_like(order)
    rank[order] = np.tile(np.arange(q), n)
    take = valid & (rank < k)
    pairs = np.column_stack([src[take], dst[take]])
    pairs = np.unique(np.sort(pairs, axis=1), axis=0)
    return pairs.astype(np.int64)


def _edge_lengths(pts: np.ndarray, edges: np.ndarray) -> np.ndarray:
    diff = pts[edges[:, 0]] - pts[edges[:, 1]]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def _compensated_group_sums(values: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    out = np.zeros(n_groups)
    if len(values) == 0:
        return out
    order = np.argsort(groups, kind="stable")
    g = groups[order]
    v = values[order]
    bounds = np.searchsorted(g, np.arange(n_groups + 1))
    for i in np.nonzero(np.diff(bounds))[0]:
        out[i] = math.fsum(v[bounds[i]:bounds[i + 1]])
    return out


# ---------------------------------------------------------------- evaluation


def _check_cap(spec: Euler, d: int) -> None:
    if spec.cap < d + 3:
        raise ValueError(f"clique cap {spec.cap} below d + 3 = {d + 3}")


def evaluate(spec: FunctionalSpec, P) -> float:
    """H(P) for a single finite point cloud."""
    pts = _points_of(P)
    n = len(pts)
    if isinstance(spec, Count):
        return float(n)
    if isinstance(spec, Euler):
        _check_cap(spec, pts.shape[1])
        return float(rips_simplex_counts(pts, spec.r, spec.cap).euler)
    if isinstance(spec, Components):
        if n == 0:
            return 0.0
        g = build_geometric_graph(pts, spec.r)
        return float(_n_components(n, g.edges))
    if isinstance(spec, KnnLength):
        if n <= 1:
            return 0.0
        if n <= spec.k:
            raise KnnUndefined(f"k-NN graph undefined for {n} points with k = {spec.k}")
        edges = knn_edges(pts, spec.k)
        return math.fsum(_edge_lengths(pts, edges))
    raise TypeError(f"unknown functional {spec!r}")


def _n_components(n: int, edges: np.ndarray) -> int:
    if len(edges) == 0:
        return n
    adj = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n)).tocsr()
    return connected_components(adj, directed=False)[0]


def evaluate_many(spec: FunctionalSpec, points: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    """H evaluated separately on each group of points; ``groups[i]`` in [0, n_groups)."""
    points = np.asarray(points, dtype=float)
    groups = np.asarray(groups, dtype=np.int64)
    sizes = np.bincount(groups, minlength=n_groups)
    if isinstance(spec, Count):
        return sizes.astype(float)
    d = points.shape[1] if points.ndim == 2 else 1
    if isinstance(spec, Euler):
        _check_cap(spec, d)
        edges = _close_pairs(points, spec.r, groups)
        out = np.zeros(n_groups)
        for k, level in enumerate(iter_cliques(len(points), edges, spec.cap)):
            out += (-1) ** k * np.bincount(groups[level[:, 0]], minlength=n_groups)
        return out
    if isinstance(spec, Components):
        edges = _close_pairs(points, spec.r, groups)
        n = len(points)
        if n == 0:
            return np.zeros(n_groups)
        if len(edges) == 0:
            return sizes.astype(float)
        adj = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n)).tocsr()
        _, labels = connected_components(adj, directed=False)
        roots = np.unique(labels * np.int64(n_groups) + groups)
        return np.bincount(roots % n_groups, minlength=n_groups).astype(float)
    if isinstance(spec, KnnLength):
        bad = (sizes >= 2) & (sizes <= spec.k)
        if bad.any():
            raise KnnUndefined(f"k-NN graph undefined for group {int(np.argmax(bad))}")
        big = sizes[groups] > 1
        idx = np.nonzero(big)[0]
        if idx.size == 0:
            return np.zeros(n_groups)
        edges = knn_edges(points[idx], spec.k, groups[idx])
        lengths = _edge_lengths(points[idx], edges)
        return _compensated_group_sums(lengths, groups[idx][edges[:, 0]], n_groups)
    raise TypeError(f"unknown functional {spec!r}")


def add_one_cost(spec: FunctionalSpec, P, x) -> float:
    """H(P + {x}) - H(P); the Euler cost is computed locally as 1 - chi(Rips(P within r of x))."""
    pts = _points_of(P)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if len(pts) and np.any(np.all(pts == x, axis=1)):
        raise ValueError("x already belongs to P")
    if isinstance(spec, Count):
        return 1.0
    if isinstance(spec, Euler):
        _check_cap(spec, x.shape[1])
        diff = pts - x
        near = pts[np.einsum("ij,ij->i", diff, diff) <= spec.r * spec.r] if len(pts) else pts
        # new simplices are cones from x over the Rips complex of its neighbours,
        # so a neighbour clique of size cap + 1 is a global clique of size cap + 2
        try:
            link = rips_simplex_counts(near.reshape(-1, x.shape[1]), spec.r, spec.cap - 1)
        except CliqueCapExceeded:
            raise CliqueCapExceeded(spec.cap) from None
        return 1.0 - float(link.euler)
    both = np.vstack([pts.reshape(-1, x.shape[1]), x])
    return evaluate(spec, both) - evaluate(spec, pts.reshape(-1, x.shape[1]))

"""Lattice-seeded homogeneous Poisson processes, cube resampling and the binomial coupling.

One realization of a unit-intensity Poisson process on R^d is addressed by a
:class:`ProcessKey`.  Its restriction to the unit cube ``Q_z = z + [-1/2, 1/2]^d``
is a pure function of ``(master_seed, stream_id, replicate_id, z)``, so windows
of any size are assembled lazily from cubes and nested windows share points.

Each point also carries an i.i.d. uniform *label*.  Sorting a window by label
gives the canonical order used by the Poisson-binomial coupling: the first m
labels form a uniformly random m-subset, so the coupled sample is a genuine
binomial process.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Union

import numpy as np

from . import rng

# stream ids
STREAM_P = 0
STREAM_P_PRIME = 1
# top-up points for the binomial coupling live in their own stream family
STREAM_TOPUP = 0x7F000001

_DUPLICATE_SALT = 0x5EED_D0_0B1E


@dataclass(frozen=True)
class ProcessKey:
    master_seed: int
    stream_id: int = STREAM_P
    replicate_id: int = 0

    def with_stream(self, stream_id: int) -> "ProcessKey":
        return replace(self, stream_id=stream_id)


# ---------------------------------------------------------------- geometry


@dataclass(frozen=True)
class Box:
    """Axis-aligned closed box ``prod [lo_i, hi_i]``."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def volume(self) -> float:
        return math.prod(h - l for l, h in zip(self.lo, self.hi))

    def contains(self, pts: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def boundary_distance(self, pts: np.ndarray) -> np.ndarray:
        """Distance from interior points to the box boundary (negative outside)."""
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return np.min(np.minimum(pts - lo, hi - pts), axis=1)

    def cube_indices(self) -> np.ndarray:
        """All z in Z^d with Q_z meeting the box, in lexicographic order."""
        ranges = [np.arange(math.ceil(l - 0.5), math.floor(h + 0.5) + 1) for l, h in zip(self.lo, self.hi)]
        grids = np.meshgrid(*ranges, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)


@dataclass(frozen=True)
class Cubic:
    """The window W_n = [-n^{1/d}/2, n^{1/d}/2]^d."""

    n: float
    d: int = 2

    def __post_init__(self):
        if not self.n > 0:
            raise ValueError("window volume must be positive")

    @property
    def half_side(self) -> float:
        return self.n ** (1.0 / self.d) / 2.0

    @property
    def volume(self) -> float:
        return float(self.n)

    @property
    def box(self) -> Box:
        a = self.half_side
        return Box((-a,) * self.d, (a,) * self.d)

    def entry_time(self, pts: np.ndarray) -> np.ndarray:
        """Smallest window volume n at which each point lies in W_n."""
        return (2.0 * np.max(np.abs(pts), axis=1)) ** self.d

    def resized(self, n: float) -> "Cubic":
        return Cubic(n, self.d)


@dataclass(frozen=True)
class Stretched:
    """The cylinder-like window D x [0, n] with D = prod [0, base_i]."""

    base: tuple[float, ...]
    n: float

    def __post_init__(self):
        if not self.n > 0 or any(b <= 0 for b in self.base):
            raise ValueError("window volume must be positive")

    @property
    def d(self) -> int:
        return len(self.base) + 1

    @property
    def volume(self) -> float:
        return math.prod(self.base) * self.n

    @property
    def box(self) -> Box:
        return Box((0.0,) * self.d, tuple(float(b) for b in self.base) + (float(self.n),))

    def entry_time(self, pts: np.ndarray) -> np.ndarray:
        return pts[:, -1].copy()

    def resized(self, n: float) -> "Stretched":
        return Stretched(self.base, n)


@dataclass(frozen=True)
class Ball:
    center: tuple[float, ...]
    radius: float

    @property
    def d(self) -> int:
        return len(self.center)

    @property
    def volume(self) -> float:
        d = self.d
        return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * self.radius**d

    def contains(self, pts: np.ndarray) -> np.ndarray:
        diff = pts - np.asarray(self.center)
        return np.einsum("ij,ij->i", diff, diff) <= self.radius * self.radius

    def cube_indices(self) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        box = Box(tuple(c - self.radius), tuple(c + self.radius))
        zs = box.cube_indices()
        # keep cubes whose closest point to the center is within the radius
        gap = np.maximum(np.abs(zs - c) - 0.5, 0.0)
        return zs[np.einsum("ij,ij->i", gap, gap) <= self.radius * self.radius]


WindowGeometry = Union[Cubic, Stretched]
Geometry = Union[Cubic, Stretched, Ball, None]


def _contains(geometry: Geometry, pts: np.ndarray) -> np.ndarray:
    if geometry is None:
        return np.ones(len(pts), dtype=bool)
    if isinstance(geometry, Ball):
        return geometry.contains(pts)
    return geometry.box.contains(pts)


def _cube_indices(geometry) -> np.ndarray:
    if isinstance(geometry, Ball):
        return geometry.cube_indices()
    return geometry.box.cube_indices()


# ---------------------------------------------------------------- point cloud


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Finite set of distinct points in R^d, optionally tied to the geometry it was sampled on."""

    points: np.ndarray
    geometry: Geometry = None
    labels: np.ndarray | None = field(default=None)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1) if pts.size else pts.reshape(0, 1)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        if self.labels is not None:
            object.__setattr__(self, "labels", _frozen(np.asarray(self.labels, dtype=np.float64)))

    @classmethod
    def empty(cls, d: int, geometry: Geometry = None) -> "PointCloud":
        return cls(np.zeros((0, d)), geometry)

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    def restrict(self, geometry: Geometry) -> "PointCloud":
        keep = _contains(geometry, self.points)
        labels = None if self.labels is None else self.labels[keep]
        return PointCloud(self.points[keep], geometry, labels)

    def translate(self, v) -> "PointCloud":
        return PointCloud(self.points + np.asarray(v, dtype=float), None, self.labels)

    def union(self, other: "PointCloud | np.ndarray") -> "PointCloud":
        other_pts = other.points if isinstance(other, PointCloud) else np.atleast_2d(np.asarray(other, dtype=float))
        return PointCloud(np.vstack([self.points, other_pts]), None)

    def as_set(self) -> set[tuple[float, ...]]:
        return {tuple(p) for p in self.points.tolist()}

    # -- serialization

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(self.d)])
        for row in self.points.tolist():
            w.writerow([repr(v) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "PointCloud":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        if header != [f"x{i}" for i in range(len(header))]:
            raise ValueError(f"unexpected CSV header {header!r}")
        pts = np.array([[float(v) for v in r] for r in body], dtype=np.float64).reshape(-1, len(header))
        return cls(pts)

    def to_bytes(self) -> bytes:
        head = b"SGPC" + struct.pack("<BIQ", 1, self.d, len(self))
        return head + self.points.astype("<f8").tobytes(order="C")

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PointCloud":
        if blob[:4] != b"SGPC":
            raise ValueError("bad magic, expected SGPC")
        version, d, count = struct.unpack_from("<BIQ", blob, 4)
        if version != 1:
            raise ValueError(f"unsupported SGPC version {version}")
        offset = 4 + struct.calcsize("<BIQ")
        pts = np.frombuffer(blob, dtype="<f8", count=d * count, offset=offset).reshape(count, d)
        return cls(pts.astype(np.float64))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        if path.suffix == ".csv":
            path.write_text(self.to_csv())
        else:
            path.write_bytes(self.to_bytes())


# ---------------------------------------------------------------- cube sampling


@dataclass
class CubeDraw:
    """Points of many cubes generated in one vectorized pass.

    ``owner[i]`` is the row (into the requested cube list) that produced point i;
    rows appear in request order and, within a row, in draw order.
    """

    points: np.ndarray
    labels: np.ndarray
    owner: np.ndarray
    counts: np.ndarray


def _draw(keys: np.ndarray, cubes: np.ndarray) -> CubeDraw:
    d = cubes.shape[1]
    counts = rng.poisson1_from_uniform(rng.uniforms(keys, np.zeros(len(keys), dtype=np.uint64)))
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(keys)), counts)
    starts = np.cumsum(counts) - counts
    local = (np.arange(total) - np.repeat(starts, counts)).astype(np.uint64)
    stride = np.uint64(d + 1)
    k = keys[owner]
    base = np.uint64(1) + local * stride
    pts = np.empty((total, d))
    for c in range(d):
        pts[:, c] = cubes[owner, c] - 0.5 + rng.uniforms(k, base + np.uint64(c))
    labels = rng.uniforms(k, base + np.uint64(d))
    return CubeDraw(pts, labels, owner, counts)


def _duplicate_rows(draw: CubeDraw) -> np.ndarray:
    """Rows (cubes) containing two identical points."""
    if len(draw.points) < 2:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort(tuple(draw.points.T[::-1]) + (draw.owner,))
    p = draw.points[order]
    o = draw.owner[order]
    same = (o[1:] == o[:-1]) & np.all(p[1:] == p[:-1], axis=1)
    return np.unique(o[1:][same])


def sample_cubes(seed: int, streams, replicates, cubes: np.ndarray) -> CubeDraw:
    """Vectorized draw of the Poisson points in Q_z for each row of ``cubes``.

    ``streams`` and ``replicates`` broadcast against the rows.  Cubes holding
    a duplicated point (probability zero) are regenerated with a bumped epoch.
    """
    cubes = np.atleast_2d(np.asarray(cubes, dtype=np.int64))
    m, d = cubes.shape
    streams = np.broadcast_to(np.asarray(streams, dtype=np.int64), (m,))
    replicates = np.broadcast_to(np.asarray(replicates, dtype=np.int64), (m,))
    keys = rng.derive_key(seed, streams, replicates, *cubes.T)
    keys = np.broadcast_to(keys, (m,)).copy()
    draw = _draw(keys, cubes)
    epoch = 0
    while True:
        bad = _duplicate_rows(draw)
        if bad.size == 0:
            return draw
        epoch += 1
        keys[bad] = rng.derive_key(keys[bad], _DUPLICATE_SALT, epoch)
        redo = _draw(keys[bad], cubes[bad])
        draw = _splice(draw, bad, redo)


def _splice(draw: CubeDraw, rows: np.ndarray, redo: CubeDraw) -> CubeDraw:
    keep = ~np.isin(draw.owner, rows)
    owner = np.concatenate([draw.owner[keep], rows[redo.owner]])
    order = np.argsort(owner, kind="stable")
    counts = draw.counts.copy()
    counts[rows] = redo.counts
    return CubeDraw(
        np.vstack([draw.points[keep], redo.points])[order],
        np.concatenate([draw.labels[keep], redo.labels])[order],
        owner[order],
        counts,
    )


# ---------------------------------------------------------------- public operations


def cube_points(key: ProcessKey, z) -> PointCloud:
    """Poisson(1) many i.i.d. uniform points in Q_z, fully determined by (key, z)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.int64))
    draw = sample_cubes(key.master_seed, key.stream_id, key.replicate_id, z)
    return PointCloud(draw.points, None, draw.labels)


def _region_points(key: ProcessKey, geometry) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cubes = _cube_indices(geometry)
    draw = sample_cubes(key.master_seed, key.stream_id, key.replicate_id, cubes)
    keep = _contains(geometry, draw.points)
    return draw.points[keep], draw.labels[keep], cubes[draw.owner[keep]]


def poisson_window(key: ProcessKey, geometry) -> PointCloud:
    """The realization addressed by ``key`` restricted to a window (or ball).

    Points come out in lexicographic cube order, then draw order.
    """
    if geometry.volume <= 0:
        raise ValueError("geometry volume must be positive")
    pts, labels, _ = _region_points(key, geometry)
    return PointCloud(pts, geometry, labels)


def resampled_window(key: ProcessKey, geometry, z, future_tag: int = STREAM_P_PRIME) -> PointCloud:
    """The window of ``(P minus Q_z) union (P' within Q_z)``, where P' is stream ``future_tag``."""
    z = np.asarray(z, dtype=np.int64)
    pts, labels, owner_cube = _region_points(key, geometry)
    outside = ~np.all(owner_cube == z, axis=1)
    repl = cube_points(key.with_stream(future_tag), z)
    keep = _contains(geometry, repl.points)
    return PointCloud(
        np.vstack([pts[outside], repl.points[keep]]),
        geometry,
        np.concatenate([labels[outside], repl.labels[keep]]),
    )


def _topup_points(key: ProcessKey, geometry, count: int) -> np.ndarray:
    """i.i.d. uniform points on the window from the dedicated top-up stream for this n."""
    box = geometry.box
    n_bits = struct.unpack("<q", struct.pack("<d", float(geometry.n)))[0]
    k = rng.derive_key(key.master_seed, STREAM_TOPUP, key.replicate_id, n_bits)
    d = box.d
    ctr = np.arange(count * d, dtype=np.uint64)
    u = rng.uniforms(k, ctr).reshape(count, d)
    lo = np.asarray(box.lo)
    hi = np.asarray(box.hi)
    return lo + u * (hi - lo)


def coupled_binomial(key: ProcessKey, geometry, m: int) -> PointCloud:
    """The binomial process U_{n,m} coupled to ``poisson_window(key, geometry)``.

    Takes the first ``min(m, N_n)`` window points in label order and tops up
    with ``(m - N_n)^+`` extra uniform points; U_{n,N_n} is the Poisson window.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    window = poisson_window(key, geometry)
    order = np.argsort(window.labels, kind="stable")
    take = order[: min(m, len(window))]
    pts = window.points[take]
    extra = m - len(window)
    if extra > 0:
        pts = np.vstack([pts, _topup_points(key, geometry, extra)])
    return PointCloud(pts, geometry)


def window_counts(key: ProcessKey, geometry) -> int:
    return len(poisson_window(key, geometry))


# ---------------------------------------------------------------- batched replicates


def window_batch(seed: int, replicates, geometry, stream: int = STREAM_P) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Points of ``poisson_window`` for many replicate ids at once.

    Returns ``(points, labels, group)`` where ``group[i]`` indexes ``replicates``.
    Each replicate's points match ``poisson_window(ProcessKey(seed, stream, rep), geometry)``.
    """
    reps = np.asarray(replicates, dtype=np.int64)
    cubes = _cube_indices(geometry)
    m = len(cubes)
    draw = sample_cubes(seed, stream, np.repeat(reps, m), np.tile(cubes, (len(reps), 1)))
    keep = _contains(geometry, draw.points)
    return draw.points[keep], draw.labels[keep], draw.owner[keep] // max(m, 1)


def binomial_batch(seed: int, replicates, geometry, m: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``coupled_binomial`` for many replicates; m defaults to round(n).  Returns ``(points, group)``."""
    if m is None:
        m = int(round(geometry.n))
    if m < 1:
        raise ValueError("m must be >= 1")
    reps = np.asarray(replicates, dtype=np.int64)
    pts, labels, group = window_batch(seed, reps, geometry)
    order = np.lexsort((labels, group))
    pts, group = pts[order], group[order]
    counts = np.bincount(group, minlength=len(reps))
    rank = np.arange(len(group)) - np.repeat(np.cumsum(counts) - counts, counts)
    keep = rank < m
    extra = np.maximum(m - counts, 0)
    if extra.sum() == 0:
        return pts[keep], group[keep]
    box = geometry.box
    d = box.d
    n_bits = struct.unpack("<q", struct.pack("<d", float(geometry.n)))[0]
    keys = rng.derive_key(seed, STREAM_TOPUP, reps, n_bits)
    owner = np.repeat(np.arange(len(reps)), extra)
    local = np.arange(len(owner)) - np.repeat(np.cumsum(extra) - extra, extra)
    ctr = (local[:, None] * d + np.arange(d)).astype(np.uint64)
    u = rng.uniforms(keys[owner][:, None], ctr)
    lo, hi = np.asarray(box.lo), np.asarray(box.hi)
    top = lo + u * (hi - lo)
    all_pts = np.vstack([pts[keep], top])
    all_grp = np.concatenate([group[keep], owner])
    order = np.argsort(all_grp, kind="stable")
    return all_pts[order], all_grp[order]

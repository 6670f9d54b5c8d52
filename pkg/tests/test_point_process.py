import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from stabgeo import point_process as pp
from stabgeo.point_process import (
    Ball,
    Cubic,
    PointCloud,
    ProcessKey,
    Stretched,
    binomial_batch,
    coupled_binomial,
    cube_points,
    poisson_window,
    resampled_window,
    sample_cubes,
    window_batch,
)


def test_cube_points_deterministic():
    key = ProcessKey(42, 0, 3)
    a = cube_points(key, (2, -5))
    b = cube_points(key, (2, -5))
    assert a.points.tobytes() == b.points.tobytes()


@given(st.integers(-50, 50), st.integers(-50, 50), st.integers(0, 2**32))
@settings(max_examples=40, deadline=None)
def test_cube_points_inside_cube(z0, z1, seed):
    c = cube_points(ProcessKey(seed), (z0, z1))
    if len(c):
        assert np.all(c.points >= np.array([z0, z1]) - 0.5)
        assert np.all(c.points <= np.array([z0, z1]) + 0.5)


def test_cube_count_mean_over_many_cubes():
    cubes = np.stack(np.meshgrid(np.arange(-158, 158), np.arange(-158, 158), indexing="ij"), -1).reshape(-1, 2)
    draw = sample_cubes(5, 0, 0, cubes[:100_000])
    mean = draw.counts.mean()
    assert abs(mean - 1.0) <= 0.01


def test_window_nested():
    key = ProcessKey(9)
    big, small = poisson_window(key, Cubic(4)), poisson_window(key, Cubic(1))
    assert small.as_set() <= big.as_set()
    assert all(Cubic(1).box.contains(small.points))


def test_nested_counts_nondecreasing():
    key = ProcessKey(10)
    counts = [len(poisson_window(key, Cubic(n))) for n in range(1, 60)]
    assert all(b >= a for a, b in zip(counts, counts[1:]))


def test_window_count_unit_volume_is_poisson1():
    pts, _, grp = window_batch(1, np.arange(20_000), Cubic(1.0))
    n = np.bincount(grp, minlength=20_000)
    observed = np.bincount(n, minlength=7)[:6]
    expected = stats.poisson.pmf(np.arange(6), 1.0) * 20_000
    assert stats.chisquare(observed, expected * observed.sum() / expected.sum()).pvalue > 0.01


def test_window_mean_count_at_100():
    pts, _, grp = window_batch(2, np.arange(500), Cubic(100.0))
    n = np.bincount(grp, minlength=500)
    assert abs(n.mean() - 100) <= 3 * np.sqrt(100 / 500)


def test_window_batch_matches_single():
    pts, _, grp = window_batch(3, [4, 8], Stretched((2.0,), 7.5))
    one = poisson_window(ProcessKey(3, 0, 8), Stretched((2.0,), 7.5))
    assert np.array_equal(pts[grp == 1], one.points)


def test_geometry_rejects_non_positive_volume():
    with pytest.raises(ValueError):
        Cubic(0.0)
    with pytest.raises(ValueError):
        Stretched((1.0,), -1.0)


def test_resampled_window_only_changes_q_z():
    key = ProcessKey(21)
    geom = Cubic(49)
    z = np.array([1, -2])
    base = poisson_window(key, geom)
    res = resampled_window(key, geom, z, 1)
    other = resampled_window(key, geom, z, 5)

    def outside(c):
        inq = np.all(np.abs(c.points - z) <= 0.5, axis=1)
        return {tuple(p) for p in c.points[~inq].tolist()}

    assert outside(base) == outside(res) == outside(other)
    inq = lambda c: np.all(np.abs(c.points - z) <= 0.5, axis=1)  # noqa: E731
    assert set(map(tuple, res.points[inq(res)].tolist())) == cube_points(ProcessKey(21, 1), z).as_set()


def test_resampled_count_law():
    z = np.array([[0, 0]])
    counts = sample_cubes(4, 1, np.arange(10_000), np.repeat(z, 10_000, axis=0)).counts
    observed = np.bincount(counts, minlength=6)[:5]
    expected = stats.poisson.pmf(np.arange(5), 1.0)
    assert stats.chisquare(observed, expected / expected.sum() * observed.sum()).pvalue > 0.01


def test_coupling_identity_and_topup():
    key = ProcessKey(30, 0, 2)
    geom = Cubic(64)
    P = poisson_window(key, geom)
    N = len(P)
    assert coupled_binomial(key, geom, N).as_set() == P.as_set()
    plus = coupled_binomial(key, geom, N + 3)
    assert P.as_set() < plus.as_set() and len(plus) == N + 3
    assert np.all(geom.box.contains(plus.points))


def test_coupling_one_point_increments():
    key = ProcessKey(31)
    geom = Cubic(36)
    prev = coupled_binomial(key, geom, 1).as_set()
    for m in range(2, 60):
        cur = coupled_binomial(key, geom, m).as_set()
        assert prev <= cur and len(cur - prev) == 1
        prev = cur


def test_coupling_rejects_zero():
    with pytest.raises(ValueError):
        coupled_binomial(ProcessKey(1), Cubic(10), 0)


def test_coupled_binomial_is_uniform():
    # first-coordinate law of U_{n,m} with m < N_n must be uniform on the window
    pts, grp = binomial_batch(8, np.arange(3000), Cubic(25.0), 10)
    assert np.all(np.bincount(grp) == 10)
    assert stats.kstest((pts[:, 0] + 2.5) / 5.0, "uniform").pvalue > 0.001


def test_binomial_batch_matches_single():
    pts, grp = binomial_batch(5, [3, 4], Cubic(30.0))
    single = coupled_binomial(ProcessKey(5, 0, 4), Cubic(30.0), 30)
    assert set(map(tuple, pts[grp == 1].tolist())) == single.as_set()


def test_counts_independent_across_streams_and_cubes():
    z = np.zeros((10_000, 2), dtype=np.int64)
    a = sample_cubes(6, 0, np.arange(10_000), z).counts
    b = sample_cubes(6, 1, np.arange(10_000), z).counts
    c = sample_cubes(6, 0, np.arange(10_000), z + [1, 0]).counts
    for x, y in ((a, b), (a, c)):
        table = np.histogram2d(np.minimum(x, 3), np.minimum(y, 3), bins=[4, 4])[0]
        assert stats.chi2_contingency(table).pvalue > 0.01


def test_translation_consistency_in_law():
    a = sample_cubes(12, 0, np.arange(5000), np.zeros((5000, 2), dtype=np.int64))
    b = sample_cubes(12, 0, np.arange(5000), np.tile([7, -3], (5000, 1)))
    shifted = b.points - np.array([7, -3])
    assert stats.ks_2samp(a.points[:, 0], shifted[:, 0]).pvalue > 0.001
    assert stats.ks_2samp(a.counts, b.counts).pvalue > 0.001


def test_duplicate_regeneration(monkeypatch):
    real = pp._draw
    calls = {"n": 0}

    def dup_first(keys, cubes):
        out = real(keys, cubes)
        calls["n"] += 1
        # the fault depends only on the inputs, so reruns see it too
        if len(keys) == 50:
            rows = np.nonzero(out.counts >= 2)[0]
            if rows.size:
                i = int(np.searchsorted(out.owner, rows[0]))
                out.points[i + 1] = out.points[i]
        return out

    monkeypatch.setattr(pp, "_draw", dup_first)
    cubes = np.zeros((50, 2), dtype=np.int64)
    draw = sample_cubes(13, 0, np.arange(50), cubes)
    assert calls["n"] >= 2
    assert len(pp._duplicate_rows(draw)) == 0
    again = sample_cubes(13, 0, np.arange(50), cubes)
    assert calls["n"] >= 4
    assert np.array_equal(draw.points, again.points)


def test_csv_and_binary_roundtrip(tmp_path):
    cloud = poisson_window(ProcessKey(3), Cubic(20))
    text = cloud.to_csv()
    assert text.splitlines()[0] == "x0,x1"
    assert np.array_equal(PointCloud.from_csv(text).points, cloud.points)
    blob = cloud.to_bytes()
    assert blob[:4] == b"SGPC" and blob[4] == 1
    assert np.array_equal(PointCloud.from_bytes(blob).points, cloud.points)
    cloud.save(tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text() == text


def test_point_cloud_is_immutable():
    cloud = poisson_window(ProcessKey(3), Cubic(20))
    with pytest.raises(ValueError):
        cloud.points[0, 0] = 1.0


def test_ball_cubes_cover_ball():
    ball = Ball((0.3, -0.2), 2.2)
    cubes = {tuple(z) for z in ball.cube_indices().tolist()}
    g = np.random.default_rng(0).uniform(-3, 3, (20_000, 2))
    inside = g[ball.contains(g)]
    assert {tuple(z) for z in np.round(inside).astype(int).tolist()} <= cubes

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from stabgeo.errors import DegenerateSample
from stabgeo.experiments import (
    BINOMIAL,
    POISSON,
    calibrate_envelope,
    clt_experiment,
    geometric_grid,
    lil_experiment,
    lil_normalizer,
    lil_statistic,
    mean_curve,
    path_values,
    poisson_path,
    sample_paths,
    sip_experiment,
)
from stabgeo.functionals import Components, Count, Euler, KnnLength, evaluate
from stabgeo.point_process import Cubic, ProcessKey, Stretched, poisson_window


def test_geometric_grid():
    g = geometric_grid()
    assert g[0] == 20 and g[-1] <= 1e5 and all(b > a for a, b in zip(g, g[1:]))
    assert g[1] == 26


@pytest.mark.parametrize("spec", [Count(), Euler(1.0), Components(1.0), KnnLength(1)])
def test_path_values_match_window_evaluation(spec):
    key = ProcessKey(1, 0, 4)
    grid = [30, 60, 120, 250]
    path = poisson_path(spec, key, Cubic(1.0), grid)
    direct = [evaluate(spec, poisson_window(key, Cubic(float(n)))) for n in grid]
    assert np.allclose(path, direct, rtol=1e-12, atol=0)


@given(st.integers(0, 2**32))
@settings(max_examples=20, deadline=None)
def test_components_path_matches_bfs(seed):
    g = np.random.default_rng(seed)
    pts = g.uniform(0, 6, (80, 2))
    entry = g.uniform(0, 10, 80)
    grid = [2.0, 5.0, 10.0]
    got = path_values(Components(1.0), pts, entry, grid)
    want = [oracles.bfs_components(pts[entry <= n], 1.0) for n in grid]
    assert got.tolist() == want


def test_stretched_path_matches_window():
    key = ProcessKey(2, 0, 1)
    geom = Stretched((1.0,), 1.0)
    grid = [50, 100, 200]
    path = poisson_path(Components(1.0), key, geom, grid)
    direct = [evaluate(Components(1.0), poisson_window(key, geom.resized(float(n)))) for n in grid]
    assert path.tolist() == direct


def test_count_path_increments_nonnegative():
    H = sample_paths(Count(), POISSON, 3, range(20), Cubic(1.0), geometric_grid(20, 5000))
    assert np.all(np.diff(H, axis=1) >= 0)


def test_mean_curve_count():
    grid = [50, 200]
    pois = mean_curve(Count(), POISSON, grid, 400, seed=4)
    for n, m, se in zip(grid, pois.mean, pois.se):
        assert abs(m - n) <= 3 * se
    binom = mean_curve(Count(), BINOMIAL, grid, 50, seed=4)
    assert binom.mean == [50.0, 200.0] and binom.se == [0.0, 0.0]


def test_mean_curve_euler_near_additive():
    mc = mean_curve(Euler(1.0), POISSON, [50, 100], 1000, seed=5)
    per_50, per_100 = mc.mean[0] / 50, mc.mean[1] / 100
    se = math.hypot(mc.se[0] / 50, mc.se[1] / 100)
    # boundary term is O(n^{-1/2}) per unit volume; allow one such term on top of 3 SE
    assert abs(per_100 - per_50) <= 3 * se + 1.0 / math.sqrt(50)


def test_lil_normalizer_domain():
    assert np.isfinite(lil_normalizer([3])).all()
    with pytest.raises(ValueError):
        lil_normalizer([2])


@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
@settings(max_examples=30, deadline=None)
def test_lil_statistic_scaling_halves(c):
    n = [10, 100, 1000]
    a, b = lil_statistic(c, n), lil_statistic(c, n, scale=2.0)
    assert np.array_equal(b, a / 2.0)


def test_lil_input_guards():
    with pytest.raises(ValueError):
        lil_experiment(Count(), POISSON, [10, 50], 20, seed=0)
    with pytest.raises(ValueError):
        lil_experiment(Count(), POISSON, [10, 200], 5, seed=0)
    with pytest.raises(ValueError):
        lil_experiment(Count(), POISSON, [200, 10], 20, seed=0)


def test_lil_binomial_count_is_zero():
    res = lil_experiment(Count(), BINOMIAL, [20, 50, 120], 20, seed=6, pool_replicates=30)
    assert all(r == 0.0 for p in res.paths for r in p.R)
    assert res.sigma == 0.0 and res.fraction_within == 1.0


def test_lil_count_poisson_small():
    res = lil_experiment(Count(), POISSON, geometric_grid(20, 5000), 40, seed=7, pool_replicates=200)
    assert res.sigma == 1.0
    assert len(res.paths) == 40 and len(res.tail_max) == 40
    assert res.fraction_within >= 0.85


def test_calibrate_envelope_monotone_in_quantile():
    grid = geometric_grid()
    q90, q99 = (calibrate_envelope(grid, 100, q, sims=2000) for q in (0.9, 0.99))
    assert 1.0 < q90 < q99 < 2.5


def test_clt_count_poisson_against_exact_oracle():
    res = clt_experiment(Count(), POISSON, 400, 2000, seed=8)
    exact = oracles.poisson_normal_ks(400.0)
    # the sample KS is at least the discretization gap minus sampling noise
    assert res.ks_statistic < 0.05
    assert res.ks_statistic > exact - 0.03


def test_clt_guards():
    with pytest.raises(DegenerateSample):
        clt_experiment(Count(), BINOMIAL, 100, 500, seed=9)
    with pytest.raises(ValueError):
        clt_experiment(Count(), POISSON, 100, 499, seed=9)


def test_sip_guards():
    with pytest.raises(ValueError):
        sip_experiment(Count(), n_max=900, block_len=100, paths=50)
    with pytest.raises(ValueError):
        sip_experiment(Count(), base=(), n_max=1000, block_len=100, paths=50)


def test_sip_count_small():
    rep = sip_experiment(Count(), n_max=1000, block_len=100, paths=400, seed=10,
                         defect_spec=Count(), defect_grid=[50, 100, 200], defect_replicates=100)
    assert abs(rep.slope - 1.0) <= 3 * rep.slope_se
    assert rep.corr.shape == (10, 10)
    # Count defect: raw mean is mean(N_n - n), centering with alpha = 1 gives exactly 0
    assert rep.alpha_used == 1.0
    assert rep.defect == [0.0, 0.0, 0.0]


def test_sip_block_structure():
    rep = sip_experiment(Count(), n_max=1000, block_len=100, paths=100, seed=11)
    assert len(rep.block_ks) == 10 and rep.block_len == 100


def test_sip_adjacent_correlation_halves_with_block_length():
    adj = []
    for bl in (4, 8):
        rep = sip_experiment(Components(1.0), n_max=10 * bl, block_len=bl, paths=4000, seed=22)
        i = np.arange(9)
        adj.append(rep.corr[i, i + 1].mean())
    assert adj[0] < 0 and adj[1] < 0
    assert 0.35 <= adj[1] / adj[0] <= 0.75

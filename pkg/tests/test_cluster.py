import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse import csgraph

from percohom.cloud import Box, PointCloud, TriadicCube, sample_poisson
from percohom.cluster import (
    GoodnessConfig,
    affine_constant,
    affine_energy,
    build_graph,
    cluster_in_region,
    estimate_theta,
    good_partition,
    graph_from_points,
    is_good,
    neighbor_violations,
    spectral_gap,
    substream,
    well_connected_check,
)


def cloud_of(points, box, lam=1.0):
    return PointCloud(box.d, lam, box, np.asarray(points, dtype=float), 0)


def test_edge_at_099_not_at_101():
    box = Box((0, 0), (3, 3))
    assert build_graph(cloud_of([[1, 1], [1.99, 1]], box)).adj.nnz == 2
    assert build_graph(cloud_of([[1, 1], [2.01, 1]], box)).adj.nnz == 0


def brute_edges(pts):
    n = len(pts)
    return {(i, j) for i in range(n) for j in range(i + 1, n) if np.sum((pts[i] - pts[j]) ** 2) <= 1.0}


def test_edges_match_brute_force():
    pts = np.random.default_rng(0).uniform(0, 3, size=(50, 2))
    g = build_graph(cloud_of(pts, Box((0, 0), (3, 3))))
    i, j = g.edges()
    assert set(zip(i.tolist(), j.tolist())) == brute_edges(g.coords)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 3), st.sampled_from(["kdtree", "cells"]))
def test_graph_invariants(seed, d, method):
    pts = np.random.default_rng(seed).uniform(0, 4, size=(80, d))
    g = graph_from_points(pts, method=method)
    A = g.adj
    assert (A != A.T).nnz == 0
    assert A.diagonal().sum() == 0
    i, j = g.edges()
    assert set(zip(i.tolist(), j.tolist())) == brute_edges(pts)
    # labels: adjacent vertices share a label, and each label is one connected piece
    assert np.all(g.labels[i] == g.labels[j])
    for lab in np.unique(g.labels):
        sub = A[g.labels == lab][:, g.labels == lab]
        assert csgraph.connected_components(sub, directed=False)[0] == 1


def test_chain_is_its_own_cluster():
    box = Box((0, 0), (6, 3))
    pts = [[0.5 + 0.9 * k, 1.5] for k in range(5)]
    g = cluster_in_region(cloud_of(pts, box), box, theta=1.0)
    assert g.n == 5 and g.fallback


def test_largest_component_wins():
    box = Box((0, 0), (20, 3))
    big = [[0.5 + 0.9 * k, 1.0] for k in range(8)]
    small = [[15.0 + 0.9 * k, 1.0] for k in range(3)]
    g = cluster_in_region(cloud_of(big + small, box), box, theta=1.0)
    assert g.n == 8 and g.coords[:, 0].max() < 10


def test_tie_goes_to_lexicographically_smallest_vertex():
    box = Box((0, 0), (20, 20))
    a = [[2.0, 10.0 + 0.9 * k] for k in range(4)]
    b = [[18.0, 1.0 + 0.9 * k] for k in range(4)]
    for order in (a + b, b + a):
        g = cluster_in_region(cloud_of(order, box), box, theta=1.0)
        assert g.n == 4 and np.allclose(g.coords[:, 0], 2.0)


def test_empty_region():
    box = Box((0, 0), (5, 5))
    g = cluster_in_region(cloud_of(np.zeros((0, 2)), box), box, theta=1.0)
    assert g.empty


def test_empty_cube_fails_uniqueness():
    cube = TriadicCube.origin(2, 2)
    rep = well_connected_check(cloud_of(np.zeros((0, 2)), cube.box), cube, 1.0)
    assert not rep.unique_component and not rep.passed


def test_half_spaced_grid_is_well_connected():
    cube = TriadicCube.origin(2, 2)
    ax = np.arange(-9, 9) / 2.0
    pts = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
    cloud = cloud_of(pts, cube.box)
    theta = len(pts) / cube.volume
    rep = well_connected_check(cloud, cube, theta)
    assert rep.unique_component and rep.count_ok and rep.distance_ok and rep.passed
    assert rep.max_distance == 0.0


def test_report_is_conjunction():
    cube = TriadicCube.origin(3, 2)
    theta = estimate_theta(4.0, 2).theta
    for s in range(5):
        r = well_connected_check(sample_poisson(cube.box, 4.0, s), cube, theta)
        assert r.passed == (r.unique_component and r.count_ok and r.distance_ok)


def test_theta_high_intensity():
    est = estimate_theta(50.0, 2)
    assert abs(est.fraction - 1.0) <= 0.02


def test_theta_subcritical_flag():
    with pytest.warns(RuntimeWarning):
        est = estimate_theta(0.01, 2, seed=1)
    assert est.subcritical


def test_theta_deterministic():
    a = estimate_theta.__wrapped__(4.0, 2, 3, 4, 5)
    b = estimate_theta.__wrapped__(4.0, 2, 3, 4, 5)
    assert a == b


def test_theta_value_lambda4():
    # cluster density for lambda = 4 in the plane, about 4.0 points per unit area
    est = estimate_theta(4.0, 2)
    assert 3.8 < est.theta < 4.1
    assert est.fraction > 0.95


@pytest.mark.parametrize("n", [5, 12, 40])
def test_path_gap_matches_closed_form(n):
    pts = np.stack([0.9 * np.arange(n), np.zeros(n)], axis=1)
    g = graph_from_points(pts)
    assert math.isclose(spectral_gap(g.laplacian()), 2 * (1 - math.cos(math.pi / n)), rel_tol=1e-9)


def test_path_gap_large_uses_iterative_route():
    n = 2000
    pts = np.stack([0.9 * np.arange(n), np.zeros(n)], axis=1)
    g = graph_from_points(pts)
    assert math.isclose(spectral_gap(g.laplacian()), 2 * (1 - math.cos(math.pi / n)), rel_tol=1e-3)


def test_single_vertex_not_good():
    cube = TriadicCube.origin(1, 2)
    cloud = cloud_of([[0.0, 0.0]], cube.box)
    assert not is_good(cloud, cube, 1.0).good
    assert not is_good(cloud_of(np.zeros((0, 2)), cube.box), cube, 1.0).good


@pytest.mark.slow
def test_affine_energy_stable_across_levels():
    means = {}
    for m, n in ((3, 100), (4, 100), (5, 10)):
        cube = TriadicCube.origin(m, 2)
        vals = [affine_energy(build_graph(sample_poisson(cube.box, 4.0, substream(0, "aff", m, s)), cube).largest(), cube.volume) for s in range(n)]
        means[m] = np.mean(vals)
    K = affine_constant(4.0, 2)
    for m, v in means.items():
        # boundary loss makes the finite-cube value a bit smaller than the bulk constant
        assert 0.85 * K < v <= 1.02 * K, (m, v, K)
    assert abs(means[5] - means[4]) < 0.05 * K


def test_affine_constant_formula():
    # lambda^2 * int_{|h|<=1} |h|^2 dh = lambda^2 * 2 pi / 4 in d = 2
    assert math.isclose(affine_constant(4.0, 2), 16 * math.pi / 2)


def hole_good(hole):
    def good(c):
        return not (np.all(np.asarray(c.lo) <= hole) and np.all(hole < np.asarray(c.hi)))

    return good


def test_partition_all_good_root():
    root = TriadicCube.origin(3, 2)
    cloud = cloud_of(np.zeros((0, 2)), root.box, lam=4.0)
    part = good_partition(cloud, root, 1.0, good_fn=lambda c: True)
    assert part.cells == [root] and not part.is_defective


def test_partition_one_bad_child():
    root = TriadicCube.origin(3, 2)
    cloud = cloud_of(np.zeros((0, 2)), root.box, lam=4.0)
    part = good_partition(cloud, root, 1.0, l_min=1, good_fn=hole_good(np.array([9.5, -9.5])))
    levels = sorted(c.level for c in part.cells)
    assert levels.count(2) == 8 and levels.count(1) == 9
    assert len(part.defective) == 1 and part.defective[0].level == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_partition_laws(seed):
    root = TriadicCube.origin(3, 2)
    cloud = cloud_of(np.zeros((0, 2)), root.box, lam=4.0)

    def good(c):
        return c.level == 0 or (substream(seed, "g", c.level, *[v + 10**6 for v in c.center]) % 3 != 0)

    part = good_partition(cloud, root, 1.0, l_min=0, good_fn=good)
    assert not neighbor_violations(part.cells)
    assert sum(c.volume for c in part.cells) == root.volume
    pts = np.random.default_rng(seed).uniform(root.lo, root.hi, size=(300, 2))
    assert np.all(np.sum([c.contains(pts) for c in part.cells], axis=0) == 1)


@pytest.mark.slow
def test_wc_pass_rate_monotone_in_lambda():
    cube = TriadicCube.origin(4, 2)
    frac = {}
    for lam in (2.0, 4.0, 8.0):
        theta = estimate_theta(lam, 2).theta
        frac[lam] = np.mean([well_connected_check(sample_poisson(cube.box, lam, substream(0, "mono", s)), cube, theta).passed for s in range(200)])
    se = lambda p: math.sqrt(max(p * (1 - p), 1e-4) / 200)
    assert frac[4.0] >= frac[2.0] - 2 * math.hypot(se(frac[2.0]), se(frac[4.0]))
    assert frac[8.0] >= frac[4.0] - 2 * math.hypot(se(frac[4.0]), se(frac[8.0]))

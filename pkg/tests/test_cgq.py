import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from percohom.cgq import (
    CGQConfig,
    CubeBatch,
    assemble_matrices,
    coarse_flux,
    master_J,
    mu,
    mu_star,
    subadditivity_defect,
)
from percohom.cloud import PointCloud, TriadicCube, sample_poisson, triadic_decompose
from percohom.cluster import estimate_theta, substream
from percohom.corrector import finite_volume_corrector

warnings.filterwarnings("ignore", category=UserWarning)


@pytest.fixture(scope="module")
def theta():
    return estimate_theta(4.0, 2).theta


@pytest.fixture(scope="module")
def many(theta):
    """81 level-3 cubes from each of two level-5 clouds, as two batches."""
    top = TriadicCube.origin(5, 2)
    out = []
    for s in range(2):
        cloud = sample_poisson(top.box, 4.0, substream(0, "cgq-many", s))
        out.append(CubeBatch(cloud, triadic_decompose(top, 3), CGQConfig(), theta))
    return out


@pytest.fixture(scope="module")
def single(theta):
    cube = TriadicCube.origin(3, 2)
    for s in range(20):
        cloud = sample_poisson(cube.box, 4.0, substream(0, "cgq-single", s))
        b = CubeBatch(cloud, [cube], CGQConfig(), theta)
        if b.good[0]:
            return cloud, cube, b
    raise AssertionError("no good cube")


def test_zero_directions(single):
    cloud, cube, b = single
    ev = mu(cloud, cube, np.zeros(2), batch=b)
    assert ev.value == 0.0 and np.allclose(ev.field, 0.0)
    assert mu_star(cloud, cube, np.zeros(2), batch=b).value == 0.0


@settings(max_examples=10, deadline=None)
@given(st.floats(-4, 4).filter(lambda t: abs(t) > 1e-2), st.floats(0, 2 * math.pi))
def test_quadratic_scaling(single, t, angle):
    cloud, cube, b = single
    p = np.array([math.cos(angle), math.sin(angle)])
    m1, m2 = mu(cloud, cube, p, batch=b).value, mu(cloud, cube, t * p, batch=b).value
    assert abs(m2 - t * t * m1) <= 1e-10 * t * t * m1
    s1, s2 = mu_star(cloud, cube, p, batch=b).value, mu_star(cloud, cube, t * p, batch=b).value
    assert abs(s2 - t * t * s1) <= 1e-10 * t * t * s1


def test_upper_and_lower_bounds(many):
    rng = np.random.default_rng(0)
    n_good = 0
    for b in many:
        K = b.affine_energy
        for _ in range(3):
            p = rng.standard_normal(2)
            q = rng.standard_normal(2)
            m = b.mu(p)[b.good]
            ms = b.mu_star(q)[b.good]
            assert np.all(m <= 0.5 * K[b.good] * (p @ p) * (1 + 1e-9))
            # Fenchel transposition of the upper bound
            assert np.all(ms >= (q @ q) / (2 * K[b.good]) * (1 - 1e-9))
        n_good += int(b.good.sum())
    assert n_good >= 100


def test_polarization_consistency(many):
    b = many[0]
    a, _ = b.matrices()
    rng = np.random.default_rng(1)
    for _ in range(10):
        p = rng.standard_normal(2)
        lhs = np.einsum("i,cij,j->c", p, a, p)[b.good]
        direct = np.array([mu(b.cloud, b.cubes[c], p, batch=_single_batch(b, c)).value for c in np.flatnonzero(b.good)[:3]])
        assert np.allclose(lhs, 2 * b.mu(p)[b.good], rtol=1e-8)
        assert np.allclose(lhs[:3], 2 * direct, rtol=1e-8)


_SINGLES = {}


def _single_batch(b, c):
    key = (id(b), c)
    if key not in _SINGLES:
        _SINGLES[key] = CubeBatch(b.cloud, [b.cubes[c]], b.cfg, b.theta)
    return _SINGLES[key]


def test_batch_equals_single_cube(many):
    """Packing cubes into one block-diagonal batch changes nothing."""
    b = many[1]
    a, ainv = b.matrices()
    for c in np.flatnonzero(b.good)[:4]:
        s = _single_batch(b, c)
        a1, ai1 = s.matrices()
        assert np.allclose(a[c], a1[0], rtol=1e-8) and np.allclose(ainv[c], ai1[0], rtol=1e-7)


def test_ordering_and_positivity(many):
    for b in many:
        a, ainv = b.matrices()
        for c in np.flatnonzero(b.good):
            astar = np.linalg.inv(ainv[c])
            assert np.linalg.eigvalsh(a[c] - astar).min() >= -1e-6
            assert np.linalg.eigvalsh(a[c]).min() > 0 and np.linalg.eigvalsh(astar).min() > 0
            assert np.allclose(a[c], a[c].T) and np.allclose(ainv[c], ainv[c].T)


def test_bad_cube_flagged(theta):
    cube = TriadicCube.origin(3, 2)
    cloud = sample_poisson(cube.box, 0.5, 3)
    cm = assemble_matrices(cloud, cube, theta=theta)
    assert not cm.good and np.all(np.isnan(cm.a)) and np.all(np.isnan(cm.a_star_inv))
    assert mu(cloud, cube, np.ones(2), theta=theta).value == 0.0


def test_fenchel_minimiser_in_q(single):
    cloud, cube, b = single
    a, ainv = b.matrices()
    astar = np.linalg.inv(ainv[0])
    p = np.array([0.6, -0.8])

    def J(q):
        return b.mu(p)[0] + b.mu_star(q)[0] - p @ q

    q0 = astar @ p
    J0 = J(q0)
    assert J0 >= -1e-9
    assert math.isclose(J0, 0.5 * p @ (a[0] - astar) @ p, rel_tol=1e-8)
    grid = [q0 + np.array([dx, dy]) for dx in np.linspace(-1, 1, 7) for dy in np.linspace(-1, 1, 7)]
    assert J0 <= min(J(q) for q in grid) + 1e-9


def good_single_cubes(theta, cfg, count):
    cube = TriadicCube.origin(3, 2)
    out = []
    for s in range(30):
        cloud = sample_poisson(cube.box, 4.0, substream(0, "cgq-master", s))
        b = CubeBatch(cloud, [cube], cfg, theta)
        if b.good[0]:
            out.append((s, cloud, cube, b))
        if len(out) == count:
            return out
    raise AssertionError("not enough good cubes")


def test_master_identities(theta):
    cfg = CGQConfig()
    for s, cloud, cube, b in good_single_cubes(theta, cfg, 5):
        rng = np.random.default_rng(s)
        p, q = rng.standard_normal(2), rng.standard_normal(2)
        mv = master_J(cloud, cube, p, q, cfg=cfg, batch=b)
        r = mv.residuals
        assert math.isclose(mv.J, mv.mu + mv.mu_star - p @ q, rel_tol=1e-12, abs_tol=1e-12)
        assert r["secondvar_master"] <= 1e-6
        assert r["firstvar_master"] <= 1e-8 and r["firstvar_mu_star"] <= 1e-8
        assert r["secvar_J"] <= 1e-8
        assert r["secondvar_mu_star"] <= 1e-8
        assert abs(mv.xi.mean()) < 1e-10


def test_unit_ball_interior_breaks_energy_identity(theta):
    """Harmonicity only on vertices whose unit ball is inside the cube loses J = E(xi)/|cube|."""
    cfg = CGQConfig(interior="unit_ball")
    s, cloud, cube, b = good_single_cubes(theta, cfg, 1)[0]
    p, q = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    r = master_J(cloud, cube, p, q, cfg=cfg, batch=b).residuals
    assert r["secondvar_master"] > 1e-3
    assert r["firstvar_mu_star"] <= 1e-8


def test_master_routes_agree(single):
    """Saddle-point maximiser and the closed form u - v give the same xi."""
    cloud, cube, b = single
    p, q = np.array([1.0, 0.3]), np.array([-0.5, 2.0])
    kkt = master_J(cloud, cube, p, q, batch=b, route="kkt")
    closed = master_J(cloud, cube, p, q, batch=b, route="closed")
    assert np.allclose(kkt.xi, closed.xi, atol=1e-7 * np.abs(kkt.xi).max())


def test_flux_complete_graph_four_points(theta):
    cube = TriadicCube.origin(1, 2)
    pts = np.array([[-1.3, -1.2], [-1.0, -0.8], [-0.7, -1.1], [-0.9, -0.6]])
    cloud = PointCloud(2, 4.0, cube.box, pts, 0)
    b = CubeBatch(cloud, [cube], CGQConfig(l=0), theta)
    assert b.n == 4 and b.adj.nnz == 12
    for i in range(2):
        f = coarse_flux(b, i, i, np.zeros(4))
        x = b.coords[:, i]
        want = np.sum((x[:, None] - x[None, :]) ** 2)
        blk = b.block_local[0]
        assert math.isclose(f.values.ravel()[blk], want)
        assert np.count_nonzero(f.values) == 1


def test_flux_balance(single, theta):
    cloud, cube, b = single
    a, _ = b.matrices()
    for i in range(2):
        phi = finite_volume_corrector(cloud, cube, np.eye(2)[i], batch=b)
        for j in range(2):
            f = coarse_flux(b, i, j, phi.values)
            assert abs(f.cube_average - a[0, j, i]) <= 1e-6 * abs(a[0, i, i])
            g = coarse_flux(b, i, j, phi.values + 3.7)
            assert np.allclose(f.values, g.values)


def test_defect_zero_when_parent_is_child(single):
    cloud, cube, b = single
    rep = subadditivity_defect(cloud, cube, cube.level, 1, parent_batch=b)
    assert rep.accepted and np.allclose(rep.defect_D, 0) and np.allclose(rep.defect_N, 0)


def test_rejection_falls_with_scale():
    # nine blocks per cube at every scale; only the block side grows
    lam = 2.0
    theta = estimate_theta(lam, 2).theta
    top = TriadicCube.origin(4, 2)
    frac = []
    for l in (0, 1, 2):
        bad = total = 0
        for s in range(3):
            cloud = sample_poisson(top.box, lam, substream(0, "reject", s))
            b = CubeBatch(cloud, triadic_decompose(top, l + 1), CGQConfig(l=l, goodness=_nocert()), theta)
            bad += int((~b.good).sum())
            total += b.ncubes
        frac.append(bad / total)
    assert frac[0] > frac[1] > frac[2]


def _nocert():
    from percohom.cluster import GoodnessConfig

    return GoodnessConfig(certify_poincare=False)


@pytest.mark.slow
def test_defect_bound_constant_stable(theta):
    from percohom.solver import SolverConfig

    parent = TriadicCube.origin(4, 2)
    cfg = CGQConfig(goodness=_nocert(), solver=SolverConfig(1e-8, "amg"))
    C = {1: [], 2: []}
    for s in range(6):
        cloud = sample_poisson(parent.box, 4.0, substream(0, "defect", s))
        pb = CubeBatch(cloud, [parent], cfg, theta)
        for n in (2, 3):
            rep = subadditivity_defect(cloud, parent, n, 1, cfg, theta, parent_batch=pb, dual=False)
            if rep.accepted:
                C[rep.separation].append(np.abs(rep.eig_D()).max() * 3.0**rep.separation)
    c1, c2 = np.mean(C[1]), np.mean(C[2])
    assert 0.5 <= c2 / c1 <= 2.0

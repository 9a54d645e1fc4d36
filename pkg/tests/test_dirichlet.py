import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from percohom.cgq import CGQConfig, CubeBatch
from percohom.cloud import ParameterError, TriadicCube, sample_poisson
from percohom.cluster import estimate_theta, substream
from percohom.corrector import CorrectorField, finite_volume_corrector
from percohom.dirichlet import (
    SineProduct,
    boundary_terms,
    choose_b,
    cutoff,
    error_experiment,
    graph_dirichlet_error,
    remainder,
    solve_homogenized,
    two_scale_expand,
)

warnings.filterwarnings("ignore", category=UserWarning)

ANISO = np.array([[2.0, 0.5], [0.5, 1.0]])


def manufactured_error(abar, n, L=3.0):
    u = SineProduct((0.0, 0.0), L)
    sol = solve_homogenized((0, 0), L, abar, lambda X: -u.div_a_grad(X, abar), 0.0, L / n)
    X = np.stack(np.meshgrid(*sol.axes, indexing="ij"), axis=-1).reshape(-1, 2)
    return np.abs(sol.values.ravel() - u.value(X)).max()


@pytest.mark.parametrize("abar", [np.eye(2), ANISO])
def test_manufactured_second_order(abar):
    errs = [manufactured_error(abar, n) for n in (8, 16, 32)]
    rates = [math.log2(errs[k] / errs[k + 1]) for k in range(2)]
    assert all(1.9 < r < 2.1 for r in rates), rates


def test_affine_is_exact():
    ub = lambda X: 1.0 + 2.0 * X[:, 0] - 0.5 * X[:, 1]
    sol = solve_homogenized((-1, -1), 4.0, ANISO, 0.0, ub, 0.5)
    X = np.stack(np.meshgrid(*sol.axes, indexing="ij"), axis=-1).reshape(-1, 2)
    assert np.allclose(sol.values.ravel(), ub(X), atol=1e-11)
    assert sol.residual(0.0) < 1e-9


@settings(max_examples=15, deadline=None)
@given(st.floats(0.1, 10))
def test_scaling_abar_and_f(t):
    f = lambda X: np.cos(X[:, 0]) + X[:, 1]
    a = solve_homogenized((0, 0), 2.0, ANISO, f, 0.3, 0.25)
    b = solve_homogenized((0, 0), 2.0, t * ANISO, lambda X: t * f(X), 0.3, 0.25)
    assert np.allclose(a.values, b.values, rtol=1e-9, atol=1e-12)


def test_homogenized_errors():
    with pytest.raises(ParameterError):
        solve_homogenized((0, 0), 1.0, np.array([[1.0, 2.0], [2.0, 1.0]]), 0.0, 0.0, 0.1)
    with pytest.raises(ParameterError):
        solve_homogenized((0, 0), 1.0, np.eye(2), 0.0, 0.0, 0.3)


def test_interpolated_derivatives():
    u = SineProduct((0.0, 0.0), 3.0)
    sol = solve_homogenized((0, 0), 3.0, np.eye(2), lambda X: -u.div_a_grad(X, np.eye(2)), 0.0, 3.0 / 64)
    x = np.array([[1.1, 0.7], [2.0, 2.5]])
    assert np.allclose(sol.value(x), u.value(x), atol=1e-3)
    assert np.allclose(sol.grad(x), u.grad(x), atol=2e-2)


def test_cutoff_profile():
    d = np.array([0.0, 3.0, 4.5, 6.0, 9.0])
    assert np.allclose(cutoff(d, 1), [1, 1, 0.5, 0, 0])


def test_choose_b():
    assert choose_b(4) == 2 and choose_b(5) == 3
    assert choose_b(4, 0.5) == 1
    assert 0 <= choose_b(3, 0.01) <= 2


@pytest.fixture(scope="module")
def correctors():
    theta = estimate_theta(4.0, 2).theta
    cube = TriadicCube.origin(3, 2)
    for s in range(20):
        cloud = sample_poisson(cube.box, 4.0, substream(0, "twoscale", s))
        b = CubeBatch(cloud, [cube], CGQConfig(), theta)
        if b.good[0]:
            return [finite_volume_corrector(cloud, cube, e, batch=b) for e in np.eye(2)]
    raise AssertionError("no good cube")


class Affine:
    def __init__(self, e):
        self.e = np.asarray(e, dtype=float)

    def value(self, x):
        return x @ self.e

    def grad(self, x):
        return np.broadcast_to(self.e, x.shape).copy()

    def hessian(self, x):
        return np.zeros((len(x), len(self.e), len(self.e)))


def test_zero_correctors_give_ubar(correctors):
    zero = [CorrectorField(c.cube, c.e, np.zeros_like(c.values), c.batch) for c in correctors]
    ubar = SineProduct(tuple(zero[0].batch.los[0]), 27.0)
    f = two_scale_expand(ubar, zero, 1)
    assert np.array_equal(f.u, ubar.value(f.coords))


def test_affine_ubar_is_corrector_ansatz(correctors):
    f = two_scale_expand(Affine([1.0, 0.0]), correctors, 1)
    assert np.allclose(f.u, f.coords[:, 0] + correctors[0].values)


def test_missing_direction(correctors):
    with pytest.raises(ParameterError, match=r"\[1\]"):
        two_scale_expand(Affine([1.0, 0.0]), correctors[:1], 1)


def test_patch_exact_on_layer(correctors):
    ub = lambda X: 0.25 * X[:, 1]
    f = two_scale_expand(SineProduct(tuple(correctors[0].batch.los[0]), 27.0), correctors, 1, ub)
    lay = f.layer(1)
    assert lay.any() and np.array_equal(f.w[lay], ub(f.coords)[lay])
    assert np.array_equal(f.w[~f.layer(2)], f.u[~f.layer(2)])


def test_boundary_terms_vanish(correctors):
    zero = [CorrectorField(c.cube, c.e, np.zeros_like(c.values), c.batch) for c in correctors]
    f = two_scale_expand(Affine([0.0, 0.0]), zero, 1, 0.0)
    assert boundary_terms(f).hminus1 == 0.0


def test_layer_fraction_matches_count(correctors):
    ubar = SineProduct(tuple(correctors[0].batch.los[0]), 27.0)
    for b in (0, 1):
        f = two_scale_expand(ubar, correctors, b)
        rep = boundary_terms(f, level=3)
        counted = np.mean(f.layer(2))
        assert abs(counted - rep.layer_fraction) < 0.1
        assert math.isclose(rep.formula, 3.0 ** (b - 1.5))


def test_remainder_report(correctors):
    ubar = SineProduct(tuple(correctors[0].batch.los[0]), 27.0)
    f = two_scale_expand(ubar, correctors, 1)
    b = correctors[0].batch
    rho = b.n / b.volume
    rep = remainder(f, ubar, correctors, 8.0 * np.eye(2), rho)
    assert rep.hminus1 >= 0 and rep.sup_phi > 0 and rep.constant >= 0


def test_graph_error_finite():
    cube = TriadicCube.origin(3, 2)
    cloud = sample_poisson(cube.box, 4.0, 5)
    rel, n, rho, st = graph_dirichlet_error(cloud, 3, 8.5 * np.eye(2))
    assert 0 < rel < 1 and n > 0 and 3 < rho < 4.5
    with pytest.raises(ParameterError):
        graph_dirichlet_error(cloud, 3, np.eye(2), family="poly")


def test_error_experiment_deterministic():
    a = error_experiment(4.0, 2, (2, 3), 2, 8.5 * np.eye(2), seed=1)
    b = error_experiment(4.0, 2, (2, 3), 2, 8.5 * np.eye(2), seed=1, workers=2)
    assert np.array_equal(a.mean, b.mean)
    assert len(a.records) == 4

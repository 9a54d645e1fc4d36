"""Homogenized continuum problem, two-scale expansion, boundary layers and the error experiment.

Scaling between graph and continuum: with E(u) = sum over edges of
(u(x) - u(y))^2 and per-volume energy (1/2) grad u . abar grad u, the graph
operator (Lu)(x) = sum_{y~x} (u(y) - u(x)) behaves like div(abar grad u)/(2 rho)
where rho is the number of cluster vertices per unit volume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial

import numpy as np
import scipy.sparse as sp

from .cloud import ParameterError, TriadicCube, sample_poisson
from .cluster import build_graph, substream
from .homog import fit_log_slope
from .parallel import pmap
from .solver import DirichletSystem, SolverConfig, amg_solver, factor_spd, hminus1, laplacian


# ---------------------------------------------------------------------------
# test functions


@dataclass(frozen=True)
class SineProduct:
    """u(x) = prod_i sin(k_i pi (x_i - lo_i) / L): zero on the boundary of lo + [0, L]^d."""

    lo: tuple
    L: float
    modes: tuple = None

    def _k(self, d):
        return np.ones(d) if self.modes is None else np.asarray(self.modes, dtype=float)

    def _parts(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        k = self._k(x.shape[1]) * math.pi / self.L
        t = (x - np.asarray(self.lo, dtype=float)) * k
        return np.sin(t), np.cos(t), k

    def value(self, x):
        s, _, _ = self._parts(x)
        return np.prod(s, axis=1)

    def grad(self, x):
        s, c, k = self._parts(x)
        d = s.shape[1]
        g = np.empty_like(s)
        for i in range(d):
            g[:, i] = k[i] * c[:, i] * np.prod(np.delete(s, i, axis=1), axis=1)
        return g

    def hessian(self, x):
        s, c, k = self._parts(x)
        n, d = s.shape
        H = np.empty((n, d, d))
        for i in range(d):
            for j in range(d):
                if i == j:
                    H[:, i, i] = -k[i] ** 2 * np.prod(s, axis=1)
                else:
                    rest = np.prod(np.delete(s, [i, j], axis=1), axis=1) if d > 2 else 1.0
                    H[:, i, j] = k[i] * k[j] * c[:, i] * c[:, j] * rest
        return H

    def div_a_grad(self, x, a):
        """div(a grad u) for a constant matrix a."""
        return np.einsum("ij,nij->n", np.asarray(a, dtype=float), self.hessian(x))


# ---------------------------------------------------------------------------
# finite differences


def _second_diff(n, h):
    return sp.diags([np.ones(n - 1), -2 * np.ones(n), np.ones(n - 1)], [-1, 0, 1]) / h**2


def _first_diff(n, h):
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [-1, 1]) / (2 * h)


def fd_operator(shape, h, a):
    """-div(a grad .) on a full node grid; rows of boundary nodes are meaningless."""
    d = len(shape)
    eye = [sp.identity(n, format="csr") for n in shape]

    def kron_all(mats):
        out = mats[0]
        for m in mats[1:]:
            out = sp.kron(out, m, format="csr")
        return out

    A = sp.csr_matrix((int(np.prod(shape)),) * 2)
    for i in range(d):
        for j in range(d):
            if a[i, j] == 0:
                continue
            if i == j:
                mats = [(_second_diff(shape[k], h) if k == i else eye[k]) for k in range(d)]
            else:
                mats = [(_first_diff(shape[k], h) if k in (i, j) else eye[k]) for k in range(d)]
            A = A - a[i, j] * kron_all(mats)
    return A.tocsr()


@dataclass
class HomogenizedSolution:
    lo: np.ndarray
    L: float
    h: float
    abar: np.ndarray
    values: np.ndarray = field(repr=False)  # node grid, shape (n+1,)*d

    @property
    def axes(self):
        n = self.values.shape[0]
        return [self.lo[i] + self.h * np.arange(n) for i in range(len(self.lo))]

    def _interp(self, grid, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d = x.shape[1]
        n = grid.shape[0]
        t = (x - self.lo) / self.h
        i0 = np.clip(np.floor(t).astype(int), 0, n - 2)
        f = np.clip(t - i0, 0.0, 1.0)
        out = np.zeros(len(x))
        for corner in range(2**d):
            bits = [(corner >> k) & 1 for k in range(d)]
            w = np.ones(len(x))
            idx = []
            for k, bk in enumerate(bits):
                w = w * (f[:, k] if bk else 1 - f[:, k])
                idx.append(i0[:, k] + bk)
            out += w * grid[tuple(idx)]
        return out

    def value(self, x):
        return self._interp(self.values, x)

    def grad(self, x):
        d = self.values.ndim
        return np.stack([self._interp(np.gradient(self.values, self.h, axis=i), x) for i in range(d)], axis=1)

    def hessian(self, x):
        d = self.values.ndim
        g = [np.gradient(self.values, self.h, axis=i) for i in range(d)]
        H = np.empty((len(np.atleast_2d(x)), d, d))
        for i in range(d):
            for j in range(d):
                H[:, i, j] = self._interp(np.gradient(g[i], self.h, axis=j), x)
        return H

    def residual(self, f):
        """max |-div(abar grad u) - f| at interior nodes."""
        shape = self.values.shape
        A = fd_operator(shape, self.h, self.abar)
        X = np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1).reshape(-1, len(shape))
        r = A @ self.values.ravel() - _eval(f, X)
        inner = np.all((np.indices(shape).reshape(len(shape), -1).T > 0) & (np.indices(shape).reshape(len(shape), -1).T < shape[0] - 1), axis=1)
        return float(np.abs(r[inner]).max())


def _eval(f, X):
    if callable(f):
        return np.asarray(f(X), dtype=float)
    return np.broadcast_to(np.asarray(f, dtype=float), (len(X),)).copy()


def solve_homogenized(lo, L, abar, f, u_b, h):
    """-div(abar grad u) = f in lo + (0, L)^d, u = u_b on the boundary, node spacing h.

    Second differences on the diagonal of abar; off-diagonal entries use the
    centred cross difference, so the stencil has 9 (d=2) or 19 (d=3) points.
    """
    abar = np.asarray(abar, dtype=float)
    d = abar.shape[0]
    if not np.allclose(abar, abar.T) or np.linalg.eigvalsh(abar).min() <= 0:
        raise ParameterError("abar must be symmetric positive definite")
    n = L / h
    if abs(n - round(n)) > 1e-9:
        raise ParameterError("h must divide the box side")
    n = int(round(n))
    lo = np.asarray(lo, dtype=float)
    shape = (n + 1,) * d
    axes = [lo[i] + h * np.arange(n + 1) for i in range(d)]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    idx = np.indices(shape).reshape(d, -1).T
    bnd = np.any((idx == 0) | (idx == n), axis=1)
    A = fd_operator(shape, h, abar)
    I = np.flatnonzero(~bnd)
    B = np.flatnonzero(bnd)
    u = np.zeros(len(X))
    u[B] = _eval(u_b, X[B])
    rhs = _eval(f, X[I]) - A[I][:, B] @ u[B]
    AII = A[I][:, I].tocsr()
    if d == 2 or len(I) < 200_000:
        u[I] = factor_spd(AII).solve(rhs)
    else:
        ml = amg_solver(AII)
        u[I] = ml.solve(rhs, tol=1e-12, accel="cg")
    return HomogenizedSolution(lo, float(L), float(h), abar, u.reshape(shape))


# ---------------------------------------------------------------------------
# two-scale expansion


def collar_distance(coords, lo, L):
    """Distance to the boundary of lo + [0, L]^d (positive inside)."""
    x = coords - np.asarray(lo, dtype=float)
    return np.min(np.minimum(x, L - x), axis=1)


def cutoff(dist, b):
    """1 within 3^b of the boundary, 0 beyond 2*3^b, linear between."""
    w = 3.0**b
    return np.clip((2 * w - dist) / w, 0.0, 1.0)


@dataclass
class TwoScaleField:
    coords: np.ndarray = field(repr=False)
    u: np.ndarray = field(repr=False)  # ubar + sum_i d_i ubar phi_i
    w: np.ndarray = field(repr=False)  # xi_cut u_b + (1 - xi_cut) u
    xi_cut: np.ndarray = field(repr=False)
    u_b: np.ndarray = field(repr=False)
    b: int
    lo: np.ndarray
    L: float
    batch: object = field(repr=False, default=None)

    def layer(self, width=1):
        return collar_distance(self.coords, self.lo, self.L) < width * 3.0**self.b


def two_scale_expand(ubar, correctors, b, u_b=0.0):
    """u = ubar + sum_i (d_i ubar) phi_{e_i} on the correctors' cluster, patched near the boundary.

    `ubar` supplies value/grad at points; `correctors` is a list with one
    CorrectorField per coordinate direction, all on the same cube.
    """
    if not correctors:
        raise ParameterError("no correctors supplied")
    batch = correctors[0].batch
    d = batch.d
    have = {int(np.argmax(np.abs(c.e))) for c in correctors if np.count_nonzero(c.e) == 1}
    missing = sorted(set(range(d)) - have)
    if missing:
        raise ParameterError(f"missing corrector for direction(s) {missing}")
    x = batch.coords
    lo = np.asarray(batch.los[0], dtype=float)
    L = float(batch.side)
    g = ubar.grad(x)
    u = ubar.value(x).copy()
    for c in correctors:
        i = int(np.argmax(np.abs(c.e)))
        u += g[:, i] * c.values / c.e[i]
    ub = _eval(u_b, x)
    xi = cutoff(collar_distance(x, lo, L), b)
    w = xi * ub + (1 - xi) * u
    return TwoScaleField(x, u, w, xi, ub, b, lo, L, batch)


@dataclass
class RemainderReport:
    hminus1: float
    sup_phi: float
    derivative_size: float
    constant: float  # hminus1 / (sup_phi * derivative_size)


def remainder(field_, ubar, correctors, abar, rho):
    """H^-1 size of L u - div(A grad ubar) for the unpatched two-scale u, A = abar/(2 rho)."""
    b = field_.batch
    L = b.L
    f = ubar.div_a_grad(field_.coords, abar) / (2 * rho)
    r = -(L @ field_.u) - f  # apply_laplacian sign is -(D - A)
    bnd = field_.layer(1)
    hn = hminus1(L, np.where(bnd, 0.0, r), bnd)
    sup_phi = max(float(np.abs(c.values).max()) for c in correctors)
    dsize = math.sqrt(float(np.max(np.sum(ubar.grad(field_.coords) ** 2, axis=1))) + float(np.max(np.sum(ubar.hessian(field_.coords) ** 2, axis=(1, 2)))))
    return RemainderReport(hn, sup_phi, dsize, hn / max(sup_phi * dsize, 1e-300))


@dataclass
class BoundaryReport:
    hminus1: float
    layer_fraction: float  # |layer of width 2*3^b| / |U|, by direct count
    formula: float  # 3^{b - m/2}
    volume_factor: float  # layer_fraction^{1/2}


def boundary_terms(field_, level=None):
    """H^-1 size of L(w - u) (the boundary-layer terms) and the layer-volume factor."""
    b = field_.batch
    diff = field_.w - field_.u
    r = -(b.L @ diff)
    outer = field_.layer(1)
    hn = hminus1(b.L, np.where(outer, 0.0, r), outer) if outer.any() and (~outer).any() else 0.0
    d = b.d
    L = field_.L
    w2 = 2 * 3.0**field_.b
    inner_side = max(L - 2 * w2, 0.0)
    frac = 1.0 - (inner_side / L) ** d
    m = math.log(L, 3) if level is None else level
    return BoundaryReport(hn, frac, 3.0 ** (field_.b - m / 2), math.sqrt(frac))


# ---------------------------------------------------------------------------
# the error experiment


@dataclass
class ErrorRecord:
    level: int
    b: int
    lam: float
    seed: int
    sample: int
    rel_l2: float
    h1_two_scale: float = math.nan
    n_vertices: int = 0
    rho: float = math.nan
    stats: dict = field(default_factory=dict)


def choose_b(m, alpha=None):
    """m(1 - alpha) - b = m alpha / 2, or ceil(m/2) without a rate."""
    if alpha is None or not np.isfinite(alpha):
        return math.ceil(m / 2)
    return int(np.clip(round(m * (1 - 1.5 * alpha)), 0, m - 1))


def graph_dirichlet_error(cloud, m, abar, family="sine", collar=2.0, cfg=SolverConfig(precond="amg")):
    """Solve L u = div(A grad ubar) on the largest cluster of U_m = cube_m(0), u = 0 on the collar."""
    d = cloud.d
    cube = TriadicCube.origin(m, d)
    g = build_graph(cloud, cube).largest()
    lo = np.asarray(cube.lo, dtype=float)
    L = float(cube.side)
    if family != "sine":
        raise ParameterError(f"unknown test family {family!r}")
    ubar = SineProduct(tuple(lo), L)
    rho = g.n / cube.volume
    x = g.coords
    collar_mask = collar_distance(x, lo, L) < collar
    f = ubar.div_a_grad(x, abar) / (2 * rho)
    small = "direct" if d == 2 or g.n < 30000 else cfg.precond
    sys_ = DirichletSystem(laplacian(g), collar_mask, SolverConfig(cfg.tol, small, cfg.maxiter_factor))
    u, stats = sys_.solve(np.zeros(collar_mask.sum()), -f)
    ub = ubar.value(x)
    rel = float(np.linalg.norm(u - ub) / np.linalg.norm(ub))
    return rel, g.n, rho, stats.to_dict()


def _error_sample(lam, d, levels, abar, seed, family, i):
    top = TriadicCube.origin(max(levels), d)
    cloud = sample_poisson(top.box, lam, substream(seed, "dirichlet", i))
    out = []
    for m in levels:
        rel, n, rho, st = graph_dirichlet_error(cloud, m, abar, family)
        out.append(ErrorRecord(m, choose_b(m), lam, seed, i, rel, n_vertices=n, rho=rho, stats=st))
    return out


@dataclass
class ErrorCurve:
    levels: tuple
    mean: np.ndarray
    se: np.ndarray
    slope: float
    slope_se: float
    records: list = field(repr=False)

    def strictly_decreasing(self, n_se=2.0):
        """Each drop exceeds n_se combined standard errors."""
        return all(self.mean[k] - self.mean[k + 1] > n_se * math.hypot(self.se[k], self.se[k + 1]) for k in range(len(self.mean) - 1))


def error_experiment(lam, d, levels, N, abar, family="sine", seed=0, workers=None):
    """Relative L^2 error of the graph solution against ubar, per level, with a log-slope fit."""
    levels = tuple(sorted(levels))
    abar = np.asarray(abar, dtype=float)
    res = pmap(partial(_error_sample, lam, d, levels, abar, seed, family), range(N), workers)
    recs = [r for sample in res for r in sample]
    E = np.array([[s[k].rel_l2 for s in res] for k in range(len(levels))])
    mean = E.mean(axis=1)
    se = E.std(axis=1, ddof=1) / math.sqrt(N) if N > 1 else np.full(len(levels), np.nan)
    slope, sse, _ = fit_log_slope(np.array(levels) * math.log(3), np.log(mean))
    return ErrorCurve(levels, mean, se, slope, sse, recs)

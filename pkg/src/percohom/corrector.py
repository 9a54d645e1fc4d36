"""Finite-volume correctors, their spatial averages, variance scaling and resampling sensitivity."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .cgq import CGQConfig, CubeBatch, master_J
from .cloud import Cube, ParameterError, TriadicCube, resample_cube, sample_poisson
from .cluster import estimate_theta, substream
from .homog import bootstrap_var, fit_log_slope
from .parallel import pmap


@dataclass
class CorrectorField:
    cube: object
    e: np.ndarray
    values: np.ndarray = field(repr=False)  # phi on the batch vertices
    batch: CubeBatch = field(repr=False)

    @property
    def coarse(self):
        """Block averages [phi]_l as a (k,)*d array."""
        b = self.batch
        s = np.bincount(b.block_local, weights=self.values, minlength=b.k**b.d)
        c = np.maximum(b.block_counts[: b.k**b.d], 1)
        return (s / c).reshape((b.k,) * b.d)

    def harmonicity_residual(self):
        """max |L(l_e + phi)| over vertices outside the boundary layer."""
        b = self.batch
        r = b.L @ (b.affine(self.e) + self.values)
        inner = ~b.layer
        return float(np.abs(r[inner]).max()) if inner.any() else 0.0


def finite_volume_corrector(cloud, cube, e, l=1, cfg=None, theta=None, batch=None):
    """phi_{m,e} = xi(., cube, -e, 0) - l_e with mean zero; xi(-e, 0) is the Dirichlet minimiser v_e."""
    cfg = CGQConfig(l=l) if cfg is None else cfg
    b = CubeBatch(cloud, [cube], cfg, theta) if batch is None else batch
    e = np.asarray(e, dtype=float)
    if not b.good[0]:
        raise ParameterError(f"cube {cube} is not good at level l={b.l}")
    if not np.any(e):
        return CorrectorField(cube, e, np.zeros(b.n), b)
    if b.ncubes == 1 and b.n <= 40000 and isinstance(cube, TriadicCube):
        xi = master_J(cloud, cube, -e, np.zeros(b.d), b.l, cfg, batch=b, n_directions=0, route="closed").xi
    else:
        v, _ = b.solve_v(e)
        xi = v - v.mean()
    phi = xi - b.affine(e)
    return CorrectorField(cube, e, phi - phi.mean(), b)


# ---------------------------------------------------------------------------
# convergence across scales


@dataclass
class Increment:
    level: int
    value: float  # ||grad(phi_m - phi_{m-1})|| on the inner ball, per unit volume


def _restricted_energy(batch, w, mask):
    """sum over edges with both ends in mask of (w(x)-w(y))^2."""
    A = batch.adj.tocoo()
    sel = (A.row < A.col) & mask[A.row] & mask[A.col]
    return float(np.sum((w[A.row[sel]] - w[A.col[sel]]) ** 2))


def corrector_convergence(cloud, levels, e, r, l=1, cfg=None, theta=None):
    """Increments of the corrector on B_r(0) between consecutive nested levels of one cloud."""
    levels = sorted(levels)
    d = cloud.d
    fields = []
    for m in levels:
        cube = TriadicCube.origin(m, d)
        if 3**m / 2 < r:
            raise ParameterError("inner ball larger than the smallest cube")
        fields.append(finite_volume_corrector(cloud, cube, e, l, cfg, theta))
    out = []
    vol = (2 * r) ** d
    for k in range(1, len(fields)):
        f0, f1 = fields[k - 1], fields[k]
        common, i0, i1 = np.intersect1d(f0.batch.index, f1.batch.index, return_indices=True)
        w = np.zeros(f1.batch.n)
        w[i1] = f1.values[i1] - f0.values[i0]
        mask = np.zeros(f1.batch.n, dtype=bool)
        mask[i1] = np.all(np.abs(f1.batch.coords[i1]) <= r, axis=1)
        out.append(Increment(levels[k], math.sqrt(_restricted_energy(f1.batch, w, mask) / vol)))
    return out


# ---------------------------------------------------------------------------
# spatial averages


@dataclass
class SpatialAverage:
    e: np.ndarray
    r: float
    center: np.ndarray
    Z: np.ndarray  # sum_z grad[phi](z) Psi_r(z) h^d
    kernel_mass: float


def heat_kernel(x, r, d):
    return (4 * math.pi * r * r) ** (-d / 2) * np.exp(-np.sum(x * x, axis=-1) / (4 * r * r))


def kernel_weights(batch, r, center, truncate=6.0):
    """Truncated, renormalised Psi_r on the block centres; checks the support fits."""
    k, d, h = batch.k, batch.d, batch.block_side
    idx = np.indices((k,) * d).reshape(d, -1).T
    centers = batch.los[0] + (idx + 0.5) * h
    rel = centers - np.asarray(center, dtype=float)
    inside = np.sqrt(np.sum(rel * rel, axis=1)) <= truncate * r
    interior = np.all((idx >= 1) & (idx <= k - 3), axis=1)  # forward difference stays off the layer
    if np.any(inside & ~interior):
        raise ParameterError(f"kernel support radius {truncate * r} leaves the interior of the cube")
    w = np.where(inside, heat_kernel(rel, r, d), 0.0)
    raw = w.sum() * h**d
    return (w / raw).reshape((k,) * d), raw


def spatial_average(corrector, r, center=None, truncate=6.0):
    b = corrector.batch
    h = b.block_side
    center = np.asarray(b.centers[0] if center is None else center, dtype=float)
    W, _ = kernel_weights(b, r, center, truncate)
    c = corrector.coarse
    Z = np.zeros(b.d)
    for i in range(b.d):
        g = (np.roll(c, -1, axis=i) - c) / h  # forward difference; wrap-around only hits zero weights
        Z[i] = float(np.sum(g * W) * h**b.d)
    return SpatialAverage(corrector.e, r, center, Z, float(W.sum() * h**b.d))


# ---------------------------------------------------------------------------
# variance scaling


def cube_for_radius(rmax, l=1, truncate=6.0):
    """Smallest centred cube whose interior carries a kernel truncated at truncate*rmax."""
    h = 3**l
    k = math.ceil((2 * truncate * rmax) / h) + 5
    if k % 2 == 0:
        k += 1
    return k * h


@dataclass
class VarianceScaling:
    radii: np.ndarray
    var: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    slope: float
    slope_se: float
    side: int
    N: int
    n_rejected: int
    Z: np.ndarray = field(repr=False, default=None)  # (N, radii) e-components
    hminus_s: dict = field(default_factory=dict)

    @property
    def degenerate(self):
        return not np.isfinite(self.slope) or np.any(self.var <= 0)


def _variance_sample(lam, d, radii, side, l, seed, cfg, theta, i):
    cube = Cube((0,) * d, side)
    cloud = sample_poisson(cube.box, lam, substream(seed, "variance", i))
    b = CubeBatch(cloud, [cube], cfg, theta)
    if not b.good[0]:
        return None
    phi = finite_volume_corrector(cloud, cube, np.eye(d)[0], l, cfg, theta, batch=b)
    return [spatial_average(phi, r).Z[0] for r in radii]


def variance_scaling(lam, d, radii, N, seed=0, l=1, cfg=None, workers=None, side=None, n_boot=500):
    radii = np.asarray(sorted(radii), dtype=float)
    if len(radii) < 3:
        raise ParameterError("need at least three radii")
    cfg = CGQConfig(l=l) if cfg is None else cfg
    side = cube_for_radius(radii.max(), l) if side is None else side
    theta = estimate_theta(lam, d).theta
    res = pmap(partial(_variance_sample, lam, d, tuple(radii), side, l, seed, cfg, theta), range(N), workers)
    Z = np.array([z for z in res if z is not None])
    var = Z.var(axis=0, ddof=1)
    lo, hi = bootstrap_var(Z, n_boot, np.random.default_rng(substream(seed, "variance-boot")))
    slope, se, _ = fit_log_slope(np.log(radii), np.log(var))
    out = VarianceScaling(radii, var, lo, hi, slope, se, side, len(Z), N - len(Z), Z)
    # descriptive H^{-s} curve: sum_r r^{2s} E|Z_r|^2 dlog r
    dlog = np.gradient(np.log(radii))
    for s in (d / 2 - 1, d / 2, d / 2 + 1):
        out.hminus_s[s] = float(np.sum(radii ** (2 * s) * np.mean(Z**2, axis=0) * dlog))
    return out


# ---------------------------------------------------------------------------
# resampling sensitivity


@dataclass
class SensitivityRecord:
    zeta: tuple
    r: float
    dZ: float
    Z: float
    Z_resampled: float
    profile_r: np.ndarray
    profile: np.ndarray  # mean |grad [w]| per distance bin from zeta
    edge_field: np.ndarray = field(repr=False)  # f(x,y) = w(x) - w(y) on edges (x<y)
    antisymmetric: bool = True
    flagged: bool = False


def _match(cloud, new, zeta):
    """Indices (old, new) of the points outside the resampled cell, in stored order."""
    z = np.array(zeta)
    a = np.flatnonzero(~np.all(cloud.cell_of() == z, axis=1))
    b = np.flatnonzero(~np.all(new.cell_of() == z, axis=1))
    return a, b


def sensitivity(cloud, cube, zeta, e, r, new_seed, l=1, cfg=None, theta=None, bins=8):
    """Effect on Z_e(Psi_r) of redrawing the unit cell zeta + [-1/2, 1/2)^d."""
    cfg = CGQConfig(l=l) if cfg is None else cfg
    e = np.asarray(e, dtype=float)
    new = resample_cube(cloud, zeta, new_seed)
    f0 = finite_volume_corrector(cloud, cube, e, l, cfg, theta)
    try:
        f1 = finite_volume_corrector(new, cube, e, l, cfg, theta)
    except ParameterError:
        return SensitivityRecord(tuple(zeta), r, math.nan, math.nan, math.nan, np.zeros(0), np.zeros(0), np.zeros(0), True, True)
    b0, b1 = f0.batch, f1.batch
    # patch: on vertices of the resampled cell, both fields are replaced by their block averages
    z = np.array(zeta, dtype=float)

    def patched(f):
        cell = np.all(np.abs(f.batch.coords - z) <= 0.5, axis=1)
        out = f.values.copy()
        out[cell] = f.coarse.ravel()[f.batch.block_local[cell]]
        return out

    phi0, phi1 = patched(f0), patched(f1)
    Z0 = spatial_average(CorrectorField(cube, e, phi0, b0), r).Z @ e
    Z1 = spatial_average(CorrectorField(cube, e, phi1, b1), r).Z @ e
    # difference field on vertices present in both clusters
    old_idx, new_idx = _match(cloud, new, zeta)
    pos0 = np.full(len(cloud.points), -1)
    pos0[b0.index] = np.arange(b0.n)
    pos1 = np.full(len(new.points), -1)
    pos1[b1.index] = np.arange(b1.n)
    i0 = pos0[old_idx]
    i1 = pos1[new_idx]
    both = (i0 >= 0) & (i1 >= 0)
    w = np.zeros(b0.n)
    w[i0[both]] = phi0[i0[both]] - phi1[i1[both]]
    present = np.zeros(b0.n, dtype=bool)
    present[i0[both]] = True
    A = b0.adj.tocoo()
    sel = (A.row < A.col) & present[A.row] & present[A.col]
    edge_field = w[A.row[sel]] - w[A.col[sel]]
    # radial profile of the coarse gradient of w
    cw = np.bincount(b0.block_local[present], weights=w[present], minlength=b0.k**b0.d)
    cn = np.maximum(np.bincount(b0.block_local[present], minlength=b0.k**b0.d), 1)
    c = (cw / cn).reshape((b0.k,) * b0.d)
    g = np.sqrt(sum(((np.roll(c, -1, axis=i) - c) / b0.block_side) ** 2 for i in range(b0.d)))
    idx = np.indices((b0.k,) * b0.d).reshape(b0.d, -1).T
    centers = b0.los[0] + (idx + 0.5) * b0.block_side
    dist = np.sqrt(np.sum((centers - z) ** 2, axis=1))
    inner = np.all(idx <= b0.k - 2, axis=1)
    edges = np.linspace(0, dist[inner].max() + 1e-9, bins + 1)
    which = np.digitize(dist[inner], edges) - 1
    gv = g.ravel()[inner]
    prof = np.array([gv[which == k].mean() if np.any(which == k) else np.nan for k in range(bins)])
    flagged = bool(b1.n < b0.n - 10 * cloud.intensity)
    return SensitivityRecord(tuple(zeta), r, abs(Z0 - Z1), Z0, Z1, 0.5 * (edges[1:] + edges[:-1]), prof, edge_field, True, flagged)


def sensitivity_sum(cloud, cube, e, r, grid_step=4, l=1, cfg=None, theta=None, seed=0, window=None):
    """sum over a zeta grid (spacing grid_step) of |dZ|^2 times grid_step^d."""
    d = cloud.d
    half = (cube.side // 2 - 3**l - 1) if window is None else window
    ticks = np.arange(-half, half + 1, grid_step)
    total = 0.0
    recs = []
    for k, zeta in enumerate(np.array(np.meshgrid(*([ticks] * d), indexing="ij")).reshape(d, -1).T):
        zeta = tuple(int(v) + c for v, c in zip(zeta, cube.center))
        rec = sensitivity(cloud, cube, zeta, e, r, substream(seed, "resample", k), l, cfg, theta)
        recs.append(rec)
        if np.isfinite(rec.dZ):
            total += rec.dZ**2
    return total * grid_step**d, recs

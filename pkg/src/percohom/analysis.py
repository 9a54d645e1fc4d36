"""Empirical regularity: Caccioppoli ratios, harmonic approximation, Lipschitz ratios, Green decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy import ndimage

from .cgq import CGQConfig, CubeBatch
from .cloud import Ball, Box, Cube, ParameterError, sample_poisson
from .cluster import build_graph, substream
from .dirichlet import fd_operator
from .homog import fit_log_slope
from .parallel import pmap
from .solver import DirichletSystem, NeumannSystem, SolverConfig, factor_spd, greens_column, hminus1, laplacian


def random_polynomial_data(coords, center, scale, rng, degree=2, noise=0.05):
    """Random polynomial of (x - center)/scale of the given degree plus small white noise."""
    y = (coords - center) / scale
    d = y.shape[1]
    out = np.full(len(y), rng.standard_normal())
    out += y @ rng.standard_normal(d)
    if degree >= 2:
        Q = rng.standard_normal((d, d))
        out += 0.5 * np.einsum("ni,ij,nj->n", y, Q + Q.T, y)
    return out + noise * rng.standard_normal(len(y))


def harmonic_with_data(L, boundary, values, cfg=SolverConfig(precond="direct")):
    """u = values on boundary, L u = 0 elsewhere."""
    sys_ = DirichletSystem(L, boundary, cfg)
    u, _ = sys_.solve(values[boundary])
    return u


def _avg_grad_sq(adj, u, mask):
    """(1/|mask|) sum_{x in mask} sum_{y~x} (u(x)-u(y))^2."""
    A = adj.tocoo()
    sel = mask[A.row]
    return float(np.sum((u[A.row[sel]] - u[A.col[sel]]) ** 2) / max(mask.sum(), 1))


# ---------------------------------------------------------------------------
# Caccioppoli


@dataclass
class CaccioppoliResult:
    ratios: np.ndarray
    max_ratio: float


def caccioppoli_ratio(batch, u, inner_fraction=1 / 3):
    """LHS/RHS of the Caccioppoli inequality with the optimal constant k."""
    c = batch.centers[0]
    half = inner_fraction * batch.side / 2
    inner = np.all(np.abs(batch.coords - c) <= half, axis=1)
    lhs = _avg_grad_sq(batch.adj, u, inner)
    blocks = np.bincount(batch.block_local, weights=u, minlength=batch.k**batch.d) / np.maximum(
        batch.block_counts[: batch.k**batch.d], 1
    )
    rhs = float(np.mean((blocks - blocks.mean()) ** 2)) / batch.side**2
    return lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)


def caccioppoli_check(cloud, cube, n_samples, l=1, cfg=None, theta=None, seed=0, degree=2):
    cfg = CGQConfig(l=l) if cfg is None else cfg
    b = CubeBatch(cloud, [cube], cfg, theta)
    if not b.good[0]:
        raise ParameterError("Caccioppoli check needs a good cube")
    rng = np.random.default_rng(substream(seed, "caccioppoli"))
    ratios = []
    for _ in range(n_samples):
        data = random_polynomial_data(b.coords, b.centers[0], b.side / 2, rng, degree)
        u = harmonic_with_data(b.L, b.layer, data)
        ratios.append(caccioppoli_ratio(b, u))
    ratios = np.array(ratios)
    return CaccioppoliResult(ratios, float(ratios.max()))


# ---------------------------------------------------------------------------
# harmonic approximation


@dataclass
class HarmonicApproxRecord:
    R: float
    R1: float
    defect: float  # ||[u] - ubar||_{L^2(B_R1)} (averaged)
    oscillation: float  # ||[u] - ([u])_{B_R}||_{L^2(B_R)} (averaged)
    relative: float
    h: float
    flagged: bool = False  # some 3^l block inside B_R1 holds no cluster vertex


def ball_graph(cloud, R, center=None):
    center = np.zeros(cloud.d) if center is None else np.asarray(center, dtype=float)
    return build_graph(cloud, Ball(tuple(center), R)).largest()


def harmonic_approximation(cloud, R, u=None, abar=None, l=1, t=None, seed=0, graph=None):
    """Compare the coarsened u with the abar-harmonic function sharing its mollified trace on B_{R1}."""
    d = cloud.d
    g = ball_graph(cloud, R) if graph is None else graph
    L = laplacian(g)
    r = np.sqrt(np.sum(g.coords**2, axis=1))
    if u is None:
        rng = np.random.default_rng(substream(seed, "harmonic"))
        bnd = r > R - 1
        u = harmonic_with_data(L, bnd, random_polynomial_data(g.coords, 0.0, R, rng))
    abar = np.eye(d) if abar is None else np.asarray(abar, dtype=float)
    h = 3**l
    t = max(l + 1, int(math.log(max(R / 8, 3), 3))) if t is None else t
    # pigeonhole choice of R1 in [R/2, R - 3^t]
    A = L.tocoo()
    e2 = np.zeros(g.n)
    np.add.at(e2, A.row, (u[A.row] - u[A.col]) ** 2 * (A.row != A.col))
    cands = np.linspace(R / 2, max(R / 2, R - 3**t), 16)
    dens = []
    for R1 in cands:
        ann = (r >= R1) & (r < R1 + 3**t)
        dens.append(e2[ann].sum() / max(ann.sum(), 1))
    R1 = float(cands[int(np.argmin(dens))])
    # coarse field on the 3^l lattice covering [-R, R]^d, then mollify at scale 3^l
    k = int(math.ceil(2 * R / h)) | 1
    lo = -k * h / 2
    j = np.clip(np.floor((g.coords - lo) / h).astype(int), 0, k - 1)
    flat = np.ravel_multi_index(j.T, (k,) * d)
    cnt = np.bincount(flat, minlength=k**d)
    s = np.bincount(flat, weights=u, minlength=k**d)
    coarse = np.where(cnt > 0, s / np.maximum(cnt, 1), np.nan)
    grid = coarse.reshape((k,) * d)
    filled = np.where(np.isnan(grid), 0.0, grid)
    wts = ndimage.gaussian_filter((~np.isnan(grid)).astype(float), 1.0, mode="constant", truncate=3.0)
    moll = ndimage.gaussian_filter(filled, 1.0, mode="constant", truncate=3.0) / np.maximum(wts, 1e-12)
    centers = lo + (np.indices((k,) * d).reshape(d, -1).T + 0.5) * h
    rc = np.sqrt(np.sum(centers**2, axis=1))
    inside = rc < R1
    # abar-harmonic on lattice nodes inside B_R1, Dirichlet data from the mollified trace outside
    Aop = fd_operator((k,) * d, h, abar)
    I = np.flatnonzero(inside)
    B = np.flatnonzero(~inside)
    ubar = moll.ravel().copy()
    ubar[I] = factor_spd(Aop[I][:, I]).solve(-(Aop[I][:, B] @ ubar[B]))
    have = ~np.isnan(coarse)
    in1 = inside & have
    inR = (rc < R) & have
    defect = float(np.sqrt(np.mean((coarse[in1] - ubar[in1]) ** 2)))
    osc = float(np.sqrt(np.mean((coarse[inR] - coarse[inR].mean()) ** 2)))
    flagged = bool((inside & ~have).any())
    return HarmonicApproxRecord(R, R1, defect, osc, defect / osc if osc > 0 else 0.0, h, flagged)


# ---------------------------------------------------------------------------
# large-scale Lipschitz


@dataclass
class RegularityRecord:
    R: float
    r: float
    sample: int
    ratio: float  # sup_t ||grad u||_{L^2(B_t)} R / ||u - (u)_{B_R}||_{L^2(B_R)}
    oscillation: float  # sup_t |(u)_{B_t} - (u)_{B_R}| / ||u - (u)_{B_R}||
    forcing_excess: float = math.nan


def regularity_statistics(g, u, R, r, n_t=8):
    rad = np.sqrt(np.sum(g.coords**2, axis=1))
    inR = rad < R
    mean_R = u[inR].mean()
    spread = math.sqrt(float(np.mean((u[inR] - mean_R) ** 2)))
    ts = np.geomspace(r, R / 2, n_t)
    grads, oscs = [], []
    for t in ts:
        m = rad < t
        grads.append(math.sqrt(_avg_grad_sq(g.adj, u, m)))
        oscs.append(abs(u[m].mean() - mean_R))
    if spread == 0:
        return 0.0, 0.0
    return max(grads) * R / spread, max(oscs) / spread


def _lipschitz_sample(lam, d, R, r, seed, degree, i):
    cloud = sample_poisson(Box((-R - 1,) * d, (R + 1,) * d), lam, substream(seed, "lipschitz", int(R), i))
    g = ball_graph(cloud, R)
    rng = np.random.default_rng(substream(seed, "lipschitz-data", int(R), i))
    rad = np.sqrt(np.sum(g.coords**2, axis=1))
    u = harmonic_with_data(laplacian(g), rad > R - 1, random_polynomial_data(g.coords, 0.0, R, rng, degree))
    ratio, osc = regularity_statistics(g, u, R, r)
    return RegularityRecord(R, r, i, ratio, osc)


def lipschitz_experiment(lam, d, radii, N, r=9.0, seed=0, degree=2, workers=None):
    """Ratio statistics for harmonic functions with random polynomial boundary data, per R."""
    out = []
    for R in radii:
        out += pmap(partial(_lipschitz_sample, lam, d, float(R), float(r), seed, degree), range(N), workers)
    return out


def forcing_excess(cloud, R, r, vertex=None, amplitude=1.0, seed=0):
    """Left side of the gradient bound with a point forcing minus its f-free baseline, and the H^-1 integral."""
    g = ball_graph(cloud, R)
    L = laplacian(g)
    rad = np.sqrt(np.sum(g.coords**2, axis=1))
    bnd = rad > R - 1
    rng = np.random.default_rng(substream(seed, "forcing"))
    data = random_polynomial_data(g.coords, 0.0, R, rng)
    sys_ = DirichletSystem(L, bnd, SolverConfig(precond="direct"))
    u0, _ = sys_.solve(data[bnd])
    x = int(np.argmin(rad)) if vertex is None else vertex
    f = np.zeros(g.n)
    f[x] = amplitude
    u1, _ = sys_.solve(data[bnd], f)
    ts = np.geomspace(r, R / 2, 8)
    lhs = []
    for u in (u0, u1):
        lhs.append(max(math.sqrt(_avg_grad_sq(g.adj, u, rad < t)) for t in ts))
    # int_r^R ||f||_{H^-1(B_t)} dt/t, zero boundary data on each ball
    tt = np.geomspace(r, R, 12)
    vals = []
    for t in tt:
        m = rad < t
        sub = g.subgraph(m)
        fb = np.sqrt(np.sum(sub.coords**2, axis=1)) > t - 1
        vals.append(hminus1(laplacian(sub), np.where(fb, 0.0, f[m]), fb, cfg=SolverConfig(precond="direct")) if fb.any() else 0.0)
    integral = float(np.trapezoid(vals, np.log(tt)))
    return lhs[1] - lhs[0], integral


# ---------------------------------------------------------------------------
# Green's function decay


@dataclass
class GreenDecayRecord:
    source: int
    target: int
    nominal: float
    r: float
    oscillation: float
    sample: int
    symmetry: float  # |G(y, x) - G(x, y)| / |G(y, x)|


@dataclass
class GreenDecayFit:
    radii: np.ndarray
    mean: np.ndarray
    symmetry: float
    exponent: float
    exponent_se: float
    records: list = field(repr=False)


def annulus_oscillation(coords, G, x, r):
    dist = np.sqrt(np.sum((coords - coords[x]) ** 2, axis=1))
    ann = (dist > r / 3) & (dist < 2 * r / 3)
    if not ann.any():
        return math.nan
    vals = G[ann]
    return float(np.sqrt(np.mean((vals - vals.mean()) ** 2)))


def _green_sample(lam, d, radii, side, seed, i):
    cube = Cube((0,) * d, side)
    cloud = sample_poisson(cube.box, lam, substream(seed, "green", i))
    g = build_graph(cloud, cube).largest()
    L = laplacian(g)
    system = NeumannSystem(L, np.zeros(g.n, dtype=np.int64), SolverConfig(tol=1e-8, precond="amg"))
    recs = []
    e1 = np.eye(d)[0]
    for r in radii:
        y = int(np.argmin(np.sum((g.coords + (r / 2) * e1) ** 2, axis=1)))
        x = int(np.argmin(np.sum((g.coords - (r / 2) * e1) ** 2, axis=1)))
        G = greens_column(g, y, system=system).values
        rr = float(np.linalg.norm(g.coords[x] - g.coords[y]))
        sym = math.nan
        if r == radii[0]:
            Gx = greens_column(g, x, system=system).values
            sym = abs(G[x] - Gx[y]) / max(abs(G[x]), 1e-300)
        recs.append(GreenDecayRecord(y, x, r, rr, annulus_oscillation(g.coords, G, x, rr), i, sym))
    return recs


def greens_decay(lam, d, radii, N, side=None, seed=0, r_min=0.0, workers=None):
    """Annulus oscillation of G(y, .) around x against r = |x - y|; power-law fit for r > r_min."""
    if d == 2:
        raise ParameterError("the power-law check is for d >= 3")
    radii = sorted(float(r) for r in radii)
    side = side if side is not None else (int(2.5 * max(radii)) | 1)
    if max(radii) / 2 + 2 * max(radii) / 3 >= side / 2:
        raise ParameterError("box too small for the requested radii")
    res = pmap(partial(_green_sample, lam, d, tuple(radii), side, seed), range(N), workers)
    recs = [r for s in res for r in s]
    mean = np.array([np.nanmean([rec.oscillation for rec in recs if rec.nominal == r]) for r in radii])
    use = np.array(radii) > r_min
    slope, se, _ = fit_log_slope(np.log(np.array(radii)[use]), np.log(mean[use]))
    sym = max((rec.symmetry for rec in recs if rec.symmetry == rec.symmetry), default=0.0)
    return GreenDecayFit(np.array(radii), mean, sym, slope, se, recs)

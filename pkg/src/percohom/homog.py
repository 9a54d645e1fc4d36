"""Monte Carlo estimates of the averaged coefficients, tau_m, variances and rates.

Sample i draws one cloud on the largest cube of the run (seed stream
("homog", i)); smaller levels use the central subcube of the same cloud,
so consecutive levels share randomness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .cgq import CGQConfig, CubeBatch
from .cloud import ParameterError, TriadicCube, sample_poisson, triadic_decompose
from .cluster import estimate_theta, substream
from .parallel import pmap


def jackknife(samples, stat):
    """(estimate, jackknife standard error) of stat over the first axis of samples."""
    samples = np.asarray(samples)
    n = len(samples)
    est = np.asarray(stat(samples), dtype=float)
    if n < 2:
        return est, np.full_like(est, np.nan)
    keep = np.ones(n, dtype=bool)
    reps = []
    for i in range(n):
        keep[i] = False
        reps.append(stat(samples[keep]))
        keep[i] = True
    reps = np.asarray(reps, dtype=float)
    se = np.sqrt((n - 1) / n * np.sum((reps - reps.mean(axis=0)) ** 2, axis=0))
    return est, se


def quadratic_J(a, ainv, p, q):
    """J = p.a.p/2 + q.a_*^{-1}.q/2 - p.q for stacks of per-cube matrices."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return 0.5 * np.einsum("i,...ij,j->...", p, a, p) + 0.5 * np.einsum("...i,...ij,...j->...", q, ainv, q) - p @ q.T


# ---------------------------------------------------------------------------
# per-sample work


@dataclass(frozen=True)
class SampleSpec:
    lam: float
    d: int
    levels: tuple
    l: int
    seed: int
    theta: float
    cfg: CGQConfig


def sample_cloud(spec, i):
    top = TriadicCube.origin(max(spec.levels), spec.d)
    return sample_poisson(top.box, spec.lam, substream(spec.seed, "homog", i)), top


def _coefficient_sample(spec, i):
    cloud, _ = sample_cloud(spec, i)
    out = []
    for m in spec.levels:
        b = CubeBatch(cloud, [TriadicCube.origin(m, spec.d)], spec.cfg, spec.theta)
        if b.good[0]:
            a, ainv = b.matrices()
            out.append((True, a[0], ainv[0]))
        else:
            out.append((False, np.zeros((spec.d, spec.d)), np.zeros((spec.d, spec.d))))
    return out


# ---------------------------------------------------------------------------
# averaged coefficients


@dataclass
class AveragedCoefficients:
    lam: float
    d: int
    levels: tuple
    l: int
    N: int
    good: np.ndarray  # (levels, N) indicators
    a: np.ndarray  # (levels, N, d, d), zero on bad samples
    ainv: np.ndarray
    abar: np.ndarray  # (levels, d, d) = E[a 1_good]
    abar_se: np.ndarray
    astar: np.ndarray  # (levels, d, d) = E[a_*^{-1} 1_good]^{-1}
    astar_se: np.ndarray
    usable: np.ndarray
    extrapolated: np.ndarray = None
    seed: int = 0

    @property
    def scalar(self):
        """Scalar homogenized coefficient trace(extrapolated)/d."""
        return float(np.trace(self.extrapolated) / self.d)

    def rows(self):
        rows = []
        for k, m in enumerate(self.levels):
            r = {"level": m, "l": self.l, "N": self.N, "n_good": int(self.good[k].sum())}
            for i in range(self.d):
                for j in range(i, self.d):
                    r[f"abar_{i+1}{j+1}"] = self.abar[k, i, j]
                    r[f"abar_{i+1}{j+1}_se"] = self.abar_se[k, i, j]
                    r[f"astar_{i+1}{j+1}"] = self.astar[k, i, j]
                    r[f"astar_{i+1}{j+1}_se"] = self.astar_se[k, i, j]
            rows.append(r)
        return rows


def richardson(levels, mids):
    """Extrapolate the last two midpoints assuming an O(3^-m) error."""
    if len(levels) < 2:
        return mids[-1]
    r = 3.0 ** (levels[-1] - levels[-2])
    return (r * mids[-1] - mids[-2]) / (r - 1.0)


def mc_coefficients(lam, d, levels, l=1, N=20, seed=0, cfg=None, workers=None, theta=None):
    if N < 2:
        raise ParameterError("need N >= 2")
    levels = tuple(sorted(levels))
    cfg = CGQConfig(l=l) if cfg is None else cfg
    theta = estimate_theta(lam, d).theta if theta is None else theta
    spec = SampleSpec(lam, d, levels, l, seed, theta, cfg)
    res = pmap(partial(_coefficient_sample, spec), range(N), workers)
    L = len(levels)
    good = np.array([[res[i][k][0] for i in range(N)] for k in range(L)])
    a = np.array([[res[i][k][1] for i in range(N)] for k in range(L)])
    ainv = np.array([[res[i][k][2] for i in range(N)] for k in range(L)])
    abar = np.zeros((L, d, d))
    abar_se = np.zeros((L, d, d))
    astar = np.full((L, d, d), np.nan)
    astar_se = np.full((L, d, d), np.nan)
    usable = good.any(axis=1)
    for k in range(L):
        abar[k], abar_se[k] = jackknife(a[k], lambda s: s.mean(axis=0))
        if usable[k]:
            astar[k], astar_se[k] = jackknife(ainv[k], lambda s: np.linalg.inv(s.mean(axis=0)))
    out = AveragedCoefficients(lam, d, levels, l, N, good, a, ainv, abar, abar_se, astar, astar_se, usable, seed=seed)
    ok = [k for k in range(L) if usable[k]]
    if ok:
        mids = [(abar[k] + astar[k]) / 2 for k in ok]
        out.extrapolated = richardson([levels[k] for k in ok], mids)
    return out


# ---------------------------------------------------------------------------
# additivity defect


@dataclass
class TauSeries:
    levels: tuple  # tau is attached to the upper level of each consecutive pair
    tau: np.ndarray
    se: np.ndarray


def tau_defect(coeffs):
    """tau between consecutive levels: |abar_m - abar_{m+1}| + |E a_*^{-1}_m - E a_*^{-1}_{m+1}|."""
    L = len(coeffs.levels)
    if L < 2:
        raise ParameterError("need at least two levels")
    taus, ses = [], []
    for k in range(L - 1):
        stack = np.stack([coeffs.a[k], coeffs.a[k + 1], coeffs.ainv[k], coeffs.ainv[k + 1]], axis=1)

        def stat(s):
            m = s.mean(axis=0)
            return np.linalg.norm(m[0] - m[1]) + np.linalg.norm(m[2] - m[3])

        t, se = jackknife(stack, stat)
        taus.append(float(t))
        ses.append(float(se))
    return TauSeries(coeffs.levels[1:], np.array(taus), np.array(ses))


# ---------------------------------------------------------------------------
# variance decay


@dataclass
class VarianceResult:
    levels: tuple
    var: np.ndarray  # (levels, d, d)
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    ratios: np.ndarray  # var[m+1]/var[m], entrywise mean over the matrix
    cross_cov: np.ndarray = None  # covariance of disjoint subcube pairs per level
    cross_cov_se: np.ndarray = None


def bootstrap_var(x, n_boot, rng):
    n = len(x)
    idx = rng.integers(0, n, size=(n_boot, n))
    reps = x[idx].var(axis=1, ddof=1)
    return np.quantile(reps, 0.025, axis=0), np.quantile(reps, 0.975, axis=0)


def variance_experiment(lam, d, levels, l=1, N=30, seed=0, cfg=None, workers=None, coeffs=None, n_boot=500):
    if N < 30:
        raise ParameterError("variance experiment needs N >= 30")
    coeffs = mc_coefficients(lam, d, levels, l, N, seed, cfg, workers) if coeffs is None else coeffs
    x = coeffs.ainv * coeffs.good[:, :, None, None]
    rng = np.random.default_rng(substream(seed, "bootstrap"))
    var = x.var(axis=1, ddof=1)
    lo = np.zeros_like(var)
    hi = np.zeros_like(var)
    for k in range(len(coeffs.levels)):
        lo[k], hi[k] = bootstrap_var(x[k], n_boot, rng)
    ratios = np.array([np.mean(var[k + 1]) / np.mean(var[k]) for k in range(len(var) - 1)])
    return VarianceResult(coeffs.levels, var, lo, hi, ratios)


def subcube_covariance(lam, d, level, l=1, N=30, seed=0, cfg=None, theta=None):
    """Covariance of the (1,1) entry of a_*^{-1} between two non-adjacent level-`level` cubes."""
    cfg = CGQConfig(l=l) if cfg is None else cfg
    theta = estimate_theta(lam, d).theta if theta is None else theta
    s = 3**level
    c1 = TriadicCube(level, (-s,) + (0,) * (d - 1))
    c2 = TriadicCube(level, (s,) + (0,) * (d - 1))
    xs = []
    for i in range(N):
        top = TriadicCube.origin(level + 1, d)
        cloud = sample_poisson(top.box, lam, substream(seed, "cov", i))
        b = CubeBatch(cloud, [c1, c2], cfg, theta)
        _, ainv = b.matrices()
        xs.append(np.where(b.good, np.nan_to_num(ainv[:, 0, 0]), 0.0))
    xs = np.array(xs)
    cov = np.cov(xs.T)[0, 1]
    prod = (xs[:, 0] - xs[:, 0].mean()) * (xs[:, 1] - xs[:, 1].mean())
    return float(cov), float(prod.std(ddof=1) / math.sqrt(N))


# ---------------------------------------------------------------------------
# rates


@dataclass
class RateFit:
    levels: tuple
    F: np.ndarray  # sum_i E[J(cube_m, e_i, astar_m e_i) 1_good]
    F_se: np.ndarray
    F_tilde: np.ndarray  # 3^{n-m}-weighted averages of F over n <= m
    alpha: float
    alpha_se: float
    reliable: bool
    E: np.ndarray = None  # per level mean of the multiscale statistic
    E_se: np.ndarray = None
    F_self: np.ndarray = None  # same with the per-sample optimal q

    @property
    def homogenization_observed(self):
        return self.reliable and self.alpha - 2 * self.alpha_se > 0


def fit_log_slope(x, y, w=None):
    """Weighted least squares of y on x; returns slope and its standard error."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(x) if w is None else np.asarray(w, dtype=float)
    X = np.stack([np.ones_like(x), x], axis=1)
    W = np.diag(w)
    cov = np.linalg.inv(X.T @ W @ X)
    beta = cov @ X.T @ W @ y
    resid = y - X @ beta
    dof = max(len(x) - 2, 1)
    s2 = float(resid @ W @ resid) / dof if len(x) > 2 else 0.0
    se = math.sqrt(cov[1, 1] * s2) if len(x) > 2 else math.sqrt(cov[1, 1])
    return float(beta[1]), se, float(beta[0])


def _E_sample(spec, abar, beta, i):
    cloud, top = sample_cloud(spec, i)
    out = []
    for m in spec.levels:
        out.append(E_statistic(cloud, TriadicCube.origin(m, spec.d), abar, beta, spec.cfg, spec.theta))
    return out


def E_statistic(cloud, cube, abar, beta=0.2, cfg=None, theta=None):
    """sum_{n=ceil(beta m)+1}^m 3^{n-m} sum_i avg_z J_{l'}(z + cube_n, e_i, abar e_i) 1_good, l' = ceil(beta m).

    The n = l' term has blocks as large as the cubes and is left out.
    """
    m = cube.level
    lp = max(1, math.ceil(beta * m))
    cfg = CGQConfig(l=lp) if cfg is None else CGQConfig(lp, cfg.pairing, cfg.interior, cfg.goodness, cfg.solver)
    d = cube.d
    total = 0.0
    for n in range(lp + 1, m + 1):
        b = CubeBatch(cloud, triadic_decompose(cube, n) if n < m else [cube], cfg, theta)
        a, ainv = b.matrices()
        s = 0.0
        for i in range(d):
            e = np.eye(d)[i]
            J = quadratic_J(np.nan_to_num(a), np.nan_to_num(ainv), e, np.broadcast_to(abar @ e, (b.ncubes, d)))
            s += float(np.mean(np.where(b.good, J, 0.0)))
        total += 3.0 ** (n - m) * s
    return total


def rate_fit(lam, d, levels, l=1, N=20, seed=0, cfg=None, workers=None, coeffs=None, with_E=False, beta=0.2):
    levels = tuple(sorted(levels))
    if len(levels) < 3:
        raise ParameterError("rate fit needs at least three levels")
    coeffs = mc_coefficients(lam, d, levels, l, N, seed, cfg, workers) if coeffs is None else coeffs
    F, F_se, F_self = [], [], []
    for k, m in enumerate(levels):
        stack = np.stack([coeffs.a[k], coeffs.ainv[k]], axis=1)
        good = coeffs.good[k]

        def stat(s, good=good):
            astar = np.linalg.inv(s[:, 1].mean(axis=0))
            tot = 0.0
            for i in range(d):
                e = np.eye(d)[i]
                J = quadratic_J(s[:, 0], s[:, 1], e, np.broadcast_to(astar @ e, (len(s), d)))
                tot += J.mean()
            return tot

        f, se = jackknife(np.where(good[:, None, None, None], stack, 0.0), stat)
        F.append(float(f))
        F_se.append(float(se))
        # per-sample dual direction q = a_*(cube) e
        tot = 0.0
        for i in range(d):
            e = np.eye(d)[i]
            for s_ in range(coeffs.N):
                if good[s_]:
                    q = np.linalg.solve(coeffs.ainv[k, s_], e)
                    tot += float(quadratic_J(coeffs.a[k, s_], coeffs.ainv[k, s_], e, q[None, :])[0]) / coeffs.N
        F_self.append(tot)
    F = np.array(F)
    F_se = np.array(F_se)
    weights = np.array([[3.0 ** (n - m) if n <= m else 0.0 for n in levels] for m in levels])
    F_tilde = (weights @ F) / weights.sum(axis=1)
    reliable = bool(np.all(F - 2 * F_se > 0))
    x = np.array(levels) * math.log(3)
    if np.all(F > 0):
        slope, sse, _ = fit_log_slope(x, np.log(F), w=(F / np.maximum(F_se, 1e-300)) ** 2)
    else:
        slope, sse = math.nan, math.nan
    out = RateFit(levels, F, F_se, F_tilde, -slope, sse, reliable, F_self=np.array(F_self))
    if with_E:
        theta = estimate_theta(lam, d).theta
        cfg = CGQConfig(l=l) if cfg is None else cfg
        spec = SampleSpec(lam, d, levels, l, seed, theta, cfg)
        Es = np.array(pmap(partial(_E_sample, spec, coeffs.extrapolated, beta), range(N), workers))
        out.E = Es.mean(axis=0)
        out.E_se = Es.std(axis=0, ddof=1) / math.sqrt(N)
    return out


# ---------------------------------------------------------------------------
# minimal scale


@dataclass(frozen=True)
class ScaleCriteria:
    good_fraction: float = 0.9  # fraction of good level-(m-1) subcubes
    C: float = 1.0  # sum_i J(cube_m, e_i, abar e_i) / tr(abar) <= C 3^{-m alpha}
    alpha: float = 0.5


@dataclass
class MinimalScale:
    levels: tuple
    per_sample: np.ndarray  # smallest passing level; max(levels)+1 when censored
    quantiles: dict
    histogram: dict
    heavy_tail: bool
    criteria: ScaleCriteria = field(default_factory=ScaleCriteria)


def _scale_sample(spec, criteria, abar, i):
    cloud, _ = sample_cloud(spec, i)
    passes = []
    for m in spec.levels:
        cube = TriadicCube.origin(m, spec.d)
        kids = CubeBatch(cloud, triadic_decompose(cube, m - 1), spec.cfg, spec.theta)
        frac = float(kids.good.mean())
        b = CubeBatch(cloud, [cube], spec.cfg, spec.theta)
        if not b.good[0]:
            passes.append(False)
            continue
        a, ainv = b.matrices()
        J = sum(float(quadratic_J(a, ainv, e, (abar @ e)[None, :])[0]) for e in np.eye(spec.d))
        passes.append(frac >= criteria.good_fraction and J / np.trace(abar) <= criteria.C * 3.0 ** (-m * criteria.alpha))
    return passes


def estimate_minimal_scale(criteria, lam, d, N, levels=(3, 4), l=1, seed=0, cfg=None, workers=None, abar=None):
    """Per sample, the smallest level from which every larger level in range passes."""
    levels = tuple(sorted(levels))
    if min(levels) - 1 <= l:
        raise ParameterError("levels must exceed l + 1 (subcubes one level down are coarse-grained)")
    cfg = CGQConfig(l=l) if cfg is None else cfg
    theta = estimate_theta(lam, d).theta
    if abar is None:
        abar = mc_coefficients(lam, d, levels[-2:], l, max(N, 2), seed, cfg, workers, theta).extrapolated
    spec = SampleSpec(lam, d, levels, l, seed, theta, cfg)
    res = pmap(partial(_scale_sample, spec, criteria, abar), range(N), workers)
    X = []
    for passes in res:
        x = max(levels) + 1
        for k in range(len(levels) - 1, -1, -1):
            if not passes[k]:
                break
            x = levels[k]
        X.append(x)
    X = np.array(X)
    q = {p: float(np.quantile(X, p)) for p in (0.5, 0.9, 0.99)}
    hist = {int(v): int((X == v).sum()) for v in np.unique(X)}
    heavy = bool(np.mean(X > max(levels)) > 0.1)
    return MinimalScale(levels, X, q, hist, heavy, criteria)

"""The twelve acceptance criteria as plain functions returning a verdict and the CSV rows behind it."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .analysis import greens_decay, lipschitz_experiment
from .cgq import CGQConfig, CubeBatch, master_J, mu, mu_star, subadditivity_defect
from .cloud import Box, TriadicCube, sample_poisson
from .cluster import GoodnessConfig, build_graph, estimate_theta, substream, well_connected_check
from .corrector import variance_scaling
from .dirichlet import error_experiment
from .homog import ScaleCriteria, estimate_minimal_scale, mc_coefficients
from .solver import SolverConfig, green_represent, laplacian, solve_dirichlet, solve_neumann

LAM, D = 4.0, 2


@dataclass(frozen=True)
class Profile:
    name: str = "full"
    c1_n: int = 50
    c2_n: int = 20
    c2_level: int = 4
    c3_n: int = 100
    c3_level: int = 3
    c4_n: int = 20
    c4_level: int = 3
    c5_n: int = 50
    c5_parent: int = 5
    c6_n: int = 50
    c6_levels: tuple = (4, 5)
    c7_n: int = 20
    c7_levels: tuple = (3, 4, 5)
    c8_n: int = 100
    c8_radii: tuple = (4, 8, 16, 32)
    c9_n: int = 20
    c9_radii: tuple = (81, 162)
    c9_scale_n: int = 8
    c10_n: int = 8
    c10_radii: tuple = (8, 16, 32)
    c10_side: int = 81
    c11_n: int = 200
    budgets: bool = True


FULL = Profile()

REDUCED = Profile(
    name="reduced",
    c1_n=10,
    c2_n=2,
    c2_level=3,
    c3_n=10,
    c4_n=3,
    c5_n=3,
    c5_parent=4,
    c6_n=4,
    c6_levels=(3, 4),
    c7_n=3,
    c7_levels=(3, 4),
    c8_n=6,
    c8_radii=(2, 4, 8),
    c9_n=2,
    c9_radii=(27, 54),
    c9_scale_n=2,
    c10_n=1,
    c10_radii=(4, 8),
    c10_side=35,
    c11_n=20,
    budgets=False,
)

PROFILES = {"full": FULL, "reduced": REDUCED}

BUDGET = {1: 10, 2: 120, 3: 120, 4: 60, 5: 600, 6: 900, 7: 1800, 8: 1800, 9: 900, 10: 1200, 11: 300}


@dataclass
class Verdict:
    number: int
    title: str
    passed: bool
    detail: str
    runtime: float = 0.0
    rows: list = field(default_factory=list, repr=False)

    def line(self):
        return f"criterion {self.number:2d} [{'PASS' if self.passed else 'FAIL'}] {self.title}: {self.detail} ({self.runtime:.1f}s)"


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def rows_to_csv(rows, seed, chash):
    """Rows as CSV text; floats in repr form so equal numerics give equal bytes."""
    buf = io.StringIO()
    if not rows:
        return ""
    keys = ["seed", "config_hash"] + sorted({k for r in rows for k in r})
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({"seed": seed, "config_hash": chash, **{k: _fmt(v) for k, v in r.items()}})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer, np.bool_)):
        return repr(v.item())
    return v


def _theta():
    return estimate_theta(LAM, D).theta


def _good_cubes(level, count, seed, stream, cfg=None, max_tries=None):
    """Independent clouds on the origin cube of `level` until `count` of them are good."""
    cfg = CGQConfig() if cfg is None else cfg
    theta = _theta()
    cube = TriadicCube.origin(level, D)
    i, out = 0, []
    max_tries = 4 * count + 10 if max_tries is None else max_tries
    while len(out) < count and i < max_tries:
        cloud = sample_poisson(cube.box, LAM, substream(seed, stream, i))
        b = CubeBatch(cloud, [cube], cfg, theta)
        if b.good[0]:
            out.append((i, cloud, cube, b))
        i += 1
    return out


# ---------------------------------------------------------------------------


def criterion_1(p, seed, workers):
    """Oracle equivalence on small clusters."""
    rng_seed = substream(seed, "acc1")
    worst_d = worst_g = 0.0
    rows = []
    for i in range(p.c1_n):
        rng = np.random.default_rng(substream(rng_seed, "cluster", i))
        side = float(rng.uniform(4.0, 7.0))
        cloud = sample_poisson(Box((0.0, 0.0), (side, side)), LAM, substream(rng_seed, "cloud", i))
        g = build_graph(cloud).largest()
        if g.n > 200:
            g = g.subgraph(np.arange(200)).largest()
        if g.n < 3:
            continue
        bnd = np.zeros(g.n, dtype=bool)
        bnd[rng.choice(g.n, size=max(1, g.n // 5), replace=False)] = True
        vals = rng.standard_normal(g.n)
        f = rng.standard_normal(g.n)
        u, _ = solve_dirichlet(g, bnd, vals[bnd], f, tol=1e-13, cfg=SolverConfig(tol=1e-13))
        L = laplacian(g).toarray()
        I = ~bnd
        ref = vals.copy()
        ref[I] = np.linalg.solve(L[np.ix_(I, I)], -f[I] - L[np.ix_(I, bnd)] @ vals[bnd])
        err_d = float(np.linalg.norm(u - ref) / max(np.linalg.norm(ref), 1e-300))
        h = rng.standard_normal(g.n)
        h -= h.mean()
        rep = green_represent(g, h, cfg=SolverConfig(precond="direct"))
        sol, _ = solve_neumann(g, -h, tol=1e-13, cfg=SolverConfig(tol=1e-13))
        err_g = float(np.linalg.norm(rep - sol) / max(np.linalg.norm(sol), 1e-300))
        worst_d, worst_g = max(worst_d, err_d), max(worst_g, err_g)
        rows.append({"sample": i, "n": g.n, "dirichlet_rel": err_d, "green_rel": err_g})
    ok = worst_d <= 1e-8 and worst_g <= 1e-8 and len(rows) > 0
    return ok, f"{len(rows)} clusters, max rel err dirichlet {worst_d:.1e}, green {worst_g:.1e}", rows


def criterion_2(p, seed, workers):
    """Variational identities for the master quantity."""
    rows = []
    worst_J = worst_fv = 0.0
    cubes = _good_cubes(p.c2_level, p.c2_n, seed, "acc2")
    for i, cloud, cube, b in cubes:
        rng = np.random.default_rng(substream(seed, "acc2-pq", i))
        pv, qv = rng.standard_normal(D), rng.standard_normal(D)
        mv = master_J(cloud, cube, pv, qv, batch=b, n_directions=10, seed=i)
        r = mv.residuals
        fv = max(r["firstvar_master"], r["firstvar_mu_star"])
        worst_J, worst_fv = max(worst_J, r["secondvar_master"]), max(worst_fv, fv)
        rows.append({"sample": i, "J": mv.J, "secondvar": r["secondvar_master"], "firstvar": fv})
    ok = len(cubes) == p.c2_n and worst_J <= 1e-6 and worst_fv <= 1e-8
    return ok, f"{len(cubes)} good cubes, |J - E(xi)|/J <= {worst_J:.1e}, first variation <= {worst_fv:.1e}", rows


def criterion_3(p, seed, workers):
    """Fenchel inequality and a_l >= a_*l."""
    theta = _theta()
    cube = TriadicCube.origin(p.c3_level, D)
    rows = []
    worst_J = worst_eig = math.inf
    n = 0
    for i in range(p.c3_n):
        cloud = sample_poisson(cube.box, LAM, substream(seed, "acc3", i))
        b = CubeBatch(cloud, [cube], CGQConfig(), theta)
        if not b.good[0]:
            continue
        rng = np.random.default_rng(substream(seed, "acc3-pq", i))
        a, ainv = b.matrices()
        pv = rng.standard_normal(D) * rng.uniform(0.1, 10)
        if i % 2:
            # near the Fenchel equality case, where J is smallest
            qv = 0.5 * (a[0] + np.linalg.inv(ainv[0])) @ pv + 1e-3 * rng.standard_normal(D)
        else:
            qv = rng.standard_normal(D) * rng.uniform(0.1, 10)
        J = mu(cloud, cube, pv, batch=b).value + mu_star(cloud, cube, qv, batch=b).value - float(pv @ qv)
        scaled = J / (pv @ pv + qv @ qv)
        eig = float(np.linalg.eigvalsh(a[0] - np.linalg.inv(ainv[0])).min())
        worst_J, worst_eig = min(worst_J, scaled), min(worst_eig, eig)
        rows.append({"sample": i, "J": J, "J_scaled": scaled, "min_eig_gap": eig})
        n += 1
    ok = n > 0 and worst_J >= -1e-6 and worst_eig >= -1e-6
    return ok, f"{n} good cubes, min J/(|p|^2+|q|^2) {worst_J:.3g}, min eig(a - a_*) {worst_eig:.3g}", rows


def criterion_4(p, seed, workers):
    """mu is an exact quadratic form."""
    rows = []
    worst = 0.0
    cubes = _good_cubes(p.c4_level, p.c4_n, seed, "acc4")
    for i, cloud, cube, b in cubes:
        rng = np.random.default_rng(substream(seed, "acc4-pq", i))
        pv, qv = rng.standard_normal(D), rng.standard_normal(D)
        t = float(rng.uniform(-3, 3))

        def m(x):
            return mu(cloud, cube, x, batch=b).value

        mp, mq = m(pv), m(qv)
        hom = abs(m(t * pv) - t * t * mp) / max(t * t * mp, 1e-300)
        pol = abs(m(pv + qv) + m(pv - qv) - 2 * mp - 2 * mq) / max(2 * mp + 2 * mq, 1e-300)
        worst = max(worst, hom, pol)
        rows.append({"sample": i, "t": t, "homogeneity": hom, "polarization": pol})
    ok = len(cubes) == p.c4_n and worst <= 1e-10
    return ok, f"{len(cubes)} cubes, max relative defect {worst:.1e}", rows


def _defect_sample(parent_level, seed, i):
    theta = _theta()
    parent = TriadicCube.origin(parent_level, D)
    cfg = CGQConfig(goodness=GoodnessConfig(certify_poincare=False), solver=SolverConfig(1e-6, "amg"))
    cloud = sample_poisson(parent.box, LAM, substream(seed, "acc5", i))
    pb = CubeBatch(cloud, [parent], cfg, theta)
    out = []
    for n in range(2, parent_level):
        rep = subadditivity_defect(cloud, parent, n, 1, cfg, theta, parent_batch=pb, dual=False)
        out.append(float(np.abs(rep.eig_D()).max()) if rep.accepted else math.nan)
    return out


def criterion_5(p, seed, workers):
    """Dirichlet subadditivity defect shrinks with the separation n - l."""
    from functools import partial

    from .parallel import pmap

    res = np.array(pmap(partial(_defect_sample, p.c5_parent, seed), range(p.c5_n), workers))
    ok_rows = res[np.all(np.isfinite(res), axis=1)]
    seps = list(range(1, p.c5_parent - 1))
    mean = ok_rows.mean(axis=0)
    se = ok_rows.std(axis=0, ddof=1) / math.sqrt(len(ok_rows)) if len(ok_rows) > 1 else np.full(len(seps), np.nan)
    drops = [mean[k] - mean[k + 1] > 2 * math.hypot(se[k], se[k + 1]) for k in range(len(seps) - 1)]
    rows = [{"separation": s, "mean_defect": mean[k], "se": se[k], "n_accepted": len(ok_rows)} for k, s in enumerate(seps)]
    txt = ", ".join(f"{m:.3f}+-{s:.3f}" for m, s in zip(mean, se))
    return bool(len(ok_rows) > 1 and all(drops)), f"|defect| by separation {seps}: {txt} ({len(ok_rows)} accepted)", rows


_COEFFS = {}


def shared_coefficients(p, seed, workers):
    """Averaged coefficients shared by criteria 6 and 7 (and reused across calls)."""
    key = (p.c6_levels, p.c6_n, seed)
    if key not in _COEFFS:
        _COEFFS[key] = mc_coefficients(LAM, D, p.c6_levels, 1, p.c6_n, seed, workers=workers, theta=_theta())
    return _COEFFS[key]


def criterion_6(p, seed, workers):
    """abar is a scalar matrix."""
    co = shared_coefficients(p, seed, workers)
    k = len(co.levels) - 1
    a, se = co.abar[k], co.abar_se[k]
    off = abs(a[0, 1]) <= 3 * se[0, 1]
    s_diff = float(np.std(co.a[k][:, 0, 0] - co.a[k][:, 1, 1], ddof=1) / math.sqrt(co.N))
    diag = abs(a[0, 0] - a[1, 1]) <= 3 * s_diff
    detail = (
        f"level {co.levels[k]}: a11 {a[0,0]:.3f}, a22 {a[1,1]:.3f}, |a11-a22| {abs(a[0,0]-a[1,1]):.3f} vs 3SE {3*s_diff:.3f}; "
        f"|a12| {abs(a[0,1]):.3f} vs 3SE {3*se[0,1]:.3f}; scalar {co.scalar:.3f}"
    )
    return bool(off and diag), detail, co.rows()


def criterion_7(p, seed, workers):
    """Graph Dirichlet solution converges to the homogenized one."""
    co = shared_coefficients(p, seed, workers)
    abar = co.scalar * np.eye(D)
    curve = error_experiment(LAM, D, p.c7_levels, p.c7_n, abar, seed=seed, workers=workers)
    ok = curve.strictly_decreasing(2.0) and -1.4 <= curve.slope <= -0.4
    rows = [{"level": m, "mean_rel_l2": curve.mean[k], "se": curve.se[k], "abar": co.scalar} for k, m in enumerate(curve.levels)]
    rows.append({"level": -1, "slope": curve.slope, "slope_se": curve.slope_se})
    txt = ", ".join(f"{m:.4f}+-{s:.4f}" for m, s in zip(curve.mean, curve.se))
    return bool(ok), f"errors {txt}; log3-slope {curve.slope:.2f}+-{curve.slope_se:.2f}", rows


def criterion_8(p, seed, workers):
    """Variance of spatially averaged corrector gradients decays like r^-d."""
    cfg = CGQConfig(goodness=GoodnessConfig(certify_poincare=False))
    vs = variance_scaling(LAM, D, p.c8_radii, p.c8_n, seed, cfg=cfg, workers=workers)
    ok = -2.6 <= vs.slope <= -1.4
    rows = [{"r": r, "var": v, "ci_lo": lo, "ci_hi": hi} for r, v, lo, hi in zip(vs.radii, vs.var, vs.ci_lo, vs.ci_hi)]
    rows.append({"r": -1, "slope": vs.slope, "slope_se": vs.slope_se, "n_used": vs.N, "side": vs.side})
    return bool(ok), f"slope {vs.slope:.2f}+-{vs.slope_se:.2f} on side {vs.side}, {vs.N}/{p.c8_n} good", rows


def criterion_9(p, seed, workers):
    """Lipschitz ratio is stable as R doubles, above the empirical minimal scale."""
    ms = estimate_minimal_scale(
        ScaleCriteria(), LAM, D, p.c9_scale_n, levels=(3, 4), seed=seed, workers=workers, abar=_abar_guess(p, seed, workers)
    )
    scale = 3.0 ** ms.quantiles[0.9]
    recs = lipschitz_experiment(LAM, D, p.c9_radii, p.c9_n, seed=seed, workers=workers)
    R0, R1 = p.c9_radii
    m0 = float(np.mean([r.ratio for r in recs if r.R == R0]))
    m1 = float(np.mean([r.ratio for r in recs if r.R == R1]))
    above = R0 >= scale
    ok = above and 0.5 <= m1 / m0 <= 2.0
    rows = [{"R": r.R, "r": r.r, "sample": r.sample, "ratio": r.ratio, "oscillation": r.oscillation} for r in recs]
    rows.append({"R": -1, "minimal_scale_q90": scale})
    return bool(ok), f"mean ratio {m0:.3f} (R={R0}) -> {m1:.3f} (R={R1}); minimal scale q90 {scale:.0f}", rows


def _abar_guess(p, seed, workers):
    key = (p.c6_levels, p.c6_n, seed)
    if key in _COEFFS:
        return _COEFFS[key].scalar * np.eye(D)
    return shared_coefficients(p, seed, workers).scalar * np.eye(D)


def criterion_10(p, seed, workers):
    """Green's function oscillation decays like r^{2-d} in d = 3."""
    fit = greens_decay(2.0, 3, p.c10_radii, p.c10_n, side=p.c10_side, seed=seed, workers=workers)
    ok = -1.5 <= fit.exponent <= -0.5 and fit.symmetry < 1e-6
    rows = [{"r": r, "mean_osc": m} for r, m in zip(fit.radii, fit.mean)]
    rows.append({"r": -1, "exponent": fit.exponent, "exponent_se": fit.exponent_se, "symmetry": fit.symmetry})
    return bool(ok), f"exponent {fit.exponent:.2f}+-{fit.exponent_se:.2f}, symmetry defect {fit.symmetry:.1e}", rows


def criterion_11(p, seed, workers):
    """Well-connected pass fraction at levels 3 and 4."""
    theta = _theta()
    top = TriadicCube.origin(4, D)
    passes = {3: [], 4: []}
    for i in range(p.c11_n):
        cloud = sample_poisson(top.box, LAM, substream(seed, "acc11", i))
        for m in (3, 4):
            passes[m].append(well_connected_check(cloud, TriadicCube.origin(m, D), theta).passed)
    frac = {m: float(np.mean(v)) for m, v in passes.items()}
    se = {m: math.sqrt(max(f * (1 - f), 1e-12) / p.c11_n) for m, f in frac.items()}
    ok = frac[4] >= 0.95 and frac[4] >= frac[3] - 2 * math.hypot(se[3], se[4])
    rows = [{"level": m, "pass_fraction": frac[m], "se": se[m], "N": p.c11_n} for m in (3, 4)]
    return bool(ok), f"pass fraction level 3 {frac[3]:.3f}, level 4 {frac[4]:.3f} (need >= 0.95)", rows


CRITERIA = {
    1: ("oracle equivalence", criterion_1),
    2: ("variational identities", criterion_2),
    3: ("Fenchel inequality and ordering", criterion_3),
    4: ("quadratic-form exactness", criterion_4),
    5: ("subadditivity trend", criterion_5),
    6: ("isotropy of abar", criterion_6),
    7: ("homogenization rate", criterion_7),
    8: ("corrector variance scaling", criterion_8),
    9: ("large-scale Lipschitz", criterion_9),
    10: ("Green decay", criterion_10),
    11: ("percolation layer", criterion_11),
}


def run_criterion(k, profile=FULL, seed=0, workers=None):
    title, fn = CRITERIA[k]
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ok, detail, rows = fn(profile, seed, workers)
    dt = time.perf_counter() - t0
    if profile.budgets and dt > BUDGET[k]:
        ok = False
        detail += f"; over the {BUDGET[k]}s budget"
    return Verdict(k, title, bool(ok), detail, dt, rows)


def determinism(profile=REDUCED, seed=0, criteria=tuple(range(1, 12)), worker_counts=(1, 2)):
    """Run the criteria under each worker count and compare the CSV bytes."""
    digests = {}
    t0 = time.perf_counter()
    for w in worker_counts:
        _COEFFS.clear()
        h = hashlib.sha256()
        for k in criteria:
            v = run_criterion(k, profile, seed, w)
            h.update(rows_to_csv(v.rows, seed, config_hash(asdict(profile))).encode())
        digests[w] = h.hexdigest()
    _COEFFS.clear()
    same = len(set(digests.values())) == 1
    detail = f"{profile.name} profile, workers {list(worker_counts)}: " + ("identical CSV" if same else f"digests differ {digests}")
    return Verdict(12, "determinism", same, detail, time.perf_counter() - t0)


def run_all(profile=FULL, seed=0, workers=None, criteria=tuple(range(1, 13)), out=None, echo=print):
    verdicts = []
    for k in criteria:
        v = determinism(REDUCED if profile.name == "full" else profile, seed) if k == 12 else run_criterion(k, profile, seed, workers)
        verdicts.append(v)
        if echo:
            echo(v.line())
        if out is not None and v.rows:
            (out / f"criterion_{k:02d}.csv").write_text(rows_to_csv(v.rows, seed, config_hash(asdict(profile))))
    return verdicts


def with_overrides(profile, **kw):
    return replace(profile, **kw)

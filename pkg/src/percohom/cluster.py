"""Unit-distance graphs, percolation clusters and goodness of cubes."""

from __future__ import annotations

import json
import math
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.sparse.linalg import lobpcg
from scipy.spatial import ConvexHull, cKDTree
from scipy.spatial import QhullError

from .cloud import (
    Box,
    CellIndex,
    ParameterError,
    TriadicCube,
    block_multi_index,
    sample_poisson,
    triadic_decompose,
)
from .solver import amg_solver


@dataclass(frozen=True)
class ClusterGraph:
    coords: np.ndarray = field(repr=False)
    adj: sp.csr_matrix = field(repr=False)
    labels: np.ndarray = field(repr=False)
    region: object = None
    index: np.ndarray = field(default=None, repr=False)  # rows of cloud.points
    fallback: bool = False

    @property
    def n(self):
        return len(self.coords)

    @property
    def d(self):
        return self.coords.shape[1]

    @property
    def empty(self):
        return self.n == 0

    @property
    def n_components(self):
        return int(self.labels.max()) + 1 if self.n else 0

    def degrees(self):
        return np.asarray(self.adj.sum(axis=1)).ravel()

    def edges(self):
        """Undirected edges (i, j) with i < j."""
        coo = sp.triu(self.adj, k=1).tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order].astype(np.int64), coo.col[order].astype(np.int64)

    def laplacian(self):
        """L = D - A, so that u.L.u is the sum over edges of (u(x) - u(y))^2."""
        deg = self.degrees()
        return (sp.diags(deg) - self.adj).tocsr()

    def subgraph(self, mask, **kw):
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask
        adj = self.adj[idx][:, idx].tocsr()
        _, labels = csgraph.connected_components(adj, directed=False)
        return ClusterGraph(
            self.coords[idx],
            adj,
            labels.astype(np.int64),
            kw.get("region", self.region),
            None if self.index is None else self.index[idx],
            kw.get("fallback", self.fallback),
        )

    def largest(self):
        if self.empty:
            return self
        return self.subgraph(self.labels == largest_label(self.coords, self.labels))

    def edge_rows(self):
        i, j = self.edges()
        dist = np.sqrt(np.sum((self.coords[i] - self.coords[j]) ** 2, axis=1))
        return i, j, dist


def unit_pairs(points, method="kdtree"):
    """Index pairs i < j with |x_i - x_j|^2 <= 1."""
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    if method == "cells":
        return CellIndex(points).pairs()
    pairs = cKDTree(points).query_pairs(1.0 + 1e-9, output_type="ndarray").astype(np.int64)
    d2 = np.sum((points[pairs[:, 0]] - points[pairs[:, 1]]) ** 2, axis=1)
    pairs = pairs[d2 <= 1.0]
    pairs.sort(axis=1)
    return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]


def graph_from_points(points, region=None, index=None, method="kdtree"):
    points = np.asarray(points, dtype=float)
    n = len(points)
    pairs = unit_pairs(points, method)
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    adj.sort_indices()
    if n:
        _, labels = csgraph.connected_components(adj, directed=False)
    else:
        labels = np.zeros(0, dtype=np.int64)
    return ClusterGraph(points, adj, labels.astype(np.int64), region, index)


def build_graph(cloud, region=None, method="kdtree"):
    region = cloud.box if region is None else region
    if not cloud.box.contains_box(region.box):
        raise ParameterError("region must lie inside the cloud box")
    idx = np.flatnonzero(region.contains(cloud.points))
    return graph_from_points(cloud.points[idx], region, idx, method)


def largest_label(coords, labels):
    """Label of the largest component; ties go to the lexicographically smallest vertex."""
    sizes = np.bincount(labels)
    order = np.lexsort(coords.T[::-1])
    first_rank = np.full(len(sizes), len(coords))
    np.minimum.at(first_rank, labels[order], np.arange(len(coords)))
    best = np.flatnonzero(sizes == sizes.max())
    return int(best[np.argmin(first_rank[best])])


def cluster_of(cloud, cube, graph=None):
    """eta_*(cube): the largest component of eta restricted to the cube."""
    g = build_graph(cloud, cube) if graph is None else graph
    return g.largest()


# ---------------------------------------------------------------------------
# well-connectedness


@dataclass(frozen=True)
class WCConstants:
    diam: float = 0.01
    count: float = 0.01
    dist: float = 0.01
    count_sigmas: float = 0.0  # widen the count band to this many Poisson SDs

    def count_band(self, theta, volume):
        if self.count_sigmas <= 0:
            return self.count
        return max(self.count, self.count_sigmas / math.sqrt(theta * volume))


STRICT_WC = WCConstants()


@dataclass
class WellConnectedReport:
    cube: object
    unique_component: bool
    count_ok: bool
    distance_ok: bool
    n_large_components: int
    cluster_size: int
    cluster_diameter: float
    count_ratio: float
    max_distance: float
    theta: float

    @property
    def passed(self):
        return self.unique_component and self.count_ok and self.distance_ok

    def to_json(self):
        out = {k: v for k, v in asdict(self).items() if k != "cube"}
        out["cube"] = {"center": list(self.cube.center), "side": self.cube.side}
        out["passed"] = self.passed
        return json.dumps(out, sort_keys=True)


def _brute_diameter(x):
    if len(x) < 2:
        return 0.0
    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=2)
    return float(np.sqrt(d2.max()))


def diameter(x):
    """Euclidean diameter of a point set."""
    x = np.asarray(x, dtype=float)
    if len(x) <= 500:
        return _brute_diameter(x)
    try:
        hull = x[ConvexHull(x).vertices]
    except QhullError:
        return _brute_diameter(x)
    return _brute_diameter(hull)


def count_large_components(g, threshold):
    """Number of components with Euclidean diameter > threshold."""
    if g.empty:
        return 0
    order = np.argsort(g.labels, kind="stable")
    lab = g.labels[order]
    starts = np.flatnonzero(np.r_[True, lab[1:] != lab[:-1]])
    x = g.coords[order]
    ext = np.maximum.reduceat(x, starts, axis=0) - np.minimum.reduceat(x, starts, axis=0)
    surely = ext.max(axis=1) > threshold
    unsure = ~surely & (np.sqrt(np.sum(ext**2, axis=1)) > threshold)
    count = int(surely.sum())
    ends = np.r_[starts[1:], len(x)]
    for c in np.flatnonzero(unsure):
        count += _brute_diameter(x[starts[c] : ends[c]]) > threshold
    return count


def well_connected_check(cloud, cube, theta, consts=STRICT_WC, graph=None):
    if not theta > 0:
        raise ParameterError("theta must be positive")
    g = build_graph(cloud, cube) if graph is None else graph
    size = cube.side
    n_large = count_large_components(g, consts.diam * size)
    star = g.largest()
    ratio = star.n / cube.volume
    band = consts.count_band(theta, cube.volume)
    if star.n:
        dist, _ = cKDTree(star.coords).query(cube.lattice_points().astype(float))
        max_dist = float(dist.max())
    else:
        max_dist = math.inf
    return WellConnectedReport(
        cube=cube,
        unique_component=n_large == 1,
        count_ok=bool((1 - band) * theta <= ratio <= (1 + band) * theta),
        distance_ok=max_dist <= consts.dist * size,
        n_large_components=n_large,
        cluster_size=star.n,
        cluster_diameter=diameter(star.coords) if star.n else 0.0,
        count_ratio=ratio,
        max_distance=max_dist,
        theta=float(theta),
    )


# ---------------------------------------------------------------------------
# theta


@dataclass(frozen=True)
class ThetaEstimate:
    theta: float  # cluster points per unit volume
    se: float
    fraction: float  # theta / lambda
    subcritical: bool


@lru_cache(maxsize=32)
def estimate_theta(lam, d, calibration_level=4, n_samples=8, seed=0):
    if calibration_level < 3:
        raise ParameterError("calibration_level must be >= 3")
    cube = TriadicCube.origin(calibration_level, d)
    dens, spans = [], []
    for s in range(n_samples):
        cloud = sample_poisson(cube.box, lam, substream(seed, "theta", s))
        star = cluster_of(cloud, cube)
        dens.append(star.n / cube.volume)
        spans.append(star.n > 1 and np.ptp(star.coords, axis=0).max() >= cube.side / 2)
    dens = np.array(dens)
    sub = np.mean(spans) < 0.5
    if sub:
        warnings.warn(f"lambda={lam} looks subcritical in d={d}", RuntimeWarning, stacklevel=2)
    se = float(dens.std(ddof=1) / math.sqrt(len(dens))) if len(dens) > 1 else math.nan
    return ThetaEstimate(float(dens.mean()), se, float(dens.mean() / lam), bool(sub))


def substream(seed, name, *idx):
    """Derived 64-bit seed for the named sub-stream (name, *idx) of seed."""
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    entropy = [seed & 0xFFFFFFFF, seed >> 32, zlib.crc32(name.encode()), *map(int, idx)]
    return int(np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32).view(np.uint64)[0])


# ---------------------------------------------------------------------------
# goodness


def affine_constant(lam, d):
    """Expected (1/|cube|) sum_x sum_{y~x} |x-y|^2 for a Poisson cloud."""
    sphere = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
    return lam**2 * sphere / (d + 2)


@dataclass(frozen=True)
class GoodnessConfig:
    rule: str = "desk"  # "desk" or "strict"
    wc: WCConstants = STRICT_WC
    desk_count_sigmas: float = 4.0
    C_P: float = 1.0
    K_factor: float = 2.0
    certify_poincare: bool = True

    def K(self, lam, d):
        return self.K_factor * affine_constant(lam, d)


def spectral_gap(L):
    """Smallest nonzero eigenvalue of a connected graph Laplacian."""
    n = L.shape[0]
    if n < 2:
        return 0.0
    if n <= 1500:
        return float(scipy.linalg.eigh(L.toarray(), eigvals_only=True, subset_by_index=[1, 1])[0])
    # LOBPCG on the complement of constants, AMG-preconditioned; X is seeded
    ml = amg_solver(L.tocsr())
    X = np.random.default_rng(12345).standard_normal((n, 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        vals, _ = lobpcg(L, X, M=ml.aspreconditioner(), Y=np.ones((n, 1)), largest=False, tol=1e-6, maxiter=300)
    return float(vals[0])


def affine_energy(g, volume):
    i, j = g.edges()
    return 2.0 * float(np.sum((g.coords[i] - g.coords[j]) ** 2)) / volume


@dataclass
class GoodnessReport:
    cube: object
    wc: WellConnectedReport
    blocks_ok: bool
    gap: float
    poincare_ok: bool
    affine: float
    affine_ok: bool
    rule: str

    @property
    def good(self):
        return self.wc.passed and self.blocks_ok and self.poincare_ok and self.affine_ok


def _certificates(star, cube, cfg, lam):
    if star.n < 2:
        return 0.0, False, 0.0, False
    gap = spectral_gap(star.laplacian()) if cfg.certify_poincare else math.nan
    p_ok = (not cfg.certify_poincare) or (gap > 0 and 1.0 / gap <= (cfg.C_P * cube.side) ** 2)
    aff = affine_energy(star, cube.volume)
    return gap, bool(p_ok), aff, aff <= cfg.K(lam, cube.d)


def is_good(cloud, cube, theta, cfg=GoodnessConfig(), graph=None):
    """Well-connected, Poincare certified spectrally, affine energy bounded."""
    g = build_graph(cloud, cube) if graph is None else graph
    wc = well_connected_check(cloud, cube, theta, cfg.wc, graph=g)
    gap, p_ok, aff, a_ok = _certificates(g.largest(), cube, cfg, cloud.intensity)
    return GoodnessReport(cube, wc, True, gap, p_ok, aff, a_ok, "good")


def blocks_hit(star, cube, l):
    k = cube.side // 3**l
    if star.n == 0:
        return False
    j = block_multi_index(star.coords, cube.lo, 3**l, k)
    flat = np.ravel_multi_index(j.T, (k,) * cube.d)
    return np.unique(flat).size == k**cube.d


def assess(cloud, cube, l, theta, cfg=GoodnessConfig(), graph=None):
    """Membership of cube in the collection G_l, with certificates.

    rule="strict": every level-l subcube is good with the literal constants.
    rule="desk": the cube's own cluster passes the count band (widened to
    desk_count_sigmas Poisson SDs), meets every 3^l block, and carries the
    Poincare and affine-energy certificates.
    """
    if 3**l >= cube.side:
        raise ParameterError("need 3^l < size(cube)")
    g = build_graph(cloud, cube) if graph is None else graph
    if cfg.rule == "strict":
        subs = [is_good(cloud, c, theta, cfg) for c in triadic_decompose(cube, l)]
        wc = well_connected_check(cloud, cube, theta, cfg.wc, graph=g)
        ok = all(r.good for r in subs)
        gap, p_ok, aff, a_ok = _certificates(g.largest(), cube, cfg, cloud.intensity)
        return GoodnessReport(cube, wc, ok, gap, p_ok, aff, a_ok, "strict")
    wc_cfg = WCConstants(cfg.wc.diam, cfg.wc.count, math.inf, cfg.desk_count_sigmas)
    wc = well_connected_check(cloud, cube, theta, wc_cfg, graph=g)
    wc.unique_component = wc.n_large_components >= 1
    star = g.largest()
    ok = blocks_hit(star, cube, l)
    gap, p_ok, aff, a_ok = _certificates(star, cube, cfg, cloud.intensity)
    return GoodnessReport(cube, wc, ok, gap, p_ok, aff, a_ok, "desk")


# ---------------------------------------------------------------------------
# cluster in a general region


def cluster_in_region(cloud, region, theta=None, consts=STRICT_WC):
    """Largest component of eta_*(cube) inside region.

    cube is the smallest triadic cube containing the region whose triple is
    well connected; if none fits in the sampled box the largest component of
    eta inside the region is returned with fallback=True.
    """
    box = region.box
    d = box.d
    inside = np.flatnonzero(region.contains(cloud.points))
    if len(inside) == 0:
        return graph_from_points(np.zeros((0, d)), region, inside)
    if theta is None:
        theta = estimate_theta(cloud.intensity, d).theta
    m = 0
    while True:
        cube = _smallest_triadic(box, m)
        if cube is None:
            m += 1
            continue
        big = cube.enlarged()
        if not cloud.box.contains_box(big.box):
            break
        g = build_graph(cloud, big)
        if well_connected_check(cloud, big, theta, consts, graph=g).passed:
            star = g.largest()
            keep = region.contains(star.coords)
            return star.subgraph(keep, region=region).largest()
        m += 1
    g = graph_from_points(cloud.points[inside], region, inside)
    return ClusterGraph(*_fields(g.largest()), fallback=True)


def _fields(g):
    return g.coords, g.adj, g.labels, g.region, g.index


def _smallest_triadic(box, m):
    s = 3**m
    lo, hi = np.array(box.lo), np.array(box.hi)
    z = np.round((lo + hi) / 2 / s) * s
    if np.all(z - s / 2 <= lo) and np.all(z + s / 2 >= hi):
        return TriadicCube(m, tuple(int(v) for v in z))
    return None


# ---------------------------------------------------------------------------
# partitions


@dataclass
class GoodPartition:
    root: TriadicCube
    cells: list
    good: list
    ratio_violations: int
    defective: list
    lam_stat: float
    lam_tilde: float
    K: float

    @property
    def is_defective(self):
        return bool(self.defective)

    def to_json(self):
        return json.dumps(
            {
                "root": {"level": self.root.level, "center": list(self.root.center)},
                "cells": [{"level": c.level, "center": list(c.center), "good": g} for c, g in zip(self.cells, self.good)],
                "ratio_violations": self.ratio_violations,
                "defective": [{"level": c.level, "center": list(c.center)} for c in self.defective],
                "lambda": self.lam_stat,
                "lambda_tilde": self.lam_tilde,
                "K": self.K,
            },
            sort_keys=True,
        )


def cubes_touch(a, b):
    gap = np.maximum(a.lo - b.hi, b.lo - a.hi)
    return bool(np.all(gap <= 0))


def neighbor_violations(cells):
    bad = []
    for i, a in enumerate(cells):
        for b in cells[i + 1 :]:
            if abs(a.level - b.level) > 1 and cubes_touch(a, b):
                bad.append((a, b))
    return bad


def good_partition(cloud, root, theta, l_min=1, cfg=GoodnessConfig(), good_fn=None, C_tilde=1.0):
    """Greedy top-down good-cube partition of root."""
    if good_fn is None:
        def good_fn(c):
            return is_good(cloud, c, theta, cfg).good
    cache = {}

    def good(c):
        if c not in cache:
            cache[c] = bool(good_fn(c))
        return cache[c]

    cells, stack = [], [root]
    while stack:
        c = stack.pop()
        if good(c) or c.level <= l_min:
            cells.append(c)
        else:
            stack.extend(triadic_decompose(c, c.level - 1))
    violations = 0
    while True:
        bad = neighbor_violations(cells)
        if not bad:
            break
        violations += len(bad)
        big = max((a if a.level > b.level else b for a, b in bad), key=lambda c: (c.level, c.center))
        cells.remove(big)
        cells.extend(triadic_decompose(big, big.level - 1))
    cells.sort(key=lambda c: (-c.level, c.center))
    flags = [good(c) for c in cells]
    d = root.d
    vol = root.volume
    lam_stat = sum(float(c.volume) ** (d + 1 - 1 / d) for c in cells) / vol
    lam_tilde = C_tilde * sum(float(c.volume) ** 2 for c in cells) / vol
    return GoodPartition(
        root, cells, flags, violations, [c for c, f in zip(cells, flags) if not f], lam_stat, lam_tilde,
        cfg.K(cloud.intensity, d),
    )


def export_edges_csv(g, path):
    i, j, dist = g.edge_rows()
    with open(path, "w") as fh:
        fh.write("i,j,dist\n")
        for a, b, r in zip(i, j, dist):
            fh.write(f"{a},{b},{r!r}\n")

"""Coarse-grained quantities mu, mu*, the matrices a_l, a_*l and the master quantity J.

Energies count each undirected edge once: E(u) = sum_edges (u(x) - u(y))^2,
which equals the ordered-pair sum of (1/2)(u(x) - u(y))^2.  Per unit volume,
mu(p) = E(v_p)/|cube| = p.a.p/2 and mu*(q) = E(u_q)/|cube| = q.a_*^{-1}.q/2.

The dual quantity pairs q with the coarsened gradient through the lattice
map G(u) = 3^{l(d-1)}/|cube| sum_i e_i sum_{adjacent blocks z, z+3^l e_i}
([u]_{z+3^l e_i} - [u]_z), one term per lattice edge crossing a block face.
Because the sum telescopes, G only sees the first and last block of every
lattice line, all of which lie in the boundary layer.  With M = G(x) (the
matrix of G applied to the coordinate functions) the "calibrated" pairing
Lambda_q(u) = q.M^{-1}G(u) satisfies Lambda_q(l_p) = p.q exactly, so the
Fenchel inequality J >= 0 holds to solver precision.  The "size" pairing
(1 - 1/size)^{-1} q.G(u) is kept for comparison.

Many congruent cubes of one cloud are handled together: the restricted
graphs are disjoint, so every solve is a single block-diagonal system.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.sparse.linalg import lobpcg, splu

from .cloud import ParameterError, TriadicCube, triadic_decompose
from .cluster import GoodnessConfig, assess, estimate_theta, spectral_gap, unit_pairs
from .solver import (
    DirichletSystem,
    NeumannSystem,
    SolverConfig,
    harmonic_projection,
)


@dataclass(frozen=True)
class CGQConfig:
    l: int = 1
    pairing: str = "calibrated"  # or "size"
    interior: str = "blocks"  # harmonicity set of the master maximiser: "blocks", "unit_ball", "literal"
    goodness: GoodnessConfig = GoodnessConfig()
    solver: SolverConfig = SolverConfig(precond="amg")


def _segment_sum(values, seg, nseg):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        return np.bincount(seg, weights=values, minlength=nseg)
    return np.stack([np.bincount(seg, weights=values[:, i], minlength=nseg) for i in range(values.shape[1])], axis=1)


class CubeBatch:
    """Clusters eta_*(cube) of congruent, disjoint, grid-aligned cubes of one cloud."""

    def __init__(self, cloud, cubes, cfg=CGQConfig(), theta=None, pairs=None):
        cubes = list(cubes)
        if not cubes:
            raise ParameterError("no cubes")
        self.cloud = cloud
        self.cubes = cubes
        self.cfg = cfg
        self.l = cfg.l
        side = cubes[0].side
        if any(c.side != side for c in cubes):
            raise ParameterError("cubes must be congruent")
        s = 3**self.l
        if s >= side or side % s:
            raise ParameterError(f"need 3^l < size(cube) and 3^l | size(cube); l={self.l}, side={side}")
        self.side = side
        self.d = d = cubes[0].d
        self.k = side // s
        self.block_side = s
        self.volume = float(side**d)
        self.ncubes = nc = len(cubes)
        if theta is None:
            theta = estimate_theta(cloud.intensity, d).theta
        self.theta = theta
        self._locate()
        self._clusters(pairs)
        self._blocks()
        self._goodness()
        self._pairing()
        self._dir = None
        self._neu = None
        self._V = None
        self._U = None
        assert len(self.good) == nc

    # -- construction ---------------------------------------------------

    def _locate(self):
        los = np.array([c.lo for c in self.cubes])
        origin = los.min(axis=0)
        grid = np.round((los - origin) / self.side).astype(np.int64)
        dims = grid.max(axis=0) + 1
        table = np.full(int(np.prod(dims)), -1, dtype=np.int64)
        flat = np.ravel_multi_index(grid.T, dims)
        if len(np.unique(flat)) != len(flat):
            raise ParameterError("cubes overlap")
        table[flat] = np.arange(len(self.cubes))
        pts = self.cloud.points
        g = np.floor((pts - origin) / self.side).astype(np.int64)
        ok = np.all((g >= 0) & (g < dims), axis=1)
        cid = np.full(len(pts), -1, dtype=np.int64)
        cid[ok] = table[np.ravel_multi_index(g[ok].T, dims)]
        sel = np.flatnonzero(cid >= 0)
        for c in self.cubes:
            if not self.cloud.box.contains_box(c.box):
                raise ParameterError("cube outside the sampled box")
        self._pts = pts[sel]
        self._pid = sel
        self._cid = cid[sel]

    def _clusters(self, cloud_pairs=None):
        """Largest component per cube; `cloud_pairs` (cloud indices) skips the neighbour search."""
        pts, cid = self._pts, self._cid
        n = len(pts)
        if cloud_pairs is None:
            pairs = unit_pairs(pts)
        else:
            local = np.full(len(self.cloud.points), -1, dtype=np.int64)
            local[self._pid] = np.arange(n)
            pairs = local[cloud_pairs]
            pairs = pairs[(pairs >= 0).all(axis=1)]
        self.cloud_pairs = self._pid[pairs]
        pairs = pairs[cid[pairs[:, 0]] == cid[pairs[:, 1]]]
        adj = sp.csr_matrix(
            (np.ones(2 * len(pairs)), (np.r_[pairs[:, 0], pairs[:, 1]], np.r_[pairs[:, 1], pairs[:, 0]])),
            shape=(n, n),
        )
        if n == 0:
            labels = np.zeros(0, dtype=np.int64)
        else:
            _, labels = csgraph.connected_components(adj, directed=False)
        nl = labels.max() + 1 if n else 0
        sizes = np.bincount(labels, minlength=nl)
        order = np.lexsort(pts.T[::-1])
        rank = np.full(nl, n)
        np.minimum.at(rank, labels[order], np.arange(n))
        lab_cube = np.full(nl, -1)
        lab_cube[labels] = cid
        # per cube: largest size, ties to the lexicographically smallest vertex
        pick = np.lexsort((rank, -sizes, lab_cube))
        first = np.r_[True, lab_cube[pick][1:] != lab_cube[pick][:-1]]
        chosen = pick[first]
        keep_label = np.zeros(nl, dtype=bool)
        keep_label[chosen] = True
        keep = keep_label[labels] if n else np.zeros(0, dtype=bool)
        # contiguous vertices per cube
        idx = np.flatnonzero(keep)
        idx = idx[np.argsort(cid[idx], kind="stable")]
        self.coords = pts[idx]
        self.cid = cid[idx]
        self.index = self._pid[idx]
        self.n = len(idx)
        self.adj = adj[idx][:, idx].tocsr()
        self.adj.sort_indices()
        deg = np.asarray(self.adj.sum(axis=1)).ravel()
        self.L = (sp.diags(deg) - self.adj).tocsr()
        self.counts = np.bincount(self.cid, minlength=self.ncubes)
        self.offsets = np.r_[0, np.cumsum(self.counts)]
        self.centers = np.array([np.asarray(c.center, dtype=float) for c in self.cubes])
        self.los = np.array([c.lo for c in self.cubes])

    def _blocks(self):
        s, k, d = self.block_side, self.k, self.d
        rel = self.coords - self.los[self.cid]
        j = np.clip(np.floor(rel / s).astype(np.int64), 0, k - 1)
        self.block_j = j
        self.block_local = np.ravel_multi_index(j.T, (k,) * d) if self.n else np.zeros(0, dtype=np.int64)
        self.block = self.cid * k**d + self.block_local
        self.layer = np.any((j == 0) | (j == k - 1), axis=1)
        self.nblocks = self.ncubes * k**d
        self.block_counts = np.bincount(self.block, minlength=self.nblocks)
        self.rel = self.coords - self.centers[self.cid]

    def _goodness(self):
        cfg = self.cfg.goodness
        nc = self.ncubes
        hit = (self.block_counts.reshape(nc, -1) > 0).all(axis=1)
        band = cfg.wc.count
        if cfg.desk_count_sigmas > 0:
            band = max(band, cfg.desk_count_sigmas / math.sqrt(self.theta * self.volume))
        ratio = self.counts / self.volume
        count_ok = np.abs(ratio - self.theta) <= band * self.theta
        i, jj = sp.triu(self.adj, k=1).nonzero()
        sq = np.sum((self.coords[i] - self.coords[jj]) ** 2, axis=1)
        self.affine_energy = 2.0 * np.bincount(self.cid[i], weights=sq, minlength=nc) / self.volume
        affine_ok = self.affine_energy <= cfg.K(self.cloud.intensity, self.d)
        self.gap = np.full(nc, np.nan)
        pre = hit & count_ok & affine_ok
        poinc_ok = np.ones(nc, dtype=bool)
        if cfg.certify_poincare:
            for c in np.flatnonzero(pre):
                self.gap[c] = self._gap(c)
            limit = 1.0 / (cfg.C_P * self.side) ** 2
            poinc_ok = ~(self.gap < limit)
            poinc_ok &= ~(pre & ~(self.gap > 0))
        if cfg.rule == "strict":
            rep = [assess(self.cloud, c, self.l, self.theta, cfg) for c in self.cubes]
            self.good = np.array([r.good for r in rep])
        else:
            self.good = pre & poinc_ok
        self.blocks_ok, self.count_ok, self.affine_ok, self.poincare_ok = hit, count_ok, affine_ok, poinc_ok

    def _gap(self, c):
        a, b = self.offsets[c], self.offsets[c + 1]
        Lc = self.L[a:b][:, a:b]
        if b - a <= 1500:
            return spectral_gap(Lc)
        ns = NeumannSystem(Lc, np.zeros(b - a, dtype=np.int64), SolverConfig(precond="amg"))
        M = ns.op.M
        if self.ncubes == 1:
            self._neu_cached = ns
        rng = np.random.default_rng(12345)
        X = rng.standard_normal((b - a, 1))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)  # accuracy notes; 1e-4 relative is ample for a certificate
            vals, _ = lobpcg(Lc, X, M=M, Y=np.ones((b - a, 1)), largest=False, tol=1e-4, maxiter=80)
        return float(vals[0])

    def _pairing(self):
        """Pairing matrix B (d x n) with Lambda_q(u) = sum_cubes q_c.W_c.B u."""
        d, k = self.d, self.k
        s = self.block_side
        w = s ** (d - 1) / self.volume
        cnt = self.block_counts[self.block].astype(float)
        rows, cols, vals = [], [], []
        for i in range(d):
            sign = np.where(self.block_j[:, i] == k - 1, 1.0, 0.0) - np.where(self.block_j[:, i] == 0, 1.0, 0.0)
            nz = np.flatnonzero(sign)
            rows.append(np.full(len(nz), i))
            cols.append(nz)
            vals.append(w * sign[nz] / cnt[nz])
        self.Bmat = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(d, self.n)
        )
        # M_c = B_c X_c per cube
        BX = np.zeros((self.ncubes, d, d))
        for i in range(d):
            row = self.Bmat.getrow(i).toarray().ravel()
            BX[:, i, :] = _segment_sum(row[:, None] * self.rel, self.cid, self.ncubes)
        self.Mmat = BX
        if self.cfg.pairing == "calibrated":
            W = np.zeros_like(BX)
            for c in range(self.ncubes):
                if self.good[c] and abs(np.linalg.det(BX[c])) > 1e-12:
                    W[c] = np.linalg.inv(BX[c])
                elif self.good[c]:
                    self.good[c] = False
            self.W = W  # Lambda_q(u) = q.W B u
        elif self.cfg.pairing == "size":
            self.W = np.broadcast_to(np.eye(d) / (1.0 - 1.0 / self.side), BX.shape).copy()
        else:
            raise ParameterError(f"unknown pairing {self.cfg.pairing!r}")

    # -- systems --------------------------------------------------------

    def _solver_cfg(self, small):
        """AMG struggles on many tiny blocks and loses to sparse LU on planar-ish graphs."""
        cfg = self.cfg.solver
        per_cube = self.n / self.ncubes
        if cfg.precond == "amg" and (per_cube < 30000 or (self.d == 2 and per_cube < 300000)):
            return SolverConfig(cfg.tol, small, cfg.maxiter_factor)
        return cfg

    @property
    def active(self):
        return self.good[self.cid]

    @property
    def dirichlet(self):
        if self._dir is None:
            act = np.flatnonzero(self.active)
            self._act = act
            L = self.L[act][:, act].tocsr()
            self._dir = DirichletSystem(L, self.layer[act], self._solver_cfg("direct"))
        return self._dir

    @property
    def neumann(self):
        if self._neu is None:
            act = np.flatnonzero(self.active)
            self._act = act
            cached = getattr(self, "_neu_cached", None)
            if cached is not None and len(act) == self.n:
                self._neu = cached
                self._neu.op.cfg = self.cfg.solver
            else:
                self._neu = NeumannSystem(self.L[act][:, act], self.cid[act], self._solver_cfg("jacobi"))
        return self._neu

    def _per_vertex(self, vecs):
        """Broadcast per-cube d-vectors (nc, d) or a single d-vector to vertices."""
        vecs = np.asarray(vecs, dtype=float)
        if vecs.ndim == 1:
            vecs = np.broadcast_to(vecs, (self.ncubes, self.d))
        return vecs[self.cid]

    def affine(self, p):
        """l_p(x) = p.(x - center of its cube)."""
        return np.sum(self._per_vertex(p) * self.rel, axis=1)

    def linear_term(self, q):
        """b with Lambda_q(u) = b.u, per cube."""
        qv = np.asarray(q, dtype=float)
        if qv.ndim == 1:
            qv = np.broadcast_to(qv, (self.ncubes, self.d))
        coef = np.einsum("cij,ci->cj", self.W, qv)  # W^T q
        return np.asarray(self.Bmat.T.multiply(coef[self.cid]).sum(axis=1)).ravel()

    def pairing(self, q, u):
        """Lambda_q(u) per cube."""
        return _segment_sum(self.linear_term(q) * u, self.cid, self.ncubes)

    def solve_v(self, p, tol=None):
        """Dirichlet minimiser with v = l_p on the boundary layer (zero on bad cubes)."""
        sys_ = self.dirichlet
        act = self._act
        lp = self.affine(p)[act]
        v_act, stats = sys_.solve(lp[sys_.B], tol=tol)
        v = np.zeros(self.n)
        v[act] = v_act
        return v, stats

    def solve_u(self, q, tol=None):
        """Maximiser of -E(u)/|cube| + Lambda_q(u), mean zero per cube."""
        ns = self.neumann
        act = self._act
        b = 0.5 * self.volume * self.linear_term(q)[act]
        u_act, stats = ns.solve(b, tol=tol, check=False)
        u = np.zeros(self.n)
        u[act] = u_act
        return u, stats

    def energy(self, u, w=None):
        """Per-cube edge energy sum (u(x)-u(y))(w(x)-w(y))."""
        w = u if w is None else w
        return _segment_sum(u * (self.L @ w), self.cid, self.ncubes)

    # -- quantities -----------------------------------------------------

    def basis_v(self):
        if self._V is None:
            eye = np.eye(self.d)
            self._V = np.stack([self.solve_v(eye[i])[0] for i in range(self.d)], axis=1)
        return self._V

    def basis_u(self):
        if self._U is None:
            eye = np.eye(self.d)
            self._U = np.stack([self.solve_u(eye[i])[0] for i in range(self.d)], axis=1)
        return self._U

    def basis(self):
        return self.basis_v(), self.basis_u()

    def mu(self, p):
        v = self.basis_v() @ np.asarray(p, dtype=float)
        return np.where(self.good, self.energy(v) / self.volume, 0.0)

    def mu_star(self, q):
        u = self.basis_u() @ np.asarray(q, dtype=float)
        return np.where(self.good, self.energy(u) / self.volume, 0.0)

    def _gram(self, X):
        """Per-cube 2/|cube| X_i.L.X_j, the polarised energies."""
        d = self.d
        LX = self.L @ X
        G = np.zeros((self.ncubes, d, d))
        for i in range(d):
            for j in range(i, d):
                G[:, i, j] = G[:, j, i] = 2.0 * _segment_sum(X[:, i] * LX[:, j], self.cid, self.ncubes) / self.volume
        G[~self.good] = np.nan
        return G

    def matrices(self, dual=True):
        """(a_l, a_*l^{-1}) per cube; the second is None when dual=False."""
        a = self._gram(self.basis_v())
        return a, (self._gram(self.basis_u()) if dual else None)


# ---------------------------------------------------------------------------
# single-cube API


@dataclass
class EnergyValue:
    cube: object
    l: int
    direction: np.ndarray
    value: float
    good: bool
    field: np.ndarray = field(default=None, repr=False)


@dataclass
class CoarseMatrices:
    cube: object
    l: int
    a: np.ndarray
    a_star: np.ndarray
    a_star_inv: np.ndarray
    good: bool

    def ordering_gap(self):
        """Smallest eigenvalue of a_l - a_*l."""
        return float(np.linalg.eigvalsh(self.a - self.a_star).min())


class NotPositiveDefinite(ArithmeticError):
    pass


def cube_batch(cloud, cube, l=1, cfg=None, theta=None):
    cfg = CGQConfig(l=l) if cfg is None else cfg
    if cfg.l != l:
        cfg = CGQConfig(l, cfg.pairing, cfg.interior, cfg.goodness, cfg.solver)
    return CubeBatch(cloud, [cube], cfg, theta)


def mu(cloud, cube, p, l=1, cfg=None, theta=None, batch=None):
    b = cube_batch(cloud, cube, l, cfg, theta) if batch is None else batch
    p = np.asarray(p, dtype=float)
    if not b.good[0]:
        return EnergyValue(cube, l, p, 0.0, False)
    v, _ = b.solve_v(p)
    return EnergyValue(cube, l, p, float(b.energy(v)[0] / b.volume), True, v)


def mu_star(cloud, cube, q, l=1, cfg=None, theta=None, batch=None):
    b = cube_batch(cloud, cube, l, cfg, theta) if batch is None else batch
    q = np.asarray(q, dtype=float)
    if not b.good[0]:
        return EnergyValue(cube, l, q, 0.0, False)
    u, _ = b.solve_u(q)
    return EnergyValue(cube, l, q, float(b.energy(u)[0] / b.volume), True, u)


def assemble_matrices(cloud, cube, l=1, cfg=None, theta=None, batch=None):
    b = cube_batch(cloud, cube, l, cfg, theta) if batch is None else batch
    d = b.d
    if not b.good[0]:
        nan = np.full((d, d), np.nan)
        return CoarseMatrices(cube, l, nan, nan, nan, False)
    a, ainv = b.matrices()
    a, ainv = a[0], ainv[0]
    for name, m in (("a_l", a), ("a_*l^-1", ainv)):
        ev = np.linalg.eigvalsh(m)
        if ev.min() <= 0:
            raise NotPositiveDefinite(f"{name} not positive definite on a good cube: eigenvalue {ev.min():.3e}")
    return CoarseMatrices(cube, l, a, np.linalg.inv(ainv), ainv, True)


# ---------------------------------------------------------------------------
# master quantity


@dataclass
class MasterValue:
    cube: object
    p: np.ndarray
    q: np.ndarray
    J: float
    mu: float
    mu_star: float
    xi: np.ndarray = field(repr=False)
    residuals: dict = field(default_factory=dict)
    good: bool = True


def interior_set(batch, kind):
    if kind == "blocks":
        return ~batch.layer
    if kind == "unit_ball":
        rel = batch.coords - batch.los[batch.cid]
        return np.all((rel >= 1.0) & (rel <= batch.side - 1.0), axis=1)
    if kind == "literal":
        return np.ones(batch.n, dtype=bool)
    raise ParameterError(f"unknown interior reading {kind!r}")


def master_functional(batch, p, q, w):
    """-E(w)/|cube| - 2 <grad l_p, grad w>/|cube| + Lambda_q(w) for a single cube."""
    L = batch.L
    lp = batch.affine(p)
    return float(-(w @ (L @ w)) / batch.volume - 2 * (lp @ (L @ w)) / batch.volume + batch.pairing(q, w)[0])


def harmonic_directions(batch, interior, count, seed):
    """Random w with (Lw)(x) = 0 on `interior`: harmonic extensions of random boundary data."""
    rng = np.random.default_rng(seed)
    bnd = ~interior
    L = batch.L
    I = np.flatnonzero(interior)
    B = np.flatnonzero(bnd)
    lu = splu(L[I][:, I].tocsc())
    out = []
    for _ in range(count):
        w = np.zeros(batch.n)
        w[B] = rng.standard_normal(len(B))
        w[I] = lu.solve(-(L[I][:, B] @ w[B]))
        out.append(w)
    return out


def master_J(cloud, cube, p, q, l=1, cfg=None, theta=None, batch=None, n_directions=10, seed=0, route="kkt"):
    """J = mu + mu* - p.q together with the maximiser xi and identity residuals."""
    cfg = CGQConfig(l=l) if cfg is None else cfg
    b = cube_batch(cloud, cube, l, cfg, theta) if batch is None else batch
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if not b.good[0]:
        return MasterValue(cube, p, q, 0.0, 0.0, 0.0, np.zeros(b.n), {}, False)
    v, _ = b.solve_v(p)
    u, _ = b.solve_u(q)
    vol = b.volume
    L = b.L
    m = float(b.energy(v)[0] / vol)
    ms = float(b.energy(u)[0] / vol)
    J = m + ms - float(p @ q)
    I = interior_set(b, cfg.interior)
    lp = b.affine(p)
    lin = b.linear_term(q)
    if route == "kkt":
        xi = harmonic_projection(L, lin - (2.0 / vol) * (L @ lp), I, vol)
    else:
        xi = u - v
        xi = xi - xi.mean()
    E_xi = float(xi @ (L @ xi)) / vol
    res = {"secondvar_master": abs(J - E_xi) / max(abs(J), 1e-300)}
    res["secondvar_mu_star"] = abs(ms - 0.5 * float(lin @ u)) / max(ms, 1e-300)
    rng = np.random.default_rng(seed)
    w_any = rng.standard_normal(b.n)
    t1 = (2.0 / vol) * float(u @ (L @ w_any))
    t2 = float(lin @ w_any)
    res["firstvar_mu_star"] = abs(t1 - t2) / max(abs(t1) + abs(t2), 1e-300)
    fv, sv = [], []
    phi0 = master_functional(b, p, q, xi)
    if n_directions and I.any() and not I.all():
        for w in harmonic_directions(b, I, n_directions, seed + 1):
            Lw = L @ w
            terms = (vol * float(lin @ w), 2 * float(lp @ Lw), 2 * float(xi @ Lw))
            fv.append(abs(terms[0] - terms[1] - terms[2]) / max(sum(map(abs, terms)), 1e-300))
            pair = (terms[0] - terms[1] - terms[2]) / vol
            Ew = float(w @ Lw) / vol
            lhs = master_functional(b, p, q, xi + w) - phi0
            sv.append(abs(lhs - (-Ew + pair)) / max(abs(phi0) + Ew + abs(pair), 1e-300))
    res["firstvar_master"] = max(fv) if fv else 0.0
    res["secvar_J"] = max(sv) if sv else 0.0
    res["functional_at_max"] = abs(phi0 - J) / max(abs(J), 1e-300)
    return MasterValue(cube, p, q, J, m, ms, xi, res, True)


# ---------------------------------------------------------------------------
# coarse-grained fluxes


@dataclass
class FluxField:
    cube: object
    i: int
    j: int
    values: np.ndarray  # one value per 3^l block, shape (k,)*d
    cube_average: float


def vertex_flux(L_adj, coords, psi, j):
    """g(x) = sum_{y~x} (psi(x) - psi(y)) (x_j - y_j)."""
    A = L_adj.tocoo()
    contrib = (psi[A.row] - psi[A.col]) * (coords[A.row, j] - coords[A.col, j])
    return np.bincount(A.row, weights=contrib, minlength=len(psi))


def coarse_flux(batch, i, j, phi):
    """Block values of the flux of l_{e_i} + phi in direction e_j (single cube).

    A block value is the sum of the vertex fluxes in the block divided by the
    block volume, so the cube average equals e_j.a_l e_i for the corrector.
    """
    ei = np.eye(batch.d)[i]
    psi = batch.affine(ei) + phi
    g = vertex_flux(batch.adj, batch.coords, psi, j)
    vals = np.bincount(batch.block_local, weights=g, minlength=batch.k**batch.d) / batch.block_side**batch.d
    return FluxField(batch.cubes[0], i, j, vals.reshape((batch.k,) * batch.d), float(vals.mean()))


# ---------------------------------------------------------------------------
# subadditivity


@dataclass
class DefectReport:
    parent: object
    n: int
    l: int
    defect_D: np.ndarray
    defect_N: np.ndarray
    accepted: bool
    rejected_children: int
    bound_D: float
    bound_N: float

    @property
    def separation(self):
        return self.n - self.l

    def eig_D(self):
        return np.linalg.eigvalsh(self.defect_D) if self.accepted else np.full(len(self.defect_D), np.nan)

    def eig_N(self):
        return np.linalg.eigvalsh(self.defect_N) if self.accepted else np.full(len(self.defect_N), np.nan)


def subadditivity_defect(cloud, parent, n, l=1, cfg=None, theta=None, parent_batch=None, C=1.0, dual=True):
    """defect_D = a_l(parent) - mean a_l(children); defect_N the same for a_*l^{-1}."""
    cfg = CGQConfig(l=l) if cfg is None else cfg
    if n > parent.level:
        raise ParameterError("child level above parent level")
    pb = cube_batch(cloud, parent, l, cfg, theta) if parent_batch is None else parent_batch
    a_p, ai_p = pb.matrices(dual)
    if n == parent.level:
        cb, a_c, ai_c = pb, a_p, ai_p
    else:
        cb = CubeBatch(cloud, triadic_decompose(parent, n), cfg, pb.theta, pairs=pb.cloud_pairs)
        a_c, ai_c = cb.matrices(dual)
    rejected = int((~cb.good).sum())
    ok = bool(pb.good[0]) and rejected == 0
    d = pb.d
    if ok:
        dD = a_p[0] - a_c.mean(axis=0)
        dN = ai_p[0] - ai_c.mean(axis=0) if dual else np.full((d, d), np.nan)
    else:
        dD = dN = np.full((d, d), np.nan)
    return DefectReport(parent, n, l, dD, dN, ok, rejected, C * 3.0 ** (-(n - l)), C * 3.0 ** (-(n - l) / 2))

"""Graph Laplacian solves, Green's columns, norms and coarsening.

Sign conventions: `apply_laplacian` returns (Lu)(x) = sum_{y~x} (u(y) - u(x)).
The matrix returned by `laplacian` is the positive semidefinite D - A, i.e.
minus that operator, so u.(D - A).u is the sum over edges of (u(x) - u(y))^2.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import pyamg
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.sparse.linalg import LinearOperator, cg, splu

from .cloud import ParameterError


class SolverFailure(RuntimeError):
    pass


class SingularSystemError(SolverFailure):
    pass


class CompatibilityError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-10
    precond: str = "jacobi"  # "jacobi", "amg", "direct" (sparse LU, nonsingular only) or "none"
    maxiter_factor: float = 50.0

    def maxiter(self, n):
        return max(100, int(self.maxiter_factor * math.sqrt(max(n, 1))))


DEFAULT = SolverConfig()


@dataclass
class SolveStats:
    iterations: int
    residual: float
    wall_time: float
    converged: bool = True

    def to_dict(self):
        return {"iterations": self.iterations, "residual": self.residual, "wall_time": self.wall_time}


def laplacian(graph_or_adj):
    adj = getattr(graph_or_adj, "adj", graph_or_adj)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    return (sp.diags(deg) - adj).tocsr()


def apply_laplacian(graph, u):
    """(Lu)(x) = sum_{y~x} (u(y) - u(x))."""
    adj = getattr(graph, "adj", graph)
    u = np.asarray(u, dtype=float)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    return adj @ u - deg * u


def edge_energy(L, u, w=None):
    """sum over edges of (u(x) - u(y))(w(x) - w(y))."""
    w = u if w is None else w
    return float(u @ (L @ w))


# ---------------------------------------------------------------------------
# preconditioned CG


def amg_solver(A):
    """Smoothed-aggregation hierarchy that does not depend on the global numpy RNG.

    pyamg seeds its spectral-radius estimate from np.random; without pinning it
    the hierarchy (and the last digits of every solve) depends on run history.
    """
    state = np.random.get_state()
    np.random.seed(0x5EED)
    try:
        return pyamg.smoothed_aggregation_solver(A, symmetry="symmetric")
    finally:
        np.random.set_state(state)


def factor_spd(A):
    """Sparse LU with a symmetric fill-reducing ordering (much less fill than COLAMD here)."""
    return splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A", options=dict(SymmetricMode=True))


class Preconditioned:
    """An SPD (or consistent semidefinite) matrix with a cached preconditioner."""

    def __init__(self, A, cfg=DEFAULT):
        self.A = A.tocsr()
        self.cfg = cfg
        self._M = None
        self.ml = None

    @property
    def M(self):
        if self._M is None:
            kind = self.cfg.precond
            if kind == "direct":
                self._M = factor_spd(self.A)
            elif kind == "amg" and self.A.shape[0] > 200:
                self.ml = amg_solver(self.A)
                self._M = self.ml.aspreconditioner(cycle="V")
            elif kind in ("jacobi", "amg"):
                diag = self.A.diagonal().copy()
                diag[diag == 0] = 1.0
                self._M = sp.diags(1.0 / diag)
            else:
                self._M = None
        return self._M

    def solve(self, b, tol=None, x0=None, project=None):
        """Solve A x = b; `project` maps iterates onto a complement of the kernel."""
        tol = self.cfg.tol if tol is None else tol
        t0 = time.perf_counter()
        b = np.asarray(b, dtype=float)
        n = len(b)
        nb = np.linalg.norm(b)
        if nb == 0:
            return np.zeros(n), SolveStats(0, 0.0, 0.0)
        if self.cfg.precond == "direct":
            if self._M is None:
                self._M = factor_spd(self.A)
            x = self._M.solve(b)
            res = float(np.linalg.norm(b - self.A @ x) / nb)
            return x, SolveStats(0, res, time.perf_counter() - t0, True)
        it = [0]

        def count(_):
            it[0] += 1

        M = self.M
        if project is not None and M is not None:
            # keep preconditioned residuals in the range of a semidefinite A
            base = M
            M = LinearOperator((n, n), matvec=lambda r: project(base @ project(r)), dtype=float)
        x, info = cg(self.A, b, x0=x0, rtol=tol, atol=0.0, maxiter=self.cfg.maxiter(n), M=M, callback=count)
        if info != 0 and self.ml is not None:
            # AMG can stall on many tiny disconnected blocks; Jacobi does not
            jac = sp.diags(1.0 / np.where(self.A.diagonal() == 0, 1.0, self.A.diagonal()))
            Mj = jac if project is None else LinearOperator((n, n), matvec=lambda r: project(jac @ project(r)), dtype=float)
            x, info = cg(self.A, b, rtol=tol, atol=0.0, maxiter=self.cfg.maxiter(n), M=Mj, callback=count)
        if project is not None:
            x = project(x)
        res = float(np.linalg.norm(b - self.A @ x) / nb)
        stats = SolveStats(it[0], res, time.perf_counter() - t0, info == 0)
        if info != 0 and res > 10 * tol:
            raise SolverFailure(f"CG did not converge: residual {res:.3e} after {it[0]} iterations")
        return x, stats


# ---------------------------------------------------------------------------
# Dirichlet and Neumann problems


@dataclass
class DirichletSystem:
    """Reduced system L_II u_I = f_I - L_IB g for a fixed boundary set."""

    L: sp.csr_matrix
    boundary: np.ndarray  # bool mask
    cfg: SolverConfig = DEFAULT
    _op: Preconditioned = field(default=None, repr=False)

    def __post_init__(self):
        self.boundary = np.asarray(self.boundary, dtype=bool)
        self.interior = ~self.boundary
        self.I = np.flatnonzero(self.interior)
        self.B = np.flatnonzero(self.boundary)
        self.L_II = self.L[self.I][:, self.I].tocsr()
        self.L_IB = self.L[self.I][:, self.B].tocsr()

    @property
    def op(self):
        if self._op is None:
            self._op = Preconditioned(self.L_II, self.cfg)
        return self._op

    def solve(self, g_boundary, rhs=None, tol=None):
        """u = g on boundary and (D - A)u = rhs on the interior."""
        u = np.zeros(self.L.shape[0])
        u[self.B] = g_boundary
        b = -(self.L_IB @ np.asarray(g_boundary, dtype=float))
        if rhs is not None:
            b = b + np.asarray(rhs, dtype=float)[self.I]
        if len(self.I) == 0:
            return u, SolveStats(0, 0.0, 0.0)
        xI, stats = self.op.solve(b, tol=tol)
        u[self.I] = xI
        return u, stats


def check_boundary_reaches(adj, boundary):
    """Raise if a connected component has no boundary vertex."""
    n = adj.shape[0]
    if n == 0:
        return
    ncomp, labels = csgraph.connected_components(adj, directed=False)
    hit = np.zeros(ncomp, dtype=bool)
    hit[labels[np.asarray(boundary, dtype=bool)]] = True
    touched = np.unique(labels)
    bad = [int(c) for c in touched if not hit[c]]
    if bad:
        raise SingularSystemError(f"component(s) {bad} have no boundary vertex")


def solve_dirichlet(graph, boundary, boundary_values, f=None, tol=None, cfg=DEFAULT):
    """Solve (Lu)(x) = f(x) on interior vertices with u = boundary_values on boundary.

    `boundary` is a boolean mask or index array; `f` (length n, read on the
    interior) uses the sign of `apply_laplacian`.
    """
    n = graph.n
    mask = np.zeros(n, dtype=bool)
    mask[np.asarray(boundary)] = True
    check_boundary_reaches(graph.adj, mask)
    system = DirichletSystem(laplacian(graph), mask, cfg)
    bv = np.asarray(boundary_values, dtype=float)
    if bv.ndim == 0:
        values = np.full(int(mask.sum()), float(bv))
    elif len(bv) == n:
        values = bv[mask]
    else:
        values = bv
    rhs = None if f is None else -np.asarray(f, dtype=float)
    return system.solve(values, rhs, tol)


def component_means_projector(labels):
    labels = np.asarray(labels)
    counts = np.bincount(labels)

    def project(x):
        return x - (np.bincount(labels, weights=x, minlength=len(counts)) / counts)[labels]

    return project


class NeumannSystem:
    """(D - A)u = b with b orthogonal to constants on every component; mean-zero u."""

    def __init__(self, L, labels=None, cfg=DEFAULT):
        self.L = L.tocsr()
        n = self.L.shape[0]
        if labels is None:
            _, labels = csgraph.connected_components(self.L, directed=False)
        self.labels = np.asarray(labels)
        self.project = component_means_projector(self.labels)
        self.n = n
        if cfg.precond == "direct":
            # pin the first vertex of every component; the rest is SPD
            first = np.unique(self.labels, return_index=True)[1]
            self.free = np.setdiff1d(np.arange(n), first)
            self.op = Preconditioned(self.L[self.free][:, self.free], cfg)
        else:
            self.free = None
            self.op = Preconditioned(self.L, cfg)

    def solve(self, b, tol=None, check=True):
        b = np.asarray(b, dtype=float)
        pb = self.project(b)
        if check and np.linalg.norm(pb - b) > 1e-9 * max(1.0, np.linalg.norm(b)):
            raise CompatibilityError("right-hand side not orthogonal to constants")
        if self.free is None:
            return self.op.solve(pb, tol=tol, project=self.project)
        x = np.zeros(self.n)
        x[self.free], stats = self.op.solve(pb[self.free])
        x = self.project(x)
        res = float(np.linalg.norm(pb - self.L @ x) / max(np.linalg.norm(pb), 1e-300))
        return x, SolveStats(0, res, stats.wall_time, True)


def solve_neumann(graph, b, tol=None, cfg=DEFAULT):
    return NeumannSystem(laplacian(graph), graph.labels, cfg).solve(b, tol)


# ---------------------------------------------------------------------------
# constrained maximisation


def harmonic_projection(L, g, interior, volume, tol=None):
    """Maximise  -w.L.w / volume + g.w  over w with (Lw)(x) = 0 for x in interior.

    Solved through the saddle-point system (stationarity plus interior
    harmonicity with Lagrange multipliers, one vertex pinned) by a sparse
    direct factorisation.  L must be a connected graph Laplacian.
    """
    L = L.tocsr()
    n = L.shape[0]
    interior = np.asarray(interior)
    I = np.flatnonzero(interior) if interior.dtype == bool else interior
    g = np.asarray(g, dtype=float)
    if len(I) == n:
        return np.zeros(n)  # only constants are harmonic everywhere
    if len(I) == 0:
        ns = NeumannSystem(L)
        w, _ = ns.solve(0.5 * volume * (g - g.mean()), tol=tol, check=False)
        return w
    # constants are the kernel; pin w[0] = 0 (a dense mean-zero row ruins the fill-in)
    keep = np.arange(1, n)
    C = L[I][:, keep]
    K = sp.bmat([[(2.0 / volume) * L[keep][:, keep], C.T], [C, None]], format="csc")
    rhs = np.concatenate([g[keep], np.zeros(len(I))])
    sol = splu(K, permc_spec="COLAMD").solve(rhs)
    w = np.concatenate([[0.0], sol[: n - 1]])
    return w - w.mean()


# ---------------------------------------------------------------------------
# Green's function


@dataclass
class GreenColumn:
    source: int
    values: np.ndarray = field(repr=False)
    stats: SolveStats = None


def greens_column(graph, x, tol=None, cfg=DEFAULT, system=None):
    """G_x with (L G_x)(z) = delta_x(z) - 1/n (sign of apply_laplacian), mean zero."""
    n = graph.n
    if not (0 <= x < n):
        raise ParameterError(f"vertex {x} not in the cluster")
    if graph.n_components != 1:
        raise ParameterError("Green's function needs a connected cluster")
    system = NeumannSystem(laplacian(graph), graph.labels, cfg) if system is None else system
    rhs = np.full(n, 1.0 / n)
    rhs[x] -= 1.0  # (D - A)G = -(delta - 1/n)
    g, stats = system.solve(rhs, tol=tol, check=False)
    return GreenColumn(int(x), g, stats)


def green_represent(graph, f, tol=None, cfg=DEFAULT):
    """u = sum_z G(., z) f(z) assembled column by column (small graphs only)."""
    f = np.asarray(f, dtype=float)
    system = NeumannSystem(laplacian(graph), graph.labels, cfg)
    u = np.zeros(graph.n)
    for z in np.flatnonzero(f):
        u += f[z] * greens_column(graph, z, tol, cfg, system).values
    return u


# ---------------------------------------------------------------------------
# coarsening


@dataclass(frozen=True)
class BlockLattice:
    """The blocks lo + 3^l (j + [0,1)^d), j in [0,k)^d, tiling a cube."""

    lo: tuple
    block_side: float
    k: int

    @classmethod
    def of(cls, cube, l):
        s = 3**l
        k = cube.side // s
        if k * s != cube.side:
            raise ParameterError("cube side is not a multiple of 3^l")
        return cls(tuple(float(v) for v in cube.lo), float(s), int(k))

    @property
    def d(self):
        return len(self.lo)

    @property
    def shape(self):
        return (self.k,) * self.d

    @property
    def size(self):
        return self.k**self.d

    def block_of(self, x):
        j = np.floor((np.asarray(x) - np.array(self.lo)) / self.block_side).astype(np.int64)
        j = np.clip(j, 0, self.k - 1)
        return np.ravel_multi_index(j.T, self.shape)

    def centers(self):
        j = np.stack(np.unravel_index(np.arange(self.size), self.shape), axis=1)
        return np.array(self.lo) + self.block_side * (j + 0.5)

    def layer_mask(self):
        j = np.stack(np.unravel_index(np.arange(self.size), self.shape), axis=1)
        return np.any((j == 0) | (j == self.k - 1), axis=1)


@dataclass
class CoarseField:
    lattice: object  # BlockLattice or a list of cubes
    values: np.ndarray
    filled: np.ndarray  # True where a block had no cluster vertex

    @property
    def grid(self):
        return self.values.reshape(self.lattice.shape + self.values.shape[1:])


def coarsening_matrix(coords, lattice):
    """Sparse (blocks x vertices) averaging matrix; empty blocks copy the nearest nonempty one."""
    n = len(coords)
    if isinstance(lattice, BlockLattice):
        blk = lattice.block_of(coords) if n else np.zeros(0, dtype=np.int64)
        nb = lattice.size
        centers = lattice.centers()
    else:
        cells = list(lattice)
        blk = np.full(n, -1, dtype=np.int64)
        for c, cube in enumerate(cells):
            blk[cube.contains(coords)] = c
        nb = len(cells)
        centers = np.array([np.asarray(c.center, dtype=float) for c in cells])
    keep = blk >= 0
    counts = np.bincount(blk[keep], minlength=nb).astype(float)
    A = sp.csr_matrix((1.0 / counts[blk[keep]], (blk[keep], np.flatnonzero(keep))), shape=(nb, n))
    empty = counts == 0
    if empty.any() and (~empty).any():
        src = np.flatnonzero(~empty)
        d2 = np.sum((centers[empty][:, None, :] - centers[src][None, :, :]) ** 2, axis=2)
        nearest = src[np.argmin(d2, axis=1)]
        P = sp.identity(nb, format="lil")
        for e, s in zip(np.flatnonzero(empty), nearest):
            P[e, e] = 0.0
            P[e, s] = 1.0
        A = (P.tocsr() @ A).tocsr()
    return A, empty


def coarsen(u, coords, lattice):
    A, empty = coarsening_matrix(coords, lattice)
    return CoarseField(lattice, A @ np.asarray(u, dtype=float), empty)


def lattice_gradient(field):
    """Forward differences of a coarse field divided by the block side, shape (k-1,...)."""
    grid = field.grid
    h = field.lattice.block_side
    d = field.lattice.d
    out = []
    for i in range(d):
        diff = np.diff(grid, axis=i) / h
        sl = [slice(0, field.lattice.k - 1)] * d
        out.append(diff[tuple(sl)])
    return np.stack(out, axis=-1)


# ---------------------------------------------------------------------------
# norms


def l2_avg(u):
    u = np.asarray(u, dtype=float)
    return float(np.sqrt(np.mean(u**2))) if u.size else 0.0


def h1_seminorm(L, u):
    """(sum over edges of (u(x)-u(y))^2 / n)^(1/2)."""
    u = np.asarray(u, dtype=float)
    return float(np.sqrt(max(edge_energy(L, u), 0.0) / len(u)))


def hminus1(L, f, boundary, tol=1e-12, cfg=DEFAULT):
    """Cluster H^-1 norm: sqrt(<f, u_f>_avg) with (D - A)u_f = f, u_f = 0 on boundary."""
    f = np.asarray(f, dtype=float)
    boundary = np.asarray(boundary, dtype=bool)
    if not boundary.any():
        if abs(f.sum()) > 1e-9 * max(1.0, np.abs(f).sum()):
            raise CompatibilityError("f must be orthogonal to constants without a boundary")
        uf, _ = NeumannSystem(L, cfg=cfg).solve(f, tol=tol)
    else:
        uf, _ = DirichletSystem(L, boundary, cfg).solve(np.zeros(boundary.sum()), f, tol=tol)
    return float(np.sqrt(max(np.mean(f * uf), 0.0)))


def lattice_laplacian(k, d, h):
    """5/7-point Dirichlet Laplacian (positive) on k^d interior nodes with spacing h."""
    T = sp.diags([-np.ones(k - 1), 2 * np.ones(k), -np.ones(k - 1)], [-1, 0, 1]) / h**2
    I = sp.identity(k)
    out = sp.csr_matrix((k**d, k**d))
    for i in range(d):
        mats = [I] * d
        mats[i] = T
        term = mats[0]
        for m in mats[1:]:
            term = sp.kron(term, m)
        out = out + term
    return out.tocsr()


def lattice_l2(field):
    return l2_avg(field.values)


def lattice_hminus1(field):
    lat = field.lattice
    A = lattice_laplacian(lat.k, lat.d, lat.block_side)
    f = np.asarray(field.values, dtype=float)
    u = sp.linalg.spsolve(A.tocsc(), f)
    return float(np.sqrt(max(np.mean(f * u), 0.0)))


def multiscale_sum(grad, lattice, levels):
    """sum_n 3^n (mean over level-n blocks of |block average of grad|^2)^(1/2).

    grad has shape lattice.shape + (d,); level n groups 3^(n-l) blocks per axis.
    """
    grad = np.asarray(grad, dtype=float)
    k, d = lattice.k, lattice.d
    base = lattice.block_side
    total = 0.0
    for n in levels:
        f = int(round(3**n / base))
        if f < 1 or k % f:
            raise ParameterError(f"level {n} does not tile the lattice")
        shp = []
        for _ in range(d):
            shp += [k // f, f]
        g = grad.reshape(tuple(shp) + (grad.shape[-1],))
        g = g.mean(axis=tuple(range(1, 2 * d, 2)))
        total += 3**n * math.sqrt(float(np.mean(np.sum(g**2, axis=-1))))
    return total


NORM_KINDS = ("l2", "h1", "hminus1", "lattice_l2", "lattice_hminus1", "multiscale")


def norms(obj, kind, **kw):
    if kind == "l2":
        return l2_avg(obj)
    if kind == "h1":
        return h1_seminorm(kw["L"], obj)
    if kind == "hminus1":
        return hminus1(kw["L"], obj, kw["boundary"])
    if kind == "lattice_l2":
        return lattice_l2(obj)
    if kind == "lattice_hminus1":
        return lattice_hminus1(obj)
    if kind == "multiscale":
        return multiscale_sum(obj, kw["lattice"], kw["levels"])
    raise ParameterError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")

"""Poisson clouds, triadic cubes and a unit-cell spatial index.

Unit cells are zeta + [-1/2, 1/2)^d for integer zeta, so every triadic cube
z + [-3^m/2, 3^m/2)^d is an exact union of unit cells.  Each cell draws its
points from a counter-based stream keyed by (seed, zeta, draw index), which
makes sampling order independent and lets a single cell be redrawn in place.
"""

from __future__ import annotations

import csv
import itertools
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import stats


class ParameterError(ValueError):
    pass


# ---------------------------------------------------------------------------
# counter-based stream

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_CELL_SALT = np.uint64(0x632BE59BD9B4E019)
_OFFSET = 1 << 20


def _mix64(z):
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z ^ (z >> np.uint64(30))
        z = z * _M1
        z = z ^ (z >> np.uint64(27))
        z = z * _M2
        z = z ^ (z >> np.uint64(31))
    return z


def pack_cells(cells):
    """Pack integer cell coordinates (n, d), d <= 3, into one uint64 each."""
    cells = np.asarray(cells, dtype=np.int64)
    if cells.ndim != 2 or cells.shape[1] > 3:
        raise ParameterError("cell coordinates must be (n, d) with d <= 3")
    shifted = cells + _OFFSET
    if np.any(shifted < 0) or np.any(shifted >= (1 << 21)):
        raise ParameterError("cell coordinate out of packable range")
    key = np.zeros(len(cells), dtype=np.uint64)
    d = cells.shape[1]
    for i in range(d):
        # first axis most significant, so key order is lexicographic order
        key |= shifted[:, i].astype(np.uint64) << np.uint64(21 * (d - 1 - i))
    return key


def cell_keys(seeds, cells):
    """Stream key per cell from (seed, packed cell coordinate)."""
    seeds = np.asarray(seeds, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix64(_mix64(seeds ^ _GOLDEN) ^ (pack_cells(cells) * _CELL_SALT))


def stream_uniforms(keys, draws):
    """Uniforms in [0, 1) for draw indices `draws` of the streams `keys`."""
    keys = np.asarray(keys, dtype=np.uint64)
    draws = np.asarray(draws, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = _mix64(keys + (draws + np.uint64(1)) * _GOLDEN)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


@lru_cache(maxsize=64)
def _poisson_cdf(lam):
    kmax = int(lam + 12 * np.sqrt(lam) + 40)
    return stats.poisson.cdf(np.arange(kmax), lam)


def poisson_counts(keys, lam):
    """Inverse-cdf Poisson(lam) counts from draw 0 of each stream."""
    u = stream_uniforms(keys, np.zeros(len(keys), dtype=np.uint64))
    return np.searchsorted(_poisson_cdf(float(lam)), u, side="right")


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class Box:
    """Half-open box prod [lo_i, hi_i)."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi) or len(lo) < 1:
            raise ParameterError("box corners must have equal dimension")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def d(self):
        return len(self.lo)

    @property
    def sides(self):
        return np.array(self.hi) - np.array(self.lo)

    @property
    def volume(self):
        return float(np.prod(self.sides))

    def contains(self, pts):
        pts = np.asarray(pts, dtype=float).reshape(-1, self.d)
        return np.all((pts >= self.lo) & (pts < self.hi), axis=1)

    def contains_box(self, other):
        return all(a <= b for a, b in zip(self.lo, other.lo)) and all(
            a >= b for a, b in zip(self.hi, other.hi)
        )

    @property
    def box(self):
        return self

    def cells(self):
        """Integer cells zeta whose unit cell meets the box, lexicographic order."""
        axes = [
            np.arange(int(np.floor(a - 0.5)) + 1, int(np.ceil(b + 0.5)))
            for a, b in zip(self.lo, self.hi)
        ]
        axes = [ax[(ax + 0.5 > a) & (ax - 0.5 < b)] for ax, a, b in zip(axes, self.lo, self.hi)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))

    @property
    def d(self):
        return len(self.center)

    def contains(self, pts):
        pts = np.asarray(pts, dtype=float).reshape(-1, self.d)
        return np.sum((pts - self.center) ** 2, axis=1) < self.radius**2

    @property
    def box(self):
        c = np.array(self.center)
        return Box(tuple(c - self.radius), tuple(c + self.radius))


@dataclass(frozen=True)
class TriadicCube:
    """z + [-3^m/2, 3^m/2)^d with z in 3^m Z^d."""

    level: int
    center: tuple

    def __post_init__(self):
        if self.level < 0:
            raise ParameterError("level must be >= 0")
        c = tuple(int(v) for v in self.center)
        if any(v % (3**self.level) for v in c):
            raise ParameterError(f"center {c} not in 3^{self.level} Z^d")
        object.__setattr__(self, "center", c)

    @classmethod
    def origin(cls, level, d):
        return cls(level, (0,) * d)

    @property
    def d(self):
        return len(self.center)

    @property
    def side(self):
        return 3**self.level

    @property
    def volume(self):
        return self.side**self.d

    @property
    def lo(self):
        return np.array(self.center, dtype=float) - self.side / 2

    @property
    def hi(self):
        return np.array(self.center, dtype=float) + self.side / 2

    @property
    def box(self):
        return Box(tuple(self.lo), tuple(self.hi))

    def contains(self, pts):
        return self.box.contains(pts)

    def lattice_points(self):
        h = (self.side - 1) // 2
        axes = [np.arange(c - h, c + h + 1) for c in self.center]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def children(self, n):
        return triadic_decompose(self, n)

    def enlarged(self):
        """The cube 3*cube: same center, side 3^(m+1)."""
        return Cube(self.center, 3 * self.side)


@dataclass(frozen=True)
class Cube:
    """z + [-side/2, side/2)^d for integer z and odd side (not necessarily triadic)."""

    center: tuple
    side: int

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(int(v) for v in self.center))
        if self.side < 1 or self.side % 2 == 0:
            raise ParameterError("cube side must be a positive odd integer")

    d = TriadicCube.d
    volume = TriadicCube.volume
    lo = TriadicCube.lo
    hi = TriadicCube.hi
    box = TriadicCube.box
    contains = TriadicCube.contains
    lattice_points = TriadicCube.lattice_points


def triadic_decompose(cube, n):
    m = cube.level
    if n > m or n < 0:
        raise ParameterError(f"target level {n} not in [0, {m}]")
    k = 3 ** (m - n)
    s = 3**n
    offs = (np.arange(k) - (k - 1) // 2) * s
    out = []
    for idx in itertools.product(offs, repeat=cube.d):
        out.append(TriadicCube(n, tuple(c + o for c, o in zip(cube.center, idx))))
    return out


@dataclass(frozen=True)
class BoundaryLayer:
    cube: TriadicCube
    l: int
    blocks: tuple  # multi-indices j in [0, k)^d of the layer blocks

    @property
    def k(self):
        return 3 ** (self.cube.level - self.l)

    @property
    def block_side(self):
        return 3**self.l

    def block_center(self, j):
        return self.cube.lo + self.block_side * (np.asarray(j) + 0.5)

    def interior_blocks(self):
        layer = set(self.blocks)
        return tuple(j for j in itertools.product(range(self.k), repeat=self.cube.d) if j not in layer)


def boundary_layer(cube, l):
    if l < 0 or 3**l >= cube.side:
        raise ParameterError(f"need 3^l < size(cube); got l={l}, side={cube.side}")
    k = 3 ** (cube.level - l)
    blocks = tuple(
        j for j in itertools.product(range(k), repeat=cube.d) if any(v in (0, k - 1) for v in j)
    )
    return BoundaryLayer(cube, l, blocks)


def block_multi_index(pts, lo, block_side, k):
    """Block multi-index of each point inside a cube with corner lo."""
    j = np.floor((np.asarray(pts) - lo) / block_side).astype(np.int64)
    return np.clip(j, 0, k - 1)


# ---------------------------------------------------------------------------
# point cloud


@dataclass(frozen=True)
class PointCloud:
    d: int
    intensity: float
    box: Box
    points: np.ndarray = field(repr=False)
    seed: int
    offsets: tuple = ()  # ((zeta, seed'), ...) cells drawn from another stream

    def __post_init__(self):
        self.points.setflags(write=False)

    def __len__(self):
        return len(self.points)

    def cell_of(self):
        return np.floor(self.points + 0.5).astype(np.int64)

    def cell_seeds(self, cells):
        seeds = np.full(len(cells), self.seed, dtype=np.uint64)
        if self.offsets:
            keys = pack_cells(cells)
            for zeta, s in self.offsets:
                seeds[keys == pack_cells([zeta])[0]] = np.uint64(s)
        return seeds


def _draw_cells(cells, seeds, lam, d):
    keys = cell_keys(seeds, cells)
    counts = poisson_counts(keys, lam)
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(cells)), counts)
    starts = np.cumsum(counts) - counts
    rank = np.arange(total) - np.repeat(starts, counts)
    draws = 1 + rank[:, None] * d + np.arange(d)[None, :]
    u = stream_uniforms(np.repeat(keys, counts)[:, None], draws.astype(np.uint64))
    return cells[owner] - 0.5 + u, owner


def _validate(box, lam):
    if not (lam > 0) or not np.isfinite(lam):
        raise ParameterError(f"intensity must be positive, got {lam}")
    if box.d < 1 or box.d > 3:
        raise ParameterError("dimension must be 1, 2 or 3")
    if np.any(box.sides < 1):
        raise ParameterError(f"box sides must be >= 1, got {box.sides}")


def _sample(box, lam, seed, offsets):
    cells = box.cells()
    probe = PointCloud(box.d, lam, box, np.zeros((0, box.d)), seed, offsets)
    pts, _ = _draw_cells(cells, probe.cell_seeds(cells), lam, box.d)
    return pts[box.contains(pts)]


def sample_poisson(box, lam, seed):
    """Poisson cloud of intensity lam in box."""
    if not isinstance(box, Box):
        box = box.box
    _validate(box, lam)
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    pts = _sample(box, lam, seed, ())
    return PointCloud(box.d, float(lam), box, np.ascontiguousarray(pts), seed)


def resample_cube(cloud, zeta, new_seed):
    """Redraw the points of the unit cell zeta + [-1/2, 1/2)^d from another stream."""
    zeta = tuple(int(v) for v in zeta)
    cell = Box(tuple(np.array(zeta) - 0.5), tuple(np.array(zeta) + 0.5))
    if len(zeta) != cloud.d or not cloud.box.contains_box(cell):
        raise ParameterError(f"cell {zeta} not inside the box")
    new_seed = int(new_seed) & 0xFFFFFFFFFFFFFFFF
    offsets = tuple((z, s) for z, s in cloud.offsets if z != zeta)
    if new_seed != cloud.seed:
        offsets = offsets + ((zeta, new_seed),)
    in_cell = np.all(cloud.cell_of() == np.array(zeta), axis=1)
    new, _ = _draw_cells(np.array([zeta]), np.array([new_seed], dtype=np.uint64), cloud.intensity, cloud.d)
    pos = np.flatnonzero(in_cell)
    # cells are stored contiguously, so splice at the first slot of the old block
    at = pos[0] if len(pos) else int(np.searchsorted(pack_cells(cloud.cell_of()), pack_cells([zeta])[0]))
    kept = cloud.points[~in_cell]
    pts = np.concatenate([kept[:at], new, kept[at:]])
    return PointCloud(cloud.d, cloud.intensity, cloud.box, np.ascontiguousarray(pts), cloud.seed, offsets)


# ---------------------------------------------------------------------------
# spatial index


class CellIndex:
    """Unit-cell hash of a point set.

    Points are bucketed by floor(x); a query over the 3^d surrounding cells
    returns every point within distance 1 (and possibly a few more).
    """

    def __init__(self, points):
        self.points = np.asarray(points, dtype=float)
        n, self.d = self.points.shape if self.points.ndim == 2 else (0, 1)
        self.cells = np.floor(self.points).astype(np.int64)
        keys = pack_cells(self.cells) if n else np.zeros(0, dtype=np.uint64)
        self.order = np.argsort(keys, kind="stable")
        self.sorted_keys = keys[self.order]
        uniq, start = np.unique(self.sorted_keys, return_index=True)
        self.table = dict(zip(uniq.tolist(), start.tolist()))
        self.ends = dict(zip(uniq.tolist(), np.append(start[1:], n).tolist()))

    def cell_members(self, cell):
        key = int(pack_cells([cell])[0])
        if key not in self.table:
            return np.zeros(0, dtype=np.int64)
        return self.order[self.table[key] : self.ends[key]]

    def candidates(self, x):
        c = np.floor(np.asarray(x, dtype=float)).astype(np.int64)
        out = [self.cell_members(c + np.array(o)) for o in itertools.product((-1, 0, 1), repeat=self.d)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def within(self, x, r=1.0):
        cand = self.candidates(x)
        d2 = np.sum((self.points[cand] - x) ** 2, axis=1)
        return np.sort(cand[d2 <= r * r])

    def pairs(self):
        """All index pairs i < j with |x_i - x_j|^2 <= 1."""
        out = []
        for i, x in enumerate(self.points):
            nb = self.within(x)
            out.extend((i, j) for j in nb if j > i)
        return np.array(sorted(out), dtype=np.int64).reshape(-1, 2)


# ---------------------------------------------------------------------------
# IO

_MAGIC = b"PCLD"
_VERSION = 1


def write_cloud(cloud, path):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HHdQ", _VERSION, cloud.d, cloud.intensity, cloud.seed))
        fh.write(struct.pack(f"<{2 * cloud.d}d", *cloud.box.lo, *cloud.box.hi))
        fh.write(struct.pack("<Q", len(cloud)))
        fh.write(np.ascontiguousarray(cloud.points, dtype="<f8").tobytes())


def read_cloud(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ParameterError("not a PCLD file")
        version, d, lam, seed = struct.unpack("<HHdQ", fh.read(20))
        if version != _VERSION:
            raise ParameterError(f"unsupported PCLD version {version}")
        corners = struct.unpack(f"<{2 * d}d", fh.read(16 * d))
        (count,) = struct.unpack("<Q", fh.read(8))
        pts = np.frombuffer(fh.read(8 * d * count), dtype="<f8").reshape(count, d).astype(float)
    return PointCloud(d, lam, Box(corners[:d], corners[d:]), pts, seed)


def write_cloud_csv(cloud, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(cloud.d)])
        for p in cloud.points:
            w.writerow([repr(float(v)) for v in p])

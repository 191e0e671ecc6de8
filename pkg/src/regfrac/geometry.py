"""Uniform grids, cell masks, node activity, and directional distances.

The discretization convention throughout the package: cells carry the
domain (a cell is in or out), nodes carry function values.  A node is an
interior degree of freedom exactly when all surrounding cells are
active; every other vertex of an active cell sits on the topological
boundary of the cell union and is pinned to the value zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "GridSpec", "DomainMask", "DirectionSet",
    "Ball", "Box", "Annulus", "CellList", "Bitmap",
    "make_mask", "direction_set", "directional_distance",
    "read_pbm", "write_pbm",
]


@dataclass(frozen=True)
class GridSpec:
    """Uniform tensor grid: ``cells[k]`` cells of isotropic spacing ``h``.

    ``origin`` is the coordinate of the low corner.  Node indices run
    0..cells[k] inclusive per axis.
    """

    cells: tuple[int, ...]
    spacing: float
    origin: tuple[float, ...]

    def __post_init__(self):
        if len(self.cells) not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2, or 3, got {len(self.cells)}")
        if any(c < 1 for c in self.cells):
            raise ValueError(f"cells per axis must be positive, got {self.cells}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if len(self.origin) != len(self.cells):
            raise ValueError("origin dimension does not match cell dimension")

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def node_shape(self) -> tuple[int, ...]:
        return tuple(c + 1 for c in self.cells)

    @property
    def high_corner(self) -> tuple[float, ...]:
        return tuple(o + c * self.spacing for o, c in zip(self.origin, self.cells))

    @property
    def diameter(self) -> float:
        return self.spacing * math.sqrt(sum(c * c for c in self.cells))

    def cell_centers(self) -> np.ndarray:
        """Array of shape cells + (dim,) with the center of every cell."""
        axes = [self.origin[k] + (np.arange(self.cells[k]) + 0.5) * self.spacing
                for k in range(self.dim)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack(grids, axis=-1)

    def node_coords(self, idx: np.ndarray) -> np.ndarray:
        """Coordinates for integer node indices of shape (..., dim)."""
        return np.asarray(self.origin) + np.asarray(idx, dtype=float) * self.spacing

    def scaled(self, t: float) -> "GridSpec":
        """Same cell pattern with all lengths multiplied by ``t``."""
        if not t > 0:
            raise ValueError(f"scale factor must be positive, got {t}")
        return GridSpec(self.cells, self.spacing * t,
                        tuple(o * t for o in self.origin))


# ------------------------------------------------------------------ masks


@dataclass(frozen=True)
class Ball:
    center: tuple[float, ...]
    radius: float


@dataclass(frozen=True)
class Box:
    lo: tuple[float, ...]
    hi: tuple[float, ...]


@dataclass(frozen=True)
class Annulus:
    center: tuple[float, ...]
    r_inner: float
    r_outer: float


@dataclass(frozen=True)
class CellList:
    indices: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class Bitmap:
    path: str


class DomainMask:
    """Active-cell set on a grid, with derived node classification.

    ``active`` is a boolean array of the grid's cell shape.  Derived
    (deterministically, on construction): ``interior`` marks nodes whose
    every incident cell is active — the degrees of freedom — and
    ``incident`` marks vertices of at least one active cell.  Incident
    non-interior nodes are the boundary ring carrying the value 0.
    """

    def __init__(self, grid: GridSpec, active: np.ndarray):
        active = np.asarray(active, dtype=bool)
        if active.shape != grid.cells:
            raise ValueError(
                f"mask shape {active.shape} does not match grid cells {grid.cells}")
        if not active.any():
            raise ValueError("empty domain")
        self.grid = grid
        self.active = active.copy()
        self.active.setflags(write=False)
        self._derive_nodes()

    def _derive_nodes(self) -> None:
        grid = self.grid
        dim = grid.dim
        # pad with inactive cells so grid-edge nodes classify as boundary
        padded = np.pad(self.active, 1, constant_values=False)
        node_shape = grid.node_shape
        interior = np.ones(node_shape, dtype=bool)
        incident = np.zeros(node_shape, dtype=bool)
        # node (i) touches cells (i-1+offset) for offset in {0,1}^dim
        for offset in np.ndindex(*([2] * dim)):
            sl = tuple(slice(o, o + node_shape[k]) for k, o in enumerate(offset))
            interior &= padded[sl]
            incident |= padded[sl]
        self.interior = interior
        self.incident = incident
        self.interior.setflags(write=False)
        self.incident.setflags(write=False)
        # lexicographic (C-order) index lists: the assembly ordering
        self.interior_idx = np.argwhere(interior)
        self.boundary_idx = np.argwhere(incident & ~interior)
        self.interior_coords = grid.node_coords(self.interior_idx)
        self.boundary_coords = grid.node_coords(self.boundary_idx)

    @property
    def cell_count(self) -> int:
        return int(self.active.sum())

    @property
    def volume(self) -> float:
        return self.cell_count * self.grid.spacing ** self.grid.dim

    def with_active(self, active: np.ndarray) -> "DomainMask":
        return DomainMask(self.grid, active)

    def same_cells(self, other: "DomainMask") -> bool:
        return self.grid == other.grid and bool(np.array_equal(self.active, other.active))

    def contains_point(self, p: np.ndarray) -> bool:
        """Whether p lies in the union of active (closed) cells.

        Points on shared faces are attributed to the higher-index cell;
        this is a measure-zero convention absorbed by march tolerances.
        """
        idx = np.floor((np.asarray(p, dtype=float) - np.asarray(self.grid.origin))
                       / self.grid.spacing).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.grid.cells)):
            return False
        return bool(self.active[tuple(idx)])


def _bounds_check(grid: GridSpec, lo, hi) -> None:
    tol = 1e-12 * grid.spacing
    g_lo = np.asarray(grid.origin)
    g_hi = np.asarray(grid.high_corner)
    if np.any(np.asarray(lo) < g_lo - tol) or np.any(np.asarray(hi) > g_hi + tol):
        raise ValueError(
            f"out of bounds: shape extent [{np.asarray(lo)}, {np.asarray(hi)}] "
            f"exceeds grid box [{g_lo}, {g_hi}]")


def make_mask(grid: GridSpec, shape) -> DomainMask:
    """Build a DomainMask by testing each cell center against ``shape``.

    Shapes: Ball (strict ``|c - center| < radius``), Box (closed),
    Annulus (r_inner <= |c - center| < r_outer), CellList, Bitmap (PBM
    file path).  A shape extending beyond the grid raises "out of
    bounds"; a shape capturing no center raises "empty domain".
    """
    centers = grid.cell_centers()
    if isinstance(shape, Ball):
        c = np.asarray(shape.center, dtype=float)
        _bounds_check(grid, c - shape.radius, c + shape.radius)
        dist = np.linalg.norm(centers - c, axis=-1)
        active = dist < shape.radius
    elif isinstance(shape, Box):
        lo = np.asarray(shape.lo, dtype=float)
        hi = np.asarray(shape.hi, dtype=float)
        _bounds_check(grid, lo, hi)
        active = np.all((centers >= lo) & (centers <= hi), axis=-1)
    elif isinstance(shape, Annulus):
        c = np.asarray(shape.center, dtype=float)
        if not 0.0 <= shape.r_inner < shape.r_outer:
            raise ValueError(
                f"annulus radii out of order: {shape.r_inner}, {shape.r_outer}")
        _bounds_check(grid, c - shape.r_outer, c + shape.r_outer)
        dist = np.linalg.norm(centers - c, axis=-1)
        active = (dist >= shape.r_inner) & (dist < shape.r_outer)
    elif isinstance(shape, CellList):
        active = np.zeros(grid.cells, dtype=bool)
        for idx in shape.indices:
            if len(idx) != grid.dim or any(
                    i < 0 or i >= grid.cells[k] for k, i in enumerate(idx)):
                raise ValueError(f"out of bounds: cell index {idx}")
            active[tuple(idx)] = True
    elif isinstance(shape, Bitmap):
        active = read_pbm(Path(shape.path), grid)
    else:
        raise TypeError(f"unknown shape descriptor: {shape!r}")
    if not active.any():
        raise ValueError("empty domain")
    return DomainMask(grid, active)


def read_pbm(path: Path, grid: GridSpec) -> np.ndarray:
    """Parse a plain PBM (P1) bitmap into a cell-activity array.

    '1' marks an active cell.  The file is row-major with the top row at
    the highest y, so rows are flipped into the grid's index order.
    Only 1-d (height 1) and 2-d grids can come from bitmaps.
    """
    if grid.dim == 3:
        raise ValueError("bitmap masks are 1-d or 2-d only")
    text = Path(path).read_text()
    tokens: list[str] = []
    for line in text.splitlines():
        body = line.split("#", 1)[0]
        tokens.extend(body.split())
    if not tokens or tokens[0] != "P1":
        raise ValueError(f"not a plain PBM (P1) file: {path}")
    # first two numeric tokens are W, H; everything after is raster bits,
    # possibly packed without separators
    nums: list[int] = []
    rest: list[str] = []
    for tok in tokens[1:]:
        if len(nums) < 2:
            nums.append(int(tok))
        else:
            rest.append(tok)
    if len(nums) != 2:
        raise ValueError(f"malformed PBM header in {path}")
    width, height = nums
    bits = "".join(rest)
    if len(bits) != width * height or set(bits) - {"0", "1"}:
        raise ValueError(f"malformed PBM raster in {path}")
    rows = np.array([[int(b) for b in bits[r * width:(r + 1) * width]]
                     for r in range(height)], dtype=bool)
    if grid.dim == 1:
        if height != 1 or width != grid.cells[0]:
            raise ValueError(
                f"out of bounds: bitmap {width}x{height} does not match "
                f"grid cells {grid.cells}")
        return rows[0]
    if (width, height) != (grid.cells[0], grid.cells[1]):
        raise ValueError(
            f"out of bounds: bitmap {width}x{height} does not match "
            f"grid cells {grid.cells}")
    # file row 0 = top = highest y; grid index order has y increasing
    cells = rows[::-1].T
    return np.ascontiguousarray(cells)


def write_pbm(path: Path, mask: DomainMask) -> None:
    """Inverse of read_pbm for 1-d and 2-d masks (P1, top row = high y)."""
    grid = mask.grid
    if grid.dim == 3:
        raise ValueError("bitmap masks are 1-d or 2-d only")
    if grid.dim == 1:
        rows = mask.active[None, :]
    else:
        rows = mask.active.T[::-1]
    lines = [f"P1", f"{rows.shape[1]} {rows.shape[0]}"]
    for r in rows:
        lines.append("".join("1" if v else "0" for v in r))
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------- directions


@dataclass(frozen=True)
class DirectionSet:
    """Quadrature nodes and weights for integrals over the unit sphere."""

    directions: np.ndarray  # (count, dim), unit rows
    weights: np.ndarray     # (count,), summing to sphere_area(dim)

    def __post_init__(self):
        norms = np.linalg.norm(self.directions, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise ValueError("directions must be unit vectors")
        if np.any(self.weights <= 0):
            raise ValueError("direction weights must be positive")


def direction_set(dim: int, count: int) -> DirectionSet:
    """Equal-weight sphere rules: S^0 exactly, equi-angular on S^1,
    Fibonacci points on S^2.  ``count`` is ignored for dim=1."""
    if count < 4:
        raise ValueError(f"direction count must be at least 4, got {count}")
    if dim == 1:
        dirs = np.array([[1.0], [-1.0]])
        weights = np.array([1.0, 1.0])
    elif dim == 2:
        theta = 2.0 * math.pi * np.arange(count) / count
        dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        weights = np.full(count, 2.0 * math.pi / count)
    elif dim == 3:
        k = np.arange(count)
        z = 1.0 - (2.0 * k + 1.0) / count
        golden = math.pi * (3.0 - math.sqrt(5.0))
        phi = golden * k
        rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
        dirs = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
        # normalize away the last-bit drift so the unit invariant is exact
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        weights = np.full(count, 4.0 * math.pi / count)
    else:
        raise ValueError(f"dimension must be 1, 2, or 3, got {dim}")
    return DirectionSet(dirs, weights)


# ----------------------------------------------------- exit distances


def march_exit_distances(mask: DomainMask, points: np.ndarray,
                         directions: np.ndarray) -> np.ndarray:
    """One-sided ray-march exit distances, vectorized.

    For each point and direction, the smallest positive multiple of
    h/8 at which point + t*direction leaves the active-cell union,
    capped at the grid diameter.  Shape: (npoints, ndirections).
    """
    grid = mask.grid
    step = grid.spacing / 8.0
    n_steps = int(math.ceil(grid.diameter / step)) + 1
    points = np.atleast_2d(np.asarray(points, dtype=float))
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    n_pts, n_dir = len(points), len(directions)
    dist = np.full((n_pts, n_dir), grid.diameter)
    found = np.zeros((n_pts, n_dir), dtype=bool)
    origin = np.asarray(grid.origin)
    cells = np.asarray(grid.cells)
    chunk = max(1, int(2_000_000 // max(1, n_pts * n_dir)))
    for start in range(1, n_steps + 1, chunk):
        ks = np.arange(start, min(start + chunk, n_steps + 1))
        t = ks * step  # (c,)
        # (pts, dirs, chunk, dim)
        p = (points[:, None, None, :]
             + t[None, None, :, None] * directions[None, :, None, :])
        idx = np.floor((p - origin) / grid.spacing).astype(np.int64)
        valid = np.all((idx >= 0) & (idx < cells), axis=-1)
        idx_clipped = np.clip(idx, 0, cells - 1)
        inside = valid & mask.active[tuple(np.moveaxis(idx_clipped, -1, 0))]
        outside = ~inside
        any_exit = outside.any(axis=2)
        first = np.argmax(outside, axis=2)
        newly = any_exit & ~found
        dist[newly] = t[first[newly]]
        found |= any_exit
        if found.all():
            break
    return dist


def directional_distance(mask: DomainMask, x, omega) -> float:
    """inf over both signs of |t| with x + t*omega outside the domain.

    Ray-marched in steps of h/8 and capped at the grid diameter; x must
    lie inside the active-cell union.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    omega = np.asarray(omega, dtype=float).reshape(-1)
    if not mask.contains_point(x):
        raise ValueError(f"point not in domain: {tuple(x)}")
    both = np.stack([omega, -omega])
    d = march_exit_distances(mask, x[None, :], both)
    return float(d.min())

"""Discretized Brownian loops, bridges, boxes and the excursion split/glue.

Every path lives on a uniform time grid with ``m`` points per inverse
temperature interval ``beta``.  A loop with particle number ``j`` stores
``j * m`` points; index ``j * m`` wraps around to index 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.distance import pdist

__all__ = [
    "TimeGrid",
    "Domain",
    "Loop",
    "Fragment",
    "BoundaryData",
    "Containment",
    "Side",
    "GlueError",
    "BoundaryTouchError",
    "heat_kernel",
    "sample_bridge",
    "sample_bridge_batch",
    "sample_loop",
    "diam",
    "containment",
    "started_in",
    "split_excursions",
    "split_configuration",
    "glue",
]


class GlueError(ValueError):
    """Fragments do not reassemble into closed loops."""


class BoundaryTouchError(ValueError):
    """A grid point sits exactly on the boundary of the box."""


@dataclass(frozen=True)
class TimeGrid:
    beta: float
    m: int

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if int(self.m) != self.m or self.m < 2:
            raise ValueError(f"steps_per_beta must be an integer >= 2, got {self.m}")

    @property
    def dt(self) -> float:
        return self.beta / self.m

    def steps(self, duration: float) -> int:
        """Number of grid steps in ``duration``; raises if it is off-grid."""
        k = round(duration / self.dt)
        if k <= 0 or not math.isclose(k * self.dt, duration, rel_tol=1e-12, abs_tol=0.0):
            raise ValueError(f"duration {duration} is not a positive multiple of dt={self.dt}")
        return k


@dataclass(frozen=True)
class Domain:
    """Axis-aligned closed box ``[lower, upper]``."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != len(hi):
            raise ValueError("lower and upper corners differ in dimension")
        if not all(a < b for a, b in zip(lo, hi)):
            raise ValueError(f"degenerate box {lo} .. {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def cube(cls, side: float, d: int = 3, center: float | Sequence[float] = 0.0) -> "Domain":
        c = np.broadcast_to(np.asarray(center, dtype=float), (d,))
        return cls(tuple(c - side / 2), tuple(c + side / 2))

    @classmethod
    def box(cls, lo: float, hi: float, d: int = 3) -> "Domain":
        return cls((lo,) * d, (hi,) * d)

    @property
    def d(self) -> int:
        return len(self.lower)

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.upper, self.lower)))

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper)

    def interior_mask(self, points: np.ndarray) -> np.ndarray:
        """Strict interior test, exact comparisons."""
        return np.all((points > self.lo) & (points < self.hi), axis=-1)

    def on_boundary_mask(self, points: np.ndarray) -> np.ndarray:
        inside_closed = np.all((points >= self.lo) & (points <= self.hi), axis=-1)
        return inside_closed & ~self.interior_mask(points)

    def contains_box(self, other: "Domain") -> bool:
        return bool(np.all(self.lo <= other.lo) and np.all(other.hi <= self.hi))

    def uniform(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        shape = (self.d,) if size is None else (size, self.d)
        return rng.uniform(self.lo, self.hi, size=shape)

    def shifted(self, v: Sequence[float]) -> "Domain":
        v = np.asarray(v, dtype=float)
        return Domain(tuple(self.lo + v), tuple(self.hi + v))


@dataclass(frozen=True, eq=False)
class Loop:
    """A closed grid path of duration ``beta * j``.

    Loops compare by identity: a configuration is a multiset and two loops
    with equal coordinates are still distinct points of it.
    """

    j: int
    points: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if self.j < 1:
            raise ValueError("particle number j must be >= 1")
        if pts.ndim != 2 or pts.shape[0] != self.j * self.grid.m:
            raise ValueError(
                f"loop with j={self.j}, m={self.grid.m} needs {self.j * self.grid.m} points, got shape {pts.shape}"
            )
        if not np.all(np.isfinite(pts)):
            raise ValueError("loop coordinates must be finite")
        if pts is self.points and pts.flags.writeable:
            pts = pts.copy()
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "_bbox", (pts.min(axis=0), pts.max(axis=0)))

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def start(self) -> np.ndarray:
        return self.points[0]

    @property
    def duration(self) -> float:
        return self.grid.beta * self.j

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self._bbox

    def periods(self) -> np.ndarray:
        """View of shape ``(j, m, d)``: row ``n`` holds ``omega(n*beta + s)``."""
        return self.points.reshape(self.j, self.grid.m, self.d)

    def translated(self, v: Sequence[float]) -> "Loop":
        return Loop(self.j, self.points + np.asarray(v, dtype=float), self.grid)

    def with_points(self, points: np.ndarray) -> "Loop":
        return Loop(self.j, points, self.grid)


class Side(str, Enum):
    INTERIOR = "interior"
    EXTERIOR = "exterior"


class Containment(str, Enum):
    INSIDE = "inside"
    OUTSIDE = "outside"
    CROSSING = "crossing"


@dataclass(frozen=True, eq=False)
class Fragment:
    """A maximal run of consecutive grid points on one side of a box.

    The fragment owns the half-open index range ``[offset, offset + steps)``
    of its parent loop (taken cyclically), so ``steps == len(points)`` and
    the fragments of one loop tile its ``j*m`` indices exactly.
    """

    start: np.ndarray
    end: np.ndarray
    steps: int
    points: np.ndarray
    side: Side
    offset: int = 0
    loop_id: int = 0
    j: int = 1
    grid: TimeGrid | None = None
    cyclic: bool = False

    @property
    def duration(self) -> float:
        return self.steps * self.grid.dt


@dataclass(frozen=True)
class BoundaryData:
    """Entry point, exit point and duration of each interior excursion."""

    triples: tuple[tuple[np.ndarray, np.ndarray, float], ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self):
        return iter(self.triples)

    def total_duration(self) -> float:
        return float(sum(t for _, _, t in self.triples))

    @classmethod
    def union(cls, items: Iterable["BoundaryData"]) -> "BoundaryData":
        return cls(tuple(t for bd in items for t in bd.triples))


def heat_kernel(x, y, t: float, d: int | None = None) -> float:
    """Gaussian transition density ``(2 pi t)^(-d/2) exp(-|x-y|^2 / 2t)``."""
    if not t > 0:
        raise ValueError(f"heat kernel needs t > 0, got {t}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if d is None:
        d = x.shape[-1]
    r2 = float(np.sum((x - y) ** 2))
    return (2.0 * math.pi * t) ** (-d / 2.0) * math.exp(-r2 / (2.0 * t))


def sample_bridge_batch(
    x: np.ndarray, y: np.ndarray, steps: int, dt: float, rng: np.random.Generator, size: int
) -> np.ndarray:
    """``size`` independent grid bridges, shape ``(size, steps + 1, d)``.

    A random walk with Gaussian increments is pinned by subtracting the
    linear interpolation of its endpoint; on the grid this is exactly the
    Brownian bridge law.  Endpoints are written verbatim.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = x.shape[-1]
    out = np.empty((size, steps + 1, d))
    out[:, 0] = x
    if steps > 1:
        incr = rng.standard_normal((size, steps, d)) * math.sqrt(dt)
        walk = np.cumsum(incr, axis=1)
        frac = (np.arange(1, steps) / steps)[None, :, None]
        out[:, 1:steps] = x + walk[:, :-1] - frac * (walk[:, -1:] - (y - x))
    out[:, steps] = y
    return out


def sample_bridge(x, y, t: float, grid: TimeGrid, rng: np.random.Generator) -> np.ndarray:
    """Grid Brownian bridge from ``x`` to ``y`` over duration ``t``.

    Returns ``t/dt + 1`` points, the first equal to ``x`` and the last to ``y``.
    """
    steps = grid.steps(t)
    return sample_bridge_batch(np.asarray(x, float), np.asarray(y, float), steps, grid.dt, rng, 1)[0]


def sample_loop(x, j: int, grid: TimeGrid, rng: np.random.Generator) -> Loop:
    """A loop of ``j`` periods started and ended at ``x``."""
    if j < 1:
        raise ValueError("j must be >= 1")
    x = np.asarray(x, dtype=float)
    pts = sample_bridge_batch(x, x, j * grid.m, grid.dt, rng, 1)[0, :-1]
    return Loop(j, pts, grid)


def _point_diameter(points: np.ndarray) -> float:
    n = points.shape[0]
    if n < 2:
        return 0.0
    if n > 200:
        try:
            hull = ConvexHull(points)
            points = points[hull.vertices]
        except Exception:
            # degenerate (flat or constant) point sets have no 3d hull
            pass
    return float(pdist(points).max())


def diam(loop: Loop) -> float:
    """Largest distance between two grid points of the loop."""
    return _point_diameter(loop.points)


def containment(loop: Loop, domain: Domain) -> Containment:
    inside = domain.interior_mask(loop.points)
    if inside.all():
        return Containment.INSIDE
    if not inside.any():
        return Containment.OUTSIDE
    return Containment.CROSSING


def started_in(loop: Loop, domain: Domain) -> bool:
    """Whether ``omega(0)`` lies in the closed box."""
    p = loop.start
    return bool(np.all(p >= domain.lo) and np.all(p <= domain.hi))


def _runs(mask: np.ndarray) -> list[tuple[int, int, bool]]:
    """Cyclic runs ``(offset, length, value)`` of a boolean array with at least one change."""
    n = mask.size
    change = np.flatnonzero(mask != np.roll(mask, 1))
    runs = []
    for a, b in zip(change, np.append(change[1:], change[0] + n)):
        runs.append((int(a), int(b - a), bool(mask[a])))
    return runs


def split_excursions(loop: Loop, domain: Domain, loop_id: int = 0):
    """Cut a loop into interior and exterior fragments.

    Returns ``(interior, exterior, bd)``.  Each fragment is a maximal
    cyclic run of grid points strictly inside (resp. not inside) the box;
    ``bd`` holds ``(first point, last point, steps * dt)`` for every
    interior fragment of a crossing loop.

    Raises
    ------
    BoundaryTouchError
        If a grid point lies exactly on the box boundary.
    """
    pts = loop.points
    if domain.on_boundary_mask(pts).any():
        raise BoundaryTouchError("loop has a grid point on the box boundary")
    mask = domain.interior_mask(pts)
    n = pts.shape[0]
    common = dict(loop_id=loop_id, j=loop.j, grid=loop.grid)
    if mask.all() or not mask.any():
        side = Side.INTERIOR if mask.all() else Side.EXTERIOR
        frag = Fragment(pts[0], pts[-1], n, pts, side, offset=0, cyclic=True, **common)
        if side is Side.INTERIOR:
            return [frag], [], BoundaryData()
        return [], [frag], BoundaryData()
    interior, exterior, triples = [], [], []
    for offset, length, inside in _runs(mask):
        idx = (offset + np.arange(length)) % n
        fpts = pts[idx]
        frag = Fragment(
            fpts[0], fpts[-1], length, fpts, Side.INTERIOR if inside else Side.EXTERIOR, offset=offset, **common
        )
        if inside:
            interior.append(frag)
            triples.append((fpts[0], fpts[-1], length * loop.grid.dt))
        else:
            exterior.append(frag)
    return interior, exterior, BoundaryData(tuple(triples))


def split_configuration(loops: Sequence[Loop], domain: Domain):
    """Split every loop; fragments carry the loop's position as ``loop_id``."""
    interior, exterior, bds = [], [], []
    for i, loop in enumerate(loops):
        a, b, bd = split_excursions(loop, domain, loop_id=i)
        interior.extend(a)
        exterior.extend(b)
        bds.append(bd)
    return interior, exterior, BoundaryData.union(bds)


def glue(interior: Sequence[Fragment], exterior: Sequence[Fragment]) -> list[Loop]:
    """Reassemble closed loops from fragments, ordered by ``loop_id``."""
    groups: dict[int, list[Fragment]] = {}
    for frag in list(interior) + list(exterior):
        groups.setdefault(frag.loop_id, []).append(frag)
    loops = []
    for loop_id in sorted(groups):
        frags = sorted(groups[loop_id], key=lambda f: f.offset)
        j, grid = frags[0].j, frags[0].grid
        if any(f.j != j or f.grid != grid for f in frags):
            raise GlueError(f"loop {loop_id}: fragments disagree on particle number or grid")
        n = j * grid.m
        if sum(f.steps for f in frags) != n:
            raise GlueError(f"loop {loop_id}: fragment lengths do not add up to {n} grid points")
        pts = np.empty((n, frags[0].points.shape[1]))
        seen = np.zeros(n, dtype=bool)
        for f in frags:
            if f.points.shape[0] != f.steps:
                raise GlueError(f"loop {loop_id}: fragment at offset {f.offset} is malformed")
            idx = (f.offset + np.arange(f.steps)) % n
            if seen[idx].any():
                raise GlueError(f"loop {loop_id}: overlapping fragments at offset {f.offset}")
            seen[idx] = True
            pts[idx] = f.points
        if not seen.all():
            raise GlueError(f"loop {loop_id}: unmatched endpoint, fragments leave a gap")
        if len(frags) > 1:
            # consecutive fragments must alternate sides
            sides = [f.side for f in frags]
            if any(a == b for a, b in zip(sides, sides[1:] + sides[:1])):
                raise GlueError(f"loop {loop_id}: adjacent fragments on the same side")
        loops.append(Loop(j, pts, grid))
    return loops

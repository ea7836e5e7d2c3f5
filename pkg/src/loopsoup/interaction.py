"""Pair and self energies of grid loops, configuration Hamiltonians, cached increments.

All time integrals are left-endpoint Riemann sums over the ``m`` grid
points of each beta-period.  Energies are extended reals: any infinite
pair weight makes the sum ``inf`` and the Boltzmann factor exactly 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .configuration import Configuration
from .paths import Domain, Loop
from .potentials import Potential

__all__ = [
    "EnergyBreakdown",
    "EnergyCache",
    "EnergyCacheError",
    "GridMismatchError",
    "pair_T",
    "self_W",
    "hamiltonian",
    "cross_U",
    "boltzmann",
    "self_W_batch",
]

_CHUNK = 1_500_000


class GridMismatchError(ValueError):
    pass


class EnergyCacheError(RuntimeError):
    """The cached energy disagrees with a full recomputation."""


def boltzmann(beta: float, energy: float) -> float:
    """``exp(-beta * energy)`` with ``exp(-inf) == 0``."""
    return 0.0 if energy == math.inf else math.exp(-beta * energy)


def _bbox_gap(lo_a, hi_a, lo_b, hi_b) -> np.ndarray:
    return np.linalg.norm(np.maximum(0.0, np.maximum(lo_a - hi_b, lo_b - hi_a)), axis=-1)


def _phi_sum(diff: np.ndarray, pot: Potential) -> float:
    r = np.sqrt(np.einsum("...i,...i->...", diff, diff))
    return float(pot.phi(r).sum())


def _cross_periods(A: np.ndarray, B: np.ndarray, pot: Potential) -> float:
    """Sum of phi over all period pairs of A (j,m,d) and B (k,m,d) at matched times."""
    per_row = max(1, _CHUNK // max(1, B.size))
    total = 0.0
    for s in range(0, A.shape[0], per_row):
        total += _phi_sum(A[s : s + per_row, None] - B[None], pot)
        if total == math.inf:
            return math.inf
    return total


def pair_T(w: Loop, v: Loop, pot: Potential) -> float:
    """Pair interaction of two loops: every period of one against every period of the other."""
    if w.grid != v.grid:
        raise GridMismatchError("loops live on different time grids")
    if pot.is_zero:
        return 0.0
    if pot.r_cut is not None:
        if float(_bbox_gap(*w.bbox, *v.bbox)) >= pot.r_cut:
            return 0.0
    return _cross_periods(w.periods(), v.periods(), pot) * w.grid.dt


def self_W(w: Loop, pot: Potential) -> float:
    """Self interaction: half the sum over ordered pairs of distinct periods."""
    if w.j == 1 or pot.is_zero:
        return 0.0
    P = w.periods()
    total = 0.0
    for n in range(w.j - 1):
        total += _cross_periods(P[n : n + 1], P[n + 1 :], pot)
        if total == math.inf:
            return math.inf
    return total * w.grid.dt


def self_W_batch(points: np.ndarray, j: int, m: int, pot: Potential, dt: float) -> np.ndarray:
    """Self interaction of many loops of equal length; ``points`` has shape ``(n, j*m, d)``."""
    n = points.shape[0]
    if j == 1 or pot.is_zero:
        return np.zeros(n)
    P = points.reshape(n, j, m, -1)
    total = np.zeros(n)
    for k in range(1, j):
        diff = P[:, :-k] - P[:, k:]
        r = np.sqrt(np.einsum("...i,...i->...", diff, diff))
        total += pot.phi(r).sum(axis=(1, 2))
    return total * dt


@dataclass(frozen=True)
class EnergyBreakdown:
    self_total: float = 0.0
    pair_internal: float = 0.0
    pair_boundary: float = 0.0

    @property
    def total(self) -> float:
        return self.self_total + self.pair_internal + self.pair_boundary

    def as_dict(self) -> dict:
        return {
            "self": self.self_total,
            "pair_internal": self.pair_internal,
            "pair_boundary": self.pair_boundary,
            "total": self.total,
        }


def _interaction_parts(inner: Sequence[Loop], outer: Sequence[Loop], pot: Potential) -> EnergyBreakdown:
    self_total = sum((self_W(w, pot) for w in inner), 0.0)
    pair_internal = 0.0
    for a in range(len(inner)):
        for b in range(a + 1, len(inner)):
            pair_internal += pair_T(inner[a], inner[b], pot)
    pair_boundary = sum((pair_T(w, v, pot) for w in inner for v in outer), 0.0)
    return EnergyBreakdown(self_total, pair_internal, pair_boundary)


def hamiltonian(
    eta: Configuration, domain: Domain, pot: Potential, restriction: str = "started_in"
) -> EnergyBreakdown:
    """Energy of the loops of ``eta`` restricted to ``domain``.

    Self energies and internal pairs of the restricted loops, plus every
    pair between a restricted loop and the rest of the configuration.
    """
    inner = eta.restrict(domain, restriction)
    outer = eta - inner
    return _interaction_parts(inner.loops, outer.loops, pot)


def cross_U(eta: Configuration, xi: Configuration, pot: Potential) -> float:
    """Interaction between two configurations; a loop never interacts with itself."""
    return sum((pair_T(w, v, pot) for w in eta for v in xi if w is not v), 0.0)


class EnergyCache:
    """Energy bookkeeping for a chain: resampled loops against a frozen boundary.

    Keeps every self energy, every interior pair and every loop's total
    against the boundary, so that birth, death and in-place replacement
    increments cost one row of pair evaluations.  Totals are summed from
    the stored terms rather than accumulated, which keeps them equal to a
    full recomputation up to summation order.
    """

    def __init__(self, pot: Potential, boundary: Sequence[Loop] = (), interior: Sequence[Loop] = ()):
        self.pot = pot
        self.boundary: tuple[Loop, ...] = tuple(boundary)
        if self.boundary:
            self._b_lo = np.array([w.bbox[0] for w in self.boundary])
            self._b_hi = np.array([w.bbox[1] for w in self.boundary])
        self.loops: list[Loop] = []
        self.self_w: list[float] = []
        self.bnd: list[float] = []
        self.pair = np.zeros((0, 0))
        for w in interior:
            self.commit_birth(w, self.row(w))

    def __len__(self) -> int:
        return len(self.loops)

    def _boundary_sum(self, w: Loop) -> float:
        if not self.boundary or self.pot.is_zero:
            return 0.0
        cand = range(len(self.boundary))
        if self.pot.r_cut is not None:
            gaps = _bbox_gap(w.bbox[0], w.bbox[1], self._b_lo, self._b_hi)
            cand = np.flatnonzero(gaps < self.pot.r_cut)
        total = 0.0
        for b in cand:
            total += pair_T(w, self.boundary[b], self.pot)
            if total == math.inf:
                return math.inf
        return total

    def row(self, w: Loop, skip: int | None = None):
        """``(W, pair terms against current loops, boundary sum)`` for a candidate loop."""
        ws = self_W(w, self.pot)
        pairs = np.array([0.0 if k == skip else pair_T(w, v, self.pot) for k, v in enumerate(self.loops)])
        return ws, pairs, self._boundary_sum(w)

    @staticmethod
    def row_total(row) -> float:
        ws, pairs, b = row
        return ws + float(pairs.sum()) + b

    def loop_total(self, i: int) -> float:
        return self.self_w[i] + float(self.pair[i].sum()) + self.bnd[i]

    def delta_birth(self, w: Loop):
        row = self.row(w)
        return self.row_total(row), row

    def delta_death(self, i: int) -> float:
        return -self.loop_total(i)

    def delta_replace(self, i: int, w: Loop):
        row = self.row(w, skip=i)
        new = self.row_total(row)
        if new == math.inf:
            return math.inf, row
        return new - self.loop_total(i), row

    def commit_birth(self, w: Loop, row) -> None:
        ws, pairs, b = row
        n = len(self.loops)
        grown = np.zeros((n + 1, n + 1))
        grown[:n, :n] = self.pair
        grown[n, :n] = pairs
        grown[:n, n] = pairs
        self.pair = grown
        self.loops.append(w)
        self.self_w.append(ws)
        self.bnd.append(b)

    def commit_death(self, i: int) -> Loop:
        keep = np.arange(len(self.loops)) != i
        self.pair = self.pair[np.ix_(keep, keep)]
        self.self_w.pop(i)
        self.bnd.pop(i)
        return self.loops.pop(i)

    def commit_replace(self, i: int, w: Loop, row) -> None:
        ws, pairs, b = row
        pairs = pairs.copy()
        pairs[i] = 0.0
        self.pair[i, :] = pairs
        self.pair[:, i] = pairs
        self.loops[i] = w
        self.self_w[i] = ws
        self.bnd[i] = b

    def breakdown(self) -> EnergyBreakdown:
        return EnergyBreakdown(
            float(sum(self.self_w)),
            float(np.triu(self.pair, 1).sum()),
            float(sum(self.bnd)),
        )

    @property
    def total(self) -> float:
        return self.breakdown().total

    def recompute(self) -> EnergyBreakdown:
        return _interaction_parts(self.loops, self.boundary, self.pot)

    def check(self, rel_tol: float = 1e-9) -> EnergyBreakdown:
        """Compare against a full recomputation; raise ``EnergyCacheError`` on mismatch."""
        cached, full = self.breakdown(), self.recompute()
        for name in ("self_total", "pair_internal", "pair_boundary"):
            a, b = getattr(cached, name), getattr(full, name)
            if a == b:
                continue
            if not math.isclose(a, b, rel_tol=rel_tol, abs_tol=rel_tol * max(1.0, abs(full.total))):
                raise EnergyCacheError(f"{name}: cached {a!r} != recomputed {b!r}")
        return full

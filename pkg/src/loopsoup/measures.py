"""The Bosonic loop intensity on a box, its masses and its Poisson samplers."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .configuration import Configuration
from .interaction import boltzmann, self_W
from .paths import Containment, Domain, Loop, TimeGrid, containment, sample_bridge_batch
from .potentials import ModelParams

__all__ = [
    "LoopMeasureSpec",
    "TruncationWarning",
    "length_weights",
    "tail_bound",
    "measure_mass",
    "expected_particles",
    "sample_free",
    "sample_dirichlet",
    "sample_PH",
    "LoopProposal",
]


class TruncationWarning(UserWarning):
    """The neglected tail of the length series is not certified below tolerance."""


def length_weights(j_max: int, d: int, beta: float, mu: float = 0.0) -> np.ndarray:
    """``w_j = exp(beta mu j) (2 pi beta j)^(-d/2) / j`` for ``j = 1..j_max``."""
    j = np.arange(1, j_max + 1, dtype=float)
    return np.exp(beta * mu * j - 0.5 * d * np.log(2 * math.pi * beta * j) - np.log(j))


def tail_bound(j_max: int, d: int, beta: float, mu: float = 0.0, moment: int = 0) -> float:
    """Upper bound on ``sum_{j > j_max} j^moment w_j`` by an integral comparison.

    Infinite when ``beta * mu > 0`` (the reference series diverges).
    """
    if beta * mu > 0:
        return math.inf
    p = d / 2 + 1 - moment
    if p <= 1:
        return math.inf
    return (2 * math.pi * beta) ** (-d / 2) * math.exp(beta * mu * (j_max + 1)) * j_max ** (1 - p) / (p - 1)


@dataclass(frozen=True)
class LoopMeasureSpec:
    """Truncated loop intensity ``|box| * sum_{j <= j_max} w_j`` on a box.

    With ``mu_weighted`` the weights carry ``exp(beta mu j)``; otherwise
    they describe the reference measure at ``mu = 0``.
    """

    domain: Domain
    params: ModelParams
    grid: TimeGrid
    j_max: int = 64
    tail_tol: float = 1e-6
    mu_weighted: bool = False
    weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.j_max < 1:
            raise ValueError("j_max must be >= 1")
        if self.domain.d != self.params.d:
            raise ValueError("domain dimension differs from model dimension")
        if not math.isclose(self.grid.beta, self.params.beta, rel_tol=1e-15):
            raise ValueError("time grid and model disagree on beta")
        w = length_weights(self.j_max, self.params.d, self.params.beta, self.mu)
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def mu(self) -> float:
        return self.params.mu if self.mu_weighted else 0.0

    def weighted(self, flag: bool = True) -> "LoopMeasureSpec":
        return replace(self, mu_weighted=flag)

    def on(self, domain: Domain) -> "LoopMeasureSpec":
        return replace(self, domain=domain)

    def tail(self, moment: int = 0) -> float:
        return self.domain.volume * tail_bound(self.j_max, self.params.d, self.params.beta, self.mu, moment)

    def check_tail(self, moment: int = 0) -> float:
        t = self.tail(moment)
        if not t <= self.tail_tol:
            warnings.warn(
                f"length series tail beyond j_max={self.j_max} is bounded by {t:.3g} > tolerance {self.tail_tol:g}",
                TruncationWarning,
                stacklevel=3,
            )
        return t

    def metadata(self) -> dict:
        return {
            "j_max": self.j_max,
            "tail_tol": self.tail_tol,
            "tail_bound_mass": self.tail(0),
            "tail_bound_particles": self.tail(1),
            "mu_weighted": self.mu_weighted,
        }


def measure_mass(spec: LoopMeasureSpec, check: bool = True) -> float:
    """Total mass of the truncated loop measure on the box."""
    if check:
        spec.check_tail(0)
    return spec.domain.volume * float(spec.weights.sum())


def expected_particles(spec: LoopMeasureSpec, check: bool = True) -> float:
    """Mean particle number of the Poisson loop soup (free gas)."""
    if check:
        spec.check_tail(1)
    j = np.arange(1, spec.j_max + 1)
    return spec.domain.volume * float((j * spec.weights).sum())


class LoopProposal:
    """Draws loops from the normalized truncated intensity: uniform start, length by weight, bridge path."""

    def __init__(self, spec: LoopMeasureSpec):
        self.spec = spec
        self.mass = spec.domain.volume * float(spec.weights.sum())
        cdf = np.cumsum(spec.weights)
        self._cdf = cdf / cdf[-1]

    def lengths(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.minimum(np.searchsorted(self._cdf, rng.random(size), side="right"), self.spec.j_max - 1) + 1

    def draw(self, rng: np.random.Generator) -> Loop:
        j = int(self.lengths(rng, 1)[0])
        return self.draw_with_length(j, rng)

    def draw_with_length(self, j: int, rng: np.random.Generator) -> Loop:
        grid = self.spec.grid
        x = self.spec.domain.uniform(rng)
        pts = sample_bridge_batch(x, x, j * grid.m, grid.dt, rng, 1)[0, :-1]
        return Loop(j, pts, grid)

    def draw_many(self, n: int, rng: np.random.Generator) -> list[Loop]:
        grid, dom = self.spec.grid, self.spec.domain
        js = self.lengths(rng, n)
        xs = dom.uniform(rng, n)
        out: list[Loop | None] = [None] * n
        for j in np.unique(js):
            idx = np.flatnonzero(js == j)
            steps = int(j) * grid.m
            incr = rng.standard_normal((idx.size, steps, dom.d)) * math.sqrt(grid.dt)
            walk = np.cumsum(incr, axis=1)
            frac = (np.arange(steps) / steps)[None, :, None]
            shifted = np.concatenate([np.zeros((idx.size, 1, dom.d)), walk[:, :-1]], axis=1)
            paths = xs[idx, None, :] + shifted - frac * walk[:, -1:]
            paths[:, 0] = xs[idx]
            for k, i in enumerate(idx):
                out[i] = Loop(int(j), paths[k], grid)
        return out  # type: ignore[return-value]


def sample_free(spec: LoopMeasureSpec, rng: np.random.Generator) -> Configuration:
    """Poisson loop soup with loops started in the box."""
    prop = LoopProposal(spec)
    n = int(rng.poisson(prop.mass))
    return Configuration(prop.draw_many(n, rng))


def sample_dirichlet(spec: LoopMeasureSpec, rng: np.random.Generator) -> Configuration:
    """Poisson loop soup conditioned pathwise on containment, by thinning."""
    return sample_free(spec, rng).contained_in(spec.domain)


def sample_PH(spec: LoopMeasureSpec, rng: np.random.Generator) -> Configuration:
    """Dirichlet soup with ``exp(beta mu j)`` folded into the weights, each loop kept with prob. ``exp(-beta W)``."""
    spec = spec.weighted(True)
    beta, pot = spec.params.beta, spec.params.potential
    kept = []
    for w in sample_dirichlet(spec, rng):
        if w.j == 1 or pot.is_zero or rng.random() < boltzmann(beta, self_W(w, pot)):
            kept.append(w)
    return Configuration(kept)

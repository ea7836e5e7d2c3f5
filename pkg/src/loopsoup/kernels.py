"""Birth-death Metropolis-Hastings chains for the Dirichlet, free and excursion kernels.

All three chains share the same reference trick: births are proposed from
the normalized, mu-weighted truncated loop intensity on the box (closed-form
mass), and the kernel's reference restriction enters as an indicator in the
target density.  For the Dirichlet kernel a proposed loop that leaves the
box therefore has target weight zero and is rejected, which realizes the
Poisson thinning exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .configuration import Configuration, N_obs, S_obs
from .interaction import EnergyBreakdown, EnergyCache, boltzmann, hamiltonian
from .measures import LoopMeasureSpec, LoopProposal, sample_dirichlet, sample_free
from .paths import (
    BoundaryData,
    Containment,
    Domain,
    Fragment,
    Loop,
    containment,
    sample_bridge_batch,
    split_excursions,
)

__all__ = [
    "MCMCConfig",
    "KernelRunReport",
    "KernelError",
    "RejectionCapError",
    "GibbsChain",
    "mcmc_dirichlet",
    "mcmc_free",
    "mcmc_excursion",
    "truncated_kernel",
    "resample_excursions",
    "estimate_Z",
    "sample_gn",
    "centered_cube",
    "lattice_shifts",
]

KINDS = ("dirichlet", "free", "excursion")


class KernelError(RuntimeError):
    """The chain cannot start or continue (e.g. zero-weight initial state)."""


class RejectionCapError(RuntimeError):
    """A stay-inside bridge could not be drawn within the attempt cap."""

    def __init__(self, triple, attempts):
        x, y, t = triple
        super().__init__(f"no stay-inside bridge from {np.round(x, 4)} to {np.round(y, 4)} in {t} after {attempts} tries")
        self.triple = triple


@dataclass(frozen=True)
class MCMCConfig:
    steps: int = 20_000
    burn_in: int = 10_000
    thin: int = 10
    p_birth: float = 0.35
    p_death: float = 0.35
    p_move: float = 0.30
    rejection_cap: int = 10_000
    on_rejection_cap: str = "skip"
    check_every: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.burn_in < 0 or self.thin < 1:
            raise ValueError("steps and burn_in must be >= 0 and thin >= 1")
        if min(self.p_birth, self.p_death, self.p_move) < 0:
            raise ValueError("move probabilities must be non-negative")
        if not math.isclose(self.p_birth + self.p_death + self.p_move, 1.0, rel_tol=1e-12):
            raise ValueError("move probabilities must sum to 1")
        if self.on_rejection_cap not in ("skip", "abort"):
            raise ValueError("on_rejection_cap must be 'skip' or 'abort'")

    @property
    def retained(self) -> int:
        return max(0, self.steps - self.burn_in) // self.thin


@dataclass
class KernelRunReport:
    kind: str
    steps: int
    burn_in: int
    thin: int
    attempts: dict = field(default_factory=lambda: {"birth": 0, "death": 0, "move": 0})
    accepts: dict = field(default_factory=lambda: {"birth": 0, "death": 0, "move": 0})
    skipped_bridges: int = 0
    traces: dict = field(default_factory=lambda: {"step": [], "N": [], "S": [], "N_psi": [], "energy": []})

    @property
    def retained(self) -> int:
        return len(self.traces["step"])

    def acceptance_rates(self) -> dict:
        return {k: (self.accepts[k] / self.attempts[k] if self.attempts[k] else 0.0) for k in self.attempts}


@dataclass
class _Unit:
    """A re-bridgeable piece of the state: a whole mortal loop, or an interior excursion of a frozen crossing loop."""

    loop_index: int
    start: int = 0
    length: int = 0


def resample_excursions(
    domain: Domain,
    bd: BoundaryData,
    grid,
    rng: np.random.Generator,
    cap: int = 10_000,
    on_cap: str = "abort",
    batch: int = 64,
):
    """Draw a stay-inside bridge for every ``(entry, exit, duration)`` triple.

    A triple of duration ``k * dt`` spans ``k`` grid points pinned at
    ``entry`` and ``exit``.  Returns a list with one ``(k, d)`` array per
    triple (``None`` for a skipped triple when ``on_cap == 'skip'``).
    """
    out = []
    for triple in bd:
        x, y, t = triple
        k = grid.steps(t)
        pts = _stay_inside_bridge(domain, np.asarray(x), np.asarray(y), k, grid.dt, rng, cap, batch)
        if pts is None:
            if on_cap == "abort":
                raise RejectionCapError(triple, cap)
        out.append(pts)
    return out


def _stay_inside_bridge(domain, x, y, k, dt, rng, cap, batch=64):
    """``k`` grid points from ``x`` to ``y`` all strictly inside, or ``None`` after ``cap`` tries."""
    if k == 1:
        return np.array([x])
    tried = 0
    size = min(batch, cap)
    while tried < cap:
        n = min(size, cap - tried)
        cand = sample_bridge_batch(x, y, k - 1, dt, rng, n)
        ok = domain.interior_mask(cand[:, 1:-1]).all(axis=1)
        hit = np.flatnonzero(ok)
        if hit.size:
            return cand[hit[0]]
        tried += n
        size = min(4 * size, 4096)
    return None


def centered_cube(n: float, d: int) -> Domain:
    return Domain.cube(n, d)


def lattice_shifts(n: int, d: int) -> np.ndarray:
    """Integer points of the half-open centered cube ``[-n/2, n/2)^d``."""
    axis = np.arange(math.ceil(-n / 2), math.ceil(n / 2))
    return np.array(np.meshgrid(*([axis] * d), indexing="ij")).reshape(d, -1).T


class GibbsChain:
    """Spatial birth-death MH chain for one of the three Gibbs kernels on ``spec.domain``.

    Parameters
    ----------
    spec : LoopMeasureSpec
        Box, model, time grid and length truncation.  The mu-weighting is
        applied here whatever ``spec.mu_weighted`` says.
    kind : {"dirichlet", "free", "excursion"}
        Which kernel's stationary law to target.
    eta : Configuration
        The conditioning configuration.  Loops the kernel resamples
        (contained loops, loops started in the box, or contained loops and
        the interior excursions of crossing loops) seed the chain; the
        rest is frozen boundary.
    mcmc : MCMCConfig
    rng : numpy.random.Generator
    psi : callable, optional
        Loop functional traced as ``N_psi``; defaults to the particle number.
    """

    def __init__(
        self,
        spec: LoopMeasureSpec,
        kind: str,
        eta: Configuration | None,
        mcmc: MCMCConfig,
        rng: np.random.Generator,
        psi: Callable[[Loop], float] | None = None,
        start_empty: bool = False,
    ):
        if kind not in KINDS:
            raise ValueError(f"kernel kind must be one of {KINDS}, got {kind!r}")
        self.spec = spec.weighted(True)
        self.kind = kind
        self.domain = spec.domain
        self.mcmc = mcmc
        self.rng = rng
        self.beta = spec.params.beta
        self.pot = spec.params.potential
        self.psi = psi or (lambda w: float(w.j))
        self.proposal = LoopProposal(self.spec)
        self.mass = self.proposal.mass
        eta = eta if eta is not None else Configuration()

        crossing: list[Loop] = []
        if kind == "dirichlet":
            seed = eta.contained_in(self.domain)
        elif kind == "free":
            seed = eta.started_in(self.domain)
        else:
            seed = eta.contained_in(self.domain)
            crossing = list(eta.crossing(self.domain))
        frozen = eta - seed - Configuration(crossing)
        if start_empty:
            seed = Configuration()
        self.boundary = frozen
        self.cache = EnergyCache(self.pot, boundary=frozen.loops, interior=list(crossing) + list(seed))
        self.n_frozen_crossing = len(crossing)
        self._excursions: list[list[tuple[int, int]]] = []
        for w in crossing:
            interior, _, _ = split_excursions(w, self.domain)
            self._excursions.append([(f.offset, f.steps) for f in interior])
        if self.cache.total == math.inf:
            raise KernelError("initial configuration has infinite energy; no admissible move from a zero-weight state")
        self.report = KernelRunReport(kind, mcmc.steps, mcmc.burn_in, mcmc.thin)
        self.step_count = 0
        self.log: list[dict] | None = None

    # -- state views -------------------------------------------------------

    @property
    def n_mortal(self) -> int:
        return len(self.cache) - self.n_frozen_crossing

    def interior(self) -> Configuration:
        return Configuration(self.cache.loops)

    def configuration(self) -> Configuration:
        """Full configuration: frozen boundary plus current resampled loops."""
        return self.boundary + Configuration(self.cache.loops)

    def energy(self) -> EnergyBreakdown:
        return self.cache.breakdown()

    def _admissible(self, w: Loop) -> bool:
        if self.kind == "free":
            return True
        return containment(w, self.domain) is Containment.INSIDE

    def _accept(self, log_ratio: float) -> bool:
        if log_ratio >= 0:
            return True
        if log_ratio == -math.inf:
            return False
        return math.log(self.rng.random()) < log_ratio

    def _record(self, move, proposed, log_ratio, accepted, n_before, dH):
        if self.log is not None:
            self.log.append(
                dict(move=move, proposed=proposed, log_ratio=log_ratio, accepted=accepted, n=n_before, dH=dH)
            )

    # -- moves --------------------------------------------------------------

    def birth(self) -> bool:
        self.report.attempts["birth"] += 1
        n = self.n_mortal
        w = self.proposal.draw(self.rng)
        if not self._admissible(w):
            self._record("birth", True, -math.inf, False, n, None)
            return False
        dH, row = self.cache.delta_birth(w)
        log_r = math.log(self.mass / (n + 1)) - (self.beta * dH if dH != math.inf else math.inf)
        ok = self._accept(log_r)
        self._record("birth", True, log_r, ok, n, dH)
        if ok:
            self.cache.commit_birth(w, row)
            self.report.accepts["birth"] += 1
        return ok

    def death(self) -> bool:
        self.report.attempts["death"] += 1
        n = self.n_mortal
        if n == 0:
            self._record("death", False, -math.inf, False, 0, None)
            return False
        i = self.n_frozen_crossing + int(self.rng.integers(n))
        dH = self.cache.delta_death(i)
        log_r = math.log(n / self.mass) - self.beta * dH
        ok = self._accept(log_r)
        self._record("death", True, log_r, ok, n, dH)
        if ok:
            self.cache.commit_death(i)
            self.report.accepts["death"] += 1
        return ok

    def _units(self) -> list[_Unit]:
        units = []
        for c, frags in enumerate(self._excursions):
            for offset, steps in frags:
                if steps > 2:
                    units.append(_Unit(c, offset, steps))
        units.extend(_Unit(i) for i in range(self.n_frozen_crossing, len(self.cache)))
        return units

    def move(self) -> bool:
        self.report.attempts["move"] += 1
        units = self._units()
        if not units:
            self._record("move", False, -math.inf, False, self.n_mortal, None)
            return False
        u = units[int(self.rng.integers(len(units)))]
        old = self.cache.loops[u.loop_index]
        if u.length == 0:
            new = self._rebridge_loop(old)
            if not self._admissible(new):
                self._record("move", True, -math.inf, False, self.n_mortal, None)
                return False
        else:
            new = self._rebridge_excursion(old, u)
            if new is None:
                self.report.skipped_bridges += 1
                self._record("move", False, -math.inf, False, self.n_mortal, None)
                return False
        dH, row = self.cache.delta_replace(u.loop_index, new)
        log_r = -self.beta * dH if dH != math.inf else -math.inf
        ok = self._accept(log_r)
        self._record("move", True, log_r, ok, self.n_mortal, dH)
        if ok:
            self.cache.commit_replace(u.loop_index, new, row)
            self.report.accepts["move"] += 1
        return ok

    def _rebridge_loop(self, w: Loop) -> Loop:
        g = self.spec.grid
        x = w.start
        pts = sample_bridge_batch(x, x, w.j * g.m, g.dt, self.rng, 1)[0, :-1]
        return Loop(w.j, pts, g)

    def _rebridge_excursion(self, w: Loop, u: _Unit) -> Loop | None:
        n = w.points.shape[0]
        idx = (u.start + np.arange(u.length)) % n
        x, y = w.points[idx[0]], w.points[idx[-1]]
        pts = _stay_inside_bridge(self.domain, x, y, u.length, self.spec.grid.dt, self.rng, self.mcmc.rejection_cap)
        if pts is None:
            if self.mcmc.on_rejection_cap == "abort":
                raise RejectionCapError((x, y, u.length * self.spec.grid.dt), self.mcmc.rejection_cap)
            return None
        new = w.points.copy()
        new[idx] = pts
        return w.with_points(new)

    def step(self) -> None:
        u = self.rng.random()
        c = self.mcmc
        if u < c.p_birth:
            self.birth()
        elif u < c.p_birth + c.p_death:
            self.death()
        else:
            self.move()
        self.step_count += 1
        if c.check_every and self.step_count % c.check_every == 0:
            self.cache.check()

    # -- driving ------------------------------------------------------------

    def _trace(self, eta: Configuration) -> None:
        tr = self.report.traces
        tr["step"].append(self.step_count)
        tr["N"].append(N_obs(eta, self.domain))
        tr["S"].append(S_obs(eta, self.domain))
        tr["N_psi"].append(float(sum(self.psi(w) for w in eta.started_in(self.domain))))
        tr["energy"].append(self.cache.breakdown().as_dict())

    def samples(self) -> Iterator[Configuration]:
        """Run ``mcmc.steps`` steps, yielding the configuration every ``thin`` steps after burn-in."""
        c = self.mcmc
        for _ in range(c.steps):
            self.step()
            k = self.step_count - c.burn_in
            if k > 0 and k % c.thin == 0:
                eta = self.configuration()
                self._trace(eta)
                yield eta

    def run(self) -> list[Configuration]:
        return list(self.samples())

    def advance(self, steps: int) -> Configuration:
        for _ in range(steps):
            self.step()
        return self.configuration()


def mcmc_dirichlet(spec, boundary, mcmc, rng, **kw) -> Iterator[Configuration]:
    """Stream from the Dirichlet kernel on ``spec.domain`` given ``boundary``."""
    return GibbsChain(spec, "dirichlet", boundary, mcmc, rng, **kw).samples()


def mcmc_free(spec, boundary, mcmc, rng, **kw) -> Iterator[Configuration]:
    """Stream from the free kernel (resamples loops started in the box)."""
    return GibbsChain(spec, "free", boundary, mcmc, rng, **kw).samples()


def mcmc_excursion(spec, conditioning, mcmc, rng, **kw) -> Iterator[Configuration]:
    """Stream from the excursion kernel: contained loops plus interior excursions with frozen boundary data."""
    return GibbsChain(spec, "excursion", conditioning, mcmc, rng, **kw).samples()


def truncated_kernel(spec, outer: Domain, eta: Configuration, mcmc, rng, **kw) -> GibbsChain:
    """Dirichlet chain whose boundary keeps only the loops started in ``outer``."""
    if not outer.contains_box(spec.domain):
        raise ValueError("truncation box must contain the resampling box")
    return GibbsChain(spec, "dirichlet", eta.started_in(outer), mcmc, rng, **kw)


def _weight_relative(resampled: Configuration, frozen: Configuration, particles: int, beta, mu, pot) -> float:
    e = EnergyCache(pot, boundary=frozen.loops, interior=resampled.loops).total
    if e == math.inf:
        return 0.0
    return math.exp(-beta * e + beta * mu * particles)


def estimate_Z(
    spec: LoopMeasureSpec,
    boundary: Configuration | None,
    n_samples: int,
    kind: str,
    rng: np.random.Generator,
    cap: int = 10_000,
) -> tuple[float, float]:
    """Direct Monte Carlo estimate of a partition function, with standard error.

    Samples the reference process of ``kind`` at ``mu = 0`` and averages
    ``exp(-beta * energy + beta * mu * N)`` of the resampled part.  The
    energy counts self terms, internal pairs and pairs against the frozen
    conditioning loops; terms among the frozen loops alone are constant and
    left out, so the estimate is ``Z`` divided by the frozen part's weight.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    eta = boundary if boundary is not None else Configuration()
    ref = spec.weighted(False)
    beta, mu, pot = spec.params.beta, spec.params.mu, spec.params.potential
    dom = spec.domain
    vals = np.empty(n_samples)
    if kind == "excursion":
        crossing = eta.crossing(dom)
        frozen = eta - eta.contained_in(dom) - crossing
        ifrag = [split_excursions(w, dom)[0] for w in crossing]
    elif kind == "dirichlet":
        frozen = eta - eta.contained_in(dom)
    else:
        frozen = eta - eta.started_in(dom)
    for s in range(n_samples):
        if kind == "free":
            xi = sample_free(ref, rng)
        elif kind == "dirichlet":
            xi = sample_dirichlet(ref, rng)
        else:
            xi = sample_dirichlet(ref, rng)
            resampled = []
            for w, frags in zip(crossing, ifrag):
                pts = w.points.copy()
                for f in frags:
                    idx = (f.offset + np.arange(f.steps)) % pts.shape[0]
                    new = _stay_inside_bridge(dom, pts[idx[0]], pts[idx[-1]], f.steps, spec.grid.dt, rng, cap)
                    if new is None:
                        raise RejectionCapError((pts[idx[0]], pts[idx[-1]], f.steps * spec.grid.dt), cap)
                    pts[idx] = new
                resampled.append(w.with_points(pts))
            vals[s] = _weight_relative(xi + Configuration(resampled), frozen, xi.particles, beta, mu, pot)
            continue
        vals[s] = _weight_relative(xi, frozen, xi.particles, beta, mu, pot)
    se = float(vals.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else math.inf
    return float(vals.mean()), se


def sample_gn(
    n: int,
    spec: LoopMeasureSpec,
    mcmc: MCMCConfig,
    rng: np.random.Generator,
    window: int = 1,
    shift: bool = True,
) -> Configuration:
    """One draw from the periodized, shift-averaged finite-volume state.

    ``window`` tiles per axis (centered) are filled with independent
    Dirichlet-kernel samples on translated cubes of side ``n``; the union is
    shifted by a uniform lattice point of the cube.  Each tile's chain runs
    ``mcmc.burn_in`` steps from empty and contributes its final state.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    d = spec.params.d
    base = centered_cube(n, d)
    offsets = lattice_shifts(window, d) if window > 1 else np.zeros((1, d), dtype=int)
    loops: list[Loop] = []
    for off in offsets:
        tile = base.shifted(off * n)
        chain = GibbsChain(spec.on(tile), "dirichlet", None, mcmc, rng)
        loops.extend(chain.advance(max(mcmc.burn_in, 1)).loops)
    eta = Configuration(loops)
    if shift:
        xs = lattice_shifts(n, d)
        x = xs[int(rng.integers(len(xs)))]
        if np.any(x != 0):
            eta = eta.translated(x)
    return eta

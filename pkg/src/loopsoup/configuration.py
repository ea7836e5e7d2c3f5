"""Finite loop configurations and the observables computed on them."""

from __future__ import annotations

from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .paths import Containment, Domain, Loop, containment, diam, started_in

__all__ = ["Configuration", "N_obs", "S_obs", "N_psi"]


class Configuration:
    """A finite multiset of loops.

    Membership is by identity, so ``eta - eta.contained_in(box)`` removes
    exactly the loops that were selected, even if another loop happens to
    have identical coordinates.
    """

    __slots__ = ("loops",)

    def __init__(self, loops: Iterable[Loop] = ()):
        self.loops: tuple[Loop, ...] = tuple(loops)

    def __len__(self) -> int:
        return len(self.loops)

    def __iter__(self) -> Iterator[Loop]:
        return iter(self.loops)

    def __getitem__(self, i):
        return self.loops[i]

    def __add__(self, other: "Configuration") -> "Configuration":
        return Configuration(self.loops + tuple(other))

    def __sub__(self, other: "Configuration") -> "Configuration":
        drop = {id(w) for w in other}
        return Configuration(w for w in self.loops if id(w) not in drop)

    def __repr__(self) -> str:
        js = [w.j for w in self.loops]
        return f"Configuration(n={len(js)}, particles={sum(js)})"

    def filter(self, pred: Callable[[Loop], bool]) -> "Configuration":
        return Configuration(w for w in self.loops if pred(w))

    def started_in(self, domain: Domain) -> "Configuration":
        """Loops with ``omega(0)`` in the box (free restriction)."""
        return self.filter(lambda w: started_in(w, domain))

    def contained_in(self, domain: Domain) -> "Configuration":
        """Loops entirely inside the box (Dirichlet restriction)."""
        return self.filter(lambda w: containment(w, domain) is Containment.INSIDE)

    def restrict(self, domain: Domain, restriction: str = "started_in") -> "Configuration":
        if restriction == "started_in":
            return self.started_in(domain)
        if restriction == "contained_in":
            return self.contained_in(domain)
        raise ValueError(f"unknown restriction {restriction!r}")

    def crossing(self, domain: Domain) -> "Configuration":
        return self.filter(lambda w: containment(w, domain) is Containment.CROSSING)

    def translated(self, v: Sequence[float]) -> "Configuration":
        return Configuration(w.translated(v) for w in self.loops)

    @property
    def particles(self) -> int:
        return sum(w.j for w in self.loops)


def N_obs(eta: Configuration, domain: Domain, restriction: str = "started_in") -> int:
    """Particle number of the restricted configuration."""
    return eta.restrict(domain, restriction).particles


def S_obs(eta: Configuration, domain: Domain, restriction: str = "started_in") -> float:
    """Largest loop diameter in the restricted configuration (0 when empty)."""
    sub = eta.restrict(domain, restriction)
    return max((diam(w) for w in sub), default=0.0)


def N_psi(eta: Configuration, domain: Domain, psi: Callable[[Loop], float], restriction: str = "started_in") -> float:
    """Sum of a loop functional over the restricted configuration."""
    return float(sum(psi(w) for w in eta.restrict(domain, restriction)))

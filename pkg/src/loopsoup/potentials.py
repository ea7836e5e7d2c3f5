"""Repulsive pair weights and their tail dominators."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate

__all__ = ["Potential", "ModelParams", "make_potential", "FAMILIES", "StabilityWarning"]


class StabilityWarning(UserWarning):
    """beta * mu is at or above the estimated stability threshold."""


def _zero(r):
    return np.zeros_like(np.asarray(r, dtype=float))


@dataclass(frozen=True)
class Potential:
    """Pair weight ``phi`` on distances, with tail dominator ``psi`` beyond ``tail_R``.

    ``r_cut`` truncates ``phi`` to zero at and beyond that distance; it is
    ``None`` when the weight has unbounded support and no cutoff was asked for.
    """

    family: str
    params: dict = field(default_factory=dict)
    tail_R: float = 1.0
    r_cut: float | None = None
    _phi: Callable = field(default=_zero, repr=False, compare=False)
    _psi: Callable = field(default=_zero, repr=False, compare=False)

    @property
    def is_zero(self) -> bool:
        return self.family == "zero"

    def phi(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        v = self._phi(r)
        if self.r_cut is not None:
            v = np.where(r < self.r_cut, v, 0.0)
        return v

    def __call__(self, r) -> np.ndarray:
        return self.phi(r)

    def psi(self, r) -> np.ndarray:
        return self._psi(np.asarray(r, dtype=float))

    def tail_integral(self, d: int) -> float:
        """``int_R^inf psi(x) x^(d-1) dx``; finite for every shipped family."""
        val, _ = integrate.quad(lambda x: float(self.psi(x)) * x ** (d - 1), self.tail_R, np.inf, limit=200)
        return float(val)

    def describe(self) -> dict:
        out = {"family": self.family, **self.params}
        if self.r_cut is not None:
            out["r_cut"] = self.r_cut
        return out


def _positive(name, value):
    if value is None or not float(value) > 0 or not math.isfinite(float(value)):
        raise ValueError(f"potential parameter {name!r} must be a positive finite number, got {value!r}")
    return float(value)


def _hard_core(a):
    a = _positive("a", a)
    return dict(
        params={"a": a},
        tail_R=a,
        default_cut=a,
        phi=lambda r: np.where(r < a, np.inf, 0.0),
        psi=_zero,
    )


def _gaussian(A, sigma):
    A = _positive("A", A)
    sigma = _positive("sigma", sigma)

    def phi(r):
        return A * np.exp(-(r**2) / (2.0 * sigma**2))

    return dict(params={"A": A, "sigma": sigma}, tail_R=sigma, default_cut=None, phi=phi, psi=phi)


def _compact_bump(A, a):
    A = _positive("A", A)
    a = _positive("a", a)
    return dict(
        params={"A": A, "a": a},
        tail_R=a,
        default_cut=a,
        phi=lambda r: np.where(r < a, A, 0.0),
        psi=_zero,
    )


def _zero_family():
    return dict(params={}, tail_R=1.0, default_cut=0.0, phi=_zero, psi=_zero)


FAMILIES = {
    "hard_core": _hard_core,
    "gaussian": _gaussian,
    "compact_bump": _compact_bump,
    "zero": _zero_family,
}


def make_potential(family: str, r_cut: float | None = None, **params) -> Potential:
    """Build a shipped potential family.

    ``hard_core(a)`` is infinite below ``a``; ``gaussian(A, sigma)`` is
    ``A exp(-r^2 / 2 sigma^2)``; ``compact_bump(A, a)`` equals ``A`` on
    ``[0, a)``.  ``zero`` is the non-interacting reference.  Compact
    families cut off at their support radius unless ``r_cut`` says
    otherwise; the gaussian has no cutoff by default.
    """
    try:
        builder = FAMILIES[family]
    except KeyError:
        raise ValueError(f"unknown potential family {family!r}; choose from {sorted(FAMILIES)}") from None
    try:
        spec = builder(**params)
    except TypeError as exc:
        raise ValueError(f"bad parameters for {family}: {exc}") from None
    cut = spec["default_cut"] if r_cut is None else _positive("r_cut", r_cut)
    if family == "zero":
        cut = None
    return Potential(
        family=family,
        params=spec["params"],
        tail_R=spec["tail_R"],
        r_cut=cut,
        _phi=spec["phi"],
        _psi=spec["psi"],
    )


@dataclass(frozen=True)
class ModelParams:
    d: int
    beta: float
    mu: float
    potential: Potential

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 3:
            raise ValueError(f"dimension must be an integer >= 3, got {self.d}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not math.isfinite(self.mu):
            raise ValueError("mu must be finite")

    def check_stability(self, c_phi: float | None) -> bool:
        """Warn when ``beta * mu`` reaches the estimated decay rate ``c_phi``."""
        if c_phi is None:
            ok = self.beta * self.mu <= 0
        else:
            ok = self.beta * self.mu < c_phi
        if not ok:
            warnings.warn(
                f"beta*mu = {self.beta * self.mu:.4g} is not below the estimated c_phi = {c_phi}; "
                "the loop soup may be unstable",
                StabilityWarning,
                stacklevel=2,
            )
        return ok

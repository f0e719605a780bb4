"""Structural constants and the chemotactic sensitivity threshold.

Everything here is deterministic scalar computation: the envelope constant
C0, the closed-form constant kappa of the functional inequality, the
derived constants C1/C2/C3 and the admissibility exponent r_p, the
per-point sensitivity bound chi_{theta,alpha,gamma} (bisection on a
strictly increasing map) and the optimized threshold chi*_{theta,p}
(nested grid search over the open (gamma, alpha) box).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, NamedTuple

import numpy as np

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0  # 1/phi
_INV_PHI2 = (3.0 - math.sqrt(5.0)) / 2.0  # 1/phi^2


def _golden_max(f: Callable[[float], float], lo: float, hi: float,
                xtol: float = 1e-10) -> tuple[float, float]:
    """Golden-section maximization of a unimodal f on [lo, hi]."""
    a, b = lo, hi
    h = b - a
    if h <= xtol:
        x = 0.5 * (a + b)
        return x, f(x)
    n = int(math.ceil(math.log(xtol / h) / math.log(_INV_PHI)))
    c = a + _INV_PHI2 * h
    d = a + _INV_PHI * h
    yc, yd = f(c), f(d)
    for _ in range(n):
        if yc > yd:
            b, d, yd = d, c, yc
            h *= _INV_PHI
            c = a + _INV_PHI2 * h
            yc = f(c)
        else:
            a, c, yc = c, d, yd
            h *= _INV_PHI
            d = a + _INV_PHI * h
            yd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def c0_const(beta: float) -> float:
    """Envelope constant: sup over u >= 0 of sqrt(u) (1 + beta*u)^(3/2) e^(-u).

    The objective vanishes at both ends of [0, inf) and may lose unimodality
    for large beta, so a 2048-point log-spaced scan brackets the global
    maximum before golden-section polish. Absolute tolerance ~1e-9.
    """
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return _c0_cached(float(beta))


@lru_cache(maxsize=8192)
def _c0_cached(beta: float) -> float:

    def h(u: float) -> float:
        return math.sqrt(u) * (1.0 + beta * u) ** 1.5 * math.exp(-u)

    grid = np.geomspace(1e-6, 50.0, 2048)
    vals = np.sqrt(grid) * (1.0 + beta * grid) ** 1.5 * np.exp(-grid)
    i = int(np.argmax(vals))
    lo = grid[i - 1] if i > 0 else 0.0
    hi = grid[i + 1] if i + 1 < grid.size else grid[-1]
    _, best = _golden_max(h, lo, hi, xtol=1e-10)
    return max(best, float(vals[i]))


def kappa(a: float, b: float) -> float:
    """Optimal constant of the functional inequality: ((a+1)/a) (b/(b+1))^(a/b)."""
    if not 0.0 < a < b:
        raise ValueError(f"require 0 < a < b, got a={a}, b={b}")
    return (a + 1.0) / a * (b / (b + 1.0)) ** (a / b)


@dataclass(frozen=True)
class StructuralParams:
    """One admissible (gamma, alpha) point at a given (theta, p).

    gamma lies in the open interval (3/2, 2) and alpha in
    (0, 1/(4(gamma-1))), which makes C1 > 0. The tighter restriction
    gamma < (2p+2)/(p+2) is enforced only where the threshold search
    needs it; r_p is positive exactly there.
    """

    gamma: float
    alpha: float
    theta: float
    p: float = 4.0

    def __post_init__(self) -> None:
        if not 1.5 < self.gamma < 2.0:
            raise ValueError(f"gamma must lie in (3/2, 2), got {self.gamma}")
        a_max = 1.0 / (4.0 * (self.gamma - 1.0))
        if not 0.0 < self.alpha < a_max:
            raise ValueError(
                f"alpha must lie in (0, {a_max:.6g}) for gamma={self.gamma}, "
                f"got {self.alpha}")
        if self.theta <= 0:
            raise ValueError(f"theta must be > 0, got {self.theta}")
        if self.p <= 2:
            raise ValueError(f"p must be > 2, got {self.p}")

    @property
    def r_p(self) -> float:
        return 1.0 - (self.gamma - 1.0) * (1.0 + 2.0 / self.p)


class StructuralConstants(NamedTuple):
    c1: float
    c2: float
    c3: float
    r_p: float


def gamma_upper(p: float) -> float:
    """Upper end (2p+2)/(p+2) of the admissible gamma interval."""
    if p <= 2:
        raise ValueError(f"p must be > 2, got {p}")
    return (2.0 * p + 2.0) / (p + 2.0)


def structural_constants(sp: StructuralParams) -> StructuralConstants:
    """C1, C2, C3 and r_p at one parameter point."""
    g, a, th = sp.gamma, sp.alpha, sp.theta
    c0 = c0_const(4.0 * a / th)
    k_half = kappa(0.5, g - 1.0)
    k_low = kappa(g - 1.5, g - 1.0)
    c1 = (g - 1.0) * (1.0 - 4.0 * a * (g - 1.0))
    c2 = math.sqrt(a * th) * (g - 1.0) / (2.0 * math.pi) * c0 * k_half * k_low
    c3 = math.sqrt(th) * c0 * k_half / (4.0 * math.pi * math.sqrt(a) * (4.0 - 2.0 * g))
    return StructuralConstants(c1, c2, c3, sp.r_p)


def _admissibility_gap(chi: float, sc: StructuralConstants, gamma: float) -> float:
    """C1 minus the left side; positive iff chi is admissible."""
    lhs = chi * sc.c2 + (chi * sc.c3) ** (2.0 * (gamma - 1.0))
    return sc.c1 - lhs


def admissible(chi: float, sp: StructuralParams) -> bool:
    """Whether chi*C2 + (chi*C3)^(2(gamma-1)) < C1 holds strictly."""
    if chi <= 0:
        raise ValueError(f"chi must be > 0, got {chi}")
    return _admissibility_gap(chi, structural_constants(sp), sp.gamma) > 0.0


def chi_for(sp: StructuralParams, rel_tol: float = 1e-8) -> float:
    """Largest admissible chi at one (theta, alpha, gamma) point.

    The admissibility left side is continuous, strictly increasing, zero at
    chi=0 and unbounded, so the supremum is the unique root of
    chi*C2 + (chi*C3)^(2(gamma-1)) = C1, bracketed by doubling and then
    bisected to the requested relative tolerance.
    """
    sc = structural_constants(sp)
    if sc.c1 <= 0:
        raise ValueError(f"C1 must be > 0, got {sc.c1}")
    lo, hi = 0.0, 1.0
    while _admissibility_gap(hi, sc, sp.gamma) > 0.0:
        lo = hi
        hi *= 2.0
        if hi > 1e300:
            raise RuntimeError("failed to bracket the admissibility root")
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if _admissibility_gap(mid, sc, sp.gamma) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class ThresholdResult:
    """Optimized threshold with the winning point and the full audit trail."""

    chi_star: float
    best_gamma: float
    best_alpha: float
    audit: list[tuple[float, float, float]] = field(default_factory=list)


@dataclass(frozen=True)
class SearchSettings:
    """Grid sizes for the nested (gamma, alpha) search."""

    coarse: int = 60
    refine_rounds: int = 4
    refine_points: int = 15
    margin: float = 1e-4


def _alpha_grid(gamma: float, lo_frac: float, hi_frac: float, n: int,
                margin: float) -> np.ndarray:
    """Log-spaced alpha samples strictly inside (0, 1/(4(gamma-1)))."""
    a_max = 1.0 / (4.0 * (gamma - 1.0))
    lo = max(lo_frac, margin) * a_max
    hi = min(hi_frac, 1.0 - margin) * a_max
    if hi <= lo:
        hi = lo * (1.0 + 1e-12)
    return np.geomspace(lo, hi, n)


def chi_star(theta: float, p: float,
             search: SearchSettings | None = None) -> ThresholdResult:
    """Maximize chi_for over the open feasible (gamma, alpha) box.

    Deterministic coarse grid (linear in gamma, log in alpha) followed by
    shrinking local refinement around the incumbent; ties broken
    lexicographically on (gamma, alpha). Every evaluated point is appended
    to the audit trail.
    """
    if theta <= 0:
        raise ValueError(f"theta must be > 0, got {theta}")
    s = search or SearchSettings()
    g_lo, g_hi = 1.5, min(2.0, gamma_upper(p))
    g_span = g_hi - g_lo
    audit: list[tuple[float, float, float]] = []
    best = (-math.inf, math.inf, math.inf)  # (chi, gamma, alpha) with chi negated ordering

    def consider(gamma: float, alpha: float) -> None:
        nonlocal best
        try:
            sp = StructuralParams(gamma=gamma, alpha=alpha, theta=theta, p=p)
        except ValueError:
            return
        chi = chi_for(sp)
        audit.append((gamma, alpha, chi))
        if chi > best[0] or (chi == best[0] and (gamma, alpha) < best[1:]):
            best = (chi, gamma, alpha)

    gammas = np.linspace(g_lo + s.margin * g_span, g_hi - s.margin * g_span, s.coarse)
    for g in gammas:
        for a in _alpha_grid(float(g), s.margin, 1.0, s.coarse, s.margin):
            consider(float(g), float(a))

    dg = g_span / (s.coarse - 1)
    # adjacent-point ratio of the coarse log-spaced alpha grid
    da_ratio = ((1.0 - s.margin) / s.margin) ** (1.0 / (s.coarse - 1))
    for _ in range(s.refine_rounds):
        chi_b, g_b, a_b = best
        g_min = max(g_lo + s.margin * g_span, g_b - dg)
        g_max = min(g_hi - s.margin * g_span, g_b + dg)
        gammas = np.linspace(g_min, g_max, s.refine_points)
        for g in gammas:
            a_max_g = 1.0 / (4.0 * (float(g) - 1.0))
            lo_frac = a_b / da_ratio / a_max_g
            hi_frac = a_b * da_ratio / a_max_g
            for a in _alpha_grid(float(g), lo_frac, hi_frac, s.refine_points, s.margin):
                consider(float(g), float(a))
        dg = (g_max - g_min) / (s.refine_points - 1)
        da_ratio = da_ratio ** (2.0 / (s.refine_points - 1))

    chi_b, g_b, a_b = best
    return ThresholdResult(chi_star=chi_b, best_gamma=g_b, best_alpha=a_b, audit=audit)

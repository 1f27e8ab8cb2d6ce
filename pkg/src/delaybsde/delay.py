"""Smallness condition on the delay and the contraction constants behind it.

Two certificates are computed side by side and never reconciled:

* ``condition_value`` is the left side of the sufficient condition
  ``K χ exp((χ + 6L²/χ) δ) / ((1-χ) L²) · max(1, T) < 1/578``;
* ``contraction_constants`` gives the modulus of the Picard map obtained with
  ``a = 4L²/χ`` and ``β`` just above ``χ + 4L²/χ``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

THRESHOLD = 1.0 / 578.0
BETA_MARGIN = 1e-6
CHI_CLAMP = 1e-8
_GOLD = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class DelayParams:
    K: float
    L: float
    delta: float
    T: float
    chi: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.chi < 1.0:
            raise DomainError(f"chi must lie in (0, 1), got {self.chi}")
        if not self.L > 0.0:
            raise DomainError("L must be positive")
        if self.K < 0 or self.delta < 0 or self.T <= 0:
            raise DomainError("need K >= 0, delta >= 0, T > 0")


def condition_value(p: DelayParams) -> float:
    K, L, d, T, chi = p.K, p.L, p.delta, p.T, p.chi
    if K == 0.0:
        return 0.0
    log_v = (math.log(K * chi / ((1.0 - chi) * L * L) * max(1.0, T)) + (chi + 6.0 * L * L / chi) * d)
    return math.exp(log_v) if log_v < 700.0 else math.inf


def certified(p: DelayParams) -> bool:
    return condition_value(p) < THRESHOLD


def _value(K, L, delta, T, chi):
    return condition_value(DelayParams(K, L, delta, T, chi))


def _golden(fn, lo, hi, tol):
    c = hi - _GOLD * (hi - lo)
    d = lo + _GOLD * (hi - lo)
    fc, fd = fn(c), fn(d)
    while hi - lo > tol:
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - _GOLD * (hi - lo)
            fc = fn(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + _GOLD * (hi - lo)
            fd = fn(d)
    return 0.5 * (lo + hi)


def best_chi(K: float, L: float, delta: float, T: float, tol: float = 1e-10) -> tuple[float, float, bool]:
    """Minimise ``condition_value`` over χ in (0, 1).

    Golden-section on ``[1e-8, 1 - 1e-8]``, then a 10⁴-point scan as a guard
    against a non-unimodal profile; the better of the two wins. Returns
    ``(chi, value, certified)``.
    """
    if not L > 0:
        raise DomainError("L must be positive")
    lo, hi = CHI_CLAMP, 1.0 - CHI_CLAMP
    if K == 0.0:
        return 0.5, 0.0, True

    # the exponent makes the raw profile overflow for large L²δ; search on logs
    def logv(chi):
        return math.log(chi) - math.log1p(-chi) + (chi + 6.0 * L * L / chi) * delta

    chi = _golden(logv, lo, hi, tol)
    grid = np.linspace(lo, hi, 10_000)
    scan = np.log(grid) - np.log1p(-grid) + (grid + 6.0 * L * L / grid) * delta
    j = int(np.argmin(scan))
    if scan[j] < logv(chi) - 1e-12:
        a, b = grid[max(j - 1, 0)], grid[min(j + 1, grid.size - 1)]
        chi = _golden(logv, a, b, tol)
    lv = logv(chi) + math.log(K / (L * L) * max(1.0, T))
    value = math.exp(lv) if lv < 700 else math.inf
    return float(chi), value, value < THRESHOLD


@dataclass(frozen=True)
class ContractionConstants:
    a: float
    beta: float
    C1: float
    gamma_mod: float
    C1_alt: float

    @property
    def contraction(self) -> bool:
        return self.gamma_mod < 1.0


def contraction_constants(L: float, chi: float, delta: float, K: float = 0.0, T: float = 1.0) -> ContractionConstants:
    """a = 4L²/χ, β = (1 + 1e-6)(χ + 4L²/χ), C₁ = 1 + 144/(1 - 4L²/a) and the modulus

    γ = (2K e^{βδ} / a)(3 + 289/(1 - 4L²/a)) max(1, T).

    ``C1_alt`` is the variant with 6L²/a that appears elsewhere in the
    derivation; it is reported, not used.
    """
    if not 0.0 < chi < 1.0:
        raise DomainError(f"chi must lie in (0, 1), got {chi}")
    if not L > 0:
        raise DomainError("L must be positive")
    a = 4.0 * L * L / chi
    gap = 1.0 - 4.0 * L * L / a
    if gap <= 0.0:
        raise DomainError("1 - 4L²/a must be positive")
    beta = (1.0 + BETA_MARGIN) * (chi + 4.0 * L * L / chi)
    C1 = 1.0 + 144.0 / gap
    gap6 = 1.0 - 6.0 * L * L / a
    C1_alt = 1.0 + 144.0 / gap6 if gap6 > 0 else math.inf
    if K == 0.0:
        gamma_mod = 0.0
    else:
        log_g = math.log(2.0 * K / a * (3.0 + 289.0 / gap) * max(1.0, T)) + beta * delta
        gamma_mod = math.exp(log_g) if log_g < 700.0 else math.inf
    return ContractionConstants(a, beta, C1, gamma_mod, C1_alt)


def certify(K: float, L: float, delta: float, T: float) -> dict:
    """Everything the ``certify`` command prints, as a flat dict."""
    chi, value, ok = best_chi(K, L, delta, T)
    const = contraction_constants(L, chi, delta, K, T)
    return {
        "chi": chi,
        "value": value,
        "threshold": THRESHOLD,
        "certified": ok,
        "a": const.a,
        "beta": const.beta,
        "C1": const.C1,
        "C1_alt": const.C1_alt,
        "gamma_mod": const.gamma_mod,
        "contraction": const.contraction,
    }

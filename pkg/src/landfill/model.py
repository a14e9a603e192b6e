"""Planar landfill model: growth kinetics, solubilization and reduced dynamics.

The full batch model has three concentrations (S1, S2, X) with
S1 + S2 + X = M conserved, so the biomass is eliminated and the control
system lives on the triangle D = {S1 >= 0, S2 >= 0, S1 + S2 < M}.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


class HypothesisError(ValueError):
    """Raised when a model violates the standing assumptions on f or mu."""


def _check_nonnegative(s, what):
    if np.ndim(s) == 0:
        if s < 0:
            raise ValueError(f"{what} must be non-negative, got {s!r}")
    elif np.any(np.asarray(s) < 0):
        raise ValueError(f"{what} must be non-negative")


@dataclass(frozen=True)
class GrowthLaw:
    """Haldane growth rate, or Monod when ``Ki`` is None.

    mu(s) = mu_bar * s / (Ks + s + s**2 / Ki)
    """

    mu_bar: float
    Ks: float
    Ki: float | None = None

    def __post_init__(self):
        vals = [self.mu_bar, self.Ks] + ([] if self.Ki is None else [self.Ki])
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("growth constants must be finite")

    @property
    def is_monod(self) -> bool:
        return self.Ki is None

    def _den(self, s):
        if self.Ki is None:
            return self.Ks + s
        return self.Ks + s + s * s / self.Ki

    def mu(self, s2):
        _check_nonnegative(s2, "s2")
        return self.mu_bar * s2 / self._den(s2)

    def mu_prime(self, s2):
        _check_nonnegative(s2, "s2")
        d = self._den(s2)
        if self.Ki is None:
            return self.mu_bar * self.Ks / (d * d)
        return self.mu_bar * (self.Ks - s2 * s2 / self.Ki) / (d * d)

    def s2_star(self) -> float:
        """Argmax of mu; ``math.inf`` for the monotone (Monod) law."""
        if self.Ki is None:
            return math.inf
        return math.sqrt(self.Ks * self.Ki)

    # unchecked scalar fast paths used inside integrators
    def _mu(self, s):
        return self.mu_bar * s / self._den(s)

    def _mu_prime(self, s):
        d = self._den(s)
        if self.Ki is None:
            return self.mu_bar * self.Ks / (d * d)
        return self.mu_bar * (self.Ks - s * s / self.Ki) / (d * d)


@dataclass(frozen=True)
class SolubilizationLaw:
    """Linear solubilization rate f(S1) = a * S1."""

    a: float

    def __post_init__(self):
        if not math.isfinite(self.a):
            raise ValueError("solubilization slope must be finite")

    def f(self, s1):
        return self.a * s1

    def f_prime(self, s1):
        return self.a + 0.0 * s1


@dataclass(frozen=True)
class ModelParams:
    growth: GrowthLaw
    solub: SolubilizationLaw
    M: float

    def __post_init__(self):
        if not (math.isfinite(self.M) and self.M > 0):
            raise ValueError(f"total mass M must be positive, got {self.M!r}")

    @property
    def s2_star(self) -> float:
        return self.growth.s2_star()

    @property
    def has_singular_arc(self) -> bool:
        return self.s2_star < self.M

    def biomass(self, s1, s2):
        return self.M - s1 - s2

    def removal(self, s1, s2):
        """mu(S2) * (M - S1 - S2): the consumption term of the S2 equation."""
        return self.growth._mu(s2) * (self.M - s1 - s2)

    def field(self, s1, s2, u):
        """Unchecked right-hand side, scalar or array inputs."""
        fs = self.solub.a * s1
        return -u * fs, u * fs - self.growth._mu(s2) * (self.M - s1 - s2)


class State(NamedTuple):
    s1: float
    s2: float


@dataclass(frozen=True)
class TargetBox:
    """Target T = [0, S1_bar] x [0, S2_bar]."""

    S1_bar: float
    S2_bar: float

    def __post_init__(self):
        if not (self.S1_bar > 0 and self.S2_bar > 0):
            raise ValueError("target thresholds must be positive")

    def validate(self, params: ModelParams) -> None:
        if not self.S1_bar + self.S2_bar < params.M:
            raise ValueError(
                f"target corner ({self.S1_bar}, {self.S2_bar}) is not inside D "
                f"for M={params.M}"
            )

    def contains(self, x) -> bool:
        return x[0] <= self.S1_bar and x[1] <= self.S2_bar


def in_closed_domain(params: ModelParams, x, tol: float = 1e-12) -> bool:
    s1, s2 = x
    return s1 >= -tol and s2 >= -tol and s1 + s2 <= params.M + tol


def vector_field(params: ModelParams, x, u: float) -> np.ndarray:
    """(dS1/dt, dS2/dt) of the reduced system for a control value u in [0, 1]."""
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"control must lie in [0, 1], got {u!r}")
    if not in_closed_domain(params, x):
        raise ValueError(f"state {tuple(x)} is outside the closure of D")
    s1, s2 = float(x[0]), float(x[1])
    return np.array(params.field(s1, s2, u))


def singular_control(params: ModelParams, s1):
    """Control holding S2 at the growth maximiser: mu(S2*)(M - S1 - S2*) / f(S1)."""
    s2s = params.s2_star
    return params.growth._mu(s2s) * (params.M - s1 - s2s) / params.solub.f(s1)


@dataclass
class HypothesisReport:
    s2_star: float
    singular_arc_exists: bool
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def raise_if_failed(self):
        if self.violations:
            name, witness, msg = self.violations[0]
            raise HypothesisError(f"{name} violated at {witness:.6g}: {msg}")


def check_hypotheses(params: ModelParams, n_samples: int = 2048) -> HypothesisReport:
    """Check the standing assumptions on f (H0) and mu (H1) over [0, M].

    Sampling plus a closed-form sign analysis of the two built-in laws.
    """
    g, sol, M = params.growth, params.solub, params.M
    s2s = g.s2_star()
    rep = HypothesisReport(s2_star=s2s, singular_arc_exists=s2s < M)
    xs = np.linspace(0.0, M, n_samples)

    # H0: f increasing with f(0) = 0
    if not sol.a > 0:
        rep.violations.append(("H0", float(xs[1]), f"slope a={sol.a} makes f non-increasing"))
    else:
        fx = sol.f(xs)
        bad = np.nonzero(np.diff(fx) <= 0)[0]
        if fx[0] != 0.0:
            rep.violations.append(("H0", 0.0, "f(0) != 0"))
        elif bad.size:
            rep.violations.append(("H0", float(xs[bad[0]]), "f not increasing"))

    # H1: mu >= 0, zero only at 0, unimodal with peak at S2*
    if not (g.mu_bar > 0 and g.Ks > 0 and (g.Ki is None or g.Ki > 0)):
        rep.violations.append(("H1", 0.0, "growth constants must be positive"))
        return rep
    mx = g._mu(xs)
    if mx[0] != 0.0:
        rep.violations.append(("H1", 0.0, "mu(0) != 0"))
    pos = mx[1:] <= 0
    if np.any(pos):
        rep.violations.append(("H1", float(xs[1:][pos][0]), "mu not positive"))
    d = np.diff(mx)
    mid = 0.5 * (xs[1:] + xs[:-1])
    # a sample interval straddling S2* is allowed either sign
    straddle = (xs[:-1] < s2s) & (xs[1:] > s2s)
    inc_bad = (mid < s2s) & ~straddle & (d <= 0)
    dec_bad = (mid > s2s) & ~straddle & (d >= 0)
    if np.any(inc_bad):
        rep.violations.append(("H1", float(mid[inc_bad][0]), "mu not increasing below S2*"))
    if np.any(dec_bad):
        rep.violations.append(("H1", float(mid[dec_bad][0]), "mu not decreasing above S2*"))
    return rep

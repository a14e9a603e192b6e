"""Synthesis landmarks: the Z1 boundary, the C0 curve, singular-arc data and regimes."""
from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import PchipInterpolator

from .model import ModelParams, TargetBox, check_hypotheses
from .ode import EventFunction, EventKind, IntegratorConfig, integrate_in_s1

N_CURVE_SAMPLES = 512
S1_FLOOR_FRAC = 1e-9  # S1 >= S1_FLOOR_FRAC * M wherever 1/f(S1) appears
Z1_TOL_FRAC = 1e-8  # slack on the Z1 boundary, which u = 1 trajectories can follow
NEAR_C0_FRAC = 1e-4  # band around the C0 interpolant where the exact test is used


class GeometryError(RuntimeError):
    pass


def bisect_root(fn: Callable[[float], float], lo: float, hi: float, tol: float, max_iter: int = 200):
    """Plain bisection; requires fn(lo) < 0 <= fn(hi) (or the reverse)."""
    flo = fn(lo)
    fhi = fn(hi)
    if (flo < 0) == (fhi < 0):
        raise GeometryError(f"root not bracketed on [{lo}, {hi}]: f={flo}, {fhi}")
    neg_lo = flo < 0
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if (fn(mid) < 0) == neg_lo:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class CurveGraph:
    """Graph s1 -> s2 stored as samples with strictly increasing s1.

    ``kind`` is "pchip" (monotone piecewise cubic) or "linear".
    """

    def __init__(self, s1, s2, kind: str = "pchip"):
        s1 = np.asarray(s1, dtype=float)
        s2 = np.asarray(s2, dtype=float)
        if s1.ndim != 1 or s1.shape != s2.shape or s1.size < 2:
            raise ValueError("need matching 1-D sample arrays with at least two points")
        if s1[0] > s1[-1]:
            s1, s2 = s1[::-1], s2[::-1]
        if np.any(np.diff(s1) <= 0):
            raise ValueError("s1 samples must be strictly monotone")
        self.s1, self.s2, self.kind = s1, s2, kind
        if kind == "pchip":
            self._interp = PchipInterpolator(s1, s2, extrapolate=False)
        elif kind == "linear":
            self._interp = self._linear
        else:
            raise ValueError(f"unknown interpolation kind {kind!r}")

    def _linear(self, x):
        return np.interp(x, self.s1, self.s2)

    @property
    def span(self):
        return float(self.s1[0]), float(self.s1[-1])

    @property
    def endpoints(self):
        return (float(self.s1[0]), float(self.s2[0])), (float(self.s1[-1]), float(self.s2[-1]))

    def contains(self, s1) -> bool:
        return self.s1[0] <= s1 <= self.s1[-1]

    def __call__(self, s1):
        lo, hi = self.span
        x = np.asarray(s1, dtype=float)
        eps = 1e-12 * max(1.0, abs(hi))
        if np.any(x < lo - eps) or np.any(x > hi + eps):
            raise ValueError(f"s1={s1} outside the sampled span [{lo}, {hi}]")
        x = np.clip(x, lo, hi)
        out = np.asarray(self._interp(x), dtype=float)
        return float(out) if out.ndim == 0 else out

    def __len__(self):
        return self.s1.size

    def to_csv(self, dest=None) -> str:
        buf = io.StringIO()
        buf.write("s1,s2\n")
        for a, b in zip(self.s1, self.s2):
            buf.write(f"{a:.17g},{b:.17g}\n")
        text = buf.getvalue()
        if dest is not None:
            with open(dest, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text: str, kind: str = "pchip") -> "CurveGraph":
        rows = [ln for ln in text.strip().splitlines()[1:] if ln]
        data = np.array([[float(v) for v in ln.split(",")] for ln in rows])
        return cls(data[:, 0], data[:, 1], kind)


# -- Z1 boundary ------------------------------------------------------------

def _sigma2_rhs(params: ModelParams):
    g, a, M = params.growth, params.solub.a, params.M

    def rhs(s1, y):
        s2 = y[0]
        return (g._mu(s2) * (M - s1 - s2) / (a * s1) - 1.0,)

    return rhs


def compute_sigma2(params: ModelParams, target: TargetBox, cfg: IntegratorConfig | None = None,
                   n_samples: int = N_CURVE_SAMPLES):
    """Boundary of Z1: the u=1 trajectory through the target corner, by S1.

    Returns the graph on [S1_bar, sigma1_under] and sigma1_under, the first
    abscissa beyond S1_bar where the curve reaches S2 = 0.
    """
    target.validate(params)
    cfg = cfg or IntegratorConfig()
    M = params.M
    hit_zero = EventFunction(lambda s1, y: y[0], EventKind.CROSSES_CURVE, direction=-1, name="sigma2=0")
    sol, evs = integrate_in_s1(
        _sigma2_rhs(params), [target.S2_bar], (target.S1_bar, M), cfg, [hit_zero],
        floor=S1_FLOOR_FRAC * M,
        domain=lambda y: True,
    )
    if sol.status != "event":
        raise GeometryError("sigma2 never reached S2 = 0 before S1 = M; inconsistent parameters")
    s1_under = evs[-1].time
    xs = np.linspace(target.S1_bar, s1_under, n_samples)
    ys = np.array([sol(x)[0] for x in xs])
    ys[0], ys[-1] = target.S2_bar, 0.0
    if np.any(xs + ys >= M):
        raise GeometryError("sigma2 curve met the invariant line S1 + S2 = M")
    return CurveGraph(xs, ys), float(s1_under), sol


# -- the integral function and C0 ---------------------------------------------

class PhiFunction:
    """phi(s1, s2) = int_{S2_bar}^{s2} mu'(s) mu(S2_bar)(M - s1 - S2_bar) / (mu(s)^2 (M - s1 - s)) ds."""

    def __init__(self, params: ModelParams, target: TargetBox):
        self.params, self.target = params, target
        self.epsabs = 1e-13

    def _scale(self, s1):
        g, M, lo = self.params.growth, self.params.M, self.target.S2_bar
        return g._mu(lo) * (M - s1 - lo)

    def _raw(self, s1, a, b):
        g, M = self.params.growth, self.params.M
        if a == b:
            return 0.0

        def integrand(s):
            m = g._mu(s)
            return g._mu_prime(s) / (m * m * (M - s1 - s))

        # full_output silences roundoff warnings on tiny bisection intervals;
        # the error estimate is checked instead
        out = quad(integrand, a, b, epsabs=self.epsabs, epsrel=1e-13, limit=400, full_output=1)
        if out[1] > 1e-10:
            raise GeometryError(f"quadrature error {out[1]:.2e} on [{a}, {b}] at s1={s1}")
        return out[0]

    def __call__(self, s1, s2):
        lo, M = self.target.S2_bar, self.params.M
        if s2 < lo:
            raise ValueError(f"s2={s2} below the lower integration limit {lo}")
        if s1 < 0 or s1 + s2 >= M:
            raise ValueError(f"integrand singular: s1 + s2 = {s1 + s2} >= M")
        return self._scale(s1) * self._raw(s1, lo, s2)

    def at_s2_star(self, s1):
        """phi(s1, S2*); +inf when the segment to S2* would cross S1 + S2 = M.

        Below S2* the integrand is positive and diverges at s2 = M - s1, so the
        level 1 is always exceeded before the invariant line is reached.
        """
        s2s = self.params.s2_star
        if s1 + s2s >= self.params.M:
            return math.inf
        return self(s1, s2s)

    def root_in_s2(self, s1, hi, tol=1e-14):
        """Smallest s2 in (S2_bar, hi] with phi(s1, s2) = 1, phi increasing there."""
        lo = self.target.S2_bar
        c = self._scale(s1)
        gap = self.params.M - s1
        # grow the bracket geometrically towards hi so quad never sees the log pole
        a, phi_a = lo, 0.0
        b = None
        for k in range(1, 40):
            cand = min(hi, gap - (gap - lo) * 0.5 ** k) if hi >= gap * (1 - 1e-12) else hi
            if cand <= a:
                continue
            pb = phi_a + c * self._raw(s1, a, cand)
            if pb >= 1.0:
                b = cand
                break
            a, phi_a = cand, pb
            if cand == hi:
                break
        if b is None and hi < gap and abs(phi_a - 1.0) < 1e-12:
            return hi  # level reached at hi up to roundoff (the C0 end on S2 = S2*)
        if b is None:
            raise GeometryError(f"phi({s1}, .) stays below 1 on [{lo}, {hi}] (max {phi_a})")
        for _ in range(200):
            if b - a <= tol:
                break
            mid = 0.5 * (a + b)
            if mid in (a, b):
                break
            pm = phi_a + c * self._raw(s1, a, mid)
            if pm < 1.0:
                a, phi_a = mid, pm
            else:
                b = mid
        return 0.5 * (a + b)


def phi_integral(params: ModelParams, target: TargetBox, s1: float, s2: float) -> float:
    return PhiFunction(params, target)(s1, s2)


def _c0_upper(params, s1, s2_star):
    # phi(s1, .) increases up to min(S2*, M - s1); stay off the log singularity
    M = params.M
    if s2_star < M - s1:
        return s2_star
    return (M - s1) * (1 - 1e-12)


def compute_c0(params: ModelParams, target: TargetBox, s1_star: float | None = None,
               n_samples: int = N_CURVE_SAMPLES):
    """C0 as a decreasing graph s1 -> S2c(s1), or None when empty.

    In the inhibited case with S1* > 0 the curve has a vertical tangent at
    S1*, so abscissae are clustered quadratically towards that end.
    """
    phi = PhiFunction(params, target)
    s2s, M = params.s2_star, params.M
    S1b, S2b = target.S1_bar, target.S2_bar
    if s2s <= S2b:
        return None
    if s2s >= M:
        left = 0.0
    else:
        if phi.at_s2_star(S1b) < 1.0:
            return None
        left = s1_star if s1_star is not None else end_singular_s1(params, target)
    tparam = np.linspace(0.0, 1.0, n_samples)
    xs = left + (S1b - left) * tparam ** 2 if left > 0 or s2s < M else left + (S1b - left) * tparam
    ys = np.empty_like(xs)
    for i, x in enumerate(xs):
        if s2s < M and i == 0 and left > 0:
            ys[i] = s2s
            continue
        ys[i] = phi.root_in_s2(float(x), _c0_upper(params, float(x), s2s))
    return CurveGraph(xs, ys)


# -- singular arc ------------------------------------------------------------------

@dataclass(frozen=True)
class SingularArcInfo:
    s2_star: float
    exists: bool
    s1_min: float | None = None
    s1_star: float | None = None
    s1_star_branch: str | None = None  # "corner", "c0", "sigma2"


def nu(params: ModelParams, s1):
    s2s = params.s2_star
    return params.solub.f(s1) - params.growth._mu(s2s) * (params.M - s1 - s2s)


def saturation_s1(params: ModelParams, tol: float = 1e-15) -> float:
    """Root of nu on (0, M - S2*): where the singular control equals 1."""
    s2s = params.s2_star
    if not s2s < params.M:
        raise GeometryError("no singular arc: S2* >= M")
    return bisect_root(lambda s: nu(params, s), 0.0, params.M - s2s, tol)


def end_singular_s1(params: ModelParams, target: TargetBox, sigma2_sol=None, cfg=None,
                    n_scan: int = 1024) -> float:
    s2s, M = params.s2_star, params.M
    S1b, S2b = target.S1_bar, target.S2_bar
    tol = 1e-14
    if s2s < S2b:
        # first abscissa past S1_bar where the Z1 boundary drops below S2*
        ev = EventFunction(lambda s1, y: y[0] - s2s, EventKind.CROSSES_S2_STAR, direction=-1)
        sol, evs = integrate_in_s1(
            _sigma2_rhs(params), [S2b], (S1b, M), cfg or IntegratorConfig(), [ev], floor=S1_FLOOR_FRAC * M
        )
        if not evs:
            raise GeometryError("sigma2 never drops below S2*")
        return float(evs[-1].time)
    phi = PhiFunction(params, target)
    if s2s >= M or phi.at_s2_star(S1b) < 1.0:
        return S1b
    fn = lambda s: phi.at_s2_star(s) - 1.0  # noqa: E731
    if fn(0.0) >= 0.0:
        return 0.0
    xs = np.linspace(0.0, S1b, n_scan)
    vals = np.array([fn(x) for x in xs])
    idx = int(np.argmax(vals > 0)) if np.any(vals > 0) else n_scan - 1
    lo, hi = xs[max(idx - 1, 0)], xs[idx]
    if vals[idx] <= 0:  # phi(S1_bar, S2*) == 1 exactly
        return S1b
    return bisect_root(fn, lo, hi, tol)


def singular_info(params: ModelParams, target: TargetBox, cfg=None) -> SingularArcInfo:
    s2s = params.s2_star
    if not s2s < params.M:
        return SingularArcInfo(s2_star=s2s, exists=False)
    s1min = saturation_s1(params)
    s1star = end_singular_s1(params, target, cfg=cfg)
    if s2s < target.S2_bar:
        branch = "sigma2"
    elif s1star == target.S1_bar and (s2s == target.S2_bar or PhiFunction(params, target).at_s2_star(target.S1_bar) < 1):
        branch = "corner"
    else:
        branch = "c0"
    return SingularArcInfo(s2_star=s2s, exists=True, s1_min=s1min, s1_star=s1star, s1_star_branch=branch)


# -- regimes ------------------------------------------------------------------------

class Regime(str, enum.Enum):
    NO_SINGULAR = "no-singular"
    ADMISSIBLE_SINGULAR = "admissible-singular"
    SATURATED_INTERIOR = "saturated-interior"
    SATURATED_BOUNDARY = "saturated-boundary"


def regime_of(info: SingularArcInfo) -> Regime:
    if not info.exists:
        return Regime.NO_SINGULAR
    if info.s1_min <= info.s1_star:
        return Regime.ADMISSIBLE_SINGULAR
    if info.s1_star > 0:
        return Regime.SATURATED_INTERIOR
    return Regime.SATURATED_BOUNDARY


def classify_regime(params: ModelParams, target: TargetBox) -> Regime:
    check_hypotheses(params).raise_if_failed()
    target.validate(params)
    return regime_of(singular_info(params, target))


# -- partition ------------------------------------------------------------------

class Region(str, enum.Enum):
    T = "T"
    Z1 = "Z1"
    E0 = "Z0-inside-E0"
    Z0 = "Z0-outside-E0"
    ZS = "Zs"


@dataclass
class Partition:
    params: ModelParams
    target: TargetBox
    sigma2: CurveGraph
    sigma1_under: float
    c0: CurveGraph | None
    s1_star: float | None
    sigma2_dense: object = None  # ode.Solution of the sigma2 flow, exact between samples

    def sigma2_at(self, s1):
        if self.sigma2_dense is not None:
            return float(self.sigma2_dense(s1)[0])
        return self.sigma2(s1)

    def in_z1(self, x, slack: bool = False) -> bool:
        """Below the sigma2 graph; ``slack`` widens it for u = 1 arcs riding the boundary."""
        s1, s2 = x
        tol = Z1_TOL_FRAC * self.params.M if slack else 0.0
        return self.target.S1_bar < s1 <= self.sigma1_under and s2 <= self.sigma2_at(s1) + tol

    def c0_defined_at(self, s1) -> bool:
        return self.c0 is not None and self.c0.contains(s1)

    def in_e0(self, x) -> bool:
        """Closed extended target: the part of Z0 not lying above a C0 point.

        Near C0 the interpolant is replaced by the defining level test
        phi(s1, s2) <= 1, so switch points land on the exact curve.
        """
        s1, s2 = x
        if s1 > self.target.S1_bar:
            return False
        if not self.c0_defined_at(s1):
            return True
        est = self.c0(s1)
        M = self.params.M
        if abs(s2 - est) > NEAR_C0_FRAC * M:
            return s2 <= est
        if s2 <= self.target.S2_bar:
            return True
        if s1 + s2 >= M or s2 > self.params.s2_star:
            return False
        return self._phi(s1, s2) <= 1.0

    def __post_init__(self):
        self._phi = PhiFunction(self.params, self.target)

    def membership(self, x) -> Region:
        s1, s2 = x
        S1b, S2b = self.target.S1_bar, self.target.S2_bar
        if s1 <= S1b and s2 <= S2b:
            return Region.T
        if s1 <= S1b:
            return Region.E0 if self.in_e0(x) else Region.Z0
        if self.in_z1(x):
            return Region.Z1
        return Region.ZS


def build_partition(params: ModelParams, target: TargetBox, info: SingularArcInfo | None = None,
                    cfg: IntegratorConfig | None = None, n_samples: int = N_CURVE_SAMPLES) -> Partition:
    check_hypotheses(params).raise_if_failed()
    target.validate(params)
    info = info or singular_info(params, target, cfg)
    sig, s1u, dense = compute_sigma2(params, target, cfg, n_samples)
    c0 = compute_c0(params, target, info.s1_star, n_samples)
    return Partition(params, target, sig, s1u, c0, info.s1_star, dense)


def membership(partition: Partition, x) -> Region:
    return partition.membership(x)

"""Optimal feedback construction and closed-loop simulation.

The switching curve C1 is built from a one-parameter family of seeds on the
boundary of the extended target E0: first the C0 curve from its top end
down to the target column, then the vertical edge {S1_bar} x [S2_bar, top].
From each seed the u = 1 flow is run backward (S1 increasing) together with
the normalised switching function psi; the first zero of psi is a C1 point.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import (
    S1_FLOOR_FRAC,
    Z1_TOL_FRAC,
    CurveGraph,
    GeometryError,
    Partition,
    PhiFunction,
    Regime,
    SingularArcInfo,
    build_partition,
    regime_of,
    singular_info,
)
from .model import ModelParams, TargetBox, check_hypotheses
from .ode import (
    EventFunction,
    EventKind,
    IntegrationError,
    IntegratorConfig,
    integrate,
    integrate_in_s1,
)

SINGULAR_BAND_FRAC = 1e-6  # |S2 - S2*| <= this * M counts as on the singular arc


class RegimeError(ValueError):
    pass


class TargetReached(Exception):
    pass


# -- backward u = 1 flows parameterised by S1 ------------------------------------------

def _u1_rhs(params: ModelParams):
    g, a, M = params.growth, params.solub.a, params.M

    def rhs(s1, y):
        return (g._mu(y[0]) * (M - s1 - y[0]) / (a * s1) - 1.0,)

    return rhs


def _u1_psi_rhs(params: ModelParams):
    """(sigma2, psi) along the time-reversed u = 1 flow, S1 as the variable."""
    g, sol, M = params.growth, params.solub, params.M

    def rhs(s1, y):
        s2, psi = y
        m = g._mu(s2)
        mp = g._mu_prime(s2)
        fs = sol.f(s1)
        ds2 = m * (M - s1 - s2) / fs - 1.0
        dpsi = -mp / (m * fs) - psi * (sol.f_prime(s1) / fs + mp / m)
        return (ds2, dpsi)

    return rhs


def compute_xi_star(params: ModelParams, info: SingularArcInfo, cfg: IntegratorConfig | None = None,
                    n_samples: int = 512):
    """u = 1 curve through (S1*, S2*), followed in increasing S1 until it is back on S2 = S2*.

    Returns the curve and the re-crossing abscissa.
    """
    if not info.exists or not info.s1_star or info.s1_star <= 0:
        raise RegimeError("xi* needs a singular arc with S1* > 0")
    s2s, M = info.s2_star, params.M
    ev = EventFunction(lambda s1, y: y[0] - s2s, EventKind.CROSSES_S2_STAR, direction=-1, name="S2*")
    # start a hair to the right so the initial event value is nonzero
    rhs = _u1_rhs(params)
    sol, evs = integrate_in_s1(rhs, [s2s], (info.s1_star, M - s2s), cfg or IntegratorConfig(), [ev],
                               floor=S1_FLOOR_FRAC * M)
    if not evs:
        raise GeometryError("xi* does not return to S2 = S2* before S1 = M - S2*")
    s1_tilde = float(evs[-1].time)
    xs = np.linspace(info.s1_star, s1_tilde, n_samples)
    ys = np.array([sol(x)[0] for x in xs])
    ys[0] = s2s
    return CurveGraph(xs, ys), s1_tilde


# -- C1 --------------------------------------------------------------------------------------

@dataclass(frozen=True)
class SeedResult:
    p: float
    seed: tuple
    zero: tuple | None  # (s1, s2) of the first psi zero
    reason: str  # "zero", "recross", "floor", "end"


@dataclass
class C1Result:
    curve: CurveGraph
    s1_bar: float
    points: np.ndarray
    limit_seed: SeedResult
    discarded: list = field(default_factory=list)

    @property
    def leftmost(self):
        return tuple(self.points[0])


class SeedFamily:
    """Continuous seed parameterisation p in [0, 1], p = 0 at the top of C0."""

    def __init__(self, params: ModelParams, target: TargetBox, info: SingularArcInfo, partition: Partition):
        self.params, self.target, self.info = params, target, info
        self.phi = PhiFunction(params, target)
        self.has_c0 = partition.c0 is not None
        S1b = target.S1_bar
        s2s = params.s2_star
        self.left = max(info.s1_star, 0.0)
        if self.has_c0:
            self.p_split = 0.5
            self.edge_top = partition.c0(S1b)
            self.floor = 10 * S1_FLOOR_FRAC * params.M
        else:
            self.p_split = 0.0
            self.edge_top = s2s

    def _c0_point(self, s1):
        s2s, M = self.params.s2_star, self.params.M
        hi = s2s if s1 + s2s < M else (M - s1) * (1 - 1e-12)
        return self.phi.root_in_s2(s1, hi)

    def __call__(self, p: float):
        S1b, S2b = self.target.S1_bar, self.target.S2_bar
        if p < self.p_split:
            q = p / self.p_split
            s1 = self.left + (S1b - self.left) * q * q
            s1 = max(s1, getattr(self, "floor", 0.0))
            if s1 == self.info.s1_star and self.params.s2_star + s1 < self.params.M:
                return s1, self.params.s2_star
            return s1, self._c0_point(s1)
        q = (p - self.p_split) / (1.0 - self.p_split)
        return S1b, self.edge_top + (S2b - self.edge_top) * q


def _trace_seed(params: ModelParams, seed, cfg: IntegratorConfig):
    """First psi zero along the backward u = 1 flow from a seed.

    Near the end of the seed window psi only touches zero in a thin hump
    close to S2 = S2*, which a step can jump over; psi peaks are therefore
    watched as well and a nonnegative peak is searched for its zero.
    """
    s1, s2 = seed
    s2s, M = params.s2_star, params.M
    rhs = _u1_psi_rhs(params)
    # psi' = -mu'/(mu f) < 0 at seeds below S2*, so psi is negative just after
    # the seed; saying so at the seed itself keeps a dip inside the first step
    events = [
        EventFunction(lambda x, y: y[1] if x != s1 else -1.0, EventKind.SIGN_CHANGE, direction=+1, name="psi"),
        EventFunction(lambda x, y: rhs(x, y)[1], EventKind.SIGN_CHANGE, direction=-1, name="peak"),
        EventFunction(lambda x, y: y[0] - s2s, EventKind.CROSSES_S2_STAR, direction=-1, name="recross"),
        EventFunction(lambda x, y: y[0], EventKind.CROSSES_CURVE, direction=-1, name="floor"),
    ]
    start, y0 = s1, [s2, 0.0]
    for _ in range(50):
        sol, evs = integrate_in_s1(rhs, y0, (start, M), cfg, events, floor=S1_FLOOR_FRAC * M)
        if not evs:
            return None, "end"
        ev = evs[-1]
        if ev.name == "psi":
            return (float(ev.time), float(ev.state[0])), "zero"
        if ev.name != "peak":
            return None, ev.name
        if ev.state[1] >= 0.0:
            # walk back to a knot with psi < 0, then bisect
            knots = sol.t[::-1]
            lo = next((k for k in knots if sol(k)[1] < 0.0), None)
            if lo is not None:
                hi = ev.time
                for _ in range(100):
                    mid = 0.5 * (lo + hi)
                    if mid in (lo, hi):
                        break
                    if sol(mid)[1] < 0.0:
                        lo = mid
                    else:
                        hi = mid
                return (float(hi), float(sol(hi)[0])), "zero"
        start, y0 = ev.time, ev.state
    raise IntegrationError("psi oscillates; too many peaks along one seed")


def compute_c1(params: ModelParams, target: TargetBox, info: SingularArcInfo, partition: Partition,
               cfg: IntegratorConfig | None = None, chord_tol: float = 1e-6, max_points: int = 3000):
    """Switching curve zeta and the prior-saturation abscissa.

    Seeds are refined until the C1 polyline deviates from every midpoint by
    less than chord_tol * M; the zero-carrying seeds form one interval
    starting at the top, whose far end is located by bisection.
    """
    regime = regime_of(info)
    if regime not in (Regime.SATURATED_INTERIOR, Regime.SATURATED_BOUNDARY):
        raise RegimeError(f"C1 is only defined in saturated regimes, not {regime.value}")
    cfg = cfg or IntegratorConfig()
    fam = SeedFamily(params, target, info, partition)
    M, s2s = params.M, params.s2_star
    cache: dict[float, SeedResult] = {}

    def run(p):
        if p not in cache:
            sd = fam(p)
            z, why = _trace_seed(params, sd, cfg)
            cache[p] = SeedResult(p, sd, z, why)
        return cache[p]

    # coarse scan, geometric towards the top to pin zeta near (S1*, S2*)
    ps = np.unique(np.concatenate([np.geomspace(1e-12, 1e-2, 21), np.linspace(0.0, 1.0, 101)[1:]]))
    res = [run(float(p)) for p in ps]
    has = [r.zero is not None for r in res]
    if not any(has):
        raise GeometryError("no seed produces a switching point")
    i0 = has.index(True)
    i1 = len(has) - 1 - has[::-1].index(True)
    if not all(has[i0:i1 + 1]):
        # TODO: support a second zero-carrying seed window if a case ever exhibits one
        raise GeometryError("seeds with switching points are not contiguous")
    if i1 == len(has) - 1:
        raise GeometryError("every seed down to the target corner switches; prior saturation not located")

    def edge(good, bad):
        for _ in range(60):
            mid = 0.5 * (good + bad)
            if mid in (good, bad):
                break
            if run(mid).zero is not None:
                good = mid
            else:
                bad = mid
        return good

    lo = edge(float(ps[i1]), float(ps[i1 + 1]))
    limit = run(lo)
    top = edge(float(ps[i0]), float(ps[i0 - 1])) if i0 > 0 else float(ps[0])

    # chord refinement on the zero-carrying interval
    good = sorted(p for p, r in cache.items() if r.zero is not None and top <= p <= lo)
    tol = chord_tol * M
    stack = list(zip(good[:-1], good[1:]))
    done = set(good)
    while stack and len(done) < max_points:
        a, b = stack.pop()
        m = 0.5 * (a + b)
        if m in (a, b):
            continue
        rm = run(m)
        za, zb = np.array(cache[a].zero), np.array(cache[b].zero)
        if rm.zero is None:
            continue
        zm = np.array(rm.zero)
        d = zb - za
        n = np.hypot(*d)
        dev = abs(d[0] * (zm[1] - za[1]) - d[1] * (zm[0] - za[0])) / n if n > 0 else np.hypot(*(zm - za))
        done.add(m)
        if dev > tol and b - a > 1e-15:
            stack.extend([(a, m), (m, b)])

    pts = np.array(sorted(cache[p].zero for p in done))
    s1_bar = float(limit.zero[0])
    # keep the graph single-valued; drop points that fold back
    keep = [0]
    for i in range(1, len(pts)):
        if pts[i, 0] > pts[keep[-1], 0]:
            keep.append(i)
    pts = pts[keep]
    if pts[-1, 0] >= s1_bar:
        pts = pts[pts[:, 0] < s1_bar]
    pts = np.vstack([pts, [s1_bar, s2s]])
    if np.any(pts[:, 1] < s2s - 1e-9 * M):
        raise GeometryError("computed C1 dips below the singular locus")
    # zeros of seeds next to the top sit on S2* up to integration error
    pts[:, 1] = np.maximum(pts[:, 1], s2s)
    discarded = [r for r in cache.values() if r.zero is None]
    return C1Result(CurveGraph(pts[:, 0], pts[:, 1], kind="linear"), s1_bar, pts, limit, discarded)


# -- geometry bundle -------------------------------------------------------------------

@dataclass
class SynthesisGeometry:
    params: ModelParams
    target: TargetBox
    singular: SingularArcInfo
    partition: Partition
    regime: Regime
    s1_bar: float | None = None
    c1: CurveGraph | None = None
    c1_info: C1Result | None = None
    xi_star: CurveGraph | None = None
    s1_tilde: float | None = None

    @property
    def band(self):
        return SINGULAR_BAND_FRAC * self.params.M

    def zeta_ext(self, s1):
        """zeta extended by S2* on both sides of its span."""
        s2s = self.params.s2_star
        if self.c1 is None or not self.c1.contains(s1):
            return s2s
        return self.c1(s1)


def build_geometry(params: ModelParams, target: TargetBox, cfg: IntegratorConfig | None = None,
                   n_samples: int = 512, with_c1: bool = True) -> SynthesisGeometry:
    check_hypotheses(params).raise_if_failed()
    target.validate(params)
    cfg = cfg or IntegratorConfig()
    info = singular_info(params, target, cfg)
    part = build_partition(params, target, info, cfg, n_samples)
    regime = regime_of(info)
    geom = SynthesisGeometry(params, target, info, part, regime)
    if regime == Regime.SATURATED_INTERIOR:
        geom.xi_star, geom.s1_tilde = compute_xi_star(params, info, cfg, n_samples)
    if with_c1 and regime in (Regime.SATURATED_INTERIOR, Regime.SATURATED_BOUNDARY):
        res = compute_c1(params, target, info, part, cfg)
        geom.c1, geom.s1_bar, geom.c1_info = res.curve, res.s1_bar, res
    return geom


# -- feedback laws ---------------------------------------------------------------------

B0, B1, S_ARC, IN_T = "B0", "B1", "S", "T"


class Feedback:
    """State feedback; ``arc(x)`` names the mode, ``__call__`` gives the control value."""

    regimes: tuple = ()

    def __init__(self, geom: SynthesisGeometry):
        if self.regimes and geom.regime not in self.regimes:
            raise RegimeError(f"{type(self).__name__} does not apply to the {geom.regime.value} regime")
        self.geom = geom
        self.params, self.target = geom.params, geom.target

    def arc(self, x, prev: str | None = None) -> str:
        """Mode at x; ``prev`` is the mode in force, used for hysteresis on Z1."""
        raise NotImplementedError

    def u_singular(self, s1):
        p = self.params
        s2s = p.s2_star
        u = p.growth._mu(s2s) * (p.M - s1 - s2s) / p.solub.f(s1)
        return min(max(u, 0.0), 1.0)

    def control_for(self, mode, x):
        if mode == B0:
            return 0.0
        if mode == B1:
            return 1.0
        if mode == S_ARC:
            return self.u_singular(x[0])
        raise TargetReached(f"state {tuple(x)} is in the target")

    def __call__(self, x):
        return self.control_for(self.arc(x), x)

    def _on_band(self, s2):
        return abs(s2 - self.params.s2_star) <= self.geom.band


class AttainabilityFeedback(Feedback):
    """u = 1 right of the target column, u = 0 above it: always reaches T."""

    def __init__(self, params: ModelParams, target: TargetBox):
        self.geom = None
        self.params, self.target = params, target

    def arc(self, x, prev=None):
        if self.target.contains(x):
            return IN_T
        return B1 if x[0] > self.target.S1_bar else B0


class NoSingularFeedback(Feedback):
    regimes = (Regime.NO_SINGULAR,)

    def arc(self, x, prev=None):
        part = self.geom.partition
        if self.target.contains(x):
            return IN_T
        if part.in_z1(x, prev == B1):
            return B1
        return B0 if part.in_e0(x) else B1


class AdmissibleFeedback(Feedback):
    regimes = (Regime.ADMISSIBLE_SINGULAR,)

    def arc(self, x, prev=None):
        part, s2s = self.geom.partition, self.params.s2_star
        s1, s2 = x
        if self.target.contains(x):
            return IN_T
        # the band goes first so the arc ends exactly at S1*, where it meets Z1
        if self._on_band(s2) and s1 > self.geom.singular.s1_star:
            return S_ARC
        if part.in_z1(x, prev == B1):
            return B1
        if part.in_e0(x):
            return B0
        return B1 if s2 - s2s <= self.geom.band else B0


class SaturatedFeedback(Feedback):
    regimes = (Regime.SATURATED_INTERIOR,)

    def _above_c1(self, s1, s2):
        # the band itself counts as below: leaving the arc before S1_bar means u = 1
        if s2 - self.params.s2_star <= self.geom.band:
            return False
        return s2 >= self.geom.zeta_ext(s1)

    def arc(self, x, prev=None):
        part, geom = self.geom.partition, self.geom
        s1, s2 = x
        if self.target.contains(x):
            return IN_T
        if part.in_z1(x, prev == B1):
            return B1
        if part.in_e0(x):
            return B0
        if s1 >= geom.s1_bar and self._on_band(s2):
            return S_ARC
        return B0 if self._above_c1(s1, s2) else B1


class SaturatedBoundaryFeedback(SaturatedFeedback):
    regimes = (Regime.SATURATED_BOUNDARY,)

    def _above_c1(self, s1, s2):
        if s2 > self.params.s2_star and s1 < self.geom.c1.span[0]:
            return False  # left of every computed switching point: u = 1
        return super()._above_c1(s1, s2)


def optimal_feedback(geom: SynthesisGeometry) -> Feedback:
    cls = {
        Regime.NO_SINGULAR: NoSingularFeedback,
        Regime.ADMISSIBLE_SINGULAR: AdmissibleFeedback,
        Regime.SATURATED_INTERIOR: SaturatedFeedback,
        Regime.SATURATED_BOUNDARY: SaturatedBoundaryFeedback,
    }[geom.regime]
    return cls(geom)


def feedback_no_singular(geom, x):
    return NoSingularFeedback(geom)(x)


def feedback_admissible(geom, x):
    return AdmissibleFeedback(geom)(x)


def feedback_saturated(geom, x):
    return SaturatedFeedback(geom)(x)


def feedback_saturated_boundary(geom, x):
    return SaturatedBoundaryFeedback(geom)(x)


def attainability_feedback(target: TargetBox, x):
    if target.contains(x):
        raise TargetReached(f"state {tuple(x)} is in the target")
    return 1.0 if x[0] > target.S1_bar else 0.0


# -- closed loop -------------------------------------------------------------------------

MAX_SWITCHES = {
    Regime.NO_SINGULAR: 2,
    Regime.ADMISSIBLE_SINGULAR: 2,
    Regime.SATURATED_INTERIOR: 3,
    Regime.SATURATED_BOUNDARY: 3,
}


@dataclass(frozen=True)
class Switch:
    t: float
    state: tuple
    u_from: float
    u_to: float
    arc_from: str
    arc_to: str


@dataclass
class ArcSegment:
    mode: str
    t0: float
    t1: float
    sol: object  # ode.Solution over [t0, t1]


@dataclass
class Trajectory:
    params: ModelParams
    segments: list
    switches: list
    reached: bool
    u_of: Callable = field(repr=False, default=None)

    @property
    def word(self) -> str:
        return ".".join(seg.mode for seg in self.segments)

    @property
    def final_time(self) -> float:
        return self.segments[-1].t1 if self.segments else 0.0

    @property
    def final_state(self):
        return tuple(self.segments[-1].sol.y_final) if self.segments else None

    @property
    def n_switches(self) -> int:
        return len(self.switches)

    def segment_at(self, t):
        for seg in self.segments:
            if seg.t0 <= t <= seg.t1:
                return seg
        raise ValueError(f"t={t} outside [0, {self.final_time}]")

    def state(self, t):
        return self.segment_at(t).sol(t)

    @property
    def nodes(self) -> np.ndarray:
        """Rows (t, s1, s2, u) at integrator knots, arcs concatenated."""
        rows = []
        for seg in self.segments:
            for t, y in zip(seg.sol.t, seg.sol.y):
                rows.append((t, y[0], y[1], self.u_of(seg.mode, y)))
        return np.array(rows)

    def to_csv(self, dest=None) -> str:
        buf = io.StringIO()
        buf.write("t,s1,s2,u\n")
        for row in self.nodes:
            buf.write(",".join(f"{v:.17g}" for v in row) + "\n")
        return _emit(buf.getvalue(), dest)

    def switches_csv(self, dest=None) -> str:
        buf = io.StringIO()
        buf.write("t,s1,s2,u_from,u_to\n")
        for sw in self.switches:
            buf.write(f"{sw.t:.17g},{sw.state[0]:.17g},{sw.state[1]:.17g},{sw.u_from:.17g},{sw.u_to:.17g}\n")
        return _emit(buf.getvalue(), dest)


def _emit(text, dest):
    if dest is not None:
        with open(dest, "w", newline="") as fh:
            fh.write(text)
    return text


def check_grammar(word: str, regime: Regime) -> list[str]:
    """Problems with an arc word for a regime; empty when admissible."""
    arcs = word.split(".") if word else []
    out = []
    if any(a not in (B0, B1, S_ARC) for a in arcs):
        out.append(f"unknown arc symbol in {word!r}")
    if any(x == y for x, y in zip(arcs, arcs[1:])):
        out.append(f"repeated arc in {word!r}")
    if arcs.count(S_ARC) > 1:
        out.append(f"more than one singular arc in {word!r}")
    if regime == Regime.NO_SINGULAR and S_ARC in arcs:
        out.append("singular arc without a singular locus")
    if len(arcs) - 1 > MAX_SWITCHES[regime]:
        out.append(f"{len(arcs) - 1} switches exceed {MAX_SWITCHES[regime]} for {regime.value}")
    return out


def _at_corner(params, t, x):
    """Arrival at the target corner along sigma2, within the Z1 slack."""
    tol = Z1_TOL_FRAC * params.M
    return x[0] <= t.S1_bar and x[1] - t.S2_bar <= tol and t.S1_bar - x[0] <= tol


def target_face_events(target: TargetBox) -> list[EventFunction]:
    """Terminal crossings of the two target faces that land inside T.

    A single step can clip the target corner and leave it again, which a
    sign test on max(S1 - S1_bar, S2 - S2_bar) at step ends would miss.
    """
    s1b, s2b = target.S1_bar, target.S2_bar
    return [
        EventFunction(lambda _t, y: y[0] - s1b, EventKind.HITS_TARGET_EDGE, direction=-1, name="T-S1",
                      accept=lambda y: y[1] <= s2b),
        EventFunction(lambda _t, y: y[1] - s2b, EventKind.HITS_TARGET_EDGE, direction=-1, name="T-S2",
                      accept=lambda y: y[0] <= s1b),
    ]


def simulate_closed_loop(params: ModelParams, geom: SynthesisGeometry | None, feedback: Feedback, x0,
                         cfg: IntegratorConfig | None = None, horizon: float | None = None,
                         max_arcs: int = 12) -> Trajectory:
    """Event-driven closed loop: run one mode until the feedback's mode changes.

    The mode-change indicator is located by bisection on the dense output,
    so every arc ends just past the boundary it crosses. On singular arcs
    S2 is pinned to S2* and u_s is applied exactly.
    """
    cfg = cfg or IntegratorConfig()
    target, M, s2s = feedback.target, params.M, params.s2_star
    x = np.array(x0, dtype=float)
    if not (x[0] >= 0 and x[1] >= 0 and x[0] + x[1] < M):
        raise ValueError(f"start {tuple(x0)} is outside D")
    if target.contains(x):
        raise ValueError(f"start {tuple(x0)} is already in the target")
    if horizon is None:
        horizon = 1e4 / min(params.solub.a, params.growth.mu_bar)

    def u_of(mode, y):
        return feedback.control_for(mode, y) if mode != IN_T else 0.0

    g = params.growth
    segments, switches = [], []
    t = 0.0
    mode = feedback.arc(x)
    for _ in range(max_arcs):
        if mode == S_ARC:
            x[1] = s2s

            def fld(_t, y):
                return (-g._mu(s2s) * (M - y[0] - s2s), 0.0)
        else:
            uu = 1.0 if mode == B1 else 0.0

            def fld(_t, y, uu=uu):
                return params.field(y[0], y[1], uu)

        cur = mode
        ev = EventFunction(lambda _t, y, cur=cur: 1.0 if feedback.arc(y, cur) == cur else -1.0,
                           EventKind.CROSSES_CURVE, direction=-1, name="mode")
        sol, evs = integrate(fld, x, (t, horizon), cfg, [ev, *target_face_events(target)])
        if not evs:
            segments.append(ArcSegment(mode, t, sol.t_final, sol))
            return Trajectory(params, segments, switches, False, u_of)
        new = feedback.arc(sol.y_final, mode)
        if new == S_ARC and mode != S_ARC:
            # the band edge is only a detector; carry the bang arc onto S2 = S2* itself
            hit = EventFunction(lambda _t, y: y[1] - s2s, EventKind.CROSSES_S2_STAR, name="S2*")
            sol, evs = integrate(fld, x, (t, horizon), cfg, [hit])
        segments.append(ArcSegment(mode, t, sol.t_final, sol))
        t, x = sol.t_final, np.array(sol.y_final)
        new = feedback.arc(x, mode)
        if new == IN_T or (mode == B1 and _at_corner(params, target, x)):
            return Trajectory(params, segments, switches, True, u_of)
        switches.append(Switch(t, (float(x[0]), float(x[1])), u_of(mode, x), u_of(new, x), mode, new))
        mode = new
    word = ".".join(seg.mode for seg in segments)
    last = switches[-1] if switches else None
    raise IntegrationError(f"more than {max_arcs} arcs from {tuple(x0)} ({word}, last switch {last}); "
                           "switching rule chatters")


# -- Pontryagin consistency along a closed-loop trajectory ------------------------------

@dataclass
class ExtremalReport:
    exit_face: str  # "S1", "S2" or "corner"
    alpha: float | None
    h_max: float
    phi_switch_max: float
    phi_singular_max: float
    lambda2_min_outside_z1: float
    sign_violations: int
    failures: list = field(default_factory=list)
    samples: np.ndarray | None = field(default=None, repr=False)  # rows t, s1, s2, u, lambda1, lambda2, phi, H

    @property
    def ok(self) -> bool:
        return not self.failures


def _adjoint_rhs(params: ModelParams, seg: ArcSegment, u_of):
    g, sol, M = params.growth, params.solub, params.M

    def rhs(t, y):
        x = seg.sol(t)
        s1, s2 = x
        u = u_of(seg.mode, x)
        m, mp = g._mu(s2), g._mu_prime(s2)
        fp = sol.f_prime(s1)
        k = mp * (M - s1 - s2) - m
        out = np.empty(4)
        for j in (0, 2):  # two basis solutions side by side
            l1, l2 = y[j], y[j + 1]
            out[j] = -u * (l2 - l1) * fp - l2 * m
            out[j + 1] = l2 * k
        return out

    return rhs


def extremal_check(params: ModelParams, target: TargetBox, traj: Trajectory, geom: SynthesisGeometry | None = None,
                   cfg: IntegratorConfig | None = None, tol_h: float = 1e-5, tol_phi: float = 1e-5,
                   n_per_arc: int = 200) -> ExtremalReport:
    """Integrate the adjoint backward from the transversality condition of the exit face.

    The costate is normalised by lambda0 = 1 through H(tf) = 0. At a corner
    exit the face weight alpha is fixed by phi = 0 at the last switch.
    """
    if not traj.reached:
        raise ValueError("trajectory did not reach the target")
    cfg = cfg or IntegratorConfig(rel_tol=1e-12, abs_tol=1e-14)
    M = params.M
    xf = np.array(traj.final_state)
    face_tol = 1e-7 * M
    on1 = abs(xf[0] - target.S1_bar) <= face_tol
    on2 = abs(xf[1] - target.S2_bar) <= face_tol
    face = "corner" if on1 and on2 else ("S1" if on1 else "S2")

    # basis solutions from (1, 0) and (0, 1), arcs processed last to first
    y = np.array([1.0, 0.0, 0.0, 1.0])
    pieces = []
    for seg in reversed(traj.segments):
        sol, _ = integrate(_adjoint_rhs(params, seg, traj.u_of), y, (seg.t1, seg.t0), cfg)
        pieces.append((seg, sol))
        y = sol.y_final
    pieces.reverse()

    def basis_at(t, seg_idx):
        return pieces[seg_idx][1](t)

    last_seg = traj.segments[-1]
    uf = traj.u_of(last_seg.mode, xf)
    ff = params.solub.f(xf[0])
    gf = params.removal(xf[0], xf[1])

    def scale(alpha):
        # H(tf) = 1 + c (u phi f - lambda2 g) = 0 with lambda(tf) = c (alpha, 1 - alpha)
        q = uf * (1 - 2 * alpha) * ff - (1 - alpha) * gf
        return -1.0 / q if q < 0 else None

    alphas = {"S1": [1.0], "S2": [0.0]}.get(face)
    if face == "corner":
        if traj.switches:
            sw = traj.switches[-1]
            b = basis_at(sw.t, len(traj.segments) - 1)
            pa, pb = b[1] - b[0], b[3] - b[2]
            alphas = [pb / (pb - pa)] if pb != pa else [0.0]
        else:
            alphas = [0.0, 1.0, 0.5]

    best = None
    for alpha in alphas:
        rep = _evaluate(params, target, traj, geom, pieces, alpha, scale(alpha), face, tol_h, tol_phi, n_per_arc)
        if best is None or len(rep.failures) < len(best.failures):
            best = rep
        if rep.ok:
            break
    return best


def _evaluate(params, target, traj, geom, pieces, alpha, c, face, tol_h, tol_phi, n_per_arc):
    fails = []
    if not (0.0 <= alpha <= 1.0):
        fails.append(f"corner weight alpha={alpha:.6g} outside [0, 1]")
    if c is None:
        return ExtremalReport(face, alpha, math.inf, math.inf, math.inf, -math.inf, 0,
                              ["no positive costate scale satisfies H(tf) = 0"])
    sol = params.solub
    part = geom.partition if geom is not None else None
    rows = []
    for seg, adj in pieces:
        ts = np.linspace(seg.t0, seg.t1, n_per_arc)
        for t in ts:
            x = seg.sol(t)
            b = adj(t)
            l1 = c * (alpha * b[0] + (1 - alpha) * b[2])
            l2 = c * (alpha * b[1] + (1 - alpha) * b[3])
            u = traj.u_of(seg.mode, x)
            phi = l2 - l1
            h = 1.0 + u * phi * sol.f(x[0]) - l2 * params.removal(x[0], x[1])
            rows.append((t, x[0], x[1], u, l1, l2, phi, h, seg.mode == S_ARC))
    arr = np.array(rows, dtype=float)
    h_max = float(np.max(np.abs(arr[:, 7])))
    if h_max >= tol_h:
        fails.append(f"|H| reaches {h_max:.3e}")
    phi, u = arr[:, 6], arr[:, 3]
    sing = arr[:, 8] > 0
    bang1 = (~sing) & (u == 1.0)
    bang0 = (~sing) & (u == 0.0)
    viol = int(np.sum(bang1 & (phi > tol_phi)) + np.sum(bang0 & (phi < -tol_phi)))
    if viol:
        fails.append(f"{viol} samples with sign(phi) opposite to the applied control")
    phi_sing = float(np.max(np.abs(phi[sing]))) if np.any(sing) else 0.0
    if phi_sing >= tol_phi:
        fails.append(f"|phi| reaches {phi_sing:.3e} on a singular arc")
    # switch points: the end of each arc but the last
    phi_sw = 0.0
    for k, sw in enumerate(traj.switches):
        seg, adj = pieces[k]
        b = adj(seg.t1)
        l1 = c * (alpha * b[0] + (1 - alpha) * b[2])
        l2 = c * (alpha * b[1] + (1 - alpha) * b[3])
        phi_sw = max(phi_sw, abs(l2 - l1))
    if phi_sw >= tol_phi:
        fails.append(f"|phi| reaches {phi_sw:.3e} at a switch")
    lam2_min = math.inf
    if part is not None:
        outside = np.array([not part.in_z1((r[1], r[2]), slack=True) and not target.contains((r[1], r[2]))
                            for r in arr])
        if np.any(outside):
            lam2_min = float(np.min(arr[outside, 5]))
            if lam2_min <= 0.0:
                fails.append(f"lambda2 = {lam2_min:.3e} <= 0 outside Z1")
    return ExtremalReport(face, alpha, h_max, phi_sw, phi_sing, lam2_min, viol, fails, arr[:, :8])

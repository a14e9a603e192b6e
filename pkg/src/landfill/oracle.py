"""Brute-force minimal-time references: a semi-Lagrangian HJB grid and a switching-time search."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .geometry import Regime
from .model import ModelParams, TargetBox, singular_control
from .ode import EventFunction, EventKind, IntegratorConfig, integrate
from .synthesis import (B0, B1, S_ARC, AttainabilityFeedback, Trajectory, simulate_closed_loop,
                        target_face_events)

V_CAP = 1e6  # stands in for +inf before a node is reached
CELLS_PER_STEP = (1, 2, 4, 8, 16, 32, 64)  # foot travel options per update, in grid cells
S1_GRADING = 0.25  # log-graded axis offsets, as fractions of M; None for uniform
S2_GRADING = 0.5


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Axis:
    """Grid axis uniform in xi, with s = xi (linear) or s = eps * (exp(xi) - 1) (log-graded)."""

    d: float  # xi step
    n: int
    eps: float | None = None

    @classmethod
    def aligned(cls, M: float, n: int, edge: float, eps: float | None = None) -> "Axis":
        """Axis spanning [0, M] (or slightly more) with a node exactly on ``edge``.

        Linear axes take the finest step that puts a node on the edge; graded
        axes keep the top node at M and adjust the grading offset instead.
        """
        if eps is None:
            d = M / (n - 1)
            k = math.floor(edge / d * (1 + 1e-12))
            return cls(edge / k if k >= 1 else d, n)

        def nodes_below(e):
            return (n - 1) * math.log1p(edge / e) / math.log1p(M / e)

        k = min(max(1, round(nodes_below(eps))), n - 2)
        lo, hi = 1e-12 * M, 1e12 * M
        if not nodes_below(hi) <= k <= nodes_below(lo):
            return cls(math.log1p(M / eps) / (n - 1), n, eps)
        e = brentq(lambda e: nodes_below(e) - k, lo, hi, xtol=1e-14 * M, rtol=1e-14)
        return cls(math.log1p(edge / e) / k, n, e)

    def to_xi(self, s):
        return s if self.eps is None else np.log1p(np.asarray(s) / self.eps)

    def from_xi(self, xi):
        return xi if self.eps is None else self.eps * np.expm1(xi)

    @property
    def nodes(self) -> np.ndarray:
        return self.from_xi(np.arange(self.n) * self.d)

    @property
    def top(self) -> float:
        return float(self.nodes[-1])

    def describe(self) -> str:
        return f"linear:d={self.d:.17g}" if self.eps is None else f"log:eps={self.eps:.17g},d={self.d:.17g}"


@dataclass
class ValueGrid:
    M: float
    n1: int
    n2: int
    values: np.ndarray  # shape (n1, n2), index [i, j] <-> (axis1.nodes[i], axis2.nodes[j])
    control_grid: tuple
    iterations: int = 0
    converged: bool = False
    target: TargetBox | None = None
    axis1: Axis | None = None
    axis2: Axis | None = None

    def __post_init__(self):
        if self.axis1 is None:
            self.axis1 = Axis(self.M / (self.n1 - 1), self.n1)
        if self.axis2 is None:
            self.axis2 = Axis(self.M / (self.n2 - 1), self.n2)

    @property
    def axes(self):
        return self.axis1.nodes, self.axis2.nodes

    @property
    def spacing(self):
        """Per-cell widths along each axis."""
        a1, a2 = self.axes
        return np.diff(a1), np.diff(a2)

    def in_hull(self, x) -> bool:
        return 0.0 <= x[0] <= self.axis1.top * (1 + 1e-12) and 0.0 <= x[1] <= self.axis2.top * (1 + 1e-12)

    def __call__(self, x):
        if not self.in_hull(x):
            raise ValueError(f"{tuple(x)} outside the grid")
        if self.target is not None and self.target.contains(x):
            return 0.0
        idx, w = _bilinear(np.array([x[0]]), np.array([x[1]]), self.axis1, self.axis2)
        return float(np.sum(self.values.ravel()[idx[0]] * w[0]))

    def to_csv(self, dest=None) -> str:
        buf = io.StringIO()
        buf.write(f"# n1={self.n1} n2={self.n2} M={self.M:.17g} "
                  f"axis1={self.axis1.describe()} axis2={self.axis2.describe()}\n")
        buf.write("# controls=" + " ".join(f"{u:.6g}" if isinstance(u, float) else str(u)
                                        for u in self.control_grid) + "\n")
        buf.write(f"# iterations={self.iterations} converged={int(self.converged)} cap={V_CAP:g}\n")
        buf.write("s1,s2,v\n")
        a1, a2 = self.axes
        for i in range(self.n1):
            for j in range(self.n2):
                buf.write(f"{a1[i]:.17g},{a2[j]:.17g},{self.values[i, j]:.17g}\n")
        text = buf.getvalue()
        if dest is not None:
            with open(dest, "w", newline="") as fh:
                fh.write(text)
        return text


def _bilinear(p1, p2, ax1: Axis, ax2: Axis):
    """Flat corner indices and weights, bilinear in the axes' xi coordinates."""
    n1, n2 = ax1.n, ax2.n
    x1, x2 = ax1.to_xi(p1) / ax1.d, ax2.to_xi(p2) / ax2.d
    i = np.clip(np.floor(x1).astype(int), 0, n1 - 2)
    j = np.clip(np.floor(x2).astype(int), 0, n2 - 2)
    a = np.clip(x1 - i, 0.0, 1.0)
    b = np.clip(x2 - j, 0.0, 1.0)
    idx = np.stack([i * n2 + j, (i + 1) * n2 + j, i * n2 + j + 1, (i + 1) * n2 + j + 1], axis=-1)
    w = np.stack([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b], axis=-1)
    return idx, w


def _flow_to_foot(params, target, s1, s2, U, tau, substeps):
    """Constant-control RK4 flow over time tau, tracking the first entry into T.

    Returns the foot (p1, p2), the fraction of tau elapsed at entry (linear
    within the substep that ends inside T; 1 if never) and the entry mask.
    """
    s1b, s2b = target.S1_bar, target.S2_bar
    h = tau / substeps
    y1, y2 = np.broadcast_to(s1, U.shape).copy(), np.broadcast_to(s2, U.shape).copy()
    frac = np.ones(U.shape)
    done = np.zeros(U.shape, dtype=bool)

    def f(a, b):
        return params.field(np.maximum(a, 0.0), np.maximum(b, 0.0), U)

    for k in range(substeps):
        k1 = f(y1, y2)
        k2 = f(y1 + h / 2 * k1[0], y2 + h / 2 * k1[1])
        k3 = f(y1 + h / 2 * k2[0], y2 + h / 2 * k2[1])
        k4 = f(y1 + h * k3[0], y2 + h * k3[1])
        b1 = np.maximum(y1 + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]), 0.0)
        b2 = np.maximum(y2 + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]), 0.0)
        hit = ~done & (b1 <= s1b) & (b2 <= s2b)
        if np.any(hit):
            with np.errstate(divide="ignore", invalid="ignore"):
                r1 = np.where(y1 > s1b, (y1 - s1b) / (y1 - b1), 0.0)
                r2 = np.where(y2 > s2b, (y2 - s2b) / (y2 - b2), 0.0)
            r = np.clip(np.nan_to_num(np.maximum(r1, r2), nan=1.0), 0.0, 1.0)
            frac = np.where(hit, (k + r) / substeps, frac)
            done |= hit
        y1, y2 = b1, b2
    return y1, y2, frac, done


def solve_hjb(params: ModelParams, target: TargetBox, n: int = 128, n_interior: int = 9,
              cells=CELLS_PER_STEP, substeps: int = 4, s1_grading: float | None = S1_GRADING,
              s2_grading: float | None = S2_GRADING,
              max_iter: int = 200_000, tol: float = 1e-7) -> ValueGrid:
    """Minimal-time function V on an n x n grid over [0, M]^2 by Jacobi value iteration.

    V(x) = min_u [tau_u + V(Phi_u(tau_u, x))], where each control gets its own
    step tau_u = cells * h / |F(x, u)| so the foot always travels a fixed
    number of cells; few long steps keep the interpolation bias of convex V
    small. The node's own bilinear weight is eliminated from each update, and
    a foot point inside T costs only the fraction of tau_u needed to reach it.
    """
    M = params.M
    # node lines on S1 = S1_bar and S2 = S2_bar, so T is represented exactly
    axis1 = Axis.aligned(M, n, target.S1_bar, None if s1_grading is None else s1_grading * M)
    axis2 = Axis.aligned(M, n, target.S2_bar, None if s2_grading is None else s2_grading * M)
    ax1, ax2 = axis1.nodes, axis2.nodes
    S1, S2 = np.meshgrid(ax1, ax2, indexing="ij")
    s1, s2 = S1.ravel(), S2.ravel()
    N = s1.size
    inside = s1 + s2 < M - 1e-12 * M
    in_t = (s1 <= target.S1_bar * (1 + 1e-12)) & (s2 <= target.S2_bar * (1 + 1e-12))
    free = inside & ~in_t

    controls = [0.0, 1.0] + list(np.linspace(0.0, 1.0, n_interior + 2)[1:-1])
    base = np.array(controls)
    if params.has_singular_arc:
        with np.errstate(divide="ignore", invalid="ignore"):
            us = np.clip(np.nan_to_num(singular_control(params, s1), nan=0.0, posinf=1.0), 0.0, 1.0)
        U = np.vstack([np.broadcast_to(base[:, None], (base.size, N)), us[None, :]])
        controls.append("u_s")
    else:
        U = np.broadcast_to(base[:, None], (base.size, N))
    U = np.ascontiguousarray(U)

    # one candidate per (control, travel distance); travel measured in local cells,
    # integrated in substeps of at most one cell
    steps = np.atleast_1d(np.asarray(cells, dtype=float))
    w1 = np.repeat(np.gradient(ax1), n)
    w2 = np.tile(np.gradient(ax2), n)
    F1, F2 = params.field(s1[None, :], s2[None, :], U)
    cell_speed = np.hypot(F1 / w1, F2 / w2)
    mov = cell_speed > 1e-12
    # RK4 substeps stay below 1/L for a Lipschitz bound L of the field on D
    g = params.growth
    lip = 2.0 * params.solub.a + g.mu_bar * (1.0 + M / g.Ks)
    parts = []
    for dist in steps:
        m = max(substeps, int(math.ceil(dist)))
        tau_d = np.where(mov, np.minimum(dist / np.where(mov, cell_speed, 1.0), m / lip), 0.0)
        parts.append((tau_d, mov, *_flow_to_foot(params, target, s1[None, :], s2[None, :], U, tau_d, m)))
    tau, moving, p1, p2, frac, foot_in_t = (np.concatenate(z, axis=0) for z in zip(*parts))
    idx, w = _bilinear(p1, p2, axis1, axis2)
    node = np.arange(N)[None, :, None]
    w_self = np.sum(np.where(idx == node, w, 0.0), axis=-1)
    w = np.where(idx == node, 0.0, w)

    # a path entering T pays only the time until entry
    step_cost = np.where(foot_in_t, frac * tau, tau)
    w = np.where(foot_in_t[..., None], 0.0, w)
    w_self = np.where(foot_in_t, 0.0, w_self)
    denom = 1.0 - w_self
    valid = moving & (denom > 1e-12)
    step_cost = np.where(valid, step_cost / np.where(valid, denom, 1.0), np.inf)
    w = np.where(valid[..., None], w / np.where(valid, denom, 1.0)[..., None], 0.0)

    # points off D copy the nearest node of D below them in S2
    jmax = np.floor(axis2.to_xi(np.maximum(M - ax1, 0.0)) / axis2.d - 1e-9).astype(int).clip(0, n - 1)
    src = (np.arange(n)[:, None] * n + np.minimum(np.arange(n)[None, :], jmax[:, None])).ravel()
    src = np.where(inside, np.arange(N), src)

    V = np.full(N, V_CAP)
    V[in_t] = 0.0
    V = V[src]
    fidx = np.nonzero(free)[0]
    scale = np.maximum(np.min(np.where(valid, tau, np.inf), axis=0), 1e-300)[fidx]
    it = 0
    converged = False
    delta = math.inf
    sc_f, w_f, i_f = step_cost[:, fidx], w[:, fidx, :], idx[:, fidx, :]
    for it in range(1, max_iter + 1):
        cand = sc_f + np.einsum("knc,knc->kn", w_f, V[i_f])
        new = np.minimum(cand.min(axis=0), V_CAP)
        delta = np.max(np.abs(new - V[fidx]) / scale)
        V[fidx] = new
        V = V[src]
        if delta < tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"value iteration did not converge in {max_iter} sweeps (last {delta:.3e})")
    return ValueGrid(M, n, n, V.reshape(n, n), tuple(controls), it, converged, target, axis1, axis2)


# -- switching-time search over arc words ------------------------------------------------

GRAMMAR = {
    Regime.NO_SINGULAR: ("B0", "B1", "B1.B0", "B0.B1", "B0.B1.B0"),
    Regime.ADMISSIBLE_SINGULAR: ("B0", "B1", "B1.B0", "B0.B1", "B0.B1.B0",
                                 "B0.S.B1", "B1.S.B1", "B0.S.B0", "B1.S.B0"),
}
GRAMMAR[Regime.SATURATED_INTERIOR] = GRAMMAR[Regime.ADMISSIBLE_SINGULAR] + ("B0.S.B1.B0", "B1.S.B1.B0")
GRAMMAR[Regime.SATURATED_BOUNDARY] = GRAMMAR[Regime.SATURATED_INTERIOR]


@dataclass
class StructuredCandidate:
    word: str
    switch_times: tuple
    final_time: float

    def __post_init__(self):
        if any(b < a for a, b in zip(self.switch_times, self.switch_times[1:])):
            raise ValueError("switch times must be non-decreasing")
        if len(self.word.split(".")) > 4:
            raise ValueError("arc words are limited to four arcs")


class _WordSearch:
    """Nested grid + golden-section minimisation of the arrival time for one word.

    Bang arcs followed by S end on the S2 = S2* event; other non-final arcs
    carry a free duration. Each arc is integrated once with dense output and
    reused across all durations tried below it in the nesting.
    """

    def __init__(self, params, target, horizon, cfg, n_grid=24, n_golden=40):
        self.p, self.t, self.horizon, self.cfg = params, target, horizon, cfg
        self.n_grid, self.n_golden = n_grid, n_golden
        self.s2s = params.s2_star

    def _field(self, arc):
        p, s2s = self.p, self.s2s
        if arc == S_ARC:
            return lambda _t, y: (-p.growth._mu(s2s) * (p.M - y[0] - s2s), 0.0)
        u = 1.0 if arc == B1 else 0.0
        return lambda _t, y: p.field(y[0], y[1], u)

    def _target_events(self):
        return target_face_events(self.t)

    def _final(self, arc, x, t0):
        if self.t.contains(x):
            return t0
        if arc == B0 and x[0] > self.t.S1_bar:
            return math.inf  # S1 is frozen under u = 0
        if arc == S_ARC:
            return math.inf
        sol, evs = integrate(self._field(arc), x, (t0, self.horizon), self.cfg, self._target_events())
        return evs[-1].time if evs else math.inf

    def _min1d(self, fn, lo, hi):
        if hi <= lo:
            v = fn(lo)
            return v[0], (lo,) + v[1]
        xs = np.linspace(lo, hi, self.n_grid)
        vals = [fn(x) for x in xs]
        k = int(np.argmin([v[0] for v in vals]))
        if not math.isfinite(vals[k][0]):
            return math.inf, (lo,)
        a, b = xs[max(k - 1, 0)], xs[min(k + 1, len(xs) - 1)]
        best = (vals[k][0], (xs[k],) + vals[k][1])
        gr = (math.sqrt(5) - 1) / 2
        c, d = b - gr * (b - a), a + gr * (b - a)
        fc, fd = fn(c), fn(d)
        for _ in range(self.n_golden):
            if fc[0] <= fd[0]:
                b, d, fd = d, c, fc
                c = b - gr * (b - a)
                fc = fn(c)
            else:
                a, c, fc = c, d, fd
                d = a + gr * (b - a)
                fd = fn(d)
        for x, v in ((c, fc), (d, fd)):
            if v[0] < best[0]:
                best = (v[0], (x,) + v[1])
        return best

    def search(self, arcs, x, t0):
        """Best (arrival time, switch times) for the arc list from (x, t0)."""
        if t0 > self.horizon:
            return math.inf, ()
        arc = arcs[0]
        if len(arcs) == 1:
            return self._final(arc, x, t0), ()
        nxt = arcs[1]
        if arc != S_ARC and nxt == S_ARC:
            ev = EventFunction(lambda _t, y: y[1] - self.s2s, EventKind.CROSSES_S2_STAR, name="S2*")
            sol, evs = integrate(self._field(arc), x, (t0, self.horizon), self.cfg, [ev, *self._target_events()])
            if not evs or evs[-1].name != "S2*":
                return math.inf, ()
            te = evs[-1].time
            y = np.array([evs[-1].state[0], self.s2s])
            v, rest = self.search(arcs[1:], y, te)
            return v, (te,) + rest
        # free duration
        if arc == S_ARC:
            # the arc is admissible while u_s <= 1, i.e. S1 >= S1_min, and S1 <= M - S2*
            lo_s1 = _s1_min_root(self.p)
            if not lo_s1 <= x[0] <= self.p.M - self.s2s:
                return math.inf, ()
            ev = EventFunction(lambda _t, y: y[0] - lo_s1, EventKind.CROSSES_CURVE, direction=-1, name="sat")
            sol, evs = integrate(self._field(arc), x, (t0, self.horizon), self.cfg, [ev])
        else:
            sol, evs = integrate(self._field(arc), x, (t0, self.horizon), self.cfg, self._target_events())
        t_lo, t_end = t0, sol.t_final
        if arcs[1:] == [B0] and x[0] > self.t.S1_bar:
            # a closing u = 0 arc needs S1 already in the target range
            if sol.y_final[0] > self.t.S1_bar:
                return math.inf, ()
            k = int(np.argmax(sol.y[:, 0] <= self.t.S1_bar))
            t_lo = _bisect_time(lambda s: sol(s)[0] - self.t.S1_bar, sol.t[k - 1], sol.t[k])

        def fn(ts):
            return self.search(arcs[1:], sol(ts), ts)

        return self._min1d(fn, t_lo, t_end)


def _bisect_time(g, lo, hi, n_iter=80):
    """Crossing of a decreasing scalar g between lo (g > 0) and hi (g <= 0)."""
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        if g(mid) > 0:
            lo = mid
        else:
            hi = mid
    return hi


def _s1_min_root(params):
    from .geometry import saturation_s1

    return saturation_s1(params)


def best_structured(params: ModelParams, target: TargetBox, x0, words, cfg: IntegratorConfig | None = None,
                    horizon: float | None = None, tie_rel: float = 1e-6, n_grid: int = 24, n_golden: int = 40):
    """Best arc word and switch times from x0; shorter words win near-ties.

    Returns (StructuredCandidate, time, per-word times).
    """
    cfg = cfg or IntegratorConfig(rel_tol=1e-9, abs_tol=1e-12)
    x0 = np.asarray(x0, dtype=float)
    if target.contains(x0):
        raise ValueError("start is already in the target")
    if horizon is None:
        att = attainability_time(params, target, x0)
        horizon = 50.0 * att
    ws = _WordSearch(params, target, horizon, cfg, n_grid, n_golden)
    table = {}
    best = None
    for word in sorted(words, key=lambda w: (len(w.split(".")), w)):
        arcs = word.split(".")
        if S_ARC in arcs and not params.has_singular_arc:
            continue
        v, times = ws.search(arcs, x0, 0.0)
        table[word] = v
        if not math.isfinite(v):
            continue
        if best is None or v < best[1] * (1 - tie_rel):
            best = (StructuredCandidate(word, tuple(times), v), v)
    if best is None:
        raise RuntimeError(f"no candidate word reaches the target from {tuple(x0)} within {horizon:g}")
    return best[0], best[1], table


def attainability_time(params, target, x0, cfg=None):
    traj = simulate_closed_loop(params, None, AttainabilityFeedback(params, target), x0, cfg)
    if not traj.reached:
        raise RuntimeError("attainability feedback did not reach the target")
    return traj.final_time


# -- comparison ---------------------------------------------------------------------------

@dataclass
class CompareReport:
    start: tuple
    t_feedback: float
    v_oracle: float
    rel_gap: float
    structured_time: float | None = None
    structured_word: str | None = None
    structured_gap: float | None = None
    flags: list = field(default_factory=list)

    def as_line(self) -> str:
        s = (f"start=({self.start[0]:.6g},{self.start[1]:.6g}) t_fb={self.t_feedback:.6g} "
             f"V={self.v_oracle:.6g} gap={self.rel_gap:+.4%}")
        if self.structured_time is not None:
            s += f" search={self.structured_time:.6g} [{self.structured_word}] gap={self.structured_gap:+.4%}"
        return s + ("" if not self.flags else " FLAGS: " + "; ".join(self.flags))


def compare(traj: Trajectory, vg: ValueGrid, x0=None, structured=None, tol_above: float = 0.02,
            tol_below: float = 0.01) -> CompareReport:
    """Relative gap (t_feedback - V(x0)) / V(x0), plus the optional structured-search gap."""
    x0 = tuple(traj.segments[0].sol.y[0]) if x0 is None else tuple(x0)
    if not vg.in_hull(x0):
        raise ValueError(f"start {x0} outside the grid hull")
    tf = traj.final_time
    v = vg(x0)
    gap = (tf - v) / v if v > 0 else (0.0 if tf == 0 else math.inf)
    rep = CompareReport(x0, tf, v, gap)
    if gap > tol_above:
        rep.flags.append(f"feedback exceeds oracle by {gap:.3%}")
    if gap < -tol_below:
        rep.flags.append(f"feedback below oracle by {-gap:.3%} (beyond interpolation budget)")
    if structured is not None:
        cand, t_s = structured[:2]
        rep.structured_time, rep.structured_word = t_s, cand.word
        rep.structured_gap = (tf - t_s) / t_s
    return rep


# -- start selection and error budget -------------------------------------------------------

BIOMASS_MARGIN = 0.1  # starts keep M - S1 - S2 >= this * M


def sample_starts(partition, n: int = 12, seed: int = 0, margin: float = BIOMASS_MARGIN,
                  max_draws: int = 200_000) -> list[tuple]:
    """Deterministic starts in D \\ T spread over every non-empty partition region.

    Regions are filled round-robin from one uniform stream. Starts keep a
    biomass margin because V grows like -log(M - S1 - S2) at the
    biomass-free edge, where grid interpolation is unreliable.
    """
    from .geometry import Region

    params, target = partition.params, partition.target
    M = params.M
    rng = np.random.default_rng(seed)
    pools: dict = {r: [] for r in Region if r != Region.T}
    for _ in range(max_draws):
        x = rng.uniform(0.0, M, 2)
        if M - x.sum() < margin * M or target.contains(x):
            continue
        r = partition.membership(x)
        if len(pools[r]) < n:
            pools[r].append((float(x[0]), float(x[1])))
        if all(len(v) >= n for v in pools.values()):
            break
    order = [r for r in pools if pools[r]]
    out, k = [], 0
    while len(out) < n and any(pools[r] for r in order):
        r = order[k % len(order)]
        if pools[r]:
            out.append(pools[r].pop(0))
        k += 1
    return out


def interpolation_budget(vg: ValueGrid, params: ModelParams, x, rel: float = 0.01, cells: float = 2.0) -> float:
    """Allowed oracle overshoot at x: ``rel`` of V(x), or the time the fastest
    pure control needs to cross ``cells`` local grid cells, whichever is larger.
    """
    a1, a2 = vg.axes
    i = int(np.clip(np.searchsorted(a1, x[0]) - 1, 0, vg.n1 - 2))
    j = int(np.clip(np.searchsorted(a2, x[1]) - 1, 0, vg.n2 - 2))
    cw = math.hypot(a1[i + 1] - a1[i], a2[j + 1] - a2[j]) / math.sqrt(2.0)
    speed = max(math.hypot(*params.field(x[0], x[1], u)) for u in (0.0, 1.0))
    t_cell = cells * cw / speed if speed > 0 else math.inf
    return max(rel * vg(x), t_cell)

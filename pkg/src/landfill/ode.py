"""ODE integration with dense output and bisection-located events.

Adaptive integration drives scipy's embedded Runge-Kutta steppers one step
at a time; event functions are watched at step ends and localised by
bisection on the step's dense interpolant. A classical fixed-step RK4 with
cubic Hermite dense output is available for order studies.
"""
from __future__ import annotations

import bisect
import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import DOP853, RK45


class IntegrationError(RuntimeError):
    pass


class StepSizeError(IntegrationError):
    pass


class DomainError(IntegrationError):
    pass


class SingularityError(IntegrationError):
    """The independent variable S1 came too close to the f(0) = 0 singularity."""


class EventKind(str, enum.Enum):
    HITS_TARGET_EDGE = "hits-target-edge"
    CROSSES_S2_STAR = "crosses-S2-star"
    CROSSES_CURVE = "crosses-curve"
    SIGN_CHANGE = "sign-change-of-scalar"
    LEAVES_DOMAIN = "leaves-domain"


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    max_step: float = math.inf
    method: str = "dop853"  # "dop853" | "rk45" | "rk4"
    step: float | None = None  # fixed step for rk4; defaults to max_step
    max_steps: int = 500_000

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0 and self.max_step > 0):
            raise ValueError("tolerances and max_step must be positive")
        if self.method not in ("dop853", "rk45", "rk4"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "rk4" and not math.isfinite(self.step or self.max_step):
            raise ValueError("rk4 needs a finite step")


@dataclass
class EventFunction:
    """Scalar g(t, y); an event fires when g changes sign.

    direction=+1 only reports negative-to-positive crossings, -1 the reverse.
    ``accept(y)``, when given, filters crossings: rejected ones are ignored.
    """

    fn: Callable[[float, np.ndarray], float]
    kind: EventKind = EventKind.SIGN_CHANGE
    terminal: bool = True
    direction: int = 0
    name: str = ""
    accept: Callable[[np.ndarray], bool] | None = None


@dataclass(frozen=True)
class Event:
    kind: EventKind
    time: float
    state: np.ndarray
    index: int
    name: str = ""


class _Hermite:
    def __init__(self, t0, t1, y0, y1, f0, f1):
        self.t0, self.h = t0, t1 - t0
        self.y0, self.y1, self.f0, self.f1 = y0, y1, f0, f1

    def __call__(self, t):
        s = (t - self.t0) / self.h
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        return h00 * self.y0 + h10 * self.h * self.f0 + h01 * self.y1 + h11 * self.h * self.f1


class Solution:
    """Piecewise dense trajectory; ``sol(t)`` evaluates anywhere in the span."""

    def __init__(self, t0, y0):
        self.t = [t0]
        self.y = [np.array(y0, dtype=float)]
        self._interp = []
        self.status = "running"

    def _append(self, t, y, interp):
        self.t.append(t)
        self.y.append(np.array(y, dtype=float))
        self._interp.append(interp)

    def _finish(self, status):
        self.status = status
        self.t = np.array(self.t)
        self.y = np.array(self.y)
        self._forward = bool(self.t[-1] >= self.t[0])
        self._keys = list(self.t) if self._forward else list(-self.t)

    @property
    def t_final(self):
        return float(self.t[-1])

    @property
    def y_final(self):
        return self.y[-1]

    def __call__(self, t):
        if np.ndim(t):
            return np.array([self(float(ti)) for ti in t])
        if not self._interp:
            return self.y[0].copy()
        lo, hi = min(self.t[0], self.t[-1]), max(self.t[0], self.t[-1])
        if t < lo - 1e-12 * max(1.0, abs(lo)) or t > hi + 1e-12 * max(1.0, abs(hi)):
            raise ValueError(f"t={t} outside integrated span [{lo}, {hi}]")
        key = t if self._forward else -t
        i = bisect.bisect_right(self._keys, key) - 1
        i = min(max(i, 0), len(self._interp) - 1)
        return np.asarray(self._interp[i](t), dtype=float)


def _sign(v):
    return 1 if v > 0 else (-1 if v < 0 else 0)


def _locate(ev, interp, t_lo, t_hi, s_lo, n_iter=80):
    """Bisection on dense output; returns the first point past the crossing."""
    for _ in range(n_iter):
        mid = 0.5 * (t_lo + t_hi)
        if mid == t_lo or mid == t_hi:
            break
        if _sign(ev.fn(mid, interp(mid))) == s_lo:
            t_lo = mid
        else:
            t_hi = mid
    return t_hi


class _RK4Stepper:
    def __init__(self, fun, t0, y0, t_bound, h):
        self.fun, self.t, self.y, self.t_bound = fun, t0, np.array(y0, float), t_bound
        self.dirn = 1.0 if t_bound >= t0 else -1.0
        self.h = abs(h)
        self.f = np.asarray(fun(t0, self.y), float)
        self.status = "running"
        self.t_old = None
        self._interp = None

    def step(self):
        t, y, f = self.t, self.y, self.f
        h = self.dirn * min(self.h, abs(self.t_bound - t))
        k1 = f
        k2 = np.asarray(self.fun(t + h / 2, y + h / 2 * k1), float)
        k3 = np.asarray(self.fun(t + h / 2, y + h / 2 * k2), float)
        k4 = np.asarray(self.fun(t + h, y + h * k3), float)
        y1 = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t1 = self.t_bound if abs(self.t_bound - (t + h)) < 1e-14 * max(1, abs(t)) else t + h
        f1 = np.asarray(self.fun(t1, y1), float)
        self._interp = _Hermite(t, t1, y, y1, f, f1)
        self.t_old, self.t, self.y, self.f = t, t1, y1, f1
        if self.t == self.t_bound:
            self.status = "finished"

    def dense_output(self):
        return self._interp


def integrate(
    field: Callable,
    x0,
    t_span: tuple[float, float],
    cfg: IntegratorConfig | None = None,
    events: Sequence[EventFunction] = (),
    domain: Callable[[np.ndarray], bool] | None = None,
) -> tuple[Solution, list[Event]]:
    """Integrate x' = field(t, x) over t_span (either direction).

    Stops at the end of the span or at the first terminal event. Returns the
    dense solution and the events recorded up to the stopping time.
    """
    cfg = cfg or IntegratorConfig()
    t0, t1 = float(t_span[0]), float(t_span[1])
    y0 = np.array(x0, dtype=float)
    fun = lambda t, y: np.asarray(field(t, y), dtype=float)  # noqa: E731
    if cfg.method == "rk4":
        stepper = _RK4Stepper(fun, t0, y0, t1, cfg.step or cfg.max_step)
    else:
        cls = DOP853 if cfg.method == "dop853" else RK45
        stepper = cls(fun, t0, y0, t1, rtol=cfg.rel_tol, atol=cfg.abs_tol, max_step=cfg.max_step)

    sol = Solution(t0, y0)
    found: list[Event] = []
    last_sign = [_sign(e.fn(t0, y0)) for e in events]
    if t0 == t1:
        sol._finish("finished")
        return sol, found

    for _ in range(cfg.max_steps):
        msg = stepper.step()
        if stepper.status == "failed":
            sol._finish("failed")
            raise StepSizeError(msg or "step failed")
        t_old, t_new, y_new = stepper.t_old, stepper.t, stepper.y
        interp = stepper.dense_output()

        hits = []
        for i, ev in enumerate(events):
            s_new = _sign(ev.fn(t_new, y_new))
            s_old = last_sign[i]
            if s_old == 0:
                last_sign[i] = s_new
                continue
            if s_new != s_old:
                ok = ev.direction == 0 or (ev.direction > 0 and s_old < 0) or (ev.direction < 0 and s_old > 0)
                if ok:
                    te = _locate(ev, interp, t_old, t_new, s_old)
                    hits.append((te, i))
                last_sign[i] = s_new

        hits.sort(key=lambda p: (p[0] - t_old) * (1 if t_new >= t_old else -1))
        stop = None
        for te, i in hits:
            ye = np.asarray(interp(te), float)
            ev = events[i]
            if ev.accept is not None and not ev.accept(ye):
                continue
            found.append(Event(ev.kind, te, ye, i, ev.name))
            if ev.terminal:
                stop = (te, ye)
                break

        if stop is not None:
            sol._append(stop[0], stop[1], interp)
            sol._finish("event")
            return sol, found

        if domain is not None and not domain(y_new):
            sol._append(t_new, y_new, interp)
            sol._finish("failed")
            raise DomainError(f"left the domain at t={t_new} without a matching event, y={y_new}")
        sol._append(t_new, y_new, interp)
        if stepper.status == "finished":
            sol._finish("finished")
            return sol, found
    sol._finish("failed")
    raise IntegrationError(f"exceeded {cfg.max_steps} steps")


def integrate_in_s1(
    rhs: Callable,
    y0,
    s1_span: tuple[float, float],
    cfg: IntegratorConfig | None = None,
    events: Sequence[EventFunction] = (),
    floor: float = 0.0,
    domain: Callable[[np.ndarray], bool] | None = None,
) -> tuple[Solution, list[Event]]:
    """Integrate dy/dS1 = rhs(S1, y) over an S1 interval bounded away from 0.

    Used for u = 1 flows reparameterised by S1, whose right-hand sides carry
    a 1/f(S1) factor.
    """
    lo = min(s1_span)
    if lo < floor or lo <= 0.0:
        raise SingularityError(f"S1 span {s1_span} reaches below the floor {floor:g}")
    return integrate(rhs, y0, s1_span, cfg, events, domain)

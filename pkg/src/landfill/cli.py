"""Case configuration, the built-in parameter sets and the ``landfillctl`` command line."""
from __future__ import annotations

import argparse
import math
import os
import sys
import time
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

from .geometry import GeometryError
from .model import GrowthLaw, HypothesisError, ModelParams, SolubilizationLaw, TargetBox, check_hypotheses
from .ode import IntegrationError, IntegratorConfig
from .oracle import ConvergenceError, best_structured, compare, sample_starts, solve_hjb, GRAMMAR
from .synthesis import RegimeError, build_geometry, optimal_feedback, simulate_closed_loop

DEFAULT_GRID_N = 128
SUBCOMMANDS = ("classify", "curves", "simulate", "oracle", "compare", "all")


class ConfigError(ValueError):
    pass


# -- configuration ---------------------------------------------------------------------------

_REQUIRED = ("name", "mu_bar", "Ks", "a", "M", "S1_bar", "S2_bar")
_OPTIONAL = {"Ki": "Ki", "grid.n": "grid_n", "ode.rel_tol": "ode_rel_tol"}


@dataclass(frozen=True)
class CaseConfig:
    name: str
    mu_bar: float
    Ks: float
    a: float
    M: float
    S1_bar: float
    S2_bar: float
    Ki: float | None = None
    grid_n: int | None = None
    ode_rel_tol: float | None = None

    @property
    def params(self) -> ModelParams:
        return ModelParams(GrowthLaw(self.mu_bar, self.Ks, self.Ki), SolubilizationLaw(self.a), self.M)

    @property
    def target(self) -> TargetBox:
        return TargetBox(self.S1_bar, self.S2_bar)

    @property
    def integrator(self) -> IntegratorConfig:
        if self.ode_rel_tol is None:
            return IntegratorConfig()
        return IntegratorConfig(rel_tol=self.ode_rel_tol, abs_tol=min(1e-12, self.ode_rel_tol * 1e-2))

    def validate(self) -> "CaseConfig":
        try:
            params, target = self.params, self.target
            check_hypotheses(params).raise_if_failed()
            target.validate(params)
            if self.ode_rel_tol is not None:
                self.integrator  # noqa: B018  (raises on bad tolerances)
        except (ValueError, HypothesisError) as exc:
            raise ConfigError(f"{self.name}: {exc}") from exc
        if self.grid_n is not None and self.grid_n < 8:
            raise ConfigError(f"{self.name}: grid.n must be at least 8")
        return self

    def to_text(self) -> str:
        lines = [f"name = {self.name}"]
        for key in ("mu_bar", "Ks", "Ki", "a", "M", "S1_bar", "S2_bar"):
            v = getattr(self, key)
            if v is not None:
                lines.append(f"{key} = {v!r}")
        if self.grid_n is not None:
            lines.append(f"grid.n = {self.grid_n}")
        if self.ode_rel_tol is not None:
            lines.append(f"ode.rel_tol = {self.ode_rel_tol!r}")
        return "\n".join(lines) + "\n"


def parse_config(text: str) -> CaseConfig:
    """Parse ``key = value`` lines (``#`` starts a comment); a missing Ki means Monod growth."""
    seen: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _REQUIRED and key not in _OPTIONAL:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen[key] = value
    missing = [k for k in _REQUIRED if k not in seen]
    if missing:
        raise ConfigError(f"missing keys: {', '.join(missing)}")

    def num(key):
        try:
            v = float(seen[key])
        except ValueError:
            raise ConfigError(f"{key}: not a number: {seen[key]!r}") from None
        if not math.isfinite(v):
            raise ConfigError(f"{key}: must be finite")
        return v

    kw = {k: num(k) for k in _REQUIRED if k != "name"}
    if not seen["name"]:
        raise ConfigError("name must not be empty")
    kw["name"] = seen["name"]
    if "Ki" in seen:
        kw["Ki"] = num("Ki")
    if "grid.n" in seen:
        try:
            kw["grid_n"] = int(seen["grid.n"])
        except ValueError:
            raise ConfigError(f"grid.n: not an integer: {seen['grid.n']!r}") from None
    if "ode.rel_tol" in seen:
        kw["ode_rel_tol"] = num("ode.rel_tol")
    return CaseConfig(**kw).validate()


def _case(name, mu_bar, Ks, Ki, a, M, S1_bar, S2_bar):
    return CaseConfig(name=name, mu_bar=mu_bar, Ks=Ks, Ki=Ki, a=a, M=M, S1_bar=S1_bar, S2_bar=S2_bar)


# name, mu_bar, Ks, Ki, a, M, S1_bar, S2_bar
BUILTIN_CASES = {
    c.name: c
    for c in (
        _case("case_I", 1.0, 2.0, 0.23, 0.1, 1.3, 0.15, 0.05),
        _case("case_IIa", 1.0, 5.0, 0.23, 0.03, 1.3, 0.29, 0.05),
        _case("case_IIb", 1.0, 3.5, 0.23, 0.04, 1.3, 0.14, 0.02),
        _case("case_IIc", 1.0, 3.5, 0.23, 0.015, 1.3, 0.14, 0.02),
        _case("case_IIIa", 30.0, 4.0, 0.7, 5.0, 2.4, 0.2, 0.02),
        _case("case_IIIb", 30.0, 4.0, 0.7, 5.0, 2.4, 0.09, 0.02),
        _case("case_IIIc", 30.0, 4.0, 0.7, 5.0, 2.4, 0.05, 0.02),
        _case("case_IVa", 1.0, 2.0, 0.23, 0.1, 1.3, 0.15, 0.8),
        _case("case_IVb", 1.0, 2.0, 0.23, 1.0, 1.3, 0.15, 0.8),
    )
}


# -- SVG -------------------------------------------------------------------------------------

_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def render_svg(curves: dict, M: float, target: TargetBox, title: str = "", size: int = 480,
               trajectories: dict | None = None) -> str:
    """State-plane overlay: domain triangle, shaded target, one <path> per curve.

    ``curves`` and ``trajectories`` map labels to (s1, s2) sample arrays.
    """
    pad = 48
    span = size - 2 * pad

    def xy(s1, s2):
        return pad + span * s1 / M, size - pad - span * s2 / M

    def d_attr(s1, s2):
        pts = [xy(a, b) for a, b in zip(s1, s2)]
        return "M " + " L ".join(f"{x:.3f},{y:.3f}" for x, y in pts)

    out = ['<?xml version="1.0" encoding="UTF-8"?>',
           f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<title>{escape(title)}</title>',
           '<rect x="0" y="0" width="100%" height="100%" fill="white"/>']
    x0, y0 = xy(0, 0)
    x1, _ = xy(M, 0)
    _, y1 = xy(0, M)
    tx, ty = xy(target.S1_bar, target.S2_bar)
    out.append(f'<rect x="{x0:.3f}" y="{ty:.3f}" width="{tx - x0:.3f}" height="{y0 - ty:.3f}" '
               'fill="#cccccc" fill-opacity="0.6"><title>T</title></rect>')
    out.append(f'<polygon points="{x0:.3f},{y0:.3f} {x1:.3f},{y0:.3f} {x0:.3f},{y1:.3f}" '
               'fill="none" stroke="black" stroke-width="1"/>')
    for k in range(5):
        v = M * k / 4
        gx, gy = xy(v, 0)
        out.append(f'<line x1="{gx:.3f}" y1="{y0:.3f}" x2="{gx:.3f}" y2="{y0 + 5:.3f}" stroke="black"/>')
        out.append(f'<text x="{gx:.3f}" y="{y0 + 18:.3f}" font-size="10" text-anchor="middle">{v:.3g}</text>')
        hx, hy = xy(0, v)
        out.append(f'<line x1="{x0 - 5:.3f}" y1="{hy:.3f}" x2="{x0:.3f}" y2="{hy:.3f}" stroke="black"/>')
        out.append(f'<text x="{x0 - 8:.3f}" y="{hy + 3:.3f}" font-size="10" text-anchor="end">{v:.3g}</text>')
    out.append(f'<text x="{(x0 + x1) / 2:.3f}" y="{size - 8}" font-size="12" text-anchor="middle">S1</text>')
    out.append(f'<text x="12" y="{(y0 + y1) / 2:.3f}" font-size="12" text-anchor="middle">S2</text>')
    for k, (label, (s1, s2)) in enumerate(curves.items()):
        col = _COLOURS[k % len(_COLOURS)]
        out.append(f'<path d="{d_attr(s1, s2)}" fill="none" stroke="{col}" stroke-width="1.5" '
                   f'data-curve="{escape(label)}"><title>{escape(label)}</title></path>')
        lx, ly = pad + span - 90, pad + 14 * k
        out.append(f'<text x="{lx}" y="{ly}" font-size="11" fill="{col}">{escape(label)}</text>')
    for label, (s1, s2) in (trajectories or {}).items():
        pts = " ".join(f"{x:.3f},{y:.3f}" for x, y in (xy(a, b) for a, b in zip(s1, s2)))
        out.append(f'<polyline points="{pts}" fill="none" stroke="black" stroke-dasharray="3,2" '
                   f'stroke-width="1"><title>{escape(label)}</title></polyline>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- running ---------------------------------------------------------------------------------

@dataclass
class RunReport:
    case: str
    regime: str | None = None
    landmarks: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    timings: list = field(default_factory=list)  # (start, word, final time, wall seconds)
    gaps: list = field(default_factory=list)  # CompareReport lines
    notes: list = field(default_factory=list)

    def to_text(self) -> str:
        out = [f"case {self.case}"]
        if self.regime:
            out.append(f"regime {self.regime}")
        for k, v in self.landmarks.items():
            out.append(f"{k} = {'none' if v is None else f'{v:.10g}'}")
        for start, word, tf, wall in self.timings:
            out.append(f"start ({start[0]:.6g}, {start[1]:.6g}) word {word} time {tf:.8g} wall {wall:.2f}s")
        out.extend(self.gaps)
        out.extend(self.notes)
        out.extend(f"wrote {f}" for f in self.files)
        return "\n".join(out) + "\n"


def _parse_start(text):
    try:
        s1, s2 = (float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"--start expects 'S1,S2', got {text!r}") from None
    return np.array([s1, s2])


def _check_start(cfg: CaseConfig, x):
    M, pt = cfg.M, f"({x[0]:g}, {x[1]:g})"
    if not (x[0] >= 0 and x[1] >= 0 and x[0] + x[1] < M):
        raise ConfigError(f"start {pt} is outside D")
    if cfg.target.contains(x):
        raise ConfigError(f"start {pt} is already in the target")


def _landmarks(geom) -> dict:
    s = geom.singular
    return {"S2*": s.s2_star if math.isfinite(s.s2_star) else None, "S1_min": s.s1_min,
            "S1*": s.s1_star, "S1_bar": geom.s1_bar}


def _write(path, text, report):
    with open(path, "w", newline="") as fh:
        fh.write(text)
    report.files.append(path)


def curve_set(geom) -> dict:
    """Every exported curve as (s1, s2) arrays, keyed by file stem."""
    p, part = geom.params, geom.partition
    out = {"sigma2": (part.sigma2.s1, part.sigma2.s2)}
    if part.c0 is not None:
        out["c0"] = (part.c0.s1, part.c0.s2)
    if geom.xi_star is not None:
        out["xi_star"] = (geom.xi_star.s1, geom.xi_star.s2)
    if geom.c1 is not None:
        out["c1"] = (geom.c1.s1, geom.c1.s2)
    s = geom.singular
    if s.exists and s.s1_min < p.M - s.s2_star:
        xs = np.linspace(s.s1_min, p.M - s.s2_star, 64)
        out["singular_arc"] = (xs, np.full_like(xs, s.s2_star))
    return out


def _emit_curves(geom, name, out_dir, report, trajectories=None):
    curves = curve_set(geom)
    for stem, (s1, s2) in curves.items():
        text = "s1,s2\n" + "".join(f"{a:.17g},{b:.17g}\n" for a, b in zip(s1, s2))
        _write(os.path.join(out_dir, f"{stem}.csv"), text, report)
    svg = render_svg(curves, geom.params.M, geom.target, title=f"{name} ({geom.regime.value})",
                     trajectories=trajectories)
    _write(os.path.join(out_dir, "curves.svg"), svg, report)


def run_case(cfg: CaseConfig, subcommand: str, start=None, out_dir: str | None = None,
             structured: bool = True) -> RunReport:
    """Run one subcommand for one case, writing files under ``out_dir``."""
    if subcommand not in SUBCOMMANDS or subcommand == "all":
        raise ConfigError(f"run_case handles one of {SUBCOMMANDS[:-1]}, got {subcommand!r}")
    cfg.validate()
    report = RunReport(cfg.name)
    out_dir = out_dir or os.path.join("landfill_out", cfg.name)
    os.makedirs(out_dir, exist_ok=True)
    params, target, icfg = cfg.params, cfg.target, cfg.integrator
    needs_start = subcommand in ("simulate", "compare")
    if needs_start:
        if start is None:
            raise ConfigError(f"{subcommand} needs --start S1,S2")
        start = np.asarray(start, dtype=float)
        _check_start(cfg, start)

    if subcommand == "oracle":
        vg = solve_hjb(params, target, n=cfg.grid_n or DEFAULT_GRID_N)
        _write(os.path.join(out_dir, "value_grid.csv"), vg.to_csv(), report)
        report.notes.append(f"value iteration converged in {vg.iterations} sweeps")
        return report

    # C1 dominates the cost and is not needed to classify
    geom = build_geometry(params, target, icfg, with_c1=subcommand != "classify")
    report.regime = geom.regime.value
    report.landmarks = _landmarks(geom)
    _write(os.path.join(out_dir, "case.cfg"), cfg.to_text(), report)

    if subcommand == "curves":
        _emit_curves(geom, cfg.name, out_dir, report)
    elif subcommand in ("simulate", "compare"):
        fb = optimal_feedback(geom)
        t0 = time.perf_counter()
        traj = simulate_closed_loop(params, geom, fb, start, icfg)
        wall = time.perf_counter() - t0
        report.timings.append((tuple(start), traj.word, traj.final_time, wall))
        tag = f"{start[0]:.6g}_{start[1]:.6g}"
        _write(os.path.join(out_dir, f"trajectory_{tag}.csv"), traj.to_csv(), report)
        _write(os.path.join(out_dir, f"switches_{tag}.csv"), traj.switches_csv(), report)
        if subcommand == "compare":
            vg = solve_hjb(params, target, n=cfg.grid_n or DEFAULT_GRID_N)
            best = best_structured(params, target, start, GRAMMAR[geom.regime]) if structured else None
            report.gaps.append(compare(traj, vg, start, best).as_line())
            _write(os.path.join(out_dir, f"compare_{tag}.txt"), report.gaps[-1] + "\n", report)
    return report


def _run_builtin(cfg: CaseConfig, out_dir: str) -> RunReport:
    os.makedirs(out_dir, exist_ok=True)
    rep = RunReport(cfg.name)
    params, target, icfg = cfg.params, cfg.target, cfg.integrator
    geom = build_geometry(params, target, icfg)
    rep.regime, rep.landmarks = geom.regime.value, _landmarks(geom)
    _write(os.path.join(out_dir, "case.cfg"), cfg.to_text(), rep)
    vg = solve_hjb(params, target, n=cfg.grid_n or DEFAULT_GRID_N)
    _write(os.path.join(out_dir, "value_grid.csv"), vg.to_csv(), rep)
    fb = optimal_feedback(geom)
    trajs = {}
    with open(os.path.join(out_dir, "runs.csv"), "w", newline="") as fh:
        fh.write("s1,s2,word,t_feedback,v_oracle,rel_gap\n")
        for x in sample_starts(geom.partition):
            t0 = time.perf_counter()
            traj = simulate_closed_loop(params, geom, fb, x, icfg)
            rep.timings.append((x, traj.word, traj.final_time, time.perf_counter() - t0))
            cr = compare(traj, vg, x)
            rep.gaps.append(cr.as_line())
            fh.write(f"{x[0]:.17g},{x[1]:.17g},{traj.word},{cr.t_feedback:.17g},{cr.v_oracle:.17g},{cr.rel_gap:.17g}\n")
            nodes = traj.nodes
            trajs[traj.word + f" from ({x[0]:.3g}, {x[1]:.3g})"] = (nodes[:, 1], nodes[:, 2])
    rep.files.append(os.path.join(out_dir, "runs.csv"))
    _emit_curves(geom, cfg.name, out_dir, rep, trajectories=trajs)
    _write(os.path.join(out_dir, "report.txt"), rep.to_text(), rep)
    return rep


def run_all(out_root: str, cases=None, jobs: int = 1) -> list[RunReport]:
    """Geometry, curves, oracle and region-spread comparisons for every built-in case.

    Cases write to separate directories, so ``jobs > 1`` runs them in worker processes.
    """
    cases = list((cases or BUILTIN_CASES).values())
    dirs = [os.path.join(out_root, c.name) for c in cases]
    if jobs <= 1:
        return [_run_builtin(c, d) for c, d in zip(cases, dirs)]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_builtin, cases, dirs))


# -- entry point -----------------------------------------------------------------------------

def _build_parser():
    ap = argparse.ArgumentParser(prog="landfillctl", description="Minimal-time synthesis for the landfill model.")
    ap.add_argument("command", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="case file in 'key = value' format")
    ap.add_argument("--case", help=f"built-in case name ({', '.join(BUILTIN_CASES)})")
    ap.add_argument("--start", help="initial state S1,S2 for simulate/compare")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--no-search", action="store_true", help="compare: skip the switching-time search")
    ap.add_argument("--jobs", type=int, default=1, help="all: number of cases run in parallel")
    return ap


def _load(args) -> CaseConfig:
    if args.config and args.case:
        raise ConfigError("give either --config or --case, not both")
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                return parse_config(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read {args.config}: {exc}") from exc
    if args.case:
        if args.case not in BUILTIN_CASES:
            raise ConfigError(f"unknown case {args.case!r}")
        return BUILTIN_CASES[args.case]
    raise ConfigError("--config FILE or --case NAME is required")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "all":
            for rep in run_all(args.out or "landfill_out", jobs=args.jobs):
                sys.stdout.write(rep.to_text())
            return 0
        cfg = _load(args)
        start = _parse_start(args.start) if args.start else None
        rep = run_case(cfg, args.command, start, args.out, structured=not args.no_search)
        sys.stdout.write(rep.to_text())
        return 0
    except (ConfigError, RegimeError, HypothesisError) as exc:
        print(f"landfillctl: error: {exc}", file=sys.stderr)
        return 2
    except (IntegrationError, GeometryError, ConvergenceError, RuntimeError, FloatingPointError) as exc:
        print(f"landfillctl: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())

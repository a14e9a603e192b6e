"""Feedback times against the grid value function for one case.

    python demos/oracle_check.py [CASE] [N]

Prints the relative gap per start, the structured-search time for the
first few starts, and a short grid-refinement table at one probe.
"""
import sys
import time

from landfill.cli import BUILTIN_CASES
from landfill.oracle import GRAMMAR, best_structured, compare, sample_starts, solve_hjb
from landfill.synthesis import build_geometry, optimal_feedback, simulate_closed_loop

name = sys.argv[1] if len(sys.argv) > 1 else "case_IVa"
n = int(sys.argv[2]) if len(sys.argv) > 2 else 128
cfg = BUILTIN_CASES[name]
geom = build_geometry(cfg.params, cfg.target)
fb = optimal_feedback(geom)

t0 = time.perf_counter()
vg = solve_hjb(cfg.params, cfg.target, n=n)
print(f"{name}: {n}x{n} grid, {vg.iterations} sweeps, {time.perf_counter() - t0:.1f}s")

starts = sample_starts(geom.partition, n=12)
for k, x in enumerate(starts):
    tr = simulate_closed_loop(cfg.params, geom, fb, x)
    best = best_structured(cfg.params, cfg.target, x, GRAMMAR[geom.regime]) if k < 3 else None
    print(f"  {geom.partition.membership(x).value:14s} {tr.word:11s} {compare(tr, vg, x, best).as_line()}")

probe = starts[0]
print(f"refinement at ({probe[0]:.3f}, {probe[1]:.3f}):")
for m in (32, 64, n):
    print(f"  n={m:4d}  V={solve_hjb(cfg.params, cfg.target, n=m)(probe):.6f}")

"""Classify the built-in cases and draw their switching geometry.

    python demos/case_tour.py [OUT_DIR]

Writes one directory per case with the curve CSVs and an SVG overlay that
also shows a few closed-loop trajectories.
"""
import os
import sys

from landfill.cli import BUILTIN_CASES, curve_set, render_svg
from landfill.oracle import sample_starts
from landfill.synthesis import build_geometry, optimal_feedback, simulate_closed_loop

out = sys.argv[1] if len(sys.argv) > 1 else "tour_out"

for name, cfg in BUILTIN_CASES.items():
    geom = build_geometry(cfg.params, cfg.target)
    fb = optimal_feedback(geom)
    s = geom.singular
    print(f"{name:10s} {geom.regime.value:20s} S2*={s.s2_star:.4f} S1_min={s.s1_min:.4f} "
          f"S1*={s.s1_star:.4f} S1_bar={geom.s1_bar if geom.s1_bar is None else round(geom.s1_bar, 4)}")
    trajs = {}
    for x in sample_starts(geom.partition, n=6):
        tr = simulate_closed_loop(cfg.params, geom, fb, x)
        nodes = tr.nodes
        trajs[f"{tr.word} from ({x[0]:.2f}, {x[1]:.2f})"] = (nodes[:, 1], nodes[:, 2])
        print(f"    start ({x[0]:.3f}, {x[1]:.3f})  {tr.word:12s} t = {tr.final_time:.4f}")
    d = os.path.join(out, name)
    os.makedirs(d, exist_ok=True)
    with open(os.path.join(d, "overlay.svg"), "w") as fh:
        fh.write(render_svg(curve_set(geom), cfg.M, cfg.target, title=name, trajectories=trajs))
print(f"SVGs under {out}/")

"""Random piecewise-constant control rollouts shared by the invariance tests."""
import numpy as np

from landfill.ode import IntegratorConfig, integrate
from landfill.synthesis import target_face_events

CFG = IntegratorConfig(rel_tol=1e-11, abs_tol=1e-13)


def random_levels(rng, n):
    # mix of bang values and interior levels
    kind = rng.integers(0, 3, n)
    return np.where(kind == 0, 0.0, np.where(kind == 1, 1.0, rng.uniform(0.0, 1.0, n)))


def rollout(params, x0, rng, duration, target=None, n_pieces=12):
    """States sampled along x' = F(x, u(t)) for a random piecewise-constant u.

    Stops early when the target is entered. Returns (t, states, levels).
    """
    cuts = np.sort(rng.uniform(0.0, duration, n_pieces - 1))
    knots = np.concatenate([[0.0], cuts, [duration]])
    levels = random_levels(rng, n_pieces)
    events = target_face_events(target) if target is not None else []
    ts, ys = [0.0], [np.asarray(x0, float)]
    x = np.asarray(x0, float)
    for t0, t1, u in zip(knots[:-1], knots[1:], levels):
        if t1 <= t0:
            continue
        sol, ev = integrate(lambda t, y, u=u: params.field(y[0], y[1], u), x, (t0, t1), CFG, events)
        grid = np.linspace(t0, sol.t_final, 17)[1:]
        ts.extend(grid)
        ys.extend(sol(grid))
        x = sol.y_final
        if ev:
            break
    return np.array(ts), np.array(ys), levels

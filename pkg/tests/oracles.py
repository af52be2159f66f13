"""Independent loop-based reference implementations used as test oracles."""

import math

import numpy as np

from psngame.rollout import RolloutTrace


def random_trace(rng, n=4, steps=20, hist=10, binary=True):
    """Random, not necessarily feasible, trace with ground truth of the same scene."""
    states = rng.normal(0, 2, (steps + 1, n, 4))
    history = rng.normal(0, 2, (hist, n, 4))
    history[-1] = states[0]
    masks = rng.integers(0, 2, (steps, n - 1)).astype(float) if binary else rng.uniform(0, 1, (steps, n - 1))
    trace = RolloutTrace(
        task="prediction",
        ego=int(rng.integers(n)),
        dt=0.1,
        history=history,
        states=states,
        controls=rng.normal(size=(steps, n, 2)),
        masks=masks,
        game_sizes=np.ones(steps, dtype=int),
        iterations=np.zeros(steps, dtype=int),
        residuals=np.zeros(steps),
        goals=rng.normal(0, 2, (n, 2)),
        true_goals=rng.normal(0, 2, (n, 2)),
    )
    gt = rng.normal(0, 2, (hist + steps + int(rng.integers(0, 5)), n, 4))
    return trace, gt


def _dist(a, b):
    return math.sqrt((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2)


def oracle_metrics(trace, gt):
    e = trace.ego
    S = trace.controls.shape[0]
    n = trace.states.shape[1]
    H = trace.history.shape[0]
    pos = [list(trace.states[k, e, :2]) for k in range(S + 1)]
    out = {}

    errs = [_dist(pos[k + 1], gt[H + k, e, :2]) for k in range(S)]
    out["ade"] = sum(errs) / S
    out["fde"] = errs[-1]

    if n == 1 or S < 2:
        out["consistency"] = 1.0
    else:
        total = 0.0
        for k in range(1, S):
            flips = sum(abs(trace.masks[k, j] - trace.masks[k - 1, j]) for j in range(n - 1))
            total += 1 - flips / (n - 1)
        out["consistency"] = total / (S - 1)

    g = trace.true_goals[e]
    nav = 0.0
    for k in range(S + 1):
        s = min(k / 50, 1.0)
        r = [(1 - s) * pos[0][c] + s * g[c] for c in range(2)]
        nav += (pos[k][0] - r[0]) ** 2 + (pos[k][1] - r[1]) ** 2
    out["nav_cost"] = nav

    col, dmin = 0.0, math.inf
    for k in range(S + 1):
        for j in range(n):
            if j == e:
                continue
            d = _dist(pos[k], trace.states[k, j, :2])
            col += math.exp(-d * d)
            dmin = min(dmin, d)
    out["col_cost"] = col
    out["min_distance"] = dmin

    out["ctrl_cost"] = sum(trace.controls[k, e, 0] ** 2 + trace.controls[k, e, 1] ** 2 for k in range(S))

    units = []
    length = 0.0
    for k in range(S):
        dx, dy = pos[k + 1][0] - pos[k][0], pos[k + 1][1] - pos[k][1]
        L = math.hypot(dx, dy)
        length += L
        units.append((dx / L, dy / L) if L >= 1e-9 else None)
    sm = 0.0
    for a, b in zip(units[:-1], units[1:]):
        if a is not None and b is not None:
            sm += math.hypot(b[0] - a[0], b[1] - a[1])
    out["traj_smoothness"] = sm
    out["traj_length"] = length

    out["mean_selected_players"] = sum(sum(1 for v in row if v >= 0.5) for row in trace.masks) / S
    return out

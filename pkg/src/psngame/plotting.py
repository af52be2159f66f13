"""Trajectory plots as standalone SVG (ego blue, selected agents red, excluded gray)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

EGO = "#1f77b4"
SELECTED = "#d62728"
EXCLUDED = "#7f7f7f"


def trace_svg(trace, size: int = 600, margin: float = 0.5) -> str:
    states = np.concatenate([trace.history[:-1], trace.states])
    pos = states[..., :2]
    goals = trace.true_goals
    pts = np.concatenate([pos.reshape(-1, 2), goals])
    lo = pts.min(axis=0) - margin
    hi = pts.max(axis=0) + margin
    scale = size / float(np.max(hi - lo))

    def xy(p):
        return (p[0] - lo[0]) * scale, size - (p[1] - lo[1]) * scale

    n, e = trace.n_agents, trace.ego
    others = [j for j in range(n) if j != e]
    h0 = trace.history.shape[0] - 1  # row of states[0] inside ``pos``
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    for j in range(n):
        d = " ".join(("M" if k == 0 else "L") + "{:.2f},{:.2f}".format(*xy(p)) for k, p in enumerate(pos[:, j]))
        color = EGO if j == e else "#c7c7c7"
        width = 2.5 if j == e else 1.2
        out.append(f'<path id="agent-{j}" d="{d}" fill="none" stroke="{color}" stroke-width="{width}"/>')
    for k in range(trace.n_steps):
        for c, j in enumerate(others):
            color = SELECTED if trace.masks[k, c] >= 0.5 else EXCLUDED
            x, y = xy(pos[h0 + k, j])
            out.append(f'<circle class="step" data-agent="{j}" data-step="{k}" cx="{x:.2f}" cy="{y:.2f}" r="2.5" fill="{color}"/>')
    for j in range(n):
        x, y = xy(goals[j])
        color = EGO if j == e else "black"
        out.append(f'<path class="goal" d="M{x - 4:.2f},{y - 4:.2f}L{x + 4:.2f},{y + 4:.2f}M{x - 4:.2f},{y + 4:.2f}L{x + 4:.2f},{y - 4:.2f}" stroke="{color}" stroke-width="1.5"/>')
    x, y = xy(pos[h0, e])
    out.append(f'<circle class="ego" cx="{x:.2f}" cy="{y:.2f}" r="5" fill="{EGO}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_trace_svg(trace, path) -> None:
    Path(path).write_text(trace_svg(trace))

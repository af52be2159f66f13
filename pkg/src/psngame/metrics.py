"""Evaluation metrics of a single rollout trace (ego agent only)."""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields

import numpy as np

from .game import DomainError

SEGMENT_EPS = 1e-9
NAV_STEPS = 50  # straight-line reference reaches the goal after this many steps


@dataclass(frozen=True)
class MetricReport:
    ade: float
    fde: float
    consistency: float
    nav_cost: float
    col_cost: float
    ctrl_cost: float
    traj_smoothness: float
    traj_length: float
    min_distance: float
    mean_selected_players: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list[float]:
        return list(astuple(self))

    def csv_row(self) -> str:
        return ",".join(repr(float(v)) for v in self.row())


def displacement_errors(pred: np.ndarray, gt: np.ndarray, mode: str = "mean"):
    """(ADE, FDE) of ``pred`` against ``gt``, both ``(S, 2)``."""
    err = np.linalg.norm(np.asarray(pred) - np.asarray(gt), axis=1)
    if err.size == 0:
        return math.nan, math.nan
    ade = float(err.mean() if mode == "mean" else err.sum())
    return ade, float(err[-1])


def smoothness(p: np.ndarray) -> float:
    seg = np.diff(p, axis=0)
    n = np.linalg.norm(seg, axis=1)
    ok = n >= SEGMENT_EPS
    unit = np.where(ok[:, None], seg / np.where(ok, n, 1.0)[:, None], 0.0)
    pair = ok[1:] & ok[:-1]
    return float(np.sum(np.linalg.norm(unit[1:] - unit[:-1], axis=1)[pair]))


def path_length(p: np.ndarray) -> float:
    return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))


def consistency(masks: np.ndarray, mode: str = "mean") -> float:
    m = np.asarray(masks, dtype=float)
    if m.ndim != 2:
        raise DomainError("masks must be (S, N-1)")
    if m.shape[1] == 0 or m.shape[0] < 2:
        return 1.0
    terms = 1.0 - np.sum(np.abs(np.diff(m, axis=0)), axis=1) / m.shape[1]
    return float(terms.mean() if mode == "mean" else terms.sum())


def navigation_reference(p0, goal, n_states: int, nav_steps: int = NAV_STEPS) -> np.ndarray:
    s = np.minimum(np.arange(n_states) / nav_steps, 1.0)[:, None]
    return (1 - s) * np.asarray(p0) + s * np.asarray(goal)


def compute_metrics(trace, ground_truth: np.ndarray | None = None, mode: str = "mean") -> MetricReport:
    """Metrics of ``trace``; ``ground_truth`` is the full ``(L, N, 4)`` scene the trace was cut from.

    ``mode='sum'`` gives the literal summed ADE and Consistency.
    """
    if mode not in ("mean", "sum"):
        raise DomainError("mode must be 'mean' or 'sum'")
    S, e = trace.n_steps, trace.ego
    if S == 0:
        raise DomainError("trace has no steps")
    p = trace.states[:, e, :2]
    ade = fde = math.nan
    if ground_truth is not None:
        gt = np.asarray(ground_truth, dtype=float)
        start = trace.history.shape[0]  # first predicted step in scene time
        if gt.ndim != 3 or gt.shape[0] < start + S or gt.shape[1] != trace.n_agents:
            raise DomainError(f"ground truth must cover {start + S} steps of {trace.n_agents} agents")
        ade, fde = displacement_errors(p[1:], gt[start : start + S, e, :2], mode)
    ref = navigation_reference(p[0], trace.true_goals[e], S + 1)
    others = [j for j in range(trace.n_agents) if j != e]
    d = np.linalg.norm(trace.states[:, others, :2] - p[:, None, :], axis=2)
    return MetricReport(
        ade=ade,
        fde=fde,
        consistency=consistency(trace.masks, mode),
        nav_cost=float(np.sum((p - ref) ** 2)),
        col_cost=float(np.sum(np.exp(-(d**2)))),
        ctrl_cost=float(np.sum(trace.controls[:, e] ** 2)),
        traj_smoothness=smoothness(p),
        traj_length=path_length(p),
        min_distance=float(d.min()) if others else math.inf,
        mean_selected_players=float(np.mean(np.sum(trace.masks >= 0.5, axis=1))),
    )

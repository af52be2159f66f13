"""Explicit player-selection baselines and the threshold / top-k mask rules."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .game import CostWeights, DomainError, SelectionMask

METHODS = (
    "All",
    "None",
    "Distance",
    "kNN",
    "Gradient",
    "Hessian",
    "CostEvolution",
    "BF",
    "CBF",
    "PsnThreshold",
    "PsnRank",
)
RANK_METHODS = ("kNN", "Gradient", "Hessian", "CostEvolution", "BF", "CBF", "PsnRank")

# CLI mini-syntax names -> method
_ALIASES = {
    "all": "All",
    "none": "None",
    "distance": "Distance",
    "knn": "kNN",
    "gradient": "Gradient",
    "hessian": "Hessian",
    "cost-evolution": "CostEvolution",
    "costevolution": "CostEvolution",
    "bf": "BF",
    "cbf": "CBF",
    "psn-th": "PsnThreshold",
    "psn-threshold": "PsnThreshold",
    "psn-rank": "PsnRank",
}
_LABELS = {
    "All": "all",
    "None": "none",
    "Distance": "distance",
    "kNN": "knn",
    "Gradient": "gradient",
    "Hessian": "hessian",
    "CostEvolution": "cost-evolution",
    "BF": "bf",
    "CBF": "cbf",
    "PsnThreshold": "psn-th",
    "PsnRank": "psn-rank",
}


@dataclass(frozen=True)
class SelectionParams:
    method: str
    d_th: float = 1.0
    k: int = 1
    m_th: float = 0.5
    d_safe: float = 0.5
    alpha: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise DomainError(f"unknown selection method {self.method!r}")

    @property
    def label(self) -> str:
        if self.method == "Distance":
            return f"distance:{self.d_th:g}"
        if self.method == "PsnThreshold":
            return f"psn-th:{self.m_th:g}"
        if self.method in RANK_METHODS:
            return f"{_LABELS[self.method]}:{self.k}"
        return _LABELS[self.method]

    @property
    def uses_psn(self) -> bool:
        return self.method in ("PsnThreshold", "PsnRank")


def parse_method(text: str) -> SelectionParams:
    """Parse ``name[:param]``, e.g. ``distance:1.5``, ``knn:2``, ``psn-th:0.5``."""
    name, _, arg = text.strip().partition(":")
    method = _ALIASES.get(name.lower())
    if method is None:
        raise DomainError(f"unknown method {name!r}")
    if method in ("All", "None"):
        return SelectionParams(method)
    if method == "Distance":
        return SelectionParams(method, d_th=float(arg) if arg else 1.0)
    if method == "PsnThreshold":
        return SelectionParams(method, m_th=float(arg) if arg else 0.5)
    return SelectionParams(method, k=int(arg) if arg else 1)


@dataclass(frozen=True)
class SelectionContext:
    ego: int
    state: np.ndarray  # (N, 4)
    prev_state: Optional[np.ndarray] = None  # (N, 4), one step earlier
    controls: Optional[np.ndarray] = None  # (N, 2), latest applied controls
    weights: CostWeights = CostWeights()
    dt: float = 0.1

    @property
    def n_agents(self) -> int:
        return self.state.shape[0]

    @property
    def others(self) -> np.ndarray:
        return np.array([j for j in range(self.n_agents) if j != self.ego], dtype=int)


def _two_step_positions(ctx: SelectionContext) -> np.ndarray:
    # p_{k+2} = p_k + 2 dt v_k + dt^2 u_k under the double integrator
    x, u, dt = ctx.state, ctx.controls, ctx.dt
    return x[:, :2] + 2 * dt * x[:, 2:] + dt**2 * u


def shared_cost_control_gradient(ctx: SelectionContext) -> np.ndarray:
    """``d c^{ij} / d u^j`` through two dynamics steps, one row per other agent."""
    if ctx.controls is None:
        raise DomainError("Gradient selection needs the latest controls")
    p = _two_step_positions(ctx)
    o = ctx.others
    d = p[ctx.ego] - p[o]
    phi = np.exp(-np.sum(d * d, axis=1))
    # dc/dp_j = 2 w4 phi d ; dp_j/du_j = dt^2 I
    return ctx.dt**2 * 2 * ctx.weights.w4 * phi[:, None] * d


def shared_cost_control_hessian(ctx: SelectionContext) -> np.ndarray:
    if ctx.controls is None:
        raise DomainError("Hessian selection needs the latest controls")
    p = _two_step_positions(ctx)
    o = ctx.others
    d = p[ctx.ego] - p[o]
    phi = np.exp(-np.sum(d * d, axis=1))
    outer = 4 * d[:, :, None] * d[:, None, :] - 2 * np.eye(2)
    return ctx.dt**4 * ctx.weights.w4 * phi[:, None, None] * outer


def score_agents(ctx: SelectionContext, method: str, params: SelectionParams | None = None) -> np.ndarray:
    """Importance score of every other agent (higher = more important)."""
    params = params or SelectionParams(method if method in METHODS else "kNN")
    o = ctx.others
    x = ctx.state
    dp = x[ctx.ego, :2] - x[o, :2]
    if method in ("Distance", "kNN"):
        return -np.linalg.norm(dp, axis=1)
    if method == "Gradient":
        return np.linalg.norm(shared_cost_control_gradient(ctx), axis=1)
    if method == "Hessian":
        return np.linalg.norm(shared_cost_control_hessian(ctx), axis=(1, 2))
    if method == "CostEvolution":
        if ctx.prev_state is None:
            raise DomainError("CostEvolution selection needs the previous state")
        dprev = ctx.prev_state[ctx.ego, :2] - ctx.prev_state[o, :2]
        w4 = ctx.weights.w4
        return w4 * (np.exp(-np.sum(dp * dp, axis=1)) - np.exp(-np.sum(dprev * dprev, axis=1)))
    h = np.sum(dp * dp, axis=1) - params.d_safe**2
    if method == "BF":
        return -h
    if method == "CBF":
        hdot = 2 * np.sum(dp * (x[ctx.ego, 2:] - x[o, 2:]), axis=1)
        return -(hdot + params.alpha * h)
    raise DomainError(f"method {method!r} has no explicit score")


def apply_threshold(values, threshold: float, ego: int, rule: str = "geq") -> SelectionMask:
    """Entry is 1 iff ``value >= threshold`` (``rule='geq'``) or ``value <= threshold`` (``'leq'``)."""
    v = np.asarray(values, dtype=float)
    if rule == "geq":
        sel = v >= threshold
    elif rule == "leq":
        sel = v <= threshold
    else:
        raise DomainError(f"unknown threshold rule {rule!r}")
    return SelectionMask(ego, sel.astype(float))


def apply_topk(scores, k: int, ego: int) -> SelectionMask:
    """Select the ``k`` largest scores; ties go to the lower agent index."""
    s = np.asarray(scores, dtype=float)
    if not 1 <= k <= s.size:
        raise DomainError(f"k={k} outside [1, {s.size}]")
    order = np.argsort(-s, kind="stable")
    m = np.zeros(s.size)
    m[order[:k]] = 1.0
    return SelectionMask(ego, m)


SoftMaskFn = Callable[[SelectionContext, np.ndarray], np.ndarray]


def select(
    ctx: SelectionContext,
    params: SelectionParams,
    soft_mask_fn: SoftMaskFn | None = None,
    history: np.ndarray | None = None,
) -> SelectionMask:
    """Binary mask for ``ctx.ego``.

    PSN methods need ``soft_mask_fn(ctx, history)`` returning an ``(N-1,)`` soft
    mask from the trailing ``(K+1, N, 4)`` state history.
    """
    n, ego = ctx.n_agents, ctx.ego
    m = params.method
    if n == 1:
        return SelectionMask(ego, np.zeros(0))
    if m == "All":
        return SelectionMask.ones(n, ego)
    if m == "None":
        return SelectionMask.zeros(n, ego)
    k = min(params.k, n - 1)
    if m in ("PsnThreshold", "PsnRank"):
        if soft_mask_fn is None:
            raise DomainError(f"{m} needs a trained selection network")
        soft = soft_mask_fn(ctx, history)
        if m == "PsnThreshold":
            return apply_threshold(soft, params.m_th, ego, "geq")
        return apply_topk(soft, k, ego)
    if m == "Distance":
        dist = -score_agents(ctx, "Distance", params)
        return apply_threshold(dist, params.d_th, ego, "leq")
    return apply_topk(score_agents(ctx, m, params), k, ego)


def with_k(params: SelectionParams, k: int) -> SelectionParams:
    return replace(params, k=k)


def prefilter_candidates(positions, ego: int, budget: int) -> np.ndarray:
    """The ``budget`` agents nearest to ``ego`` (ties to the lower index), ascending index order."""
    p = np.asarray(positions, dtype=float)
    if budget < 1:
        raise DomainError("budget must be >= 1")
    others = np.array([j for j in range(p.shape[0]) if j != ego], dtype=int)
    if budget >= others.size:
        return others
    d = np.linalg.norm(p[others] - p[ego], axis=1)
    order = np.argsort(d, kind="stable")
    return np.sort(others[order[:budget]])

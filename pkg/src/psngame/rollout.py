"""Receding-horizon prediction and planning loops."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .game import (
    DomainError,
    DynamicsSpec,
    GameSpec,
    JointTrajectory,
    SelectionMask,
    build_masked_game,
    dynamics_matrices,
)
from .learning import infer_goals, soft_mask
from .nn import Network
from .selection import SelectionContext, SelectionParams, prefilter_candidates, select
from .solver import SolverConfig, solve_olne


@dataclass(frozen=True)
class RolloutConfig:
    obs_steps: int = 10  # K + 1
    horizon: int = 10
    steps: int = 50  # prediction interval, or planning step cap
    goal_radius: float = 0.1
    selection: SelectionParams = SelectionParams("All")
    goal_source: str = "ground_truth"  # or "gin"
    candidate_budget: int | None = None  # nearest-neighbour pre-filter size
    solver: SolverConfig = SolverConfig()

    def __post_init__(self):
        if min(self.obs_steps, self.horizon, self.steps) < 1:
            raise DomainError("obs_steps, horizon and steps must be >= 1")
        if self.goal_radius < 0:
            raise DomainError("goal_radius must be >= 0")
        if self.goal_source not in ("ground_truth", "gin"):
            raise DomainError(f"unknown goal source {self.goal_source!r}")
        if self.candidate_budget is not None and self.candidate_budget < 1:
            raise DomainError("candidate_budget must be >= 1")


@dataclass
class RolloutTrace:
    """Closed-loop record. ``states[0]`` is the last observed state; ``history`` the window before it."""

    task: str
    ego: int
    dt: float
    history: np.ndarray  # (K+1, N, 4), history[-1] == states[0]
    states: np.ndarray  # (S+1, N, 4)
    controls: np.ndarray  # (S, N, 2)
    masks: np.ndarray  # (S, N-1)
    game_sizes: np.ndarray  # (S,)
    iterations: np.ndarray  # (S,) masked-game solver iterations
    residuals: np.ndarray  # (S,)
    goals: np.ndarray  # goals used by the games (true or inferred)
    true_goals: np.ndarray
    failure: str | None = None
    label: str = ""

    @property
    def n_steps(self) -> int:
        return self.controls.shape[0]

    @property
    def n_agents(self) -> int:
        return self.states.shape[1]

    @property
    def ego_positions(self) -> np.ndarray:
        return self.states[:, self.ego, :2]

    def feasibility_error(self) -> float:
        if self.n_steps == 0:
            return 0.0
        A, B = dynamics_matrices(self.dt)
        pred = self.states[:-1] @ A.T + self.controls @ B.T
        return float(np.max(np.abs(pred - self.states[1:])))

    # -- JSON lines -----------------------------------------------------------

    def save(self, path) -> None:
        head = {
            "task": self.task,
            "ego": self.ego,
            "dt": self.dt,
            "label": self.label,
            "failure": self.failure,
            "history": self.history.tolist(),
            "initial_state": self.states[0].tolist(),
            "goals": self.goals.tolist(),
            "true_goals": self.true_goals.tolist(),
        }
        lines = [json.dumps(head)]
        for k in range(self.n_steps):
            lines.append(
                json.dumps(
                    {
                        "k": k,
                        "control": self.controls[k].tolist(),
                        "state": self.states[k + 1].tolist(),
                        "mask": self.masks[k].tolist(),
                        "game_size": int(self.game_sizes[k]),
                        "iterations": int(self.iterations[k]),
                        "residual": float(self.residuals[k]),
                    }
                )
            )
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "RolloutTrace":
        text = Path(path).read_text().strip()
        if not text:
            raise DomainError(f"{path}: empty trace file")
        try:
            rows = [json.loads(line) for line in text.splitlines()]
            head, steps = rows[0], rows[1:]
            n = len(head["initial_state"])
            states = np.array([head["initial_state"]] + [r["state"] for r in steps], dtype=float)
            return cls(
                task=head["task"],
                ego=int(head["ego"]),
                dt=float(head["dt"]),
                history=np.array(head["history"], dtype=float),
                states=states.reshape(-1, n, 4),
                controls=np.array([r["control"] for r in steps], dtype=float).reshape(-1, n, 2),
                masks=np.array([r["mask"] for r in steps], dtype=float).reshape(-1, n - 1),
                game_sizes=np.array([r["game_size"] for r in steps], dtype=int),
                iterations=np.array([r["iterations"] for r in steps], dtype=int),
                residuals=np.array([r["residual"] for r in steps], dtype=float),
                goals=np.array(head["goals"], dtype=float),
                true_goals=np.array(head["true_goals"], dtype=float),
                failure=head.get("failure"),
                label=head.get("label", ""),
            )
        except (KeyError, ValueError, TypeError, IndexError) as exc:
            raise DomainError(f"{path}: malformed trace ({exc})") from None


def controls_from_states(states: np.ndarray, dt: float) -> np.ndarray:
    """Accelerations recovered from consecutive velocities, ``(L-1, N, 2)``."""
    s = np.asarray(states, dtype=float)
    return (s[1:, :, 2:] - s[:-1, :, 2:]) / dt


def _game_at(state, goals, weights, dt, T) -> GameSpec:
    return GameSpec(DynamicsSpec(dt, T), weights, state, goals)


def full_game_rollout(game: GameSpec, steps: int, config: SolverConfig | None = None):
    """Everyone plays the first control of the full-game equilibrium, re-solved each step.

    Returns ``(states (steps+1, N, 4), controls (steps, N, 2), solutions)``;
    raises ``DomainError`` if a solve fails.
    """
    dt, T = game.dt, game.horizon
    x = np.array(game.initial_states)
    states, controls, sols = [x], [], []
    warm = None
    for k in range(steps):
        g = _game_at(x, game.goals, game.weights, dt, T)
        sol = solve_olne(g, warm_start=warm, config=config)
        if not sol.converged:
            raise DomainError(f"full-game solve failed at step {k} (residual {sol.final_kkt_residual:.2e})")
        sols.append(sol)
        u = sol.trajectory.controls[0]
        x = sol.trajectory.states[1]
        states.append(x)
        controls.append(u)
        warm = sol.trajectory.shifted(dt)
    return np.array(states), np.array(controls).reshape(steps, game.n_agents, 2), sols


def choose_mask(
    ctx: SelectionContext,
    params: SelectionParams,
    history: np.ndarray,
    psn: Network | None = None,
    budget: int | None = None,
) -> SelectionMask:
    """Selection mask for ``ctx.ego``, optionally inside a nearest-neighbour candidate set.

    A PSN trained for fewer agents than the scene implies a candidate set of
    ``psn.spec.n_agents - 1``.
    """
    n, ego = ctx.n_agents, ctx.ego
    if psn is not None and params.uses_psn and psn.spec.n_agents != n:
        if psn.spec.n_agents > n:
            raise DomainError(f"PSN expects {psn.spec.n_agents} agents, scene has {n}")
        budget = psn.spec.n_agents - 1
    fn = None
    if params.uses_psn:
        if psn is None:
            raise DomainError(f"{params.method} needs a trained selection network")
        fn = lambda c, h: soft_mask(psn, h, c.ego)  # noqa: E731
    if budget is None or budget >= n - 1:
        return select(ctx, params, fn, history)
    cand = prefilter_candidates(ctx.state[:, :2], ego, budget)
    keep = sorted(list(cand) + [ego])
    sub = SelectionContext(
        keep.index(ego),
        ctx.state[keep],
        None if ctx.prev_state is None else ctx.prev_state[keep],
        None if ctx.controls is None else ctx.controls[keep],
        ctx.weights,
        ctx.dt,
    )
    sub_mask = select(sub, params, fn, history[:, keep])
    full = np.zeros(n - 1)
    others = [j for j in range(n) if j != ego]
    for j, val in zip([a for a in keep if a != ego], sub_mask.values):
        full[others.index(j)] = val
    return SelectionMask(ego, full)


@dataclass
class _Loop:
    game: GameSpec
    ego: int
    config: RolloutConfig
    psn: Network | None
    goals: np.ndarray
    history: np.ndarray
    states: list = field(default_factory=list)
    controls: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    sizes: list = field(default_factory=list)
    iters: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    failure: str | None = None
    warm_full: JointTrajectory | None = None

    def step(self, k: int) -> bool:
        cfg, game, ego = self.config, self.game, self.ego
        dt = game.dt
        x = self.states[-1]
        window = np.concatenate([self.history, np.array(self.states[1:]).reshape(-1, *x.shape)])
        window = window[-cfg.obs_steps :]
        prev = window[-2] if window.shape[0] > 1 else None
        last_u = self.controls[-1] if self.controls else (
            controls_from_states(window[-2:], dt)[0] if window.shape[0] > 1 else np.zeros((game.n_agents, 2))
        )
        ctx = SelectionContext(ego, x, prev, last_u, game.agent_weights(ego), dt)
        mask = choose_mask(ctx, cfg.selection, window, self.psn, cfg.candidate_budget)

        g = _game_at(x, self.goals, game.weights, dt, cfg.horizon)
        full = solve_olne(g, warm_start=self.warm_full, config=cfg.solver)
        if not full.converged:
            self.failure = f"step {k}: full-game solve did not converge"
            return False
        if mask.values.size == 0 or np.all(mask.values == 1.0):
            masked, ego_u, size = full, full.trajectory.controls[0, ego], game.n_agents
        else:
            mg = build_masked_game(g, ego, mask)
            keep = list(mg.index_map)
            warm = JointTrajectory(full.trajectory.states[:, keep], full.trajectory.controls[:, keep])
            masked = solve_olne(mg.game, warm_start=warm, config=cfg.solver)
            if not masked.converged:
                self.failure = f"step {k}: masked-game solve did not converge"
                return False
            ego_u, size = masked.trajectory.controls[0, mg.ego], len(keep)
        u = np.array(full.trajectory.controls[0])
        u[ego] = ego_u
        A, B = dynamics_matrices(dt)
        self.states.append(x @ A.T + u @ B.T)
        self.controls.append(u)
        self.masks.append(mask.values)
        self.sizes.append(size)
        self.iters.append(masked.iterations)
        self.residuals.append(masked.final_kkt_residual)
        self.warm_full = full.trajectory.shifted(dt)
        return True

    def trace(self, task: str, label: str) -> RolloutTrace:
        n = self.game.n_agents
        S = len(self.controls)
        return RolloutTrace(
            task=task,
            ego=self.ego,
            dt=self.game.dt,
            history=self.history,
            states=np.array(self.states).reshape(S + 1, n, 4),
            controls=np.array(self.controls).reshape(S, n, 2),
            masks=np.array(self.masks).reshape(S, n - 1),
            game_sizes=np.array(self.sizes, dtype=int),
            iterations=np.array(self.iters, dtype=int),
            residuals=np.array(self.residuals, dtype=float),
            goals=np.asarray(self.goals, dtype=float),
            true_goals=np.array(self.game.goals),
            failure=self.failure,
            label=label,
        )


def _goals(game: GameSpec, history: np.ndarray, config: RolloutConfig, gin: Network | None, keep_ego=None):
    if config.goal_source == "ground_truth":
        return np.array(game.goals)
    if gin is None:
        raise DomainError("goal source 'gin' needs a goal inference network")
    goals = infer_goals(gin, history)
    if keep_ego is not None:
        goals[keep_ego] = game.goals[keep_ego]
    return goals


def predict(
    game: GameSpec,
    ground_truth: np.ndarray,
    ego: int,
    config: RolloutConfig,
    psn: Network | None = None,
    gin: Network | None = None,
) -> RolloutTrace:
    """Predict ``config.steps`` steps after the first ``obs_steps`` ground-truth states.

    The ego follows its masked game, every other agent the full game. Only the
    first ``obs_steps`` rows of ``ground_truth`` are read.
    """
    gt = np.asarray(ground_truth, dtype=float)
    K1 = config.obs_steps
    if gt.ndim != 3 or gt.shape[0] < K1 or gt.shape[1:] != (game.n_agents, 4):
        raise DomainError(f"ground truth must be (>= {K1}, {game.n_agents}, 4)")
    history = gt[:K1].copy()
    loop = _Loop(game, ego, config, psn, _goals(game, history, config, gin), history)
    loop.states.append(history[-1])
    for k in range(config.steps):
        if not loop.step(k):
            break
    return loop.trace("prediction", config.selection.label)


def bootstrap_history(game: GameSpec, obs_steps: int, config: SolverConfig | None = None) -> np.ndarray:
    """``obs_steps`` states of a full-game warm-up rollout from the initial states."""
    states, _, _ = full_game_rollout(game, obs_steps - 1, config)
    return states


def plan(
    game: GameSpec,
    ego: int,
    config: RolloutConfig,
    psn: Network | None = None,
    gin: Network | None = None,
    history: np.ndarray | None = None,
) -> RolloutTrace:
    """Plan for ``ego`` until it is within ``goal_radius`` of its goal or the step cap is hit."""
    if history is None:
        history = bootstrap_history(game, config.obs_steps, config.solver)
    history = np.asarray(history, dtype=float)
    if history.shape != (config.obs_steps, game.n_agents, 4):
        raise DomainError(f"history must be ({config.obs_steps}, {game.n_agents}, 4)")
    loop = _Loop(game, ego, config, psn, _goals(game, history, config, gin, keep_ego=ego), history)
    loop.states.append(history[-1])
    goal = game.goals[ego]
    for k in range(config.steps):
        if np.linalg.norm(loop.states[-1][ego, :2] - goal) <= config.goal_radius:
            break
        if not loop.step(k):
            break
    return loop.trace("planning", config.selection.label)

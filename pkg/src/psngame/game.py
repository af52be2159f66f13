"""Game data types, double-integrator dynamics, stage costs and masked games."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

STATE_DIM = 4
CONTROL_DIM = 2

# Stage-cost weights (reference, velocity, control, collision) used in all scenarios.
DEFAULT_WEIGHTS = (0.1, 0.001, 0.1, 0.1)


class DomainError(ValueError):
    """Input outside the domain of an operation."""


def _frozen(a, shape=None, name="array") -> np.ndarray:
    arr = np.array(a, dtype=float)
    if shape is not None and arr.shape != shape:
        raise DomainError(f"{name} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class AgentState:
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen(self.position, (2,), "position"))
        object.__setattr__(self, "velocity", _frozen(self.velocity, (2,), "velocity"))

    @classmethod
    def from_vector(cls, x) -> "AgentState":
        x = np.asarray(x, dtype=float)
        return cls(x[:2], x[2:4])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


@dataclass(frozen=True)
class Control:
    acceleration: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "acceleration", _frozen(self.acceleration, (2,), "acceleration")
        )


@dataclass(frozen=True)
class DynamicsSpec:
    dt: float = 0.1
    horizon: int = 10

    def __post_init__(self):
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise DomainError(f"dt must be positive, got {self.dt}")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise DomainError(f"horizon must be an integer >= 1, got {self.horizon}")
        object.__setattr__(self, "horizon", int(self.horizon))


@dataclass(frozen=True)
class CostWeights:
    w1: float = DEFAULT_WEIGHTS[0]
    w2: float = DEFAULT_WEIGHTS[1]
    w3: float = DEFAULT_WEIGHTS[2]
    w4: float = DEFAULT_WEIGHTS[3]

    def __post_init__(self):
        for name in ("w1", "w2", "w3", "w4"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise DomainError(f"weight {name} must be finite and >= 0, got {v}")

    def as_array(self) -> np.ndarray:
        return np.array([self.w1, self.w2, self.w3, self.w4])


def dynamics_matrices(dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(A, B*dt)`` of the planar double integrator."""
    A = np.eye(4)
    A[0, 2] = A[1, 3] = dt
    Bd = np.zeros((4, 2))
    Bd[2, 0] = Bd[3, 1] = dt
    return A, Bd


def step_dynamics(state, control, dt: float):
    """One step of ``p' = p + v dt``, ``v' = v + a dt``.

    Accepts either ``AgentState``/``Control`` objects (returns an ``AgentState``)
    or raw arrays with trailing dimensions 4 and 2 (returns an array).
    """
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt}")
    if isinstance(state, AgentState):
        acc = control.acceleration if isinstance(control, Control) else control
        x = _step_array(state.as_vector(), np.asarray(acc, dtype=float), dt)
        return AgentState.from_vector(x)
    x = np.asarray(state, dtype=float)
    u = np.asarray(control, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise DomainError("non-finite state or control")
    return _step_array(x, u, dt)


def _step_array(x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise DomainError("non-finite state or control")
    out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (4,)))
    out[..., :2] = x[..., :2] + x[..., 2:4] * dt
    out[..., 2:4] = x[..., 2:4] + u * dt
    return out


def rollout(x0: np.ndarray, controls: np.ndarray, dt: float) -> np.ndarray:
    """Roll controls ``(T, N, 2)`` forward from ``x0`` ``(N, 4)``; returns ``(T+1, N, 4)``."""
    T = controls.shape[0]
    states = np.empty((T + 1,) + x0.shape)
    states[0] = x0
    for k in range(T):
        states[k + 1] = _step_array(states[k], controls[k], dt)
    return states


def reference_position(p0, pg, k: int, T: int) -> np.ndarray:
    if T < 1:
        raise DomainError("horizon must be >= 1")
    if k < 0 or k > T:
        raise DomainError(f"step {k} outside [0, {T}]")
    s = k / T
    return (1.0 - s) * np.asarray(p0, dtype=float) + s * np.asarray(pg, dtype=float)


def reference_path(p0: np.ndarray, pg: np.ndarray, T: int) -> np.ndarray:
    """Reference positions for ``k = 0..T``; shape ``(T+1, ..., 2)``."""
    s = (np.arange(T + 1) / T).reshape((-1,) + (1,) * np.ndim(p0))
    return (1.0 - s) * p0 + s * pg


@dataclass(frozen=True)
class SelectionMask:
    """Ego-centric mask over the other agents, in ascending original index order."""

    ego: int
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if np.any(~np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
            raise DomainError("mask entries must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "ego", int(self.ego))

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0) | (self.values == 1)))

    @property
    def others(self) -> np.ndarray:
        n = self.values.size + 1
        return np.array([j for j in range(n) if j != self.ego], dtype=int)

    def selected(self) -> list[int]:
        """Original indices with mask entry 1 (the unmasked set)."""
        return [int(j) for j, m in zip(self.others, self.values) if m == 1]

    @classmethod
    def ones(cls, n_agents: int, ego: int) -> "SelectionMask":
        return cls(ego, np.ones(n_agents - 1))

    @classmethod
    def zeros(cls, n_agents: int, ego: int) -> "SelectionMask":
        return cls(ego, np.zeros(n_agents - 1))

    def inclusion(self) -> np.ndarray:
        """Per-agent inclusion weights, 1 for the ego and the mask entry otherwise."""
        rho = np.ones(self.values.size + 1)
        rho[self.others] = self.values
        return rho


@dataclass(frozen=True)
class GameSpec:
    """N-player trajectory game.

    ``weights`` is ``(N, 4)``, ``initial_states`` is ``(N, 4)`` rows of
    ``(px, py, vx, vy)``, ``goals`` is ``(N, 2)``.
    """

    dynamics: DynamicsSpec
    weights: np.ndarray
    initial_states: np.ndarray
    goals: np.ndarray

    def __post_init__(self):
        x0 = np.array(self.initial_states, dtype=float)
        if x0.ndim != 2 or x0.shape[1] != 4 or x0.shape[0] < 1:
            raise DomainError(f"initial_states must be (N, 4), got {x0.shape}")
        n = x0.shape[0]
        object.__setattr__(self, "initial_states", _frozen(x0, (n, 4), "initial_states"))
        object.__setattr__(self, "goals", _frozen(self.goals, (n, 2), "goals"))
        w = np.array(self.weights, dtype=float)
        if w.shape == (4,):
            w = np.tile(w, (n, 1))
        w = _frozen(w, (n, 4), "weights")
        if np.any(w < 0):
            raise DomainError("weights must be nonnegative")
        object.__setattr__(self, "weights", w)

    @property
    def n_agents(self) -> int:
        return self.initial_states.shape[0]

    @property
    def dt(self) -> float:
        return self.dynamics.dt

    @property
    def horizon(self) -> int:
        return self.dynamics.horizon

    def agent_weights(self, i: int) -> CostWeights:
        return CostWeights(*self.weights[i])

    def with_initial_states(self, x0: np.ndarray) -> "GameSpec":
        return GameSpec(self.dynamics, self.weights, x0, self.goals)

    def with_goals(self, goals: np.ndarray) -> "GameSpec":
        return GameSpec(self.dynamics, self.weights, self.initial_states, goals)

    def subgame(self, agents: Sequence[int]) -> "GameSpec":
        idx = np.asarray(agents, dtype=int)
        return GameSpec(
            self.dynamics, self.weights[idx], self.initial_states[idx], self.goals[idx]
        )

    def to_dict(self) -> dict:
        return {
            "n_agents": self.n_agents,
            "dt": self.dt,
            "horizon": self.horizon,
            "weights": self.weights.tolist(),
            "initial_states": self.initial_states.tolist(),
            "goals": self.goals.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GameSpec":
        game = cls(
            DynamicsSpec(float(d["dt"]), int(d["horizon"])),
            d["weights"],
            d["initial_states"],
            d["goals"],
        )
        if "n_agents" in d and int(d["n_agents"]) != game.n_agents:
            raise DomainError("n_agents disagrees with per-agent arrays")
        return game

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "GameSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other):
        if not isinstance(other, GameSpec):
            return NotImplemented
        return (
            self.dynamics == other.dynamics
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.initial_states, other.initial_states)
            and np.array_equal(self.goals, other.goals)
        )

    __hash__ = None


@dataclass(frozen=True)
class JointTrajectory:
    """States ``(T+1, N, 4)`` and controls ``(T, N, 2)`` of all agents."""

    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        s = np.array(self.states, dtype=float)
        u = np.array(self.controls, dtype=float)
        if s.ndim != 3 or s.shape[2] != 4 or u.ndim != 3 or u.shape[2] != 2:
            raise DomainError("states must be (T+1, N, 4) and controls (T, N, 2)")
        if s.shape[0] != u.shape[0] + 1 or s.shape[1] != u.shape[1]:
            raise DomainError("inconsistent trajectory shapes")
        s.setflags(write=False)
        u.setflags(write=False)
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "controls", u)

    @classmethod
    def from_controls(cls, x0: np.ndarray, controls: np.ndarray, dt: float):
        return cls(rollout(np.asarray(x0, dtype=float), np.asarray(controls, dtype=float), dt), controls)

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    @property
    def n_agents(self) -> int:
        return self.states.shape[1]

    @property
    def positions(self) -> np.ndarray:
        return self.states[..., :2]

    def feasibility_error(self, dt: float) -> float:
        pred = _step_array(self.states[:-1], self.controls, dt)
        return float(np.max(np.abs(pred - self.states[1:]), initial=0.0))

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.states.ravel(), self.controls.ravel()])

    def agents(self, idx: Sequence[int]) -> "JointTrajectory":
        idx = np.asarray(idx, dtype=int)
        return JointTrajectory(self.states[:, idx], self.controls[:, idx])

    def shifted(self, dt: float) -> "JointTrajectory":
        """Warm start for the next receding-horizon solve: drop the first step, repeat the last control."""
        u = np.concatenate([self.controls[1:], self.controls[-1:]], axis=0)
        return JointTrajectory.from_controls(self.states[1], u, dt)


@dataclass(frozen=True)
class ObservationWindow:
    """Trailing window of ``K+1`` observations of all agents.

    ``data`` is ``(K+1, N, 4)`` for ``kind='full'`` and ``(K+1, N, 2)`` for
    ``kind='partial'`` (positions only).
    """

    data: np.ndarray
    kind: str = "full"

    def __post_init__(self):
        d = np.array(self.data, dtype=float)
        dim = {"full": 4, "partial": 2}.get(self.kind)
        if dim is None:
            raise DomainError(f"unknown observation kind {self.kind!r}")
        if d.ndim != 3 or d.shape[2] != dim:
            raise DomainError(f"{self.kind} observation must be (K+1, N, {dim}), got {d.shape}")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @classmethod
    def from_states(cls, states: np.ndarray, kind: str = "full") -> "ObservationWindow":
        states = np.asarray(states, dtype=float)
        return cls(states if kind == "full" else states[..., :2], kind)

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def n_agents(self) -> int:
        return self.data.shape[1]

    def ego_first(self, ego: int) -> np.ndarray:
        order = [ego] + [j for j in range(self.n_agents) if j != ego]
        return self.data[:, order]


@dataclass(frozen=True)
class StageCost:
    private: float
    shared: float

    @property
    def total(self) -> float:
        return self.private + self.shared


def stage_cost(
    game: GameSpec,
    ego: int,
    joint_state: np.ndarray,
    joint_control: np.ndarray | None,
    k: int,
    mask: SelectionMask | None = None,
) -> StageCost:
    """Private and (optionally mask-weighted) shared stage cost of ``ego`` at step ``k``."""
    x = np.asarray(joint_state, dtype=float)
    n = game.n_agents
    if x.shape != (n, 4):
        raise DomainError(f"joint state must be ({n}, 4)")
    if mask is not None and mask.ego != ego:
        raise DomainError(f"mask is for ego {mask.ego}, not {ego}")
    if mask is not None and mask.values.size != n - 1:
        raise DomainError("mask length must be N-1")
    w1, w2, w3, w4 = game.weights[ego]
    p, v = x[ego, :2], x[ego, 2:]
    pref = reference_position(game.initial_states[ego, :2], game.goals[ego], k, game.horizon)
    private = w1 * np.sum((p - pref) ** 2) + w2 * np.sum(v**2)
    if joint_control is not None:
        u = np.asarray(joint_control, dtype=float)
        if u.shape != (n, 2):
            raise DomainError(f"joint control must be ({n}, 2)")
        private += w3 * np.sum(u[ego] ** 2)
    others = [j for j in range(n) if j != ego]
    d2 = np.sum((x[others, :2] - p) ** 2, axis=1)
    m = np.ones(len(others)) if mask is None else mask.values
    shared = w4 * float(np.sum(m * np.exp(-d2)))
    return StageCost(float(private), shared)


@dataclass(frozen=True)
class MaskedGame:
    game: GameSpec
    index_map: tuple[int, ...]  # masked index -> original index
    ego: int  # ego's index inside the masked game


def build_masked_game(game: GameSpec, ego: int, mask: SelectionMask) -> MaskedGame:
    """Reduced game with the ego plus every agent whose mask entry is 1."""
    if mask.ego != ego:
        raise DomainError(f"mask is for ego {mask.ego}, not {ego}")
    if mask.values.size != game.n_agents - 1:
        raise DomainError("mask length must be N-1")
    if not mask.is_binary:
        raise DomainError("build_masked_game needs a binary mask; use a soft-mask solve instead")
    keep = sorted(mask.selected() + [ego])
    return MaskedGame(game.subgame(keep), tuple(keep), keep.index(ego))


def game_cost(game: GameSpec, agent: int, traj: JointTrajectory) -> float:
    """Cumulative cost ``sum_{k=0}^{T} c_k`` of one agent (no control term at ``k = T``)."""
    T = game.horizon
    total = 0.0
    for k in range(T + 1):
        u = traj.controls[k] if k < T else None
        total += stage_cost(game, agent, traj.states[k], u, k).total
    return total

"""Training of the player selection network (PSN) and goal inference network (GIN).

The PSN planning/prediction losses differentiate through the relaxed game with
``solver.sensitivity_vjp``; everything else is plain reverse mode in ``nn``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .game import DomainError, GameSpec, JointTrajectory, SelectionMask, reference_path
from .nn import Network, NetworkSpec
from .solver import OlneSolution, SolverConfig, SolverError, sensitivity_vjp, solve_olne

TASKS = ("prediction", "planning")
# (sparsity weight, task weight) per task
DEFAULT_SIGMAS = {"prediction": (0.075, 0.075), "planning": (0.5, 0.5)}


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    sigma_sparsity: float = 0.5
    sigma_task: float = 0.5
    seed: int = 0
    encoder: str = "flatten"
    obs_kind: str = "full"
    optimizer: str = "sgd"  # "sgd" | "momentum" | "adam"
    binary_norm: str = "n"  # divide L_Binary by N ("n") or by N-1 ("n-1")
    max_skip_fraction: float = 0.2
    gin_frame: str = "agent"  # "agent" | "world"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise DomainError("learning_rate, batch_size and epochs must be positive")
        if self.sigma_sparsity < 0 or self.sigma_task < 0:
            raise DomainError("loss weights must be >= 0")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise DomainError(f"unknown optimizer {self.optimizer!r}")
        if self.binary_norm not in ("n", "n-1"):
            raise DomainError("binary_norm must be 'n' or 'n-1'")
        if self.obs_kind not in ("full", "partial"):
            raise DomainError("obs_kind must be 'full' or 'partial'")
        if self.gin_frame not in ("agent", "world"):
            raise DomainError("gin_frame must be 'agent' or 'world'")

    @classmethod
    def for_task(cls, task: str, **kw) -> "TrainConfig":
        if task not in TASKS:
            raise DomainError(f"unknown task {task!r}")
        s1, s2 = DEFAULT_SIGMAS[task]
        return cls(**{"sigma_sparsity": s1, "sigma_task": s2, **kw})

    @property
    def obs_dim(self) -> int:
        return 4 if self.obs_kind == "full" else 2


@dataclass(frozen=True)
class TrainingSample:
    """One prediction instant of a full-game rollout.

    ``observation`` is the ``(K+1, N, 4)`` state window ending at the instant,
    ``future`` the ``(T, 2)`` ego positions that followed, ``game`` the game
    posed at the instant and ``full`` its full-game equilibrium.
    """

    observation: np.ndarray
    goals: np.ndarray
    future: np.ndarray
    game: GameSpec
    full: JointTrajectory
    ego: int = 0

    def __post_init__(self):
        obs = np.asarray(self.observation, dtype=float)
        n = self.game.n_agents
        if obs.ndim != 3 or obs.shape[1:] != (n, 4):
            raise DomainError(f"observation must be (K+1, {n}, 4)")
        if np.shape(self.goals) != (n, 2):
            raise DomainError("goals must be (N, 2)")
        if np.shape(self.future) != (self.game.horizon, 2):
            raise DomainError("future must be (T, 2)")
        if self.full.states.shape != (self.game.horizon + 1, n, 4):
            raise DomainError("full-game trajectory does not match the game")
        if not 0 <= self.ego < n:
            raise DomainError("ego out of range")

    @property
    def n_agents(self) -> int:
        return self.game.n_agents

    def to_dict(self) -> dict:
        return {
            "ego": self.ego,
            "observation": np.asarray(self.observation).tolist(),
            "goals": np.asarray(self.goals).tolist(),
            "future": np.asarray(self.future).tolist(),
            "game": self.game.to_dict(),
            "full_controls": self.full.controls.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingSample":
        game = GameSpec.from_dict(d["game"])
        full = JointTrajectory.from_controls(game.initial_states, np.array(d["full_controls"]), game.dt)
        return cls(
            np.array(d["observation"]), np.array(d["goals"]), np.array(d["future"]), game, full, int(d["ego"])
        )


@dataclass(frozen=True)
class GoalSample:
    """Observation window and true goals only (goal inference training)."""

    observation: np.ndarray
    goals: np.ndarray

    @property
    def n_agents(self) -> int:
        return self.observation.shape[1]


# -- network inputs ---------------------------------------------------------


def psn_input(states: np.ndarray, ego: int, obs_dim: int = 4) -> np.ndarray:
    """Ego-first window with positions relative to the ego's latest position."""
    s = np.asarray(states, dtype=float)
    n = s.shape[1]
    order = [ego] + [j for j in range(n) if j != ego]
    x = s[:, order].copy()
    x[..., :2] -= s[-1, ego, :2]
    return x[..., :obs_dim]


def gin_input(states: np.ndarray, obs_dim: int = 4, frame: str = "world") -> np.ndarray:
    """Observation window for the GIN; in the agent frame every agent's positions
    are taken relative to its own latest position."""
    x = np.array(states, dtype=float)[..., :obs_dim]
    if frame == "agent":
        x[..., :2] -= x[..., -1:, :, :2]
    return x


def gin_anchor(states: np.ndarray, frame: str = "world") -> np.ndarray:
    """Offset added to the raw GIN output to get world-frame goals, ``(..., N, 2)``."""
    s = np.asarray(states, dtype=float)
    if frame == "agent":
        return s[..., -1, :, :2]
    return np.zeros(s.shape[:-3] + s.shape[-2:-1] + (2,))


def psn_spec(n_agents: int, config: TrainConfig, obs_len: int = 10) -> NetworkSpec:
    return NetworkSpec("psn", n_agents, obs_len, config.obs_dim, config.encoder)


def gin_spec(n_agents: int, config: TrainConfig, obs_len: int = 10) -> NetworkSpec:
    return NetworkSpec("gin", n_agents, obs_len, config.obs_dim, config.encoder, frame=config.gin_frame)


def soft_mask(net: Network, states: np.ndarray, ego: int) -> np.ndarray:
    """Inference-mode PSN mask over the other agents (ascending index order)."""
    return net(psn_input(states, ego, net.spec.obs_dim))[0]


def infer_goals(net: Network, states: np.ndarray) -> np.ndarray:
    frame = net.spec.frame
    return net(gin_input(states, net.spec.obs_dim, frame))[0].reshape(-1, 2) + gin_anchor(states, frame)


# -- losses -----------------------------------------------------------------


@dataclass(frozen=True)
class LossTerms:
    binary: float
    sparsity: float
    task: float
    total: float
    grad: np.ndarray  # dL/dm, (N-1,)
    solution: OlneSolution | None = None

    def as_dict(self) -> dict:
        return {"total": self.total, "binary": self.binary, "sparsity": self.sparsity, "task": self.task}


def binary_loss(m: np.ndarray, n_agents: int, norm: str = "n"):
    d = n_agents if norm == "n" else n_agents - 1
    return float(np.sum(m * (1 - m)) / d), (1 - 2 * m) / d


def sparsity_loss(m: np.ndarray, n_agents: int):
    return float(np.sum(np.abs(m)) / n_agents), np.sign(m) / n_agents


def similarity_loss(sample: TrainingSample, traj: JointTrajectory):
    """``sum_k ||p_hat_k - p_k||`` over the horizon and its gradient w.r.t. ``traj.flatten()``."""
    e = sample.ego
    diff = traj.states[1:, e, :2] - sample.future
    norms = np.linalg.norm(diff, axis=1)
    gs = np.zeros_like(traj.states)
    safe = np.where(norms > 0, norms, 1.0)
    gs[1:, e, :2] = diff / safe[:, None] * (norms > 0)[:, None]
    return float(norms.sum()), np.concatenate([gs.ravel(), np.zeros(traj.controls.size)])


def ego_cost_loss(sample: TrainingSample, traj: JointTrajectory):
    """Ego game cost with the others frozen on the full-game solution, and its flat gradient."""
    game, e = sample.game, sample.ego
    w1, w2, w3, w4 = game.weights[e]
    T = game.horizon
    p = traj.states[:, e, :2]
    v = traj.states[:, e, 2:]
    u = traj.controls[:, e]
    pref = reference_path(game.initial_states[e, :2], game.goals[e], T)
    others = [j for j in range(game.n_agents) if j != e]
    d = p[:, None, :] - sample.full.states[:, others, :2]
    phi = np.exp(-np.sum(d * d, axis=2))
    cost = w1 * np.sum((p - pref) ** 2) + w2 * np.sum(v**2) + w3 * np.sum(u**2) + w4 * np.sum(phi)
    gs = np.zeros_like(traj.states)
    gs[:, e, :2] = 2 * w1 * (p - pref) - 2 * w4 * np.einsum("kj,kjc->kc", phi, d)
    gs[:, e, 2:] = 2 * w2 * v
    gu = np.zeros_like(traj.controls)
    gu[:, e] = 2 * w3 * u
    return float(cost), np.concatenate([gs.ravel(), gu.ravel()])


def psn_loss(
    mask_values: np.ndarray,
    sample: TrainingSample,
    task: str,
    config: TrainConfig | None = None,
    solver_config: SolverConfig | None = None,
    warm_start: JointTrajectory | None = None,
) -> LossTerms:
    """Task loss of a soft mask and its gradient; raises ``SolverError`` if the relaxed game fails."""
    if task not in TASKS:
        raise DomainError(f"unknown task {task!r}")
    config = config or TrainConfig.for_task(task)
    m = np.asarray(mask_values, dtype=float)
    n = sample.n_agents
    if m.shape != (n - 1,):
        raise DomainError(f"mask must have {n - 1} entries")
    lb, gb = binary_loss(m, n, config.binary_norm)
    ls, gsp = sparsity_loss(m, n)
    mask = SelectionMask(sample.ego, m)
    sol = solve_olne(sample.game, mask, warm_start=warm_start, config=solver_config)
    if not sol.converged:
        raise SolverError(f"relaxed game did not converge (residual {sol.final_kkt_residual:.2e})", sol.iterations)
    if task == "prediction":
        lt, v = similarity_loss(sample, sol.trajectory)
    else:
        lt, v = ego_cost_loss(sample, sol.trajectory)
    gt = sensitivity_vjp(sample.game, mask, sol, "mask", v)
    total = lb + config.sigma_sparsity * ls + config.sigma_task * lt
    grad = gb + config.sigma_sparsity * gsp + config.sigma_task * gt
    return LossTerms(lb, ls, lt, total, grad, sol)


def goal_loss(pred: np.ndarray, goals: np.ndarray):
    """Mean over samples and agents of ``||p_g - G(x)||``; ``pred`` is ``(B, 2N)``."""
    B = pred.shape[0]
    diff = pred.reshape(B, -1, 2) - goals
    norms = np.linalg.norm(diff, axis=2)
    safe = np.where(norms > 0, norms, 1.0)
    g = diff / safe[..., None] * (norms > 0)[..., None] / norms.size
    return float(norms.mean()), g.reshape(B, -1)


# -- optimizers ---------------------------------------------------------------


class Optimizer:
    def __init__(self, kind: str, lr: float, n: int, beta1=0.9, beta2=0.999, eps=1e-8):
        self.kind, self.lr = kind, lr
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        if self.kind == "sgd":
            return params - self.lr * grad
        if self.kind == "momentum":
            self.m = self.b1 * self.m + grad
            return params - self.lr * self.m
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return params - self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class TrainResult:
    network: Network
    curve: list = field(default_factory=list)  # one dict per epoch


def _check_dataset(samples, kind):
    if not samples:
        raise DomainError(f"{kind} training needs a nonempty dataset")
    shapes = {(s.observation.shape, s.n_agents) for s in samples}
    if len(shapes) != 1:
        raise DomainError(f"{kind} dataset has mixed shapes: {sorted(shapes)}")


def train_gin(samples: list, config: TrainConfig, network: Network | None = None) -> TrainResult:
    _check_dataset(samples, "GIN")
    K1, n = samples[0].observation.shape[:2]
    net = network or Network(gin_spec(n, config, K1), seed=config.seed)
    if net.spec.input_size != K1 * n * config.obs_dim or net.spec.kind != "gin":
        raise DomainError(f"GIN input size {net.spec.input_size} does not match the dataset")
    frame = net.spec.frame
    X = np.stack([gin_input(s.observation, config.obs_dim, frame) for s in samples])
    Y = np.stack([s.goals - gin_anchor(s.observation, frame) for s in samples])
    rng = np.random.default_rng(config.seed)
    opt = Optimizer(config.optimizer, config.learning_rate, net.n_params)
    result = TrainResult(net)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(samples))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            out, tape = net.forward(X[idx], train=True, seed=int(rng.integers(2**63)))
            loss, dout = goal_loss(out, Y[idx])
            if not np.isfinite(loss):
                raise TrainingError("goal loss is not finite", epoch)
            net.set_params(opt.step(net.params, net.backward(tape, dout)))
            total += loss * len(idx)
            count += len(idx)
        # inference-mode loss on the whole training set, free of dropout noise
        result.curve.append({"epoch": epoch, "goal": total / count, "goal_eval": goal_loss(net(X), Y)[0]})
    return result


def evaluate_gin(net: Network, samples: list) -> float:
    """Mean world-frame goal error of the inference-mode network."""
    frame = net.spec.frame
    X = np.stack([gin_input(s.observation, net.spec.obs_dim, frame) for s in samples])
    A = np.stack([gin_anchor(s.observation, frame) for s in samples])
    Y = np.stack([s.goals for s in samples])
    return goal_loss(net(X) + A.reshape(len(samples), -1), Y)[0]


def train_psn(
    samples: list,
    task: str,
    config: TrainConfig,
    solver_config: SolverConfig | None = None,
    network: Network | None = None,
) -> TrainResult:
    """Mini-batch descent on the PSN task loss.

    Relaxed-game solves warm-start from the previous solution of the same
    sample; non-convergent samples are skipped and counted.
    """
    if task not in TASKS:
        raise DomainError(f"unknown task {task!r}")
    _check_dataset(samples, "PSN")
    K1, n = samples[0].observation.shape[:2]
    net = network or Network(psn_spec(n, config, K1), seed=config.seed)
    if net.spec.input_size != K1 * n * config.obs_dim or net.spec.kind != "psn":
        raise DomainError(f"PSN input size {net.spec.input_size} does not match the dataset")
    X = np.stack([psn_input(s.observation, s.ego, config.obs_dim) for s in samples])
    cache: list = [s.full for s in samples]
    rng = np.random.default_rng(config.seed)
    opt = Optimizer(config.optimizer, config.learning_rate, net.n_params)
    result = TrainResult(net)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(samples))
        sums = {"total": 0.0, "binary": 0.0, "sparsity": 0.0, "task": 0.0}
        used = skipped = 0
        selected = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            out, tape = net.forward(X[idx], train=True, seed=int(rng.integers(2**63)))
            dout = np.zeros_like(out)
            for r, i in enumerate(idx):
                try:
                    terms = psn_loss(out[r], samples[i], task, config, solver_config, cache[i])
                except SolverError:
                    skipped += 1
                    continue
                cache[i] = terms.solution.trajectory
                dout[r] = terms.grad
                for key, val in terms.as_dict().items():
                    sums[key] += val
                selected += float(np.sum(out[r] >= 0.5))
                used += 1
            if skipped > config.max_skip_fraction * len(samples):
                raise TrainingError(f"{skipped} relaxed-game solves failed; check the solver settings", epoch)
            grad = net.backward(tape, dout / len(idx))
            if not np.all(np.isfinite(grad)):
                raise TrainingError("gradient is not finite", epoch)
            net.set_params(opt.step(net.params, grad))
        if used == 0:
            raise TrainingError("every sample was skipped", epoch)
        row = {"epoch": epoch, **{k: v / used for k, v in sums.items()}}
        row["selected"] = selected / used
        row["skipped"] = skipped
        if not np.isfinite(row["total"]):
            raise TrainingError("loss is not finite", epoch)
        result.curve.append(row)
    return result


def evaluate_psn(
    net: Network,
    samples: list,
    task: str,
    config: TrainConfig | None = None,
    solver_config: SolverConfig | None = None,
    threshold: float = 0.5,
) -> dict:
    """Inference-mode mean loss terms and mean number of selected agents."""
    config = config or TrainConfig.for_task(task)
    sums = {"total": 0.0, "binary": 0.0, "sparsity": 0.0, "task": 0.0}
    selected, used = 0.0, 0
    for s in samples:
        m = soft_mask(net, s.observation, s.ego)
        try:
            terms = psn_loss(m, s, task, config, solver_config, s.full)
        except SolverError:
            continue
        for key, val in terms.as_dict().items():
            sums[key] += val
        selected += float(np.sum(m >= threshold))
        used += 1
    if used == 0:
        raise DomainError("no sample could be evaluated")
    return {**{k: v / used for k, v in sums.items()}, "selected": selected / used, "count": used}


def with_sigmas(config: TrainConfig, sparsity: float, task: float) -> TrainConfig:
    return replace(config, sigma_sparsity=sparsity, sigma_task=task)

"""Scenario and dataset generation, paired Monte Carlo benchmarks, trajectory CSV I/O."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .game import DEFAULT_WEIGHTS, DomainError, DynamicsSpec, GameSpec
from .learning import GoalSample, TrainingSample
from .metrics import MetricReport, compute_metrics
from .nn import Network
from .rollout import RolloutConfig, bootstrap_history, full_game_rollout, plan, predict
from .solver import SolverConfig, assemble_kkt, solve_olne

WORKERS_ENV = "PSNGAME_WORKERS"


class GenerationError(RuntimeError):
    pass


class DatasetError(RuntimeError):
    pass


class IngestionError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    n_agents: int = 4
    arena: float | None = None  # side length; 5 m up to 4 agents, 7 m above
    min_spacing: float = 0.5
    min_start_goal: float = 2.0
    weights: tuple = DEFAULT_WEIGHTS
    seed: int = 0
    dt: float = 0.1
    horizon: int = 10
    max_attempts: int = 10_000

    def __post_init__(self):
        if self.n_agents < 1:
            raise DomainError("n_agents must be >= 1")
        if self.arena is not None and self.arena <= 0:
            raise DomainError("arena must be positive")
        if self.min_spacing < 0 or self.min_start_goal < 0:
            raise DomainError("distances must be >= 0")
        if self.min_start_goal > self.side * math.sqrt(2):
            raise DomainError("min_start_goal exceeds the arena diagonal")
        if self.max_attempts < 1:
            raise DomainError("max_attempts must be >= 1")
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    @property
    def side(self) -> float:
        if self.arena is not None:
            return float(self.arena)
        return 5.0 if self.n_agents <= 4 else 7.0


def generate_scenario(config: ScenarioConfig, index: int = 0) -> GameSpec:
    """Random initial positions (min spacing, zero velocity) and goals (min start-goal distance)."""
    rng = np.random.default_rng([config.seed, index])
    half = config.side / 2
    n = config.n_agents
    pos = np.zeros((n, 2))
    goals = np.zeros((n, 2))
    attempts = 0
    for i in range(n):
        while True:
            attempts += 1
            if attempts > config.max_attempts:
                raise GenerationError(f"no valid scenario after {config.max_attempts} draws (seed {config.seed}, index {index})")
            p = rng.uniform(-half, half, 2)
            if i == 0 or np.min(np.linalg.norm(pos[:i] - p, axis=1)) >= config.min_spacing:
                pos[i] = p
                break
        while True:
            attempts += 1
            if attempts > config.max_attempts:
                raise GenerationError(f"no valid scenario after {config.max_attempts} draws (seed {config.seed}, index {index})")
            g = rng.uniform(-half, half, 2)
            if np.linalg.norm(g - pos[i]) >= config.min_start_goal:
                goals[i] = g
                break
    x0 = np.zeros((n, 4))
    x0[:, :2] = pos
    return GameSpec(DynamicsSpec(config.dt, config.horizon), config.weights, x0, goals)


# -- datasets -----------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    scenario: ScenarioConfig = ScenarioConfig()
    count: int = 50  # scenarios
    samples_per_scenario: int = 4
    obs_steps: int = 10
    span: int = 20  # prediction instants are drawn from the first ``span`` steps after the window
    max_drop_fraction: float = 0.1
    solver: SolverConfig = SolverConfig()

    def __post_init__(self):
        if self.count < 1 or self.samples_per_scenario < 1 or self.obs_steps < 1 or self.span < 1:
            raise DomainError("dataset counts must be >= 1")
        if self.samples_per_scenario > self.span:
            raise DomainError("samples_per_scenario must be <= span")


def generate_dataset(config: DatasetConfig) -> tuple[list, dict]:
    """Training samples cut from full-game receding-horizon rollouts.

    Returns ``(samples, stats)``; non-convergent scenarios are dropped and counted.
    """
    K = config.obs_steps - 1
    T = config.scenario.horizon
    samples, dropped = [], 0
    for s in range(config.count):
        game = generate_scenario(config.scenario, s)
        try:
            states, _, sols = full_game_rollout(game, K + config.span + T, config.solver)
        except DomainError:
            dropped += 1
            continue
        rng = np.random.default_rng([config.scenario.seed, s, 1])
        instants = np.sort(rng.choice(config.span, config.samples_per_scenario, replace=False)) + K
        egos = rng.integers(0, game.n_agents, config.samples_per_scenario)
        for t, ego in zip(instants, egos):
            t, ego = int(t), int(ego)
            sol = sols[t]
            samples.append(
                TrainingSample(
                    observation=states[t - K : t + 1],
                    goals=np.array(game.goals),
                    future=states[t + 1 : t + T + 1, ego, :2],
                    game=GameSpec(game.dynamics, game.weights, states[t], game.goals),
                    full=sol.trajectory,
                    ego=ego,
                )
            )
    if dropped > config.max_drop_fraction * config.count:
        raise DatasetError(f"{dropped} of {config.count} scenarios failed to solve; check the solver settings")
    return samples, {"scenarios": config.count, "dropped": dropped, "samples": len(samples)}


def linear_motion_dataset(n_agents: int, count: int, seed: int = 0, obs_steps: int = 10, dt: float = 0.1,
                          arrival: float = 2.0, side: float = 5.0) -> list:
    """Agents moving at constant velocity, reaching their goals ``arrival`` seconds after the window starts."""
    rng = np.random.default_rng(seed)
    out = []
    t = np.arange(obs_steps) * dt
    for _ in range(count):
        p0 = rng.uniform(-side / 2, side / 2, (n_agents, 2))
        goals = rng.uniform(-side / 2, side / 2, (n_agents, 2))
        v = (goals - p0) / arrival
        obs = np.zeros((obs_steps, n_agents, 4))
        obs[..., :2] = p0 + t[:, None, None] * v
        obs[..., 2:] = v
        out.append(GoalSample(obs, goals))
    return out


def save_dataset(path, samples: list, meta: dict | None = None) -> None:
    doc = {"version": 1, "meta": meta or {}, "samples": [s.to_dict() for s in samples]}
    Path(path).write_text(json.dumps(doc) + "\n")


def load_dataset(path) -> tuple[list, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != 1:
        raise DomainError(f"{path}: unsupported dataset version")
    return [TrainingSample.from_dict(d) for d in doc["samples"]], doc.get("meta", {})


# -- Monte Carlo --------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkConfig:
    task: str = "prediction"
    count: int = 50
    resamples: int = 1000
    seed: int = 0
    ego: int = 0
    rollout: RolloutConfig = RolloutConfig()
    scenario: ScenarioConfig = ScenarioConfig()

    def __post_init__(self):
        if self.task not in ("prediction", "planning"):
            raise DomainError(f"unknown task {self.task!r}")
        if self.count < 1 or self.resamples < 1:
            raise DomainError("count and resamples must be >= 1")


@dataclass
class RunRecord:
    scenario: int
    seed: int
    method: str
    report: MetricReport


@dataclass
class BootstrapSummary:
    methods: list
    mean: dict  # method -> {metric: value}
    se: dict
    scenarios: int
    resamples: int
    excluded: list = field(default_factory=list)


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _evaluate_scenario(args):
    index, methods, cfg, psn, gin = args
    game = generate_scenario(cfg.scenario, index)
    ro = cfg.rollout
    try:
        if cfg.task == "prediction":
            gt, _, _ = full_game_rollout(game, ro.obs_steps - 1 + ro.steps, ro.solver)
        else:
            gt = None
            history = bootstrap_history(game, ro.obs_steps, ro.solver)
    except DomainError as exc:
        return index, None, f"ground truth: {exc}"
    reports = []
    for params in methods:
        rcfg = replace(ro, selection=params)
        try:
            if cfg.task == "prediction":
                trace = predict(game, gt, cfg.ego, rcfg, psn, gin)
            else:
                trace = plan(game, cfg.ego, rcfg, psn, gin, history)
            if trace.failure:
                return index, None, f"{params.label}: {trace.failure}"
            if trace.n_steps == 0:
                return index, None, f"{params.label}: empty trace"
            reports.append(compute_metrics(trace, gt))
        except (DomainError, RuntimeError, np.linalg.LinAlgError) as exc:
            return index, None, f"{params.label}: {exc}"
    return index, reports, None


def run_monte_carlo(
    methods: list,
    config: BenchmarkConfig,
    psn: Network | None = None,
    gin: Network | None = None,
    workers: int = 1,
) -> tuple[BootstrapSummary, list]:
    """Evaluate every method on the same scenario list and bootstrap over scenarios.

    A scenario on which any method fails is dropped for all methods.
    """
    if not methods:
        raise DomainError("no methods given")
    if any(m.uses_psn for m in methods) and psn is None:
        raise DomainError("PSN methods need a checkpoint")
    if config.rollout.goal_source == "gin" and gin is None:
        raise DomainError("goal source 'gin' needs a checkpoint")
    jobs = [(i, methods, config, psn, gin) for i in range(config.count)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_evaluate_scenario, jobs))
    else:
        results = [_evaluate_scenario(j) for j in jobs]
    runs, excluded = [], []
    for index, reports, err in results:
        if reports is None:
            excluded.append((index, err))
            continue
        for params, rep in zip(methods, reports):
            runs.append(RunRecord(index, config.scenario.seed, params.label, rep))
    if not runs:
        raise DomainError("every scenario failed")
    return bootstrap(runs, [m.label for m in methods], config.resamples, config.seed, excluded), runs


def bootstrap(runs: list, labels: list, resamples: int, seed: int, excluded=()) -> BootstrapSummary:
    cols = MetricReport.columns()
    scen = sorted({r.scenario for r in runs})
    table = {lab: np.full((len(scen), len(cols)), np.nan) for lab in labels}
    pos = {s: i for i, s in enumerate(scen)}
    for r in runs:
        table[r.method][pos[r.scenario]] = r.report.row()
    idx = np.random.default_rng(seed).integers(0, len(scen), (resamples, len(scen)))
    mean, se = {}, {}
    for lab in labels:
        vals = table[lab]
        boot = np.array([_colmean(vals[i]) for i in idx])
        mean[lab] = dict(zip(cols, _colmean(boot)))
        spread = np.array([_colstd(boot[:, c]) for c in range(len(cols))])
        se[lab] = dict(zip(cols, spread))
    return BootstrapSummary(labels, mean, se, len(scen), resamples, list(excluded))


def _colmean(a: np.ndarray) -> np.ndarray:
    out = np.full(a.shape[1], np.nan)
    for c in range(a.shape[1]):
        col = a[:, c]
        col = col[np.isfinite(col)]
        if col.size:
            out[c] = col.mean()
    return out


def _colstd(col: np.ndarray) -> float:
    col = col[np.isfinite(col)]
    if col.size < 2:
        return 0.0 if col.size else math.nan
    return float(col.std(ddof=1))


PREDICTION_COLUMNS = ["ade", "fde", "consistency", "mean_selected_players"]
PLANNING_COLUMNS = [
    "traj_smoothness",
    "traj_length",
    "consistency",
    "min_distance",
    "nav_cost",
    "col_cost",
    "ctrl_cost",
    "mean_selected_players",
]


def write_runs_csv(path, runs: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scenario", "seed", "method"] + MetricReport.columns())
        for r in runs:
            w.writerow([r.scenario, r.seed, r.method] + [repr(float(v)) for v in r.report.row()])


def write_summary_csv(path, summary: BootstrapSummary, task: str) -> None:
    cols = PREDICTION_COLUMNS if task == "prediction" else PLANNING_COLUMNS
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "parameter"] + [f"{c}_{s}" for c in cols for s in ("mean", "se")] + ["scenarios"])
        for lab in summary.methods:
            name, _, param = lab.partition(":")
            vals = []
            for c in cols:
                vals += [f"{summary.mean[lab][c]:.6g}", f"{summary.se[lab][c]:.6g}"]
            w.writerow([name, param] + vals + [summary.scenarios])


# -- trajectory CSV -----------------------------------------------------------


@dataclass
class TrackSet:
    """Tracks resampled onto a common clock."""

    agent_ids: list
    times: np.ndarray  # (L,)
    states: np.ndarray  # (L, N, 4)

    @property
    def positions(self) -> np.ndarray:
        return self.states[..., :2]


def export_trajectory_csv(path, states: np.ndarray, dt: float, agent_ids=None, t0: float = 0.0) -> None:
    s = np.asarray(states, dtype=float)
    ids = agent_ids if agent_ids is not None else list(range(s.shape[1]))
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["agent_id", "t", "x", "y"])
        for j, aid in enumerate(ids):
            for k in range(s.shape[0]):
                w.writerow([aid, repr(t0 + k * dt), repr(float(s[k, j, 0])), repr(float(s[k, j, 1]))])


def ingest_trajectory_csv(path, dt_target: float = 0.1, min_frames: int = 11) -> TrackSet:
    """Read ``agent_id,t,x,y`` rows and resample every agent onto one clock with step ``dt_target``."""
    if dt_target <= 0:
        raise IngestionError("dt_target must be positive")
    tracks: dict = {}
    last_line: dict = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["agent_id", "t", "x", "y"]:
            raise IngestionError(f"{path}:1: header must be agent_id,t,x,y")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise IngestionError(f"{path}:{line}: expected 4 fields, got {len(row)}")
            aid = row[0].strip()
            try:
                t, x, y = float(row[1]), float(row[2]), float(row[3])
            except ValueError:
                raise IngestionError(f"{path}:{line}: non-numeric value") from None
            if not all(map(math.isfinite, (t, x, y))):
                raise IngestionError(f"{path}:{line}: non-finite value")
            tr = tracks.setdefault(aid, [])
            if tr and t <= tr[-1][0]:
                raise IngestionError(f"{path}:{line}: timestamps of agent {aid} not increasing (previous row {last_line[aid]})")
            tr.append((t, x, y))
            last_line[aid] = line
    if not tracks:
        raise IngestionError(f"{path}: no data rows")
    start = max(tr[0][0] for tr in tracks.values())
    end = min(tr[-1][0] for tr in tracks.values())
    if end < start:
        raise IngestionError(f"{path}: agents have no common time range")
    n_frames = int(math.floor((end - start) / dt_target + 1e-9)) + 1
    if n_frames < min_frames:
        raise IngestionError(f"{path}: only {n_frames} common frames, need {min_frames}")
    times = start + dt_target * np.arange(n_frames)
    ids = list(tracks)
    pos = np.zeros((n_frames, len(ids), 2))
    for j, aid in enumerate(ids):
        a = np.array(tracks[aid])
        pos[:, j, 0] = np.interp(times, a[:, 0], a[:, 1])
        pos[:, j, 1] = np.interp(times, a[:, 0], a[:, 2])
    vel = np.zeros_like(pos)
    vel[:-1] = np.diff(pos, axis=0) / dt_target
    vel[-1] = vel[-2]
    return TrackSet(ids, times, np.concatenate([pos, vel], axis=2))


def cut_scenes(tracks: TrackSet, length: int, stride: int | None = None, weights=DEFAULT_WEIGHTS,
               horizon: int = 10) -> list:
    """``(GameSpec, ground_truth)`` windows of ``length`` frames; goals are the final positions in each window."""
    stride = stride or length
    dt = float(tracks.times[1] - tracks.times[0]) if tracks.times.size > 1 else 0.1
    out = []
    for s in range(0, tracks.states.shape[0] - length + 1, stride):
        gt = tracks.states[s : s + length]
        game = GameSpec(DynamicsSpec(dt, horizon), weights, gt[0], gt[-1, :, :2])
        out.append((game, gt))
    return out


# -- solver scaling ------------------------------------------------------------


def kkt_scaling(agent_counts=(2, 4, 8, 16), repeats: int = 5, seed: int = 0, horizon: int = 10) -> list:
    """Median wall time of one dense KKT solve and of a full equilibrium solve per agent count.

    Rows are dicts with ``agents``, ``variables`` (states + controls), ``kkt_size``,
    ``kkt_solve`` and ``full_solve`` in seconds.
    """
    rows = []
    for n in agent_counts:
        game = generate_scenario(ScenarioConfig(n_agents=n, seed=seed, horizon=horizon), 0)
        sol = solve_olne(game)
        K, rhs = assemble_kkt(game, None, sol.trajectory)
        lin, full = [], []
        for _ in range(repeats):
            t0 = time.perf_counter()
            np.linalg.solve(K, rhs)
            lin.append(time.perf_counter() - t0)
            full.append(solve_olne(game).wall_time)
        rows.append({
            "agents": n,
            "variables": n * horizon * 6,
            "kkt_size": K.shape[0],
            "kkt_solve": float(np.median(lin)),
            "full_solve": float(np.median(full)),
        })
    return rows


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def config_dict(obj) -> dict:
    """Dataclass config as plain JSON-ready data."""
    return json.loads(json.dumps(asdict(obj), default=list))

"""Acceptance suite. Each test prints one PASS/FAIL line (also listed in the terminal summary)."""

import json
import math

import numpy as np
import pytest

from psngame.cli import main as cli
from psngame.game import SelectionMask, build_masked_game, game_cost
from psngame.harness import (
    BenchmarkConfig,
    DatasetConfig,
    ScenarioConfig,
    generate_dataset,
    generate_scenario,
    kkt_scaling,
    linear_motion_dataset,
    loglog_slope,
    run_monte_carlo,
)
from psngame.learning import TrainConfig, evaluate_gin, evaluate_psn, psn_loss, train_gin, train_psn
from psngame.metrics import compute_metrics, consistency, displacement_errors
from psngame.nn import Network, NetworkSpec
from psngame.rollout import RolloutConfig, choose_mask, plan
from psngame.selection import SelectionContext, SelectionParams, parse_method
from psngame.solver import (
    SolverConfig,
    best_response,
    equilibrium_sensitivity,
    kkt_residual,
    solve_olne,
)

from oracles import oracle_metrics, random_trace
from test_nn import fd_check

TIGHT = SolverConfig(kkt_tolerance=1e-10)


def test_solver_correctness(verdict):
    worst_res = worst_gain = 0.0
    converged = 0
    for i in range(100):
        game = generate_scenario(ScenarioConfig(n_agents=4, seed=101), i)
        sol = solve_olne(game)
        converged += sol.converged
        worst_res = max(worst_res, kkt_residual(game, None, sol.trajectory))
        for a in range(4):
            br = best_response(game, a, sol.trajectory)
            gain = game_cost(game, a, sol.trajectory) - game_cost(game, a, br)
            worst_gain = max(worst_gain, gain)
    ok = converged == 100 and worst_res <= 1e-6 and worst_gain <= 1e-6
    verdict("solver correctness", ok, f"converged {converged}/100, max residual {worst_res:.1e}, "
            f"max best-response gain {worst_gain:.1e}")
    assert ok


def test_masked_game_equivalences(verdict):
    worst = 0.0
    rng = np.random.default_rng(5)
    for i in range(50):
        game = generate_scenario(ScenarioConfig(n_agents=4, seed=102), i)
        ego = int(rng.integers(4))
        full = solve_olne(game, config=TIGHT).trajectory
        ones = solve_olne(game, SelectionMask.ones(4, ego), config=TIGHT).trajectory
        worst = max(worst, np.abs(ones.states - full.states).max())
        zeros = solve_olne(game, SelectionMask.zeros(4, ego), config=TIGHT).trajectory
        alone = solve_olne(game.subgame([ego]), config=TIGHT).trajectory
        worst = max(worst, np.abs(zeros.states[:, ego] - alone.states[:, 0]).max())
        bits = rng.integers(0, 2, 3).astype(float)
        mask = SelectionMask(ego, bits)
        mg = build_masked_game(game, ego, mask)
        relaxed = solve_olne(game, mask, config=TIGHT).trajectory
        reduced = solve_olne(mg.game, config=TIGHT).trajectory
        worst = max(worst, np.abs(relaxed.states[:, list(mg.index_map)] - reduced.states).max())
    ok = worst <= 1e-8
    verdict("masked-game equivalences", ok, f"max deviation {worst:.1e} over 50 scenes")
    assert ok


def _fd_columns(game, mask, param, h=1e-3):
    """Five-point central differences of the flattened equilibrium w.r.t. the mask or one agent's goal.

    A plain 1e-5 step bottoms out near 1e-10 absolute from rounding, which swamps
    the mask column of weakly coupled games (magnitude ~1e-8).
    """
    cols = []
    n_cols = mask.values.size if param == "mask" else 2
    for c in range(n_cols):
        out = []
        for delta in (2 * h, h, -h, -2 * h):
            if param == "mask":
                m = mask.values.copy()
                m[c] += delta
                out.append(solve_olne(game, SelectionMask(mask.ego, m), config=TIGHT).trajectory.flatten())
            else:
                goals = np.array(game.goals)
                goals[param[1], c] += delta
                out.append(solve_olne(game.with_goals(goals), mask, config=TIGHT).trajectory.flatten())
        cols.append((-out[0] + 8 * out[1] - 8 * out[2] + out[3]) / (12 * h))
    return np.stack(cols, axis=1)


def test_differentiability(verdict):
    rng = np.random.default_rng(6)
    worst_sens = 0.0
    for i in range(20):
        n = 2 if i < 10 else 4
        game = generate_scenario(ScenarioConfig(n_agents=n, seed=103), i)
        ego = int(rng.integers(n))
        mask = SelectionMask(ego, rng.uniform(0.1, 0.9, n - 1))
        sol = solve_olne(game, mask, config=TIGHT)
        other = int(rng.integers(n))
        for param in ("mask", ("goal", other)):
            name = "mask" if param == "mask" else f"goal:{other}"
            J = equilibrium_sensitivity(game, mask, sol, name).jacobian
            fd = _fd_columns(game, mask, param)
            worst_sens = max(worst_sens, np.abs(J - fd).max() / np.abs(fd).max())

    worst_net = 0.0
    for kind in ("psn", "gin"):
        for enc in ("flatten", "gru"):
            spec = NetworkSpec(kind, 3, obs_len=3, encoder=enc, hidden=(6, 5), gru_hidden=3)
            x = np.random.default_rng(1).normal(size=(2, 3, 3, 4))
            worst_net = max(worst_net, fd_check(Network(spec, seed=2), x))

    samples, _ = generate_dataset(DatasetConfig(ScenarioConfig(n_agents=4, seed=104), count=3, samples_per_scenario=2))
    worst_e2e = 0.0
    for s in samples:
        m = rng.uniform(0.2, 0.8, 3)
        for task in ("prediction", "planning"):
            g = psn_loss(m, s, task, solver_config=TIGHT).grad
            fd = np.zeros(3)
            for c in range(3):
                e = np.zeros(3)
                e[c] = 1e-5
                fd[c] = (psn_loss(m + e, s, task, solver_config=TIGHT).total
                         - psn_loss(m - e, s, task, solver_config=TIGHT).total) / 2e-5
            worst_e2e = max(worst_e2e, np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-12))
    ok = worst_sens <= 1e-4 and worst_net <= 1e-4 and worst_e2e <= 1e-3
    verdict("differentiability", ok, f"sensitivity {worst_sens:.1e}, network {worst_net:.1e}, "
            f"loss through solver {worst_e2e:.1e}")
    assert ok


def test_cubic_scaling(verdict):
    rows = kkt_scaling((2, 4, 8, 16), repeats=7, seed=0)
    slope = loglog_slope([r["variables"] for r in rows], [r["kkt_solve"] for r in rows])
    ok = 2.2 <= slope <= 3.8
    times = ", ".join(f"N={r['agents']}: {r['kkt_solve'] * 1e3:.2f} ms" for r in rows)
    verdict("cubic scaling of the dense KKT solve", ok, f"slope {slope:.2f}; {times}")
    assert ok


def test_metric_oracle(verdict):
    rng = np.random.default_rng(8)
    mismatches = 0
    for i in range(1000):
        n = int(rng.integers(1, 7))
        trace, gt = random_trace(rng, n, int(rng.integers(1, 40)), binary=bool(i % 2))
        got = compute_metrics(trace, gt)
        for name, val in oracle_metrics(trace, gt).items():
            if not math.isclose(getattr(got, name), val, rel_tol=1e-12, abs_tol=1e-12):
                mismatches += 1
    p = rng.normal(size=(10, 2))
    trivial = [
        displacement_errors(p, p)[0] == 0.0,
        math.isclose(displacement_errors(p + [0.3, 0.4], p)[0], 0.5),
        consistency(np.ones((5, 3))) == 1.0,
        consistency(np.array([[0, 1], [1, 0]] * 3, float)) == 0.0,
    ]
    ok = mismatches == 0 and all(trivial)
    verdict("metric oracle equivalence", ok, f"{mismatches} mismatches on 1000 traces, trivial cases {sum(trivial)}/4")
    assert ok


@pytest.fixture(scope="module")
def planning_data():
    return generate_dataset(DatasetConfig(ScenarioConfig(n_agents=4, seed=200), count=50, samples_per_scenario=4))[0]


def test_psn_training(verdict, planning_data):
    # lr 1e-3, batch 32, 100 epochs, sigma = (0.5, 0.5); Adam (plain SGD barely moves in 100 epochs)
    cfg = TrainConfig.for_task("planning", optimizer="adam")
    res = train_psn(planning_data, "planning", cfg)
    first, last = res.curve[0]["total"], res.curve[-1]["total"]
    drop = 1 - last / first
    ev = evaluate_psn(res.network, planning_data, "planning", cfg)
    checks = {"loss drop >= 50%": drop >= 0.5, "L_Binary <= 0.05": ev["binary"] <= 0.05, "selected < 3": ev["selected"] < 3}
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    verdict("PSN desk-scale training", ok, f"total {first:.4f} -> {last:.4f} ({drop:.0%} drop), "
            f"L_Binary {ev['binary']:.4f}, selected {ev['selected']:.2f}" + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok


def test_gin_training(verdict):
    train = linear_motion_dataset(4, 20000, seed=0)
    held = linear_motion_dataset(4, 500, seed=1)
    res = train_gin(train, TrainConfig())
    loss = np.array([row["goal"] for row in res.curve])
    mono = float(np.mean(np.diff(loss) <= 0))
    err = evaluate_gin(res.network, held)
    ok = err <= 0.2 and mono >= 0.9
    verdict("GIN desk-scale training", ok, f"held-out goal error {err:.3f} m, nonincreasing epochs {mono:.1%}")
    assert ok


BASELINES = ["distance:1", "knn:1", "gradient:1", "hessian:1", "cost-evolution:1", "bf:1", "cbf:1"]


@pytest.fixture(scope="module")
def prediction_psn():
    data, _ = generate_dataset(DatasetConfig(ScenarioConfig(n_agents=4, seed=300), count=50, samples_per_scenario=4))
    return train_psn(data, "prediction", TrainConfig.for_task("prediction")).network


def test_benchmark_sanity(verdict, prediction_psn):
    methods = [parse_method(m) for m in ["all"] + BASELINES + ["psn-rank:1"]]
    pred, _ = run_monte_carlo(methods, BenchmarkConfig("prediction", count=50, seed=7), psn=prediction_psn)
    ade = {m: pred.mean[m]["ade"] for m in pred.methods}
    se_all = pred.se["all"]["ade"]
    beats = all(ade["all"] <= ade[b] + max(se_all, pred.se[b]["ade"]) for b in BASELINES)
    psn_ok = ade["psn-rank:1"] <= 1.2 * ade["knn:1"]
    planning, _ = run_monte_carlo([parse_method("all"), parse_method("none")], BenchmarkConfig("planning", count=50, seed=7))
    dist_ok = planning.mean["all"]["min_distance"] >= planning.mean["none"]["min_distance"]
    ok = beats and psn_ok and dist_ok
    detail = (f"ADE all {ade['all']:.2e}, min baseline {min(ade[b] for b in BASELINES):.3f}, "
              f"psn-rank {ade['psn-rank:1']:.3f} vs knn {ade['knn:1']:.3f}; "
              f"Dist_m all {planning.mean['all']['min_distance']:.3f} vs none {planning.mean['none']['min_distance']:.3f}; "
              f"{pred.scenarios}/{planning.scenarios} scenes kept")
    verdict("paired benchmark sanity", ok, detail)
    assert ok


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "manifest.json"}


def test_cli_determinism(verdict, tmp_path):
    runs = []
    for rep, workers in (("a", "1"), ("b", "2")):
        base = tmp_path / rep
        data = base / "data"
        assert cli(["gen-data", "--agents", "3", "--count", "3", "--samples-per-scenario", "2", "--out", str(data)]) == 0
        assert cli(["train", "psn", "--data", str(data / "dataset.json"), "--epochs", "2", "--out", str(base / "train")]) == 0
        assert cli(["gen-data", "--kind", "linear", "--count", "64", "--agents", "3", "--out", str(base / "lin")]) == 0
        assert cli(["train", "gin", "--data", str(base / "lin" / "dataset.json"), "--epochs", "2",
                    "--out", str(base / "gin")]) == 0
        ckpt = str(base / "train" / "checkpoint.json")
        assert cli(["eval", "--agents", "3", "--count", "4", "--steps", "6", "--resamples", "50", "--workers", workers,
                    "--methods", "all,knn:1,psn-rank:1", "--psn", ckpt, "--out", str(base / "eval")]) == 0
        assert cli(["simulate", "--agents", "3", "--steps", "6", "--method", "psn-rank:1", "--psn", ckpt,
                    "--out", str(base / "sim")]) == 0
        assert cli(["plot", str(base / "sim" / "trace.jsonl"), "--out", str(base / "plot")]) == 0
        runs.append({d: _files(base / d) for d in ("data", "train", "lin", "gin", "eval", "sim", "plot")})
        cfg = json.loads((base / "eval" / "manifest.json").read_text())["config"]
        runs[-1]["config"] = cfg
    same = all(runs[0][d] == runs[1][d] for d in runs[0])
    verdict("CLI determinism", same, "gen-data, train, eval (1 vs 2 workers), simulate, plot")
    assert same


def test_prefilter(verdict):
    rng = np.random.default_rng(10)
    mismatches = 0
    for _ in range(1000):
        x = np.zeros((20, 4))
        x[:, :2] = rng.uniform(-3.5, 3.5, (20, 2))
        ego = int(rng.integers(20))
        ctx = SelectionContext(ego, x, None, None)
        hist = np.repeat(x[None], 10, axis=0)
        k = int(rng.integers(1, 11))
        p = SelectionParams("kNN", k=k)
        if not np.array_equal(choose_mask(ctx, p, hist, budget=10).values, choose_mask(ctx, p, hist).values):
            mismatches += 1

    data, _ = generate_dataset(DatasetConfig(ScenarioConfig(n_agents=10, seed=400), count=1, samples_per_scenario=2))
    psn = train_psn(data, "prediction", TrainConfig.for_task("prediction", epochs=1)).network
    cfg = RolloutConfig(steps=3, selection=SelectionParams("PsnRank", k=3))
    errors = []
    for i in range(2):
        game = generate_scenario(ScenarioConfig(n_agents=20, seed=401), i)
        hist = np.repeat(np.array(game.initial_states)[None], 10, axis=0)
        try:
            trace = plan(game, 0, cfg, psn=psn, history=hist)
            assert trace.failure is None and trace.masks.shape == (3, 19)
            assert np.all(trace.masks.sum(axis=1) == 3)
        except Exception as exc:  # report rather than abort the verdict
            errors.append(repr(exc))
    ok = mismatches == 0 and not errors
    verdict("20-agent pre-filter", ok, f"{mismatches} kNN mismatches in 1000 scenes; 10-agent PSN on 20 agents: "
            + ("ok" if not errors else "; ".join(errors)))
    assert ok

"""Command-line entry point: gen-data, train, eval, simulate, plot.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Precedence: command-line flags > ``--config`` JSON file > built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .game import DomainError
from .harness import (
    BenchmarkConfig,
    DatasetConfig,
    IngestionError,
    ScenarioConfig,
    default_workers,
    generate_dataset,
    generate_scenario,
    linear_motion_dataset,
    load_dataset,
    run_monte_carlo,
    save_dataset,
    write_runs_csv,
    write_summary_csv,
)
from .learning import GoalSample, TrainConfig, train_gin, train_psn
from .nn import Network
from .rollout import RolloutConfig, RolloutTrace, full_game_rollout, plan, predict
from .selection import parse_method

DEFAULTS = {
    "gen-data": {"agents": 4, "count": 50, "samples_per_scenario": 4, "kind": "games", "seed": 0},
    "train": {
        "task": "planning",
        "epochs": 100,
        "lr": 1e-3,
        "batch_size": 32,
        "optimizer": "sgd",
        "gin_frame": "agent",
        "encoder": "flatten",
        "obs": "full",
        "sigma_sparsity": None,
        "sigma_task": None,
        "seed": 0,
    },
    "eval": {
        "task": "prediction",
        "agents": 4,
        "methods": "all,knn:1,distance:1.0",
        "count": 50,
        "resamples": 1000,
        "steps": 50,
        "goal_source": "ground_truth",
        "seed": 0,
    },
    "simulate": {"task": "planning", "agents": 4, "method": "all", "index": 0, "ego": 0, "steps": 50, "seed": 0},
    "plot": {},
}


class UsageError(Exception):
    pass


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_manifest(out: Path, command: str, resolved: dict, inputs: dict, outputs: list, t0: float, workers=None):
    manifest = {
        "command": command,
        "config": resolved,
        "seed": resolved.get("seed"),
        "inputs": inputs,
        "outputs": outputs,
        "version": __version__,
        "runtime": {"wall_time": round(time.perf_counter() - t0, 3), "workers": workers},
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"{path}: unknown keys {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_net(path, kind: str) -> Network:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    net = Network.load(p)
    if net.spec.kind != kind:
        raise UsageError(f"{p} is a {net.spec.kind} checkpoint, expected {kind}")
    return net


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    t0 = time.perf_counter()
    cfg = _resolve("gen-data", args)
    out = _out_dir(args)
    if cfg["kind"] == "linear":
        samples = linear_motion_dataset(cfg["agents"], cfg["count"], cfg["seed"])
        doc = {
            "version": 1,
            "kind": "goals",
            "samples": [{"observation": s.observation.tolist(), "goals": s.goals.tolist()} for s in samples],
        }
        _atomic_write(out / "dataset.json", json.dumps(doc) + "\n")
        stats = {"samples": len(samples)}
    elif cfg["kind"] == "games":
        dc = DatasetConfig(
            scenario=ScenarioConfig(n_agents=cfg["agents"], seed=cfg["seed"]),
            count=cfg["count"],
            samples_per_scenario=cfg["samples_per_scenario"],
        )
        samples, stats = generate_dataset(dc)
        save_dataset(out / "dataset.json", samples, stats)
    else:
        raise UsageError(f"unknown dataset kind {cfg['kind']!r}")
    _write_manifest(out, "gen-data", cfg, {}, ["dataset.json"], t0)
    print(f"wrote {stats.get('samples')} samples to {out / 'dataset.json'}")
    return 0


def _read_dataset(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"dataset not found: {p}")
    doc = json.loads(p.read_text())
    if doc.get("kind") == "goals":
        return [GoalSample(np.array(s["observation"]), np.array(s["goals"])) for s in doc["samples"]]
    return load_dataset(p)[0]


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = _resolve("train", args)
    out = _out_dir(args)
    samples = _read_dataset(args.data)
    if not samples:
        raise UsageError("dataset is empty")
    n = samples[0].n_agents
    if args.agents is not None and args.agents != n:
        raise UsageError(f"--agents {args.agents} does not match the dataset's {n} agents (input size mismatch)")
    tc = TrainConfig.for_task(
        cfg["task"],
        learning_rate=cfg["lr"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        encoder=cfg["encoder"],
        obs_kind=cfg["obs"],
        optimizer=cfg["optimizer"],
        gin_frame=cfg["gin_frame"],
    )
    if cfg["sigma_sparsity"] is not None:
        tc = replace(tc, sigma_sparsity=cfg["sigma_sparsity"])
    if cfg["sigma_task"] is not None:
        tc = replace(tc, sigma_task=cfg["sigma_task"])
    init = _load_net(args.init, args.network) if args.init else None
    ckpt = out / "checkpoint.json"
    try:
        if args.network == "gin":
            result = train_gin(samples, tc, init)
        else:
            if not hasattr(samples[0], "game"):
                raise UsageError("PSN training needs a game dataset (gen-data --kind games)")
            result = train_psn(samples, cfg["task"], tc, network=init)
    except BaseException:
        ckpt.unlink(missing_ok=True)
        raise
    result.network.save(ckpt)
    keys = list(result.curve[0])
    with open(out / "loss_curve.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(keys)
        for row in result.curve:
            w.writerow([row[k] if isinstance(row[k], int) else repr(float(row[k])) for k in keys])
    cfg["network"] = args.network
    _write_manifest(out, "train", cfg, {"data": str(args.data), "init": args.init}, ["checkpoint.json", "loss_curve.csv"], t0)
    last = result.curve[-1]
    print(f"trained {args.network} for {len(result.curve)} epochs; final loss {last.get('total', last.get('goal')):.6g}")
    return 0


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    cfg = _resolve("eval", args)
    out = _out_dir(args)
    try:
        methods = [parse_method(m) for m in cfg["methods"].split(",") if m.strip()]
    except (DomainError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if any(m.uses_psn for m in methods) and not args.psn:
        raise UsageError("PSN methods need --psn CHECKPOINT")
    if cfg["goal_source"] == "gin" and not args.gin:
        raise UsageError("--goal-source gin needs --gin CHECKPOINT")
    psn = _load_net(args.psn, "psn") if args.psn else None
    gin = _load_net(args.gin, "gin") if args.gin else None
    bc = BenchmarkConfig(
        task=cfg["task"],
        count=cfg["count"],
        resamples=cfg["resamples"],
        seed=cfg["seed"],
        rollout=RolloutConfig(steps=cfg["steps"], goal_source=cfg["goal_source"]),
        scenario=ScenarioConfig(n_agents=cfg["agents"], seed=cfg["seed"]),
    )
    workers = args.workers or default_workers()
    files = [out / "summary.csv", out / "runs.csv"]
    try:
        summary, runs = run_monte_carlo(methods, bc, psn, gin, workers=workers)
        write_summary_csv(files[0], summary, cfg["task"])
        write_runs_csv(files[1], runs)
    except BaseException:
        for f in files:
            f.unlink(missing_ok=True)
        raise
    for idx, err in summary.excluded:
        print(f"scenario {idx} excluded: {err}", file=sys.stderr)
    _write_manifest(out, "eval", cfg, {"psn": args.psn, "gin": args.gin}, ["summary.csv", "runs.csv"], t0, workers)
    print(f"evaluated {len(methods)} methods on {summary.scenarios} scenarios -> {files[0]}")
    return 0


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    cfg = _resolve("simulate", args)
    out = _out_dir(args)
    try:
        params = parse_method(cfg["method"])
    except (DomainError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    psn = _load_net(args.psn, "psn") if args.psn else None
    if params.uses_psn and psn is None:
        raise UsageError("PSN methods need --psn CHECKPOINT")
    game = generate_scenario(ScenarioConfig(n_agents=cfg["agents"], seed=cfg["seed"]), cfg["index"])
    rc = RolloutConfig(steps=cfg["steps"], selection=params)
    if cfg["task"] == "prediction":
        gt, _, _ = full_game_rollout(game, rc.obs_steps - 1 + rc.steps, rc.solver)
        trace = predict(game, gt, cfg["ego"], rc, psn)
    else:
        trace = plan(game, cfg["ego"], rc, psn)
    trace.save(out / "trace.jsonl")
    _write_manifest(out, "simulate", cfg, {"psn": args.psn}, ["trace.jsonl"], t0)
    print(f"{trace.n_steps} steps -> {out / 'trace.jsonl'}" + (f" (failed: {trace.failure})" if trace.failure else ""))
    return 1 if trace.failure else 0


def cmd_plot(args) -> int:
    from .plotting import write_trace_svg

    path = Path(args.trace)
    if not path.is_file():
        raise UsageError(f"trace not found: {path}")
    trace = RolloutTrace.load(path)
    target = Path(args.out)
    if target.suffix != ".svg":
        target.mkdir(parents=True, exist_ok=True)
        target = target / (path.stem + ".svg")
    write_trace_svg(trace, target)
    print(f"wrote {target}")
    return 0


# -- parser -------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=out_default)
    p.add_argument("--workers", type=int, default=None, help="worker processes (env PSNGAME_WORKERS)")
    p.add_argument("--config", default=None, help="JSON file of option overrides")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="psngame", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a training dataset")
    _common(p, "data")
    p.add_argument("--agents", type=int)
    p.add_argument("--count", type=int, help="number of scenarios (or samples for --kind linear)")
    p.add_argument("--samples-per-scenario", dest="samples_per_scenario", type=int)
    p.add_argument("--kind", choices=["games", "linear"])
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a PSN or GIN")
    _common(p, "run")
    p.add_argument("network", choices=["psn", "gin"])
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=["prediction", "planning"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--optimizer", choices=["sgd", "momentum", "adam"])
    p.add_argument("--gin-frame", dest="gin_frame", choices=["agent", "world"], help="GIN input frame")
    p.add_argument("--encoder", choices=["flatten", "gru"])
    p.add_argument("--obs", choices=["full", "partial"])
    p.add_argument("--sigma-sparsity", dest="sigma_sparsity", type=float)
    p.add_argument("--sigma-task", dest="sigma_task", type=float)
    p.add_argument("--agents", type=int, help="expected agent count (checked against the dataset)")
    p.add_argument("--init", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="paired Monte Carlo benchmark")
    _common(p, "eval")
    p.add_argument("--task", choices=["prediction", "planning"])
    p.add_argument("--agents", type=int)
    p.add_argument("--methods", help="comma list of name[:param], e.g. all,knn:1,distance:1.5,psn-rank:1")
    p.add_argument("--count", type=int)
    p.add_argument("--resamples", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--goal-source", dest="goal_source", choices=["ground_truth", "gin"])
    p.add_argument("--psn")
    p.add_argument("--gin")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", help="one prediction or planning rollout")
    _common(p, "sim")
    p.add_argument("--task", choices=["prediction", "planning"])
    p.add_argument("--agents", type=int)
    p.add_argument("--method")
    p.add_argument("--index", type=int, help="scenario index")
    p.add_argument("--ego", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--psn")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("plot", help="SVG of a trace")
    p.add_argument("trace")
    p.add_argument("--out", default="plots")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, DomainError, IngestionError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ArithmeticError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: gen-data, train, rollout, eval, tables.

Settings resolve as flag > environment > ``--config`` JSON > built-in default.
Every run writes its files plus a ``run.json`` manifest (resolved config,
seeds, sha256 of each output) under ``<out>/<run-id>/``.  Exit codes: 0 on
success, 1 on a runtime failure, 2 on a usage or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from ._rng import STREAMS
from .analysis import AnalysisError, evaluate_latents, interpolated_eval
from .dynamics import TASKS, IntegrationError, NoiseSpec, generate_dataset, save_dataset
from .nets import CheckpointError, checkpoint_load
from .rollout import FieldError, ParameterArgument, generate, write_trajectory
from .training import SEED_ENV, TrainingConfig, TrainingError, train

log = logging.getLogger("hamildis")


class UsageError(ValueError):
    pass


DEFAULTS = {
    "gen-data": {"task": "pendulum", "count": 2000, "traj_len": 100, "sigma": 0.03, "seed": 0, "t_span": [0.0, 10.0]},
    "train": {"model": "consci", "task": None, "dataset": None, **{
        k: v for k, v in TrainingConfig().to_dict().items() if k not in ("model", "task", "dataset")
    }},
    "rollout": {"checkpoint": None, "z": None, "q0": 1.0, "p0": 0.0, "tspan": [0.0, 20.0], "points": 200,
                "tol": 1e-10, "seed": 0},
    "eval": {"consci": None, "baseline": None, "task": None, "seed": 0, "threads": 1, "tol": 1e-10},
    "tables": {"tasks": ["pendulum", "spring"], "count": 2000, "seed": 0, "epochs": 40, "threads": 1},
}


# --- parsing helpers ---

def _floats(text: str, n: int | None = None, name: str = "value") -> list[float]:
    try:
        values = [float(v) for v in str(text).split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{name} must be comma-separated numbers, got {text!r}") from None
    if n is not None and len(values) != n:
        raise argparse.ArgumentTypeError(f"{name} needs {n} comma-separated numbers, got {len(values)}")
    if not all(np.isfinite(values)):
        raise argparse.ArgumentTypeError(f"{name} must be finite")
    return values


def _pair(text):
    return _floats(text, 2, "span")


def _zvec(text):
    return _floats(text, 3, "z")


def _ints(text):
    return [int(v) for v in str(text).split(",")]


def _tasks(text):
    tasks = str(text).split(",")
    for t in tasks:
        if t not in TASKS:
            raise argparse.ArgumentTypeError(f"unknown task {t!r}")
    return tasks


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON file with settings for this subcommand")
    p.add_argument("--out", type=Path, default=Path("out"), help="output root (default: out/)")
    p.add_argument("--run-id", help="subdirectory under --out (default derived from the settings)")
    p.add_argument("--seed", type=int, help=f"master seed (env {SEED_ENV} overrides the config file)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hamildis", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate a noisy trajectory dataset")
    _common(p)
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--count", type=int, help="number of trajectories (default 2000)")
    p.add_argument("--traj-len", type=int, dest="traj_len", help="points per trajectory (default 100)")
    p.add_argument("--sigma", type=float, help="observation noise std (default 0.03)")
    p.add_argument("--t-span", type=_pair, dest="t_span", help="observation window, e.g. 0,10")

    p = sub.add_parser("train", help="fit a consci or baseline model to a dataset")
    _common(p)
    p.add_argument("--model", choices=("consci", "baseline"))
    p.add_argument("--task", choices=TASKS, help="defaults to the dataset's task")
    p.add_argument("--dataset", help="directory written by gen-data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--final-learning-rate", type=float, dest="final_learning_rate")
    p.add_argument("--beta", type=float, help="KL weight (default 0.005)")
    p.add_argument("--beta-start", type=float, dest="beta_start", help="KL weight at epoch 0 (default: 1e-4 for spring, fixed beta otherwise)")
    p.add_argument("--beta-epochs", type=int, dest="beta_epochs", help="KL warm-up length in epochs (default 20 for spring)")
    p.add_argument("--pairs-per-trajectory", type=int, dest="pairs_per_trajectory")
    p.add_argument("--grad-clip", type=float, dest="grad_clip")
    p.add_argument("--encoder-hidden", type=_ints, dest="encoder_hidden", help="e.g. 128,64")
    p.add_argument("--decoder-hidden", type=_ints, dest="decoder_hidden", help="e.g. 64,64")

    p = sub.add_parser("rollout", help="integrate a trained decoder for a fixed latent vector")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint JSON written by train")
    p.add_argument("--z", type=_zvec, help="latent vector, e.g. 0.4,0,0")
    p.add_argument("--q0", type=float)
    p.add_argument("--p0", type=float)
    p.add_argument("--tspan", type=_pair, help="integration window, e.g. 0,20")
    p.add_argument("--points", type=int, help="output grid size (default 200)")
    p.add_argument("--tol", type=float, help="integrator tolerance (default 1e-10)")

    p = sub.add_parser("eval", help="latent sweeps, parameter maps and comparison tables")
    _common(p)
    p.add_argument("--consci", help="consci checkpoint")
    p.add_argument("--baseline", help="baseline checkpoint")
    p.add_argument("--task", choices=TASKS, help="defaults to the checkpoints' task")
    p.add_argument("--threads", type=int, help="concurrent rollouts (default 1)")
    p.add_argument("--tol", type=float, help="integrator tolerance (default 1e-10)")

    p = sub.add_parser("tables", help="full pipeline: gen-data, train both models, eval")
    _common(p)
    p.add_argument("--tasks", type=_tasks, help="comma-separated tasks (default pendulum,spring)")
    p.add_argument("--count", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--threads", type=int)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config file, environment and flags (in rising priority)."""
    cfg = dict(DEFAULTS[command])
    if args.config is not None:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(data) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(data)
    if SEED_ENV in os.environ:
        try:
            cfg["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer") from None
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


# --- output bookkeeping ---

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run_dir: Path, command: str, cfg: dict, extra: dict | None = None) -> Path:
    files = sorted(p for p in run_dir.rglob("*") if p.is_file() and p.name != "run.json")
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg,
        "seeds": {"master": cfg.get("seed"), "streams": STREAMS},
        "files": {str(p.relative_to(run_dir)): _sha256(p) for p in files},
    }
    if extra:
        manifest.update(extra)
    path = run_dir / "run.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _run_dir(args, default_id: str) -> Path:
    run_dir = Path(args.out) / (args.run_id or default_id)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


# --- subcommands ---

def cmd_gen_data(args, cfg) -> dict:
    if cfg["count"] < 1:
        raise UsageError("--count must be at least 1")
    if cfg["traj_len"] < 2:
        raise UsageError("--traj-len must be at least 2")
    if cfg["sigma"] < 0:
        raise UsageError("--sigma must be non-negative")
    run_dir = _run_dir(args, f"data-{cfg['task']}-seed{cfg['seed']}")
    ds = generate_dataset(cfg["task"], cfg["count"], traj_len=cfg["traj_len"], t_span=tuple(cfg["t_span"]),
                          noise=NoiseSpec(std=cfg["sigma"]), seed=cfg["seed"])
    save_dataset(ds, run_dir)
    write_manifest(run_dir, "gen-data", cfg)
    print(run_dir)
    return {"run_dir": run_dir}


def cmd_train(args, cfg) -> dict:
    if not cfg["dataset"]:
        raise UsageError("train needs --dataset")
    if not (Path(cfg["dataset"]) / "manifest.json").exists():
        raise UsageError(f"no dataset at {cfg['dataset']}")
    manifest = json.loads((Path(cfg["dataset"]) / "manifest.json").read_text())
    cfg["task"] = cfg["task"] or manifest.get("system")
    try:
        config = TrainingConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    run_dir = _run_dir(args, f"train-{config.model}-{config.task}-seed{config.seed}")
    train(config, run_dir)
    write_manifest(run_dir, "train", config.to_dict(), {"dataset_manifest_sha256": _sha256(
        Path(cfg["dataset"]) / "manifest.json")})
    print(run_dir)
    return {"run_dir": run_dir}


def _load_checkpoint(path):
    if not path:
        return None
    if not Path(path).exists():
        raise UsageError(f"no checkpoint at {path}")
    try:
        return checkpoint_load(path)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc


def cmd_rollout(args, cfg) -> dict:
    from .figures import phase_time_svg

    model = _load_checkpoint(cfg["checkpoint"])
    if model is None:
        raise UsageError("rollout needs --checkpoint")
    if cfg["z"] is None:
        raise UsageError("rollout needs --z")
    try:
        arg = ParameterArgument(tuple(cfg["z"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if cfg["points"] < 1 or cfg["tol"] <= 0:
        raise UsageError("--points must be >= 1 and --tol positive")
    run_dir = _run_dir(args, f"rollout-{model.kind}")
    gen = generate(model, arg, (cfg["q0"], cfg["p0"]), tuple(cfg["tspan"]), tol=cfg["tol"], n_points=cfg["points"])
    stem = run_dir / f"rollout_{model.kind}"
    write_trajectory(gen, stem.with_suffix(".csv"))
    phase_time_svg(gen.times, gen.states, None, stem.with_suffix(".svg"), title=f"{model.kind}, z={arg.values}",
                   kind=model.kind)
    write_manifest(run_dir, "rollout", cfg)
    print(run_dir)
    return {"run_dir": run_dir}


def evaluate(models: dict, task: str, run_dir: Path, seed: int = 0, threads: int = 1, tol: float = 1e-10) -> dict:
    """Sweeps, maps, tables and figures for whichever models are given."""
    from .figures import emit_figures

    evaluations = {kind: evaluate_latents(m, task, seed=seed) for kind, m in models.items()}
    maps = {
        kind: {
            "active": [asdict(a) for a in ev.active],
            "maps": {name: pm.to_dict() for name, pm in ev.maps.items()},
        }
        for kind, ev in evaluations.items()
    }
    (run_dir / f"maps_{task}.json").write_text(json.dumps(maps, indent=2, sort_keys=True) + "\n")
    tables = []
    try:
        tables = interpolated_eval(task, models, evaluations, seed=seed, threads=threads, tol=tol)
    except AnalysisError as exc:
        # a model without a latent for some parameter still gets its sweep and maps
        log.error("%s", exc)
    emit_figures({k: ev.sweep for k, ev in evaluations.items()}, tables, run_dir, task)
    summary = {
        f"table_{t.number}": {
            "param": t.param,
            "partial": t.partial,
            "rows": [{"value": r.value, "mse": r.mse, "true_drift": r.true_drift, "learned_drift": r.learned_drift}
                     for r in t.rows],
        }
        for t in tables
    }
    return {"evaluations": evaluations, "tables": tables, "summary": summary, "maps": maps,
            "complete": bool(tables)}


def cmd_eval(args, cfg) -> dict:
    models = {}
    for kind in ("consci", "baseline"):
        model = _load_checkpoint(cfg[kind])
        if model is not None:
            if model.kind != kind:
                raise UsageError(f"--{kind} points at a {model.kind} checkpoint")
            models[kind] = model
    if not models:
        raise UsageError("eval needs --consci and/or --baseline")
    tasks = {m.task for m in models.values()} - {None}
    task = cfg["task"] or (tasks.pop() if len(tasks) == 1 else None)
    if task is None:
        raise UsageError("cannot infer the task; pass --task")
    cfg["task"] = task
    run_dir = _run_dir(args, f"eval-{task}-seed{cfg['seed']}")
    result = evaluate(models, task, run_dir, seed=cfg["seed"], threads=cfg["threads"], tol=cfg["tol"])
    write_manifest(run_dir, "eval", cfg, {"results": result["summary"]})
    _print_tables(result["tables"])
    print(run_dir)
    if not result["complete"]:
        raise AnalysisError("comparison tables could not be built; see maps_*.json")
    return {"run_dir": run_dir, **result}


def cmd_tables(args, cfg) -> dict:
    from .training import train as train_config

    if cfg["count"] < 1 or cfg["epochs"] < 1:
        raise UsageError("--count and --epochs must be positive")
    run_dir = _run_dir(args, f"tables-seed{cfg['seed']}")
    all_tables = []
    for task in cfg["tasks"]:
        task_dir = run_dir / task
        data_dir = task_dir / "data"
        log.info("%s: generating %d trajectories", task, cfg["count"])
        save_dataset(generate_dataset(task, cfg["count"], seed=cfg["seed"]), data_dir)
        models = {}
        for kind in ("consci", "baseline"):
            log.info("%s: training %s", task, kind)
            config = TrainingConfig(model=kind, task=task, dataset=str(data_dir), epochs=cfg["epochs"],
                                    seed=cfg["seed"])
            models[kind] = train_config(config, task_dir / "models").model
        result = evaluate(models, task, task_dir, seed=cfg["seed"], threads=cfg["threads"])
        all_tables += result["tables"]
    write_manifest(run_dir, "tables", cfg)
    _print_tables(all_tables)
    print(run_dir)
    return {"run_dir": run_dir, "tables": all_tables}


def _print_tables(tables):
    for t in tables:
        flag = " (partial)" if t.partial else ""
        print(f"table {t.number}: {t.task}, varying {t.param}{flag}")
        print(f"  {t.param:>6} {'baseline':>12} {'consci':>12}")
        for r in t.rows:
            cells = [f"{r.mse[k]:12.6f}" if k in r.mse else f"{'-':>12}" for k in ("baseline", "consci")]
            print(f"  {r.value:6g} {cells[0]} {cells[1]}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "rollout": cmd_rollout,
    "eval": cmd_eval,
    "tables": cmd_tables,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        COMMANDS[args.command](args, cfg)
    except (UsageError, ValueError) as exc:
        print(f"hamildis {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (IntegrationError, FieldError, TrainingError, AnalysisError, OSError, FloatingPointError) as exc:
        print(f"hamildis {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

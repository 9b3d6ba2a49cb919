"""Command-line entry point.

    optight train  --config exp.ini --seeds 2 --out runs/
    optight oracle --mdp chain.mdp --gamma 0.9 --tol 1e-10
    optight scores --input scores.csv --mode summary
    optight audit  --dump replay.jsonl --ckpt final.npz --k 4
    optight curve  --log train_log.csv --window 4
    optight export --config exp.ini --out maze.mdp

Exit codes: 0 success, 2 usage/config error, 3 numerical divergence,
4 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import zipfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bounds as bnd
from . import envs
from .agent import DivergenceError, EpisodeRecord, TrainingConfig, format_log, train
from .evalharness import (
    ScoreFormatError,
    bundled_path,
    ingest_scores,
    as_agent,
    learning_curve_rows,
    summarize,
)
from .numcore import atomic_write_bytes
from .qfunc import NetQ, load_q, save_q
from .replay import DumpFormatError, read_dump, write_dump

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
OUT_ENV_VAR = "OPTIGHT_OUT"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    env: dict
    training: TrainingConfig
    out_dir: Path
    seeds: int = 1
    checkpoint_every: int = 0
    dump_replay: bool = False
    workers: int = 1


# ---------------------------------------------------------------------------
# Config files


def _coerce(name, raw: str, kind):
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if kind == "ints":
        try:
            return tuple(int(p) for p in raw.replace(",", " ").split())
        except ValueError:
            raise ConfigError(f"{name}: expected a list of integers, got {raw!r}") from None
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{name}: expected {kind.__name__}, got {raw!r}") from None


_TRAINING_TYPES = {
    "gamma": float, "K": int, "lam": float, "rescale": str, "use_return_bound": bool,
    "max_constraints": int, "sync_every": int, "batch_size": int, "episodes": int,
    "max_steps": int, "episode_cap": int, "epsilon_start": float, "epsilon_end": float,
    "epsilon_anneal": int, "eval_epsilon": float, "eval_every": int, "eval_episodes": int,
    "noop_max": int, "train_noop_max": int, "replay_capacity": int, "learn_start": int,
    "seed": int, "backend": str, "hidden": "ints", "lr": float, "rms_decay": float,
    "rms_eps": float, "init_scale": float,
}
_ALIASES = {"lambda": "lam", "k": "K", "c": "sync_every", "m": "episodes", "t": "episode_cap"}


def parse_config(text: str, source: str = "<config>") -> tuple[dict, TrainingConfig, dict]:
    """Parse an INI-style experiment file with [env], [training],
    [penalty], [optimizer] and [experiment] sections."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read_string(text, source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    known = {"env", "training", "penalty", "optimizer", "experiment"}
    unknown = [s for s in cp.sections() if s not in known]
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {', '.join(unknown)}")
    tkw, problems = {}, []
    for section in ("training", "penalty", "optimizer"):
        if not cp.has_section(section):
            continue
        for key, raw in cp.items(section):
            name = _ALIASES.get(key, key)
            if name not in _TRAINING_TYPES:
                problems.append(f"[{section}] {key}: unknown setting")
                continue
            try:
                val = _coerce(f"[{section}] {key}", raw, _TRAINING_TYPES[name])
            except ConfigError as exc:
                problems.append(str(exc))
                continue
            if val is not None or name in ("max_constraints", "max_steps", "episode_cap", "epsilon_anneal", "learn_start", "lr"):
                tkw[name] = val
    if problems:
        raise ConfigError("; ".join(problems))
    try:
        cfg = TrainingConfig(**tkw)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    env = dict(cp.items("env")) if cp.has_section("env") else {"name": "corridor"}
    exp = dict(cp.items("experiment")) if cp.has_section("experiment") else {}
    make_env(env)  # validate early
    return env, cfg, exp


def _cell(text):
    r, c = (int(p) for p in text.replace(",", " ").split())
    return (r, c)


def make_env(spec: dict, seed: int = 0):
    spec = dict(spec)
    name = spec.pop("name", "corridor").strip().lower()
    try:
        cap = int(spec.pop("cap", 200))
        if name == "chain":
            return envs.ChainEnv(int(spec.pop("length", 3)), float(spec.pop("reward", 1.0)), cap=cap)
        if name in ("corridor", "maze"):
            kwargs = dict(
                step_reward=float(spec.pop("step_reward", 0.0)),
                goal_reward=float(spec.pop("goal_reward", 1.0)),
                cap=cap,
                with_noop=_coerce("with_noop", spec.pop("with_noop", "false"), bool),
            )
            if name == "corridor":
                return envs.GridMaze.corridor(int(spec.pop("length", 8)), **kwargs)
            if "layout" in spec:
                rows = [r.strip() for r in spec.pop("layout").strip().splitlines() if r.strip()]
                return envs.GridMaze.from_ascii(rows, **kwargs)
            walls = [_cell(w) for w in spec.pop("walls", "").split(";") if w.strip()]
            return envs.GridMaze(
                int(spec.pop("width")), int(spec.pop("height")), walls,
                start=_cell(spec.pop("start", "0 0")),
                goal=_cell(spec["goal"]) if "goal" in spec else None,
                **kwargs,
            )
        if name == "mdp":
            return envs.MdpEnv(envs.read_mdp(spec.pop("file")), seed=seed, cap=cap)
    except KeyError as exc:
        raise ConfigError(f"[env] missing setting {exc.args[0]!r} for {name}") from None
    except (ValueError, OSError) as exc:
        raise ConfigError(f"[env] {exc}") from None
    raise ConfigError(f"[env] unknown environment {name!r} (chain, corridor, maze, mdp)")


def load_experiment(path, seeds: int | None = None, out: str | None = None) -> ExperimentSpec:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    env, cfg, exp = parse_config(text, str(path))
    out_dir = out or exp.get("out") or os.environ.get(OUT_ENV_VAR) or "runs"
    try:
        return ExperimentSpec(
            env=env,
            training=cfg,
            out_dir=Path(out_dir),
            seeds=seeds if seeds is not None else int(exp.get("seeds", 1)),
            checkpoint_every=int(exp.get("checkpoint_every", 0)),
            dump_replay=_coerce("dump_replay", exp.get("dump_replay", "false"), bool),
            workers=int(exp.get("workers", 1)),
        )
    except ValueError as exc:
        raise ConfigError(f"[experiment] {exc}") from None


# ---------------------------------------------------------------------------
# Commands


def _write_text(path: Path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def run_seed(spec: ExperimentSpec, seed: int) -> dict:
    """Train one seed and write its log, checkpoints and summary."""
    cfg = TrainingConfig(**{**spec.training.to_dict(), "seed": seed})
    run_dir = spec.out_dir / f"seed_{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "train_log.csv"
    env, eval_env = make_env(spec.env, seed), make_env(spec.env, seed + 1_000_003)
    records: list[EpisodeRecord] = []

    def checkpoint(agent):
        if spec.checkpoint_every and agent.steps % spec.checkpoint_every == 0:
            save_q(run_dir / f"ckpt_step{agent.steps}.npz", agent.q)

    summary = {"seed": seed, "mode": cfg.mode, "config": cfg.to_dict(), "env": dict(spec.env), "log": log_path.name}
    try:
        result = train(cfg, env, eval_env=eval_env, on_episode=records.append, on_step=checkpoint)
    except DivergenceError as exc:
        _write_text(log_path, format_log(records))
        summary.update(status="diverged", error=str(exc), step=exc.step)
        _write_text(run_dir / "summary.json", _json(summary))
        return summary
    _write_text(log_path, format_log(result.log))
    save_q(run_dir / "ckpt_final.npz", result.q)
    if spec.dump_replay:
        write_dump(result.memory, cfg.gamma, run_dir / "replay.jsonl")
    returns = [r.episode_return for r in result.log]
    summary.update(
        status="ok",
        steps=result.steps,
        updates=result.updates,
        episodes=len(result.log),
        sync_count=result.sync_count,
        mean_return_last10=float(np.mean(returns[-10:])) if returns else None,
        eval_best=result.best_eval,
        eval_final=result.final_eval,
        checkpoint="ckpt_final.npz",
    )
    _write_text(run_dir / "summary.json", _json(summary))
    return summary


def cmd_train(args) -> int:
    spec = load_experiment(args.config, args.seeds, args.out)
    if args.workers is not None:
        spec.workers = args.workers
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    seeds = [spec.training.seed + i for i in range(spec.seeds)]
    if spec.workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            summaries = list(pool.map(run_seed, [spec] * len(seeds), seeds))
    else:
        summaries = [run_seed(spec, s) for s in seeds]
    status = EXIT_OK
    for s in summaries:
        line = f"seed {s['seed']}: {s['status']} ({s['mode']})"
        if s["status"] != "ok":
            log_path = spec.out_dir / f"seed_{s['seed']}" / s["log"]
            line += f" - {s['error']}; see {log_path}"
            status = EXIT_DIVERGED
        print(line)
    return status


def cmd_oracle(args) -> int:
    try:
        mdp = envs.read_mdp(args.mdp)
    except envs.MdpFormatError as exc:
        raise ConfigError(f"{args.mdp}: {exc}") from None
    res = envs.value_iteration(mdp, args.gamma, args.tol)
    report = {
        "gamma": args.gamma,
        "tol": args.tol,
        "iterations": res.iterations,
        "residual": res.residual,
        "q": res.q.tolist(),
        "v_start": float(mdp.initial @ res.v),
    }
    _emit(_json(report), args.out)
    return EXIT_OK


def _emit(text: str, out):
    if out:
        _write_text(Path(out), text)
    else:
        sys.stdout.write(text)


def cmd_scores(args) -> int:
    path = args.input or bundled_path("atari_raw_scores.csv")
    table = ingest_scores(path)
    rows = as_agent(table.rows, "baseline") if args.column == "baseline" else table.rows
    if args.mode == "improve" and not any(r.baseline is not None for r in rows):
        raise ConfigError("improve mode needs a baseline column")
    report = summarize(rows)
    doc = report.to_dict()
    if args.mode == "normalize":
        doc = {"games": [{"game": g["game"], "normalized": g["normalized"]} for g in doc["games"]], "summary": doc["summary"]}
    elif args.mode == "improve":
        doc = {
            "games": [{"game": g["game"], "improvement": g["improvement"]} for g in doc["games"] if "improvement" in g],
            "summary": {"n_improved": report.n_improved, "n_compared": len(report.improvements)},
        }
    doc["problems"] = table.problems
    if args.mode == "summary":
        print(f"games={report.n_games} mean={report.mean:.2f} median={report.median:.2f} improved={report.n_improved}")
        if args.out:
            _write_text(Path(args.out), _json(doc))
    else:
        _emit(_json(doc), args.out)
    return EXIT_OK


def _check_states(q, memory):
    for t in memory.transitions():
        for s in (t.state, t.next_state):
            if not isinstance(s, int) or not 0 <= s < q.n_states:
                raise ConfigError(f"dump state {s!r} (episode {t.episode}, index {t.index}) does not fit a checkpoint with {q.n_states} states")
        if not 0 <= t.action < q.n_actions:
            raise ConfigError(f"dump action {t.action} does not fit a checkpoint with {q.n_actions} actions")


def audit_memory(memory, q, K: int, gamma: float, q_star=None, tol: float = 1e-9):
    """Recompute every bound in ``memory`` using ``q`` as the frozen copy."""
    cfg = bnd.PenaltyConfig(lam=1.0, K=K)
    if isinstance(q, NetQ):
        q = NetQ(q.net, q.opt, frozen=True)
    stats = dict(items=0, lower_bounds=0, upper_bounds=0, return_bounds=0, crossings=0,
                 lower_active=0, upper_active=0, oracle_lower_violations=0, oracle_upper_violations=0)
    records = []
    for item in memory.iter_items(K):
        b = bnd.aggregate(item, cfg, q, gamma)
        c = item.center
        qv = float(q.values(c.state)[c.action])
        stats["items"] += 1
        stats["lower_bounds"] += len(b.lower)
        stats["upper_bounds"] += len(b.upper)
        stats["return_bounds"] += b.ret is not None
        if b.lower_max is not None and b.upper_min is not None and b.lower_max > b.upper_min + tol:
            stats["crossings"] += 1
        low, up = bnd.constraint_activity(qv, b)
        stats["lower_active"] += int(low)
        stats["upper_active"] += int(up)
        if q_star is not None:
            qs = q_star[c.state, c.action]
            lows = list(b.lower.values()) + ([b.ret] if b.ret is not None else [])
            stats["oracle_lower_violations"] += sum(bool(v > qs + tol) for v in lows)
            stats["oracle_upper_violations"] += sum(bool(v < qs - tol) for v in b.upper.values())
        records.append(bnd.audit_record(item, b, qv))
    stats["bounds_evaluated"] = stats["lower_bounds"] + stats["upper_bounds"] + stats["return_bounds"]
    if q_star is None:
        del stats["oracle_lower_violations"], stats["oracle_upper_violations"]
    return stats, records


def cmd_audit(args) -> int:
    try:
        memory, gamma = read_dump(args.dump, args.gamma)
    except DumpFormatError as exc:
        raise ConfigError(f"{args.dump}: {exc}") from None
    try:
        q = load_q(args.ckpt)
    except (KeyError, ValueError, EOFError, zipfile.BadZipFile) as exc:
        raise ConfigError(f"{args.ckpt}: not a valid checkpoint ({exc})") from None
    _check_states(q, memory)
    q_star = None
    if args.mdp:
        mdp = envs.read_mdp(args.mdp)
        if (mdp.n_states, mdp.n_actions) != (q.n_states, q.n_actions):
            raise ConfigError("MDP shape does not match the checkpoint")
        q_star = envs.value_iteration(mdp, gamma, 1e-10).q
    stats, records = audit_memory(memory, q, args.k, gamma, q_star)
    if args.records:
        bnd.write_audit(records, args.records)
    _emit(_json({"K": args.k, "gamma": gamma, **stats}), args.out)
    return EXIT_OK


def cmd_curve(args) -> int:
    import csv

    with open(args.log, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or args.column not in reader.fieldnames or "step" not in reader.fieldnames:
            raise ConfigError(f"{args.log}: needs 'step' and {args.column!r} columns")
        steps, raw = [], []
        for rec in reader:
            if rec[args.column] == "":
                continue
            try:
                steps.append(int(rec["step"]))
                raw.append(float(rec[args.column]))
            except ValueError:
                raise ConfigError(f"{args.log}: line {reader.line_num}: non-numeric value") from None
    lines = ["step,raw,smoothed"] + [f"{s},{r!r},{m!r}" for s, r, m in learning_curve_rows(steps, raw, args.window)]
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_export(args) -> int:
    env_spec, _, _ = parse_config(Path(args.config).read_text(encoding="utf-8"), args.config)
    envs.write_mdp(envs.export_mdp(make_env(env_spec)), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="optight", description="Q-learning with optimality tightening")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train agents from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seeds", type=int, default=None, help="number of consecutive seeds to run")
    t.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ENV_VAR} or ./runs)")
    t.add_argument("--workers", type=int, default=None)
    t.set_defaults(func=cmd_train)

    o = sub.add_parser("oracle", help="solve an MDP file exactly")
    o.add_argument("--mdp", required=True)
    o.add_argument("--gamma", type=float, default=0.99)
    o.add_argument("--tol", type=float, default=1e-10)
    o.add_argument("--out", default=None)
    o.set_defaults(func=cmd_oracle)

    s = sub.add_parser("scores", help="normalized scores, improvements and summaries")
    s.add_argument("--input", default=None, help="score CSV (default: bundled 49-game table)")
    s.add_argument("--mode", choices=["normalize", "improve", "summary"], default="summary")
    s.add_argument("--column", choices=["agent", "baseline"], default="agent", help="column scored as the agent")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_scores)

    a = sub.add_parser("audit", help="recompute bounds offline from a replay dump")
    a.add_argument("--dump", required=True)
    a.add_argument("--ckpt", required=True)
    a.add_argument("--k", type=int, default=4)
    a.add_argument("--gamma", type=float, default=None, help="override the discount stored in the dump")
    a.add_argument("--mdp", default=None, help="MDP file for oracle violation counts")
    a.add_argument("--records", default=None, help="write per-sample audit records here")
    a.add_argument("--out", default=None)
    a.set_defaults(func=cmd_audit)

    c = sub.add_parser("curve", help="moving-average learning curve from a training log")
    c.add_argument("--log", required=True)
    c.add_argument("--column", default="episode_return")
    c.add_argument("--window", type=int, default=4)
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_curve)

    e = sub.add_parser("export", help="write the [env] of a config as an MDP file")
    e.add_argument("--config", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ScoreFormatError, envs.MdpFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""``vrs`` command-line driver.

Subcommands: generate, collect, train, evaluate, report. Exit codes are 0 on
success, 1 on a runtime failure and 2 on a validation failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .controller import Episode, EmptyBufferError, ReplayBuffer, RewardDecompositionRegressor, RewardDivergenceError
from .core import World
from .embedding import EmbeddingStore
from .pipeline import buffers_by_pc, collect, embedding_matrix, evaluate, train_controller, train_embeddings
from .simulator import ConfigError, ControllerBank, SimulationConfig, generate_world

logger = logging.getLogger("vrs")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


class ValidationError(Exception):
    pass


# io helpers ------------------------------------------------------------------

def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else v for v in r])
    return buf.getvalue()


def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"no such file: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p}: not valid JSON ({exc})") from exc


def load_config(path: str | None, fallback: dict | None = None) -> SimulationConfig:
    raw = dict(fallback or {}) if path is None else _read_json(path)
    version = raw.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValidationError(f"unsupported config schema_version {version}")
    return SimulationConfig.from_dict(raw)


def config_echo(config: SimulationConfig) -> dict:
    return {"schema_version": SCHEMA_VERSION, **config.to_dict()}


def load_world(path: str) -> World:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"no such world file: {p}")
    try:
        return World.from_json(p.read_text())
    except (KeyError, ValueError, TypeError) as exc:
        raise ValidationError(f"{p}: malformed world file ({exc})") from exc


def _with_overrides(config: SimulationConfig, args) -> SimulationConfig:
    d = config.to_dict()
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "days", None) is not None:
        # keep daily traffic fixed when the horizon changes
        d["n_requests"] = config.requests_per_day * args.days
        d["n_days"] = args.days
    if getattr(args, "voting", None) is not None:
        d["voting_scheme"] = args.voting
    if getattr(args, "pc", None) not in (None, "all"):
        d["pcs"] = [args.pc]
    return SimulationConfig.from_dict(d)


def _world_and_config(args):
    world = load_world(args.world)
    config = _with_overrides(load_config(args.config, world.config), args)
    return world, config


def _embeddings(world: World, config: SimulationConfig, path: str | None) -> np.ndarray:
    if path is None:
        _, store = train_embeddings(world, config)
    else:
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"no such embeddings file: {p}")
        store = EmbeddingStore.from_csv(p.read_text())
    try:
        return embedding_matrix(world, store)
    except KeyError as exc:
        raise ValidationError(f"embedding store is missing user {exc}") from exc


# subcommands -----------------------------------------------------------------

def cmd_generate(args) -> int:
    config = _with_overrides(load_config(args.config), args)
    world = generate_world(config)
    _write_text(Path(args.out), world.to_json())
    logger.info("wrote world with %d users, %d ads to %s", len(world.users), len(world.ads), args.out)
    return EXIT_OK


def cmd_collect(args) -> int:
    world, config = _world_and_config(args)
    out = Path(args.out)
    model, store = train_embeddings(world, config)
    _write_text(out / "embeddings.csv", store.to_csv())
    _write_json(out / "click_model.json", model.to_dict())

    pcs = list(config.pcs)
    if not any(a.is_housing for a in world.ads):
        logger.warning("world has no housing ads; writing empty episode logs")
        for pc in pcs:
            _write_text(out / f"episodes_{pc}.jsonl", "")
        _write_json(out / "summary.json", {"config": config_echo(config), "warning": "no housing ads",
                                           "pcs": {pc: {"raw": 0, "kept": 0, "mirrored": 0} for pc in pcs}})
        return EXIT_OK

    result = collect(world, config, embedding_matrix(world, store), seed=config.seed)
    raw_lines = [json.dumps(e.to_dict(), sort_keys=True) for e in result.episodes]
    _write_text(out / "raw_episodes.jsonl", "".join(line + "\n" for line in raw_lines))
    summary = {"config": config_echo(config), "seed": config.seed, "pcs": {}}
    for pc in pcs:
        try:
            buffer = buffers_by_pc(result.episodes, SimulationConfig.from_dict({**config.to_dict(), "pcs": [pc]}))[pc]
            episodes, stats = buffer.episodes, buffer.stats
        except EmptyBufferError as exc:
            logger.warning("%s: %s", pc, exc)
            episodes, stats = [], {"raw": sum(e.pc.name == pc for e in result.episodes), "kept": 0}
        _write_text(out / f"episodes_{pc}.jsonl",
                    "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in episodes))
        summary["pcs"][pc] = {**stats, "k": config.episode_length[pc], "lines": len(episodes)}
    _write_json(out / "summary.json", summary)
    return EXIT_OK


def read_episode_log(path: Path, pc: str) -> list[Episode]:
    if not path.is_file():
        raise ValidationError(f"no such episode log: {path}")
    episodes = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            ep = Episode.from_dict(json.loads(line))
        except (KeyError, ValueError, TypeError) as exc:
            raise ValidationError(f"{path}:{n}: malformed episode ({exc})") from exc
        if ep.pc.name != pc:
            raise ValidationError(f"{path}:{n}: episode is for {ep.pc.name!r}, expected {pc!r}")
        episodes.append(ep)
    if not episodes:
        raise ValidationError(f"{path}: episode log is empty")
    lengths = {e.k for e in episodes}
    if len(lengths) != 1:
        raise ValidationError(f"{path}: mixed episode lengths {sorted(lengths)}")
    return episodes


def cmd_train(args) -> int:
    config = _with_overrides(load_config(args.config), args)
    if args.learning_rate is not None:
        config = SimulationConfig.from_dict({**config.to_dict(), "reward_learning_rate": args.learning_rate})
    if args.max_updates is not None:
        config = SimulationConfig.from_dict({**config.to_dict(), "reward_max_updates": args.max_updates})
    src = Path(args.episodes)
    pcs = list(config.pcs) if args.pc == "all" else [args.pc]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for pc in pcs:
        path = src / f"episodes_{pc}.jsonl" if src.is_dir() else src
        episodes = read_episode_log(path, pc)
        buffer = ReplayBuffer(episodes, episodes[0].k, {"kept": len(episodes) // 2})
        model = train_controller(buffer, config, seed=config.seed)
        model.save(out / f"controller_{pc}.json", config=config_echo(config))
        _write_text(out / f"training_curve_{pc}.csv",
                    _csv_text(["update", "loss", "mean_abs_adjust_up_difference"],
                              [(u, loss, None if np.isnan(d) else d) for u, loss, d in model.curve_]))
        logger.info("%s: %d updates, final loss %.4g", pc, model.n_updates_, model.curve_[-1][1])
    return EXIT_OK


def _load_bank(paths, pcs, embeddings) -> ControllerBank:
    models = {}
    for path in paths:
        d = _read_json(path)
        if d.get("kind") != "reward_decomposition":
            raise ValidationError(f"{path}: not a controller checkpoint")
        models[d["pc"]] = RewardDecompositionRegressor.from_dict(d)
    missing = [pc for pc in pcs if pc not in models]
    if missing:
        raise ValidationError(f"no checkpoint for PC(s) {missing}")
    return ControllerBank({pc: models[pc] for pc in pcs}, embeddings)


def _checkpoint_paths(args) -> list[str]:
    paths = []
    for c in args.checkpoints:
        p = Path(c)
        paths.extend(str(x) for x in sorted(p.glob("controller_*.json"))) if p.is_dir() else paths.append(c)
    return paths


def cmd_evaluate(args) -> int:
    world, config = _world_and_config(args)
    arms = list(dict.fromkeys(args.arm or ["test1", "test2"]))
    seeds = args.seeds if args.seeds else [config.seed]
    treated = [a for a in arms if a != "control"]
    bank = None
    if treated:
        bank = _load_bank(_checkpoint_paths(args), config.pcs, _embeddings(world, config, args.embeddings))
    ev = evaluate(world, config, bank, arms=arms, seeds=seeds)
    out = Path(args.out)
    pcs = list(config.pcs)

    daily = []
    for seed in seeds:
        for arm in ev.arms:
            for m in ev.runs[(seed, arm)].daily:
                daily.append((seed, m.day, arm, m.pc, m.ncac, m.coverage, m.mean_variance, m.n_qualifying))
    _write_text(out / "daily_metrics.csv", _csv_text(
        ["seed", "day", "arm", "pc", "ncac", "coverage", "mean_variance", "n_qualifying"], daily))

    curve = []
    for arm in arms:
        for pc in pcs:
            per_seed = [ev.reduction_series(s, arm, pc) for s in seeds]
            mean = ev.mean_reduction_series(arm, pc)
            for day in range(config.n_days):
                curve.append((day, arm, pc, *[s[day] for s in per_seed], mean[day]))
    seed_cols = [f"seed_{s}" for s in seeds]
    _write_text(out / "ncac_reduction_curve.csv",
                _csv_text(["day", "arm", "pc", *seed_cols, "mean"], curve))

    summary = [(arm, pc, *[ev.final_reduction(s, arm, pc) for s in seeds], ev.mean_final_reduction(arm, pc))
               for arm in arms for pc in pcs]
    _write_text(out / "summary.csv", _csv_text(["arm", "pc", *seed_cols, "mean"], summary))

    calib = {}
    for seed in seeds:
        for arm in treated:
            c = ev.runs[(seed, arm)].calibration
            calib[f"{arm}/seed_{seed}"] = c.to_dict() if c else None
    _write_json(out / "report.json", {
        "config": config_echo(config),
        "arms": arms,
        "seeds": list(seeds),
        "calibration": calib,
        "action_counts": {f"{arm}/seed_{s}": ev.runs[(s, arm)].action_counts for s in seeds for arm in ev.arms},
        "final_ncac_reduction": {f"{arm}/{pc}": ev.mean_final_reduction(arm, pc) for arm in arms for pc in pcs},
    })
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"no such input: {p}")
        with open(p, newline="") as fh:
            reader = csv.DictReader(fh)
            if not reader.fieldnames or not {"day", "arm", "pc", "mean"} <= set(reader.fieldnames):
                raise ValidationError(f"{p}: expected an NCAC-reduction curve CSV (day, arm, pc, mean)")
            for r in reader:
                if r["mean"] != "":
                    rows.append((int(r["day"]), f"{r['arm']}:{r['pc']}", float(r["mean"])))
    rows.sort(key=lambda r: (r[1], r[0]))
    out = Path(args.out)
    _write_text(out / "plot_data.csv", _csv_text(["day", "series", "value"], rows))
    if args.gnuplot:
        series = sorted({r[1] for r in rows})
        plots = ", \\\n     ".join(
            f"'plot_data.csv' using 1:(strcol(2) eq '{s}' ? $3 : 1/0) with linespoints title '{s}'"
            for s in series)
        script = ("set datafile separator ','\n"
                  "set key outside\n"
                  "set xlabel 'day'\n"
                  "set ylabel 'NCAC reduction (%)'\n"
                  "set terminal pngcairo size 900,500\n"
                  "set output 'ncac_reduction.png'\n"
                  f"plot {plots}\n")
        _write_text(out / "ncac_reduction.gp", script)
    return EXIT_OK


# argument parsing --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vrs", description="Variance-reduction simulation pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic world")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("collect", help="random-policy data collection")
    c.add_argument("--world", required=True)
    c.add_argument("--config")
    c.add_argument("--seed", type=int)
    c.add_argument("--pc", choices=("gender", "race", "all"), default="all")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_collect)

    t = sub.add_parser("train", help="fit per-PC reward-decomposition controllers")
    t.add_argument("--episodes", required=True, help="episode log, or a collect output directory")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--pc", choices=("gender", "race", "all"), default="all")
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--max-updates", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="control vs test arms over several seeds")
    e.add_argument("--world", required=True)
    e.add_argument("--config")
    e.add_argument("--checkpoints", nargs="*", default=[])
    e.add_argument("--embeddings")
    e.add_argument("--arm", action="append", choices=("control", "test1", "test2"))
    e.add_argument("--pc", choices=("gender", "race", "all"), default="all")
    e.add_argument("--voting", choices=("equal", "shuffle", "max"))
    e.add_argument("--days", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--seeds", type=int, nargs="+")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="tidy plot data from NCAC-reduction curves")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--gnuplot", action="store_true")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RewardDivergenceError, EmptyBufferError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

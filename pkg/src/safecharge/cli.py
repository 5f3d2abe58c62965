"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import battery_env as env
from . import trainer
from .battery_env import ConfigError, tomllib
from .nn_core import CheckpointError

logger = logging.getLogger("safecharge")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def _fail(code: int, message: str) -> int:
    print(f"safecharge: error: {message}", file=sys.stderr)
    return code


def train_cmd(args: argparse.Namespace) -> int:
    overrides = {
        "episodes": args.episodes,
        "seeds": args.seeds,
        "output_dir": str(Path(args.output_dir).resolve()) if args.output_dir else None,
        "workers": args.workers,
    }
    if args.no_safety:
        overrides["safety_enabled"] = False
    if args.seeds is None and os.environ.get("SAFECHARGE_SEED") and not _run_has_seeds(args.run_config):
        overrides["seeds"] = [int(os.environ["SAFECHARGE_SEED"])]
    try:
        run = trainer.load_run(args.run_config, overrides)
    except ConfigError as exc:
        return _fail(EXIT_USAGE, f"{args.run_config}: {exc}")
    try:
        trainer._check_writable(run.output_dir)
    except OSError as exc:
        return _fail(EXIT_RUNTIME, str(exc))

    start = time.perf_counter()
    count = 0
    try:
        for m in trainer.iter_training(run):
            count += 1
            if args.verbose and (m.episode + 1) % 10 == 0:
                print(f"seed {m.seed} episode {m.episode + 1}: return {m.cumulative_return:.3f} violations {m.violation_count}")
    except (trainer.TrainingAborted, OSError) as exc:
        return _fail(EXIT_RUNTIME, str(exc))
    elapsed = time.perf_counter() - start
    print(f"{run.mode} run finished: {count} episodes in {elapsed:.1f} s; metrics at {run.metrics_path}")
    return EXIT_OK


def _run_has_seeds(path: str) -> bool:
    try:
        return "seeds" in tomllib.loads(Path(path).read_text(encoding="utf-8")).get("run", {})
    except (OSError, tomllib.TOMLDecodeError):
        return False


def evaluate_cmd(args: argparse.Namespace) -> int:
    try:
        policy = trainer.load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        return _fail(EXIT_USAGE, str(exc))
    try:
        config = env.load_config(args.battery_config)
    except ConfigError as exc:
        return _fail(EXIT_USAGE, f"{args.battery_config}: {exc}")
    out = Path(args.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        rows, summary = trainer.evaluate_policy(policy.actor, policy.safety, config, policy.config.max_current_a)
        trainer.write_csv(out / f"trajectory_{config.name}.csv", trainer.TRAJECTORY_HEADER, rows)
        (out / f"summary_{config.name}.txt").write_text(summary.line() + "\n")
        (out / f"summary_{config.name}.json").write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        return _fail(EXIT_RUNTIME, str(exc))
    print(summary.line())
    return EXIT_OK


def compare_cmd(args: argparse.Namespace) -> int:
    if len(args.metrics) < 2:
        return _fail(EXIT_USAGE, "compare needs at least two metrics CSV files")
    runs = {}
    for path in args.metrics:
        try:
            metrics = trainer.read_metrics(path)
        except ValueError as exc:
            return _fail(EXIT_USAGE, str(exc))
        except OSError as exc:
            return _fail(EXIT_USAGE, f"{path}: {exc.strerror}")
        if not metrics:
            return _fail(EXIT_USAGE, f"{path}: no episodes")
        name = str(path)
        while name in runs:
            name += "'"
        runs[name] = metrics
    report = trainer.compare_runs(runs, window=args.window, horizon_min=args.horizon_min)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    try:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(text)
    except OSError as exc:
        return _fail(EXIT_RUNTIME, str(exc))
    for name, s in report["runs"].items():
        ct = "NA" if s["mean_charging_time_min"] is None else f"{s['mean_charging_time_min']:.2f}"
        print(f"{name}: return {s['mean_return']:.3f} violations/episode {s['mean_violations_per_episode']:.3f} charging_time_min {ct}")
    return EXIT_OK


def validate_config_cmd(args: argparse.Namespace) -> int:
    status = EXIT_OK
    for path in args.paths:
        try:
            text = Path(path).read_text(encoding="utf-8")
            is_run = "run" in tomllib.loads(text)
        except OSError as exc:
            status = _fail(EXIT_USAGE, f"{path}: {exc.strerror}")
            continue
        except tomllib.TOMLDecodeError as exc:
            status = _fail(EXIT_USAGE, f"{path}: {exc}")
            continue
        try:
            if is_run:
                run = trainer.load_run(path)
                print(f"{path}: ok (run: {len(run.configs)} battery configs, seeds {run.seeds}, {run.episodes} episodes)")
            else:
                cfg = env.load_config(path)
                print(f"{path}: ok (battery config '{cfg.name}')")
        except ConfigError as exc:
            status = _fail(EXIT_USAGE, f"{path}: {exc}")
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safecharge", description="Safe fast-charging DDPG with a QP safety layer.")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress output and debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--run-config", required=True, help="TOML run file")
    p.add_argument("--output-dir", help="override the run file's output directory")
    p.add_argument("--episodes", type=int, help="episodes per seed")
    p.add_argument("--seeds", type=int, nargs="+", help="seed values (one training run each)")
    p.add_argument("--no-safety", action="store_true", help="baseline: execute the raw clamped actor action")
    p.add_argument("--workers", type=int, help="train seeds in this many processes")
    p.set_defaults(func=train_cmd)

    p = sub.add_parser("evaluate", help="deterministic rollout of a trained policy")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory written by train")
    p.add_argument("--battery-config", required=True)
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=evaluate_cmd)

    p = sub.add_parser("compare", help="summarize and compare metrics CSVs")
    p.add_argument("metrics", nargs="+", help="metrics CSV files; the first is the reference")
    p.add_argument("--output", required=True, help="report path (JSON)")
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--horizon-min", type=float, default=30.0, help="charging time assigned to episodes that never reach the target")
    p.set_defaults(func=compare_cmd)

    p = sub.add_parser("validate-config", help="check battery or run configuration files")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=validate_config_cmd)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: run scenarios, sweep parameters, evaluate logs.

    coopguide run   --config scenario.cfg [--seed N] [--out DIR]
    coopguide sweep --config scenario.cfg [--seed N] [--out DIR] [--jobs N]
    coopguide eval  --log events.log [--out DIR]

``run`` writes events.log and report.txt into the output directory and exits
0 on success, 2 when the scenario aborted on the deviation radius, 1 on bad
configuration.  ``sweep`` reads the sweep.* section of the config, executes
runs_per_value seeded runs per parameter value (optionally in a worker
pool), writes one report per run plus an aggregate CSV, and exits 0 even
when individual runs fail (failures are data).  ``eval`` re-evaluates a
stored event log, prints the report, and writes the per-sample error CSV.

The default output directory is $COOPGUIDE_OUT_DIR, falling back to the
current directory.
"""

from __future__ import annotations

import argparse
import multiprocessing
import os
import sys
from pathlib import Path
from typing import Optional

from .config import ConfigError, build_config, load_config_file
from .evaluation import EvaluationError, evaluate_log, format_report, write_per_sample_csv
from .simulator import EventLog, LogParseError, run_scenario


def _default_out() -> str:
    return os.environ.get("COOPGUIDE_OUT_DIR", ".")


def _load(config_path: str, seed: Optional[int]):
    overrides = load_config_file(config_path)
    return build_config(overrides, seed=seed)


def cmd_run(config_path: str, seed: Optional[int], out_dir: str) -> int:
    try:
        config = _load(config_path, seed)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = run_scenario(config)
    log.save(str(out / "events.log"))
    try:
        report = evaluate_log(log)
        text = format_report(report, config)
        code = 2 if report.failure else 0
    except EvaluationError as exc:
        text = f"failure = true\nerror = {exc}\n"
        code = 2
    (out / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return code


def _sweep_seed(base_seed: int, value_index: int, run_index: int) -> int:
    # deterministic, collision-free for any sane sweep size
    return base_seed + 1009 * value_index + run_index


def _sweep_run(args) -> tuple:
    overrides, parameter, value, value_index, run_index, base_seed = args
    run_overrides = dict(overrides)
    run_overrides[parameter] = value
    seed = _sweep_seed(base_seed, value_index, run_index)
    config = build_config(run_overrides, seed=seed)
    log = run_scenario(config)
    try:
        report = evaluate_log(log)
        row = (value, run_index, report.mean_path_deviation,
               report.rel_loc_rmse, report.failure)
        text = format_report(report, config)
    except EvaluationError as exc:
        # a run that never initialized still counts as a failure row
        row = (value, run_index, float("nan"), float("nan"), True)
        text = f"failure = true\nerror = {exc}\n"
    return row, text


def cmd_sweep(config_path: str, seed: Optional[int], out_dir: str, jobs: int) -> int:
    try:
        overrides = load_config_file(config_path)
        config = build_config(overrides, seed=seed)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    parameter = config["sweep.parameter"]
    values = config["sweep.values"]
    runs = config["sweep.runs_per_value"]
    if not parameter:
        print("config error: sweep.parameter is required for the sweep "
              "subcommand", file=sys.stderr)
        return 1
    if not values:
        print("config error: sweep.values is required for the sweep "
              "subcommand", file=sys.stderr)
        return 1
    if runs < 1:
        print("config error: sweep.runs_per_value must be >= 1", file=sys.stderr)
        return 1
    try:
        build_config({**overrides, parameter: values[0]})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base_seed = config.seed
    tasks = [
        (overrides, parameter, value, vi, ri, base_seed)
        for vi, value in enumerate(values)
        for ri in range(runs)
    ]
    if jobs > 1:
        with multiprocessing.Pool(processes=jobs) as pool:
            results = pool.map(_sweep_run, tasks)
    else:
        results = [_sweep_run(task) for task in tasks]

    csv_lines = ["value,run,mean_path_deviation,rel_loc_rmse,failed"]
    for task, (row, text) in zip(tasks, results):
        value, run_index = row[0], row[1]
        name = f"run_{value!r}_{run_index:02d}.report"
        (out / name).write_text(text, encoding="utf-8")
        csv_lines.append(
            f"{value!r},{run_index},{row[2]!r},{row[3]!r},"
            f"{1 if row[4] else 0}"
        )
    (out / "aggregate.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    print(f"sweep complete: {len(tasks)} runs, aggregate in {out / 'aggregate.csv'}")
    return 0


def cmd_eval(log_path: str, out_dir: str) -> int:
    try:
        log = EventLog.load(log_path)
    except (LogParseError, OSError) as exc:
        print(f"log error: {exc}", file=sys.stderr)
        return 1
    try:
        report = evaluate_log(log)
    except EvaluationError as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return 1
    print(format_report(report), end="")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "per_sample.csv", "w", encoding="utf-8", newline="\n") as fh:
        write_per_sample_csv(report, fh)
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="coopguide",
        description="Cooperative guidance scenario simulator and evaluator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario")
    p_run.add_argument("--config", required=True, help="scenario config file")
    p_run.add_argument("--seed", type=int, default=None, help="override scenario.seed")
    p_run.add_argument("--out", default=_default_out(), help="output directory")

    p_sweep = sub.add_parser("sweep", help="run a parameter sweep")
    p_sweep.add_argument("--config", required=True, help="scenario config file "
                         "with a sweep.* section")
    p_sweep.add_argument("--seed", type=int, default=None, help="base seed override")
    p_sweep.add_argument("--out", default=_default_out(), help="output directory")
    p_sweep.add_argument("--jobs", type=int, default=1, help="parallel workers")

    p_eval = sub.add_parser("eval", help="evaluate a stored event log")
    p_eval.add_argument("--log", required=True, help="events.log path")
    p_eval.add_argument("--out", default=_default_out(), help="output directory")

    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.seed, args.out)
    if args.command == "sweep":
        return cmd_sweep(args.config, args.seed, args.out, max(1, args.jobs))
    return cmd_eval(args.log, args.out)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line driver: ``graphmc {gen,run,compare,sweep}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from graphmc.errors import GraphValidationError
from graphmc.datagen import TrafficFormatError
from graphmc.experiment import (
    DATASETS,
    SOLVER_ALIASES,
    TRACKERS,
    ConfigError,
    ExperimentConfig,
    RunFailure,
    cmd_compare,
    cmd_gen,
    cmd_run,
    cmd_sweep,
    format_table,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# flag dest -> config key
OVERRIDES = {
    "dataset": "dataset",
    "data": "data_path",
    "graph": "graph_path",
    "seed": "seed",
    "lambda1": "lambda1",
    "lambda2": "lambda2",
    "lambda3": "lambda3",
    "rank": "rank",
    "missing": "missing",
    "tracker": "tracker",
    "solver": "solver",
    "steps": "steps",
    "truth": "truth",
    "out": "out",
    "diagnostics_every": "diagnostics_every",
}


def _float_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config; flags override it")
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--data", help="dataset CSV (traffic format)")
    p.add_argument("--graph", help="graph edge-list file (default: <data>.graph)")
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lambda3", type=float)
    p.add_argument("--rank", type=int)
    p.add_argument("--missing", type=float, help="fraction of entries hidden per step")
    p.add_argument("--tracker", choices=TRACKERS)
    p.add_argument("--solver", choices=tuple(SOLVER_ALIASES))
    p.add_argument("--steps", type=int, help="truncate the stream")
    p.add_argument("--truth", choices=("clean", "observed"))
    p.add_argument("--diagnostics", action="store_true", default=None,
                   help="retain history and export cost/gradient diagnostics")
    p.add_argument("--diagnostics-every", dest="diagnostics_every", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                   help="set any config key, e.g. --set 'netflix={\"users\": 50}'")
    p.add_argument("--out", help="output path")


def build_config(args) -> ExperimentConfig:
    base = {}
    if args.config is not None:
        try:
            base = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    for item in args.set:
        key, _, value = item.partition("=")
        try:
            base[key] = json.loads(value)
        except json.JSONDecodeError:
            base[key] = value
    for flag, key in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    if args.diagnostics:
        base["diagnostics"] = True
    if base.get("data_path") and "dataset" not in base:
        base["dataset"] = "traffic-file"
    return ExperimentConfig.from_dict(base)


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphmc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset directory")
    _add_config_flags(gen)

    run = sub.add_parser("run", help="stream a dataset through a tracker")
    _add_config_flags(run)

    cmp_ = sub.add_parser("compare", help="summarize results CSVs")
    cmp_.add_argument("results", nargs="+", type=Path)
    cmp_.add_argument("--out", type=Path, help="write the summary as CSV")

    sweep = sub.add_parser("sweep", help="grid search over lambdas on a held-out seed")
    _add_config_flags(sweep)
    sweep.add_argument("--grid-lambda1", type=_float_list, default=None)
    sweep.add_argument("--grid-lambda2", type=_float_list, default=None)
    sweep.add_argument("--grid-lambda3", type=_float_list, default=None)
    sweep.add_argument("--holdout-seed", type=int)
    sweep.add_argument("--jobs", type=int, default=1)
    return p


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            rows = cmd_compare(args.results)
            print(format_table(rows))
            if args.out:
                _write_rows(args.out, rows)
            return EXIT_OK

        cfg = build_config(args)
        if args.command == "gen":
            out = cmd_gen(cfg)
            print(f"wrote dataset to {out}")
        elif args.command == "run":
            result = cmd_run(cfg)
            print(f"final err_db {result.final_err_db:.4f} over {len(result.err_db)} steps -> {cfg.out}")
        elif args.command == "sweep":
            rows, best = cmd_sweep(
                cfg,
                args.grid_lambda1 or [cfg.lambda1],
                args.grid_lambda2 or [cfg.lambda2],
                args.grid_lambda3 or [cfg.lambda3],
                holdout_seed=args.holdout_seed,
                jobs=args.jobs,
            )
            for r in rows:
                print(f"lambda1={r['lambda1']:g} lambda2={r['lambda2']:g} "
                      f"lambda3={r['lambda3']:g} final_err_db={r['final_err_db']:.4f}")
            print(f"best: lambda1={best.lambda1:g} lambda2={best.lambda2:g} lambda3={best.lambda3:g}")
            if cfg.out:
                out = Path(cfg.out)
                out.parent.mkdir(parents=True, exist_ok=True)
                _write_rows(out, rows)
                out.with_name(out.stem + ".best.json").write_text(
                    json.dumps(best.replace(out=None).to_dict(), indent=2, sort_keys=True) + "\n")
    except (ConfigError, GraphValidationError, TrafficFormatError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunFailure as exc:
        print(f"numerical failure at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Usage: vqkit <subcommand> --config <path> --out <dir> [--seed N]

Subcommands: toy-trajectory, affine-toy, ablation, train, init-study,
metrics-replay. Exit codes: 0 success, 2 config error, 3 numeric failure.
Given the same config and seed, outputs are byte-identical across runs.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import experiments as exp
from . import metrics as mtr
from .errors import ConfigError, NumericFailure, VQKitError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _emit_effective_config(cfg: dict, out: Path) -> None:
    _write_json(out / "config.json", cfg)


def cmd_toy_trajectory(cfg: dict, out: Path) -> None:
    toy = cfg["toy"]
    summary = {}
    for mode in exp.TOY_MODES:
        traj = exp.run_toy_trajectory(mode, cfg["seed"], steps=toy["steps"],
                                      lr=toy["lr"], alpha=toy["alpha"],
                                      beta=toy["beta"], nu=toy["nu"],
                                      target=tuple(toy["target"]), tol=toy["tol"])
        rows = [[step] + [_fmt(v) for v in row] for step, row in enumerate(traj.rows)]
        _write_csv(out / f"trajectory_{mode}.csv",
                   ["step", "z_e_x", "z_e_y", "z_q_x", "z_q_y", "task_loss"], rows)
        summary[mode] = {"path_length": traj.path_length,
                         "steps_to_tol": traj.steps_to_tol,
                         "final_task_loss": traj.rows[-1][4]}
    _write_json(out / "summary.json", summary)


def cmd_affine_toy(cfg: dict, out: Path) -> None:
    at = cfg["affine_toy"]
    result = exp.run_affine_toy(cfg["seed"], n_points=at["n_points"], m=at["m"],
                                updates=at["updates"], lr=at["lr"],
                                momentum=at["momentum"], point_cov=at["point_cov"],
                                code_cov=at["code_cov"])
    for variant in ("standard", "affine"):
        rows = [[i, _fmt(g)] for i, g in enumerate(result[variant]["gap_history"])]
        _write_csv(out / f"gap_{variant}.csv", ["update", "codebook_mean_gap"], rows)
    summary = {variant: {k: v for k, v in result[variant].items() if k != "gap_history"}
               for variant in result}
    _write_json(out / "summary.json", summary)


def cmd_ablation(cfg: dict, out: Path) -> None:
    rows = exp.run_ablation(cfg)
    header = sorted(rows[0])
    _write_csv(out / "ablation.csv", header,
               [[_fmt(r[k]) if isinstance(r[k], float) else r[k] for k in header]
                for r in rows])
    _write_json(out / "summary.json", rows)


def cmd_train(cfg: dict, out: Path) -> None:
    result = exp.run_training(cfg)
    mtr.write_metrics_csv(result.records, out / "metrics.csv")
    result.codebook.save(out / "codebook.bin")
    with open(out / "replacements.jsonl", "w") as fh:
        for event in result.replacement_events:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
    last = result.records[-1]
    _write_json(out / "summary.json", {
        "steps": len(result.records),
        "final_task_loss": last.task_loss,
        "final_commit_loss": last.commit_loss,
        "final_perplexity": last.perplexity,
        "final_active_ratio": last.active_ratio,
        "n_replacement_events": len(result.replacement_events),
    })


def cmd_init_study(cfg: dict, out: Path) -> None:
    rows = exp.run_init_study(cfg)
    methods = cfg["init_study"]["methods"]
    _write_csv(out / "init_study.csv", ["seed"] + list(methods),
               [[r["seed"]] + [_fmt(r[m]) for m in methods] for r in rows])
    summary = {m: {"mean": float(np.mean([r[m] for r in rows])),
                   "sd": float(np.std([r[m] for r in rows]))} for m in methods}
    _write_json(out / "summary.json", summary)


def cmd_metrics_replay(cfg: dict, out: Path, metrics_path: Path) -> None:
    """Summarize an existing metrics CSV: per-column min/max/final plus the
    step of the best task loss."""
    try:
        with open(metrics_path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != list(mtr.METRICS_HEADER):
                raise ConfigError(f"unexpected metrics header {reader.fieldnames}")
            rows = [{k: float(v) for k, v in row.items()} for row in reader]
    except OSError as exc:
        raise ConfigError(f"cannot read metrics CSV: {exc}") from exc
    if not rows:
        raise ConfigError("metrics CSV has no data rows")
    summary = {}
    for col in mtr.METRICS_HEADER[1:]:
        vals = [r[col] for r in rows]
        summary[col] = {"min": min(vals), "max": max(vals), "final": vals[-1]}
    best = min(rows, key=lambda r: r["task_loss"])
    summary["best_task_loss_step"] = int(best["step"])
    summary["n_steps"] = len(rows)
    _write_json(out / "replay_summary.json", summary)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="vqkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("toy-trajectory", "affine-toy", "ablation", "train",
                 "init-study", "metrics-replay"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None)
        if name == "metrics-replay":
            p.add_argument("--metrics", required=True,
                           help="path to an existing metrics CSV to summarize")
    args = parser.parse_args(argv)

    try:
        cfg = exp.load_config(args.config)
        expected = args.command if args.command != "metrics-replay" else "train"
        if cfg["scenario"] != expected:
            raise ConfigError(
                f"config scenario {cfg['scenario']!r} does not match subcommand "
                f"{args.command!r}")
        if args.seed is not None:
            cfg["seed"] = args.seed
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _emit_effective_config(cfg, out)
        if args.command == "toy-trajectory":
            cmd_toy_trajectory(cfg, out)
        elif args.command == "affine-toy":
            cmd_affine_toy(cfg, out)
        elif args.command == "ablation":
            cmd_ablation(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "init-study":
            cmd_init_study(cfg, out)
        else:
            cmd_metrics_replay(cfg, out, Path(args.metrics))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VQKitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

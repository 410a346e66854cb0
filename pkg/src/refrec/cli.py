"""Command-line interface.

Stages consume the artifacts of earlier stages from the run directory and
fail with an explicit "run X first" message when something is missing. All
errors leave a machine-readable JSON object on stderr and a nonzero exit
code. The REFREC_THREADS environment variable caps worker parallelism for
multi-seed commands.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import (
    ExperimentConfig,
    PRESETS,
    apply_overrides,
    config_hash,
    load_config,
    save_config,
)
from .pipeline import (
    ABLATION_AXES,
    StageError,
    run_ablation,
    run_eval,
    run_gen_data,
    run_pipeline,
    run_refine,
    run_seeds,
    run_selftrain,
    run_warmup,
)
from .report import write_report_bundle

STAGE_COMMANDS = {
    "gen-data": run_gen_data,
    "warmup": run_warmup,
    "refine": run_refine,
    "selftrain": run_selftrain,
}


def _parse_set(values) -> dict:
    out = {}
    for item in values or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got '{item}'")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _resolve_config(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = PRESETS[args.preset]()
    apply_overrides(cfg, _parse_set(args.set))
    if args.out:
        cfg.out_dir = args.out
    return cfg


def _seeds(cfg: ExperimentConfig, args) -> list:
    if args.seeds is not None:
        return list(range(args.seeds))
    return list(cfg.seeds)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("REFREC_THREADS", "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refrec",
        description="Reconstruction-guided self-training for point-cloud "
        "domain adaptation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = [
        ("gen-data", "generate the synthetic source/target dataset files"),
        ("warmup", "reconstruction pre-training, source classifier, initial pseudo-labels"),
        ("refine", "offline pseudo-label refinement in descriptor space"),
        ("selftrain", "dual-head self-training with the mean teacher"),
        ("pipeline", "all stages plus the no-adaptation baseline"),
        ("eval", "evaluate the final checkpoint on the target test split"),
        ("ablate", "paired runs along an ablation axis"),
        ("report", "aggregate per-seed reports into CSV and SVG plots"),
    ]
    for name, help_text in commands:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=str, default=None, help="config JSON path")
        p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        p.add_argument("--seeds", type=int, default=None,
                       help="use seeds 0..N-1 instead of the config's list")
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (JSON-parsed value)")
        if name == "ablate":
            p.add_argument("--axis", required=True,
                           choices=sorted(ABLATION_AXES) + ["all"])
    return parser


def run_command(args) -> int:
    cfg = _resolve_config(args)
    seeds = _seeds(cfg, args)
    out_dir = cfg.out_dir
    threads = _threads()

    if args.command in STAGE_COMMANDS:
        stage = STAGE_COMMANDS[args.command]
        for seed in seeds:
            stage(cfg, seed, out_dir)
            print(json.dumps({"stage": args.command, "seed": seed, "out": out_dir,
                              "config_hash": config_hash(cfg)}))
        return 0

    if args.command == "pipeline":
        reports = run_seeds(cfg, seeds, out_dir, threads=threads)
        save_config(cfg, os.path.join(out_dir, "config.json"))
        agg = write_report_bundle(out_dir, reports)
        print(json.dumps({"mean": agg["mean"], "n_seeds": agg["n_seeds"]}, indent=2))
        return 0

    if args.command == "eval":
        for seed in seeds:
            result = run_eval(cfg, seed, out_dir)
            print(json.dumps({"seed": seed, **result}))
        return 0

    if args.command == "ablate":
        axes = sorted(ABLATION_AXES) if args.axis == "all" else [args.axis]
        for axis in axes:
            result = run_ablation(cfg, axis, seeds, out_dir, threads=threads)
            print(json.dumps(result["comparison"]))
        return 0

    if args.command == "report":
        agg = write_report_bundle(out_dir)
        print(json.dumps({"mean": agg["mean"], "n_seeds": agg["n_seeds"]}, indent=2))
        return 0

    raise ValueError(f"unhandled command {args.command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run_command(args)
    except StageError as exc:
        print(json.dumps({"error": "stage", "message": str(exc)}), file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: training runs, evaluation, checks, sweeps.

Configs are JSON validated against a published schema (unknown keys are
rejected), time series go to CSV, reports to JSON. Outputs carry no
timestamps so a rerun with the same config and seed is byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np

from . import checks, envs, mixers, oracle, trainer
from .diffgraph import ParameterSet
from .distcore import CategoricalDistribution, SupportSpec
from .envs import MATRIX_GAME_SCHEMA, MatrixGameSpec

log = logging.getLogger("catdist")

DEFAULT_SWEEP_ATOMS = (5, 11, 25, 51, 75)
SWEEP_REFERENCE_ATOMS = 601     # shared fine grid the sweep reports against

EXPERIMENT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "algorithm": {"enum": ["dvdn", "dqmix"]},
        "env": {"oneOf": [{"type": "string"}, MATRIX_GAME_SCHEMA]},
        "out_dir": {"type": "string"},
        "seed": {"type": "integer"},
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "support": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["v_min", "v_max", "m"],
                    "properties": {
                        "v_min": {"type": "number"},
                        "v_max": {"type": "number"},
                        "m": {"type": "integer", "minimum": 2},
                    },
                },
                "gamma": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_episodes": {"type": "integer", "minimum": 1},
                "train_every": {"type": "integer", "minimum": 1},
                "target_sync": {"type": "integer", "minimum": 1},
                "replay_capacity": {"type": "integer", "minimum": 1},
                "total_steps": {"type": "integer", "minimum": 1},
                "eval_every": {"type": "integer", "minimum": 1},
                "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "epsilon": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "start": {"type": "number", "minimum": 0, "maximum": 1},
                        "end": {"type": "number", "minimum": 0, "maximum": 1},
                        "decay_steps": {"type": "integer", "minimum": 1},
                    },
                },
                "mixer": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "hidden_units": {"type": "integer", "minimum": 1},
                        "hidden_function": {"type": "string"},
                        "output_function": {"type": "string"},
                        "hypernet_hidden": {"type": "integer", "minimum": 1},
                    },
                },
            },
        },
    },
}


def load_experiment(path) -> tuple[MatrixGameSpec, trainer.TrainConfig, str | None]:
    """Parse and validate an experiment file into game + config + out dir."""
    with open(path) as fh:
        obj = json.load(fh)
    jsonschema.validate(obj, EXPERIMENT_SCHEMA)

    env = obj.get("env")
    if env is None:
        game = envs.default_matrix_game()
    elif isinstance(env, str):
        base = Path(path).parent
        game = MatrixGameSpec.load(base / env if not os.path.isabs(env) else env)
    else:
        game = MatrixGameSpec.from_json_obj(env)

    t = dict(obj.get("train", {}))
    if "support" in t:
        s = t["support"]
        t["support"] = SupportSpec(s["v_min"], s["v_max"], s["m"])
    if "epsilon" in t:
        t["epsilon"] = trainer.EpsilonSchedule(**t["epsilon"])
    if "mixer" in t:
        t["mixer"] = mixers.MixerConfig(**t["mixer"])
    if "hidden" in t:
        t["hidden"] = tuple(t["hidden"])
    config = trainer.TrainConfig(algo=obj.get("algorithm", "dqmix"),
                                 seed=obj.get("seed", 0), **t)
    return game, config, obj.get("out_dir")


def _apply_overrides(config: trainer.TrainConfig, args) -> trainer.TrainConfig:
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    if getattr(args, "algo", None) is not None:
        config = replace(config, algo=args.algo)
    return config


def cmd_train(args) -> int:
    game, config, out_dir = load_experiment(args.config)
    config = _apply_overrides(config, args)
    out = args.out or out_dir
    if out is None:
        print("no output directory: pass --out or set out_dir in the config",
              file=sys.stderr)
        return 2
    log.info("training %s for %d steps into %s", config.algo,
             config.total_steps, out)
    result = trainer.train(game, config, out_dir=out)
    log.info("finished after %d updates", result["updates"])
    print(f"wrote metrics.csv, checkpoint.json, final_eval.json to {out}")
    return 0


def cmd_eval(args) -> int:
    game, config, _ = load_experiment(args.config)
    config = _apply_overrides(config, args)
    params = ParameterSet.load(args.checkpoint)
    config = trainer.resolve_gamma(config, game)
    report = trainer.evaluate(params, game, config)
    truths = oracle.game_truths(game, config.support)
    atoms = config.support.atoms().tolist()
    histograms = {}
    for key, cell in report.items():
        joint = tuple(int(s) for s in key.split(","))
        histograms[key] = {
            "atoms": atoms,
            "learned_probs": cell["probs"],
            "true_probs": truths[joint].dist.probs.tolist(),
        }
    payload = json.dumps({"report": report, "histograms": histograms}, indent=2)
    if args.out:
        Path(args.out).write_text(payload + "\n")
        print(f"wrote evaluation report to {args.out}")
    else:
        print(payload)
    return 0


def cmd_check(args) -> int:
    names = sorted(checks.SUITES) if args.suite == "all" else [args.suite]
    failed = 0
    for name in names:
        results = checks.run_suite(name, seed=args.seed,
                                   corrupt_convolution=args.corrupt_convolution)
        for r in results:
            status = "PASS" if r.passed else "FAIL"
            detail = f"  ({r.detail})" if r.detail else ""
            print(f"{status} [{name}] {r.name}{detail}")
            failed += 0 if r.passed else 1
    return 0 if failed == 0 else 1


def cmd_sweep_atoms(args) -> int:
    game, config, out_dir = load_experiment(args.config)
    config = _apply_overrides(config, args)
    out = args.out or out_dir
    if out is None:
        print("no output path: pass --out or set out_dir in the config",
              file=sys.stderr)
        return 2
    atom_counts = [int(s) for s in args.atoms.split(",")]
    reference = SupportSpec(config.support.v_min, config.support.v_max,
                            SWEEP_REFERENCE_ATOMS)
    rows = []
    for m in atom_counts:
        support = SupportSpec(config.support.v_min, config.support.v_max, m)
        cfg = replace(config, support=support)    # same seed across m
        log.info("sweep: m=%d", m)
        result = trainer.train(game, cfg)
        for key, cell in result["final_eval"].items():
            a1, a2 = key.split(",")
            learned = CategoricalDistribution.from_support(
                support, np.asarray(cell["probs"]))
            # kl is against the truth binned on this run's own grid; kl_ref
            # re-spreads the learned mass on one shared fine grid so numbers
            # are comparable across atom counts
            rows.append({"m": m, "a1": a1, "a2": a2,
                         "kl": repr(float(cell["kl_to_oracle"])),
                         "kl_ref": repr(float(oracle.reference_kl(
                             game, (int(a1), int(a2)), learned, reference))),
                         "mean": repr(float(cell["mean"])),
                         "variance": repr(float(cell["variance"]))})
    out_path = Path(out)
    if out_path.suffix != ".csv":
        out_path.mkdir(parents=True, exist_ok=True)
        out_path = out_path / "atom_sweep.csv"
    with open(out_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["m", "a1", "a2", "kl",
                                                "kl_ref", "mean", "variance"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {out_path}")
    return 0


def cmd_demo_correlated(args) -> int:
    payload = json.dumps(oracle.correlated_reward_demo(), indent=2)
    if args.out:
        Path(args.out).write_text(payload + "\n")
        print(f"wrote demo report to {args.out}")
    else:
        print(payload)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="catdist",
        description="Value-factorized categorical return distributions "
                    "on stochastic matrix games.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training experiment")
    p.add_argument("--config", required=True, help="experiment JSON path")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--algo", choices=trainer.ALGORITHMS, help="override algorithm")
    p.add_argument("--out", help="output directory (overrides config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against the truth")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--algo", choices=trainer.ALGORITHMS)
    p.add_argument("--out", help="report path (stdout when omitted)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="run a property-check suite")
    p.add_argument("suite", choices=sorted(checks.SUITES) + ["all"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-convolution", action="store_true",
                   help="inject a convolution fault to verify the checker fails")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("sweep-atoms", help="train across atom counts, same seed")
    p.add_argument("--config", required=True)
    p.add_argument("--atoms", default=",".join(str(m) for m in DEFAULT_SWEEP_ATOMS),
                   help="comma-separated atom counts")
    p.add_argument("--seed", type=int)
    p.add_argument("--algo", choices=trainer.ALGORITHMS)
    p.add_argument("--out", help="CSV path or directory (overrides config)")
    p.set_defaults(func=cmd_sweep_atoms)

    p = sub.add_parser("demo-correlated",
                       help="anticorrelated-reward failure case of additive mixing")
    p.add_argument("--out", help="report path (stdout when omitted)")
    p.set_defaults(func=cmd_demo_correlated)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CATDIST_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (jsonschema.ValidationError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

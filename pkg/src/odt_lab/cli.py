"""Command-line entry points.

Subcommands:

- ``gen-data``: generate an offline dataset and write it as jsonl.
- ``pretrain``: offline stage only; artifacts land in ``--run-dir``.
- ``finetune``: full run (pretrain then online finetune), or finetune from
  an existing ``--checkpoint``.
- ``eval``: evaluate a checkpoint at a given return target.
- ``sweep-rtg``: evaluate a checkpoint across a grid of return targets.
- ``ablate``: finetune with one named ingredient swapped out.

Configuration is a flat JSON object mirroring the run-config fields; any
field can also be set on the command line with ``--set KEY=VALUE``
(repeatable). Precedence, lowest to highest: built-in defaults, ``--config``
file, ``--set`` pairs, dedicated flags (``--env``, ``--seed``, ``--dataset``),
ablation preset. The seed falls back to the ``ODT_LAB_SEED`` environment
variable when not set anywhere else.

The resolved config is written to ``<run-dir>/config.json`` before anything
executes. Output is plain unstyled text (trivially NO_COLOR-safe); ``--quiet``
suppresses everything but errors.

Exit codes: 0 success, 1 configuration or input error, 2 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .envs import env_spec
from .pipeline import (
    RunConfig,
    apply_strict_determinism,
    evaluate,
    finetune,
    generate_dataset,
    init_run_dir,
    load_or_generate_dataset,
    policy_config,
    pretrain,
    resolve_config,
    sweep_rtg,
)
from .policy import load_checkpoint
from .train import DualState, TrainingDiverged, TrainState, make_optimizer
from .trajectory import save_jsonl


class ConfigError(Exception):
    """Bad configuration or missing input; maps to exit code 1."""


ABLATION_PRESETS: dict[str, dict[str, object]] = {
    "hindsight-off": {"hindsight_relabel": False},
    "gonline-1x": {"g_online_scale": 1.0},
    "curriculum-q90": {"g_online_mode": "curriculum", "g_online_percentile": 90.0},
    "buffer-random-init": {"buffer_init": "random"},
    "return-weighted": {"sample_strategy": "return"},
    "deterministic-policy": {"deterministic_policy": True},
}

_FIELD_TYPES = {f.name: str(f.type) for f in dataclasses.fields(RunConfig)}


def _resolve_seed(args: argparse.Namespace) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env_seed = os.environ.get("ODT_LAB_SEED")
    if env_seed is None:
        return 0
    try:
        return int(env_seed)
    except ValueError:
        raise ConfigError(f"ODT_LAB_SEED must be an integer, got {env_seed!r}")


def _coerce(name: str, raw: str) -> object:
    """Parse a --set value according to the config field's declared type."""
    if name not in _FIELD_TYPES:
        raise ConfigError(f"unknown config field {name!r}")
    t = _FIELD_TYPES[name]
    if "None" in t and raw.lower() in ("none", "null", ""):
        return None
    try:
        if t.startswith("bool"):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if t.startswith("int"):
            return int(raw)
        if t.startswith("float"):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {e}")


def build_config(args: argparse.Namespace) -> RunConfig:
    merged: dict[str, object] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})")
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        merged.update(file_cfg)
    for pair in getattr(args, "set", None) or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        merged[key.strip()] = _coerce(key.strip(), value.strip())
    if getattr(args, "env_name", None):
        merged["env"] = args.env_name
    if getattr(args, "seed", None) is not None:
        merged["seed"] = args.seed
    elif "seed" not in merged:
        merged["seed"] = _resolve_seed(args)
    if getattr(args, "dataset", None):
        merged["dataset_path"] = args.dataset
    if getattr(args, "strict_determinism", False):
        merged["strict_determinism"] = True
    preset = getattr(args, "preset", None)
    if preset is not None:
        if preset not in ABLATION_PRESETS:
            raise ConfigError(
                f"unknown preset {preset!r}; choose from {sorted(ABLATION_PRESETS)}"
            )
        merged.update(ABLATION_PRESETS[preset])
    try:
        return resolve_config(RunConfig.from_dict(merged))
    except (ValueError, KeyError) as e:
        raise ConfigError(str(e))


def _say(args: argparse.Namespace, msg: str) -> None:
    if not getattr(args, "quiet", False):
        print(msg)


def _start_run(args: argparse.Namespace, cfg: RunConfig) -> Path:
    if cfg.strict_determinism:
        apply_strict_determinism()
    return init_run_dir(cfg, args.run_dir)


def _eval_line(tag: str, report) -> str:
    return (
        f"{tag}: mean_return {report.mean_return:.4f} "
        f"(std {report.std_return:.4f}, normalized {report.normalized:.2f}, "
        f"{report.n_episodes} episodes)"
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    data = generate_dataset(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_jsonl(data, out)
    _say(args, f"wrote {len(data)} episodes ({sum(len(t) for t in data)} steps) to {out}")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    run_dir = _start_run(args, cfg)
    data = load_or_generate_dataset(cfg, run_dir)
    result = pretrain(cfg, data, run_dir)
    _say(args, _eval_line("pretrained", result.report))
    _say(args, f"artifacts in {run_dir}")
    return 0


def _restore_training(cfg: RunConfig, checkpoint_path: str):
    """Model + optimizer + dual + step from a checkpoint, validated against cfg."""
    path = Path(checkpoint_path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        ckpt = load_checkpoint(path)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: not a usable checkpoint ({e})")
    expected = policy_config(cfg, env_spec(cfg.env))
    if ckpt.config != expected:
        raise ConfigError(
            f"checkpoint architecture does not match the config: "
            f"{ckpt.config} vs {expected}"
        )
    model = ckpt.model
    if ckpt.dual is not None:
        dual = DualState.from_dict(ckpt.dual)
    else:
        dual = DualState(log_lambda=float(np.log(cfg.lambda_init)), beta=float(cfg.beta))
    optimizer = make_optimizer(cfg.optimizer, model, cfg.lr, cfg.weight_decay)
    if ckpt.optimizer_state is not None:
        optimizer.state_import(ckpt.optimizer_state)
    train_state = TrainState(
        base_lr=cfg.lr, warmup_steps=cfg.warmup_steps,
        grad_clip=cfg.grad_clip, step=ckpt.step,
    )
    return model, dual, optimizer, train_state


def cmd_finetune(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    run_dir = _start_run(args, cfg)
    data = load_or_generate_dataset(cfg, run_dir)
    if args.checkpoint:
        model, dual, optimizer, train_state = _restore_training(cfg, args.checkpoint)
        _say(args, f"resumed from {args.checkpoint} at step {train_state.step}")
    else:
        pre = pretrain(cfg, data, run_dir)
        _say(args, _eval_line("pretrained", pre.report))
        model, dual, optimizer, train_state = (
            pre.model, pre.dual, pre.optimizer, pre.train_state,
        )
    result = finetune(cfg, model, dual, optimizer, train_state, data, run_dir)
    _say(args, _eval_line("finetuned", result.report))
    _say(args, f"online samples: {result.online_samples}; artifacts in {run_dir}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    # same flow as finetune; the preset was already folded into the config
    return cmd_finetune(args)


def _load_model_for_eval(args: argparse.Namespace):
    path = Path(args.checkpoint)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        ckpt = load_checkpoint(path)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: not a usable checkpoint ({e})")
    env_name = args.env_name or ckpt.extra.get("env")
    if not env_name:
        raise ConfigError("checkpoint does not record an env; pass --env")
    try:
        spec = env_spec(env_name)
    except KeyError:
        raise ConfigError(f"unknown env {env_name!r}")
    return ckpt.model, env_name, spec


def cmd_eval(args: argparse.Namespace) -> int:
    if args.strict_determinism:
        apply_strict_determinism()
    model, env_name, spec = _load_model_for_eval(args)
    g = args.g_eval if args.g_eval is not None else args.g_scale * spec.expert_return
    seed = _resolve_seed(args)
    report = evaluate(
        model, env_name, g, args.episodes, args.context,
        rng_mod.np_rng(seed, "eval", 0), spec=spec,
    )
    _say(args, _eval_line(f"{env_name} @ g={g:g}", report))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"g_eval": g, **report.to_dict()}, fh, indent=2)
            fh.write("\n")
        _say(args, f"wrote {args.out}")
    return 0


def cmd_sweep_rtg(args: argparse.Namespace) -> int:
    if args.strict_determinism:
        apply_strict_determinism()
    model, env_name, spec = _load_model_for_eval(args)
    try:
        scales = [float(s) for s in args.scales.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--scales expects comma-separated numbers, got {args.scales!r}")
    if not scales:
        raise ConfigError("--scales is empty")
    grid = [s * spec.expert_return for s in scales]
    seed = _resolve_seed(args)
    rows = sweep_rtg(model, env_name, grid, args.episodes, args.context, seed, spec=spec)
    for scale, row in zip(scales, rows):
        _say(
            args,
            f"scale {scale:g} (g={row['g_eval']:g}): mean_return {row['mean_return']:.4f} "
            f"normalized {row['normalized']:.2f}",
        )
    if args.out:
        import csv

        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["g_eval", "mean_return",
                                                    "std_return", "normalized"])
            writer.writeheader()
            writer.writerows(rows)
        _say(args, f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="odt-lab",
        description="Return-conditioned sequence-model policies: offline "
        "pretraining and online max-entropy finetuning on toy control tasks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="suppress progress output")
    common.add_argument("--seed", type=int, default=None,
                        help="run seed (default: $ODT_LAB_SEED or 0)")
    common.add_argument("--strict-determinism", action="store_true",
                        help="pin torch to a single thread for bit-reproducible runs")

    conf = argparse.ArgumentParser(add_help=False, parents=[common])
    conf.add_argument("--config", help="flat JSON config file")
    conf.add_argument("--set", action="append", metavar="KEY=VALUE",
                      help="override one config field (repeatable)")
    conf.add_argument("--env", dest="env_name", default=None,
                      help="environment name (pointctrl or gridgoal)")
    conf.add_argument("--dataset", default=None,
                      help="offline dataset jsonl (default: generate from config)")

    p = sub.add_parser("gen-data", parents=[conf], help="generate an offline dataset")
    p.add_argument("--out", required=True, help="output jsonl path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[conf], help="offline pretraining stage")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[conf],
                       help="full run: pretrain (or resume) then online finetune")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--checkpoint", default=None,
                   help="resume from this checkpoint instead of pretraining")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("ablate", parents=[conf],
                       help="finetune with one ingredient swapped out")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--preset", required=True, choices=sorted(ABLATION_PRESETS),
                   help="which ingredient to change")
    p.set_defaults(func=cmd_ablate)

    evalish = argparse.ArgumentParser(add_help=False, parents=[common])
    evalish.add_argument("--checkpoint", required=True)
    evalish.add_argument("--env", dest="env_name", default=None,
                         help="environment (default: recorded in the checkpoint)")
    evalish.add_argument("--episodes", type=int, default=10)
    evalish.add_argument("--context", type=int, default=5)

    p = sub.add_parser("eval", parents=[evalish], help="evaluate a checkpoint")
    p.add_argument("--g-eval", type=float, default=None, help="raw return target")
    p.add_argument("--g-scale", type=float, default=1.0,
                   help="return target as a multiple of expert return")
    p.add_argument("--out", default=None, help="write the report as JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-rtg", parents=[evalish],
                       help="evaluate across a grid of return targets")
    p.add_argument("--scales", default="0.0,0.25,0.5,0.75,1.0,1.5,2.0",
                   help="comma-separated multiples of expert return")
    p.add_argument("--out", default=None, help="write rows as CSV here")
    p.set_defaults(func=cmd_sweep_rtg)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

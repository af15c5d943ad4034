"""Command-line entry points: train, eval, diag-variance, export-metrics."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import trainer
from .grpo import variance_diagnostic
from .planner import PlannerConfig
from .trainer import TrainConfig, load_config
from .world_model import WorldModelConfig, init_world_model, load_model

ABLATION_CHOICES = (
    "disable_kl",
    "disable_groups",
    "use_std_norm_advantages",
    "use_logmu_constraint",
)


def _apply_override(cfg: TrainConfig, dotted: str) -> None:
    """Apply a ``section.key=value`` or ``key=value`` override in place."""
    if "=" not in dotted:
        raise ValueError(f"override {dotted!r} must look like key=value")
    key, raw = dotted.split("=", 1)
    target = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise ValueError(f"unknown config section {part!r} in {dotted!r}")
        target = getattr(target, part)
    leaf = parts[-1]
    if not hasattr(target, leaf):
        raise ValueError(f"unknown config field {key!r}")
    current = getattr(target, leaf)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if isinstance(current, tuple) and isinstance(value, list):
        value = tuple(value)
    setattr(target, leaf, value)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tdgrpc",
        description="Latent-space MPPI control with group-relative policy updates",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training experiment")
    p_train.add_argument("--config", help="YAML config mirroring TrainConfig fields")
    p_train.add_argument("--env", help="environment name")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--steps", type=int, help="total environment step budget")
    p_train.add_argument("--run-dir", help="output directory")
    p_train.add_argument("--resume", action="store_true")
    p_train.add_argument(
        "--ablation",
        action="append",
        choices=ABLATION_CHOICES,
        default=[],
        help="enable an ablation flag (repeatable)",
    )
    p_train.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config field, e.g. planner.num_samples=128",
    )

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint deterministically")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", type=int, default=10)
    p_eval.add_argument("--seed", type=int, default=424_242)

    p_diag = sub.add_parser(
        "diag-variance",
        help="Monte Carlo variance of softmax vs std-norm advantage gradients",
    )
    p_diag.add_argument("--seed", type=int, default=0)
    p_diag.add_argument("--groups", type=int, default=3)
    p_diag.add_argument("--trials", type=int, default=200)
    p_diag.add_argument("--tau", type=float, default=1.0)
    p_diag.add_argument(
        "--outlier-scale",
        type=float,
        default=10.0,
        help="heavy-tail factor applied to one group member per trial",
    )
    p_diag.add_argument("--out", help="write the report as JSON to this path")

    p_export = sub.add_parser("export-metrics", help="metrics stream to CSV/JSON")
    p_export.add_argument("--run-dir", required=True)
    p_export.add_argument("--format", choices=("csv", "json"), default="csv")
    p_export.add_argument("--out")
    return parser


def _cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.env:
        cfg.env = args.env
    if args.seed is not None:
        cfg.seed = args.seed
    if args.steps is not None:
        cfg.total_steps = args.steps
    if args.run_dir:
        cfg.run_dir = args.run_dir
    for name in args.ablation:
        setattr(cfg.ablations, name, True)
    for override in args.set:
        _apply_override(cfg, override)
    report = trainer.run_training(cfg, resume=args.resume)
    print(json.dumps(report, indent=2))
    return 0


def _cmd_eval(args) -> int:
    model, meta = load_model(args.checkpoint)
    cfg_dict = meta.get("config")
    if cfg_dict is None:
        raise ValueError("checkpoint carries no training config")
    cfg = TrainConfig.from_dict(cfg_dict)
    mean, std, returns = trainer.evaluate(
        model, cfg.env, args.episodes, args.seed, cfg.planner, cfg.gamma
    )
    print(json.dumps({"env": cfg.env, "mean_return": mean, "std_return": std,
                      "returns": returns}))
    return 0


def _cmd_diag_variance(args) -> int:
    rng = np.random.default_rng(args.seed)
    cfg = WorldModelConfig(d_s=3, d_a=2, d_z=8, hidden=(16, 16))
    model = init_world_model(cfg, rng)
    z = rng.standard_normal(cfg.d_z)
    scale = args.outlier_scale

    def heavy_tail_q(q_rng, actions):
        q = q_rng.standard_normal(actions.shape[0])
        q[q_rng.integers(0, actions.shape[0])] *= scale
        return q

    report = variance_diagnostic(
        model,
        z,
        group_size=args.groups,
        num_trials=args.trials,
        rng=rng,
        tau_adv=args.tau,
        q_sampler=heavy_tail_q,
    )
    payload = json.dumps(report.to_dict(), indent=2)
    if args.out:
        with open(args.out, "w") as f:
            f.write(payload + "\n")
    print(payload)
    return 0


def _cmd_export(args) -> int:
    out = trainer.export_metrics(args.run_dir, args.out, args.format)
    print(str(out))
    return 0


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "train": _cmd_train,
        "eval": _cmd_eval,
        "diag-variance": _cmd_diag_variance,
        "export-metrics": _cmd_export,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, FileNotFoundError, FileExistsError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()

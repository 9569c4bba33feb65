"""Command-line entry points: gen-data, train, eval, viz, grad-check.

Every subcommand reads an optional flat JSON config plus repeatable
``--set KEY=VALUE`` overrides; a few common keys also have dedicated flags.
Errors exit nonzero without writing partial outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, from_flat, load_flat, parse_overrides, to_flat
from .data import DatasetFormatError, filter_best_fraction, load, save
from .envs import DemoGenConfig, generate_dataset, make_env
from .evaluation import (
    EvalConfig,
    evaluate_run,
    list_checkpoints,
    load_models,
    load_run_config,
    rollout,
)
from .models import VARIANTS
from .nn import CheckpointFormatError
from .training import TrainConfig, standard_grad_check_suite, train
from .control import make_policy


def _load_config(cls, path, sets, extra_overrides=None):
    base = load_flat(path) if path else {}
    overrides = parse_overrides(sets)
    if extra_overrides:
        overrides.update({k: v for k, v in extra_overrides.items() if v is not None})
    return from_flat(cls, base, overrides)


def cmd_gen_data(args) -> int:
    cfg = _load_config(DemoGenConfig, args.config, args.set)
    dataset, decisions = generate_dataset(cfg)
    if args.filter_best is not None:
        dataset = filter_best_fraction(dataset, args.filter_best)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save(dataset, out)
    sidecar = {
        "config": to_flat(cfg),
        "filter_best": args.filter_best,
        "n_trajectories": len(dataset),
        "lengths": [int(t.length) for t in dataset],
        "decisions": [[list(d) for d in demo] for demo in decisions],
    }
    out.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    print(f"wrote {len(dataset)} trajectories to {out} "
          f"(mean length {np.mean([t.length for t in dataset]):.1f})")
    return 0


def cmd_train(args) -> int:
    extra = {"variant": args.variant, "seed": args.seed}
    cfg = _load_config(TrainConfig, args.config, args.set,
                       {k: v for k, v in extra.items() if v is not None})
    dataset = load(args.dataset)
    result = train(dataset, cfg, args.out)
    print(f"trained {cfg.variant} for {cfg.n_iter} iters in "
          f"{result.elapsed:.1f}s; {len(result.checkpoints)} checkpoints in "
          f"{result.out_dir}")
    return 0


def cmd_eval(args) -> int:
    eval_cfg = _load_config(EvalConfig, args.config, args.set)
    dataset = load(args.dataset)
    env = make_env(dataset.env_id)
    result = evaluate_run(args.run, dataset, eval_cfg, env)
    report = json.dumps(result.to_dict(), sort_keys=True, indent=2) + "\n"
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(report)
    best = result.best
    rate, rate_std = best.success_rate
    print(f"best checkpoint {result.best_checkpoint.name}: "
          f"success {100 * rate:.1f}% (+/- {100 * rate_std:.1f})")
    return 0


def cmd_viz(args) -> int:
    from .evaluation import export_trajectories

    dataset = load(args.dataset)
    env = make_env(dataset.env_id)
    records = {}
    for run in args.run:
        run_dir = Path(run)
        train_cfg = load_run_config(run_dir)
        ckpts = list_checkpoints(run_dir)
        if not ckpts:
            raise FileNotFoundError(f"no checkpoints found in {run_dir}")
        models = load_models(ckpts[-1], dataset, train_cfg)
        policy = make_policy(models, t_segment=train_cfg.t_window)
        episodes = []
        for ep in range(args.episodes):
            rng = np.random.default_rng(np.random.SeedSequence([args.seed, ep]))
            episodes.append(rollout(env, policy, env.h_max, rng))
        records[train_cfg.variant] = episodes
    svg_path, csv_path = export_trajectories(records, dataset, args.out)
    print(f"wrote {svg_path} and {csv_path}")
    return 0


def cmd_grad_check(args) -> int:
    worst = standard_grad_check_suite(n_instances=args.instances,
                                      rel_tol=args.tolerance, seed=args.seed)
    ok = True
    for name, err in worst.items():
        status = "ok" if err < args.tolerance else "FAIL"
        ok = ok and err < args.tolerance
        print(f"{name:<12} max rel err {err:.3e}  [{status}]")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="goalsel",
        description="Offline goal-conditioned imitation: data generation, "
                    "training, evaluation, and visualization.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a demonstration dataset")
    p.add_argument("--config", help="flat JSON DemoGenConfig")
    p.add_argument("--out", required=True, help="output dataset path (.bin)")
    p.add_argument("--filter-best", type=float, metavar="FRAC",
                   help="keep only the best FRAC of trajectories by length")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a policy variant offline")
    p.add_argument("--config", help="flat JSON TrainConfig")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate every checkpoint of a run")
    p.add_argument("--config", help="flat JSON EvalConfig")
    p.add_argument("--run", required=True, help="training run directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="overlay rollouts on dataset trajectories")
    p.add_argument("--dataset", required=True)
    p.add_argument("--run", action="append", required=True,
                   help="training run directory (repeatable)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--episodes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetFormatError, CheckpointFormatError,
            FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()

"""Command line entry point: ``fedora {gen-data,train,eval,plot}``."""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .data import save_dataset
from .harness import (
    ALGORITHMS,
    ConfigValidationError,
    ExperimentConfig,
    _specs,
    client_datasets,
    emit_plot,
    evaluate_policy,
    load_config,
    run_seed,
)
from .nn import load_params


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if getattr(args, "algo", None):
        changes["algorithm"] = args.algo
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = (args.seed,)
    if getattr(args, "out", None):
        changes["out_dir"] = args.out
    return dataclasses.replace(cfg, **changes)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        for cid, (lvl, ds) in enumerate(zip(cfg.clients.levels(), client_datasets(cfg, seed))):
            path = out / f"data_seed{seed}_client{cid:03d}_{lvl}.jsonl"
            save_dataset(ds, path)
            print(f"{path}  {len(ds)} transitions")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    for seed in cfg.seeds:
        path = run_seed(cfg, seed, Path(cfg.out_dir))
        print(path)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    actor_spec, _ = _specs(cfg)
    actor = load_params(args.checkpoint, actor_spec)
    episodes = args.episodes or cfg.eval_episodes
    seed = cfg.seeds[0]
    mean, std = evaluate_policy(actor, cfg.world, episodes, np.random.default_rng([seed, 5]))
    print(f"mean={mean:.6g} std={std:.6g} episodes={episodes}")
    return 0


def cmd_plot(args) -> int:
    curves = emit_plot(args.metrics, args.out)
    for algo, c in curves.items():
        print(f"{algo}: final mean {c['mean'][-1]:.6g} +- {c['std'][-1]:.6g} over round {c['round'][-1]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedora", description="Federated offline RL experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, algo=True):
        sp.add_argument("--config", help="YAML experiment config (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="run this seed only")
        sp.add_argument("--out", help="output directory")
        if algo:
            sp.add_argument("--algo", choices=ALGORITHMS)

    sp = sub.add_parser("gen-data", help="write client datasets")
    common(sp, algo=False)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="run an algorithm and write metrics")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate an actor checkpoint online")
    common(sp, algo=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--episodes", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("plot", help="render metrics files to SVG")
    sp.add_argument("metrics", nargs="+")
    sp.add_argument("--out", required=True, help="SVG path")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigValidationError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

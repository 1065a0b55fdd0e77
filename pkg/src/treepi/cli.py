"""Command-line entry points: train, eval, oracle-suite, search-bench."""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time

import numpy as np

from .core import Config, ConfigError, RngStream, config_load
from .envs import make_env
from .harness import (ACTION_MODES, MODEL_MODES, POLICY_LOSSES, evaluate,
                      train)
from .learner import LearnerState, build_nets
from .oracle import run_suite
from .search import BoundGaussianPolicy, GroundTruthModel, treepi_search


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(Config):
        flag = "--" + f.name.replace("_", "-").lower()
        ftype = int if f.type == "int" else float
        parser.add_argument(flag, dest=f"cfg_{f.name}", type=ftype, default=None,
                            help=f"config key {f.name} (default {f.default})")


def _build_config(args) -> Config:
    cfg = config_load(args.config) if args.config else Config()
    overrides = {}
    for f in dataclasses.fields(Config):
        value = getattr(args, f"cfg_{f.name}", None)
        if value is not None:
            if f.type == "int":
                value = int(value)
            overrides[f.name] = value
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg.validate()


def cmd_train(args) -> int:
    try:
        cfg = _build_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    for seed in seeds:
        run_cfg = dataclasses.replace(cfg, seed=seed)
        outdir = args.outdir if len(seeds) == 1 else f"{args.outdir}/seed_{seed}"
        try:
            result = train(run_cfg, args.env, action_mode=args.mode,
                           model_mode=args.model, policy_loss=args.policy_loss,
                           total_env_steps=args.steps, outdir=outdir)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        tail = result.episode_returns[-5:]
        mean_tail = float(np.mean(tail)) if tail else 0.0
        print(f"seed {seed}: {result.episodes} episodes, "
              f"{result.env_steps} env steps, {result.learner_steps} learner steps, "
              f"last-5 mean return {mean_tail:.2f}")
    return 0


def cmd_eval(args) -> int:
    try:
        mean, std, returns = evaluate(args.checkpoint, episodes=args.episodes,
                                      stochastic=args.stochastic, seed=args.seed,
                                      env_name=args.env)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"episodes={args.episodes} mean_return={mean:.4f} std={std:.4f}")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("episode,return\n")
            for i, r in enumerate(returns):
                fh.write(f"{i},{r}\n")
    return 0


def cmd_oracle_suite(args) -> int:
    rows = run_suite(args.filter, seed=args.seed)
    out = open(args.csv, "w", encoding="utf-8") if args.csv else None
    header = "name,statistic,bound,pass"
    print(header)
    if out:
        out.write(header + "\n")
    failures = 0
    for row in rows:
        line = f"{row.name},{row.statistic:.6g},{row.bound:.6g},{int(row.passed)}"
        print(line)
        if out:
            out.write(line + "\n")
        failures += 0 if row.passed else 1
    if out:
        out.close()
    if not rows:
        print(f"no checks match filter '{args.filter}'", file=sys.stderr)
        return 2
    return 0 if failures == 0 else 1


def cmd_search_bench(args) -> int:
    cfg = _build_config(args)
    env = make_env(args.env, cfg.init_noise)
    nets = build_nets(env.spec, cfg, "ground_truth")
    state = LearnerState(nets, cfg, "ground_truth", RngStream(cfg.seed))
    model = GroundTruthModel(env, nets.q, state.snap_q)
    bound = BoundGaussianPolicy(nets.policy, state.snap_policy)
    rng = RngStream(cfg.seed)
    env_state, _ = env.reset(rng.child(0))
    t0 = time.time()
    nodes = rollouts = 0
    entropy = 0.0
    for i in range(args.repeats):
        res = treepi_search(env_state, bound, model, M=cfg.M, K=cfg.K, N=cfg.N,
                            alpha=cfg.alpha, gamma=cfg.gamma, rng=rng.child(1, i))
        nodes += res.nodes
        rollouts += res.rollouts_used
        entropy += res.weight_entropy()
    dt = time.time() - t0
    print(f"searches={args.repeats} rollouts={rollouts} nodes={nodes} "
          f"rollouts_per_s={rollouts / dt:.0f} "
          f"mean_weight_entropy={entropy / args.repeats:.4f} "
          f"wallclock_s={dt:.3f}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treepi",
        description="KL-regularized K-step policy iteration with tree search")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training loop")
    p_train.add_argument("--env", required=True, choices=("pointmass", "pendulum"))
    p_train.add_argument("--mode", default="pi", choices=ACTION_MODES,
                         help="action selection at decision time")
    p_train.add_argument("--model", default="learned", choices=MODEL_MODES)
    p_train.add_argument("--policy-loss", default="treepi", choices=POLICY_LOSSES)
    p_train.add_argument("--steps", type=int, default=10_000,
                         help="environment step budget")
    p_train.add_argument("--outdir", required=True)
    p_train.add_argument("--config", default=None, help="key=value config file")
    p_train.add_argument("--seeds", default=None,
                         help="comma-separated seed list (one run each)")
    _add_config_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--episodes", type=int, default=20)
    p_eval.add_argument("--stochastic", action="store_true")
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--env", default=None,
                        help="optional env name check against the checkpoint")
    p_eval.add_argument("--csv", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_oracle = sub.add_parser("oracle-suite",
                              help="run the exact-oracle check battery")
    p_oracle.add_argument("--filter", default=None)
    p_oracle.add_argument("--seed", type=int, default=7)
    p_oracle.add_argument("--csv", default=None)
    p_oracle.set_defaults(func=cmd_oracle_suite)

    p_bench = sub.add_parser("search-bench", help="time the search on an env")
    p_bench.add_argument("--env", default="pendulum",
                         choices=("pointmass", "pendulum"))
    p_bench.add_argument("--repeats", type=int, default=20)
    p_bench.add_argument("--config", default=None)
    _add_config_flags(p_bench)
    p_bench.set_defaults(func=cmd_search_bench)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

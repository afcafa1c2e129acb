"""Command-line entry point: dynmatch {generate,oracle,train,evaluate,compare,verify}."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as dio
from .env import ActionSpaceTooLarge
from .exact import StateSpaceTooLarge, oracle_dump
from .harness import (
    DEEP,
    ExperimentConfig,
    average_q_metric,
    convergence_suite,
    evaluate_trained,
    generate_instance,
    run_comparison,
    train_method,
)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_VALIDATION = 2
EXIT_TIMEOUT = 3


def _load_config(path) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def cmd_generate(args) -> int:
    inst = generate_instance(args.m, args.seed)
    text = json.dumps(dio.instance_to_dict(inst), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_oracle(args) -> int:
    inst = dio.load_instance(args.instance)
    if args.horizon is not None:
        inst = inst.replace(horizon_T=args.horizon)
    dump = oracle_dump(inst)
    text = json.dumps(dump) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.episodes:
        cfg.episodes = args.episodes
    inst = dio.load_instance(args.instance)
    method = args.method.upper()
    kappa = args.kappa if args.kappa is not None else cfg.kappa
    if method == "DKDDPG" and kappa is None:
        raise ValueError("DKDDPG training needs --kappa (or kappa in the config)")
    artifact, record = train_method(cfg, inst, method, args.seed, kappa)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = f"manifest sha256={cfg.manifest_hash()} instance sha256={dio.instance_hash(inst)} seed={args.seed}"
    ckpt = out / f"{method.lower()}_seed{args.seed}.json"
    if method in DEEP:
        manifest = {
            "method": method,
            "seed": args.seed,
            "beta_schedule": {"mode": "linear", "kappa": kappa} if method == "DKDDPG" else {"mode": "fixed", "beta": 1e12},
            "epsilon_schedule": cfg.exploration().to_dict(),
            "instance_hash": dio.instance_hash(inst),
        }
        dio.save_agent(artifact, manifest, ckpt)
    elif method == "EXACT":
        ckpt = out / "oracle.json"
        dio.save_json(oracle_dump(inst), ckpt)
    else:
        dio.save_qtable(artifact, ckpt)
    if record is not None:
        (out / f"{method.lower()}_seed{args.seed}.csv").write_text(
            record.to_csv(header, wall_time=cfg.record_wall_time)
        )
    summary = {
        "method": method,
        "checkpoint": str(ckpt),
        "average_Q": average_q_metric(artifact, inst, cfg.metric_sample_cap),
        "converged": None if record is None else record.converged,
        "episodes_to_convergence": None if record is None else record.episodes_to_convergence,
    }
    print(json.dumps(summary))
    return EXIT_TIMEOUT if record is not None and record.timed_out else EXIT_OK


def cmd_evaluate(args) -> int:
    inst = dio.load_instance(args.instance)
    artifact = dio.load_checkpoint(inst, args.checkpoint)
    reward = evaluate_trained(artifact, inst, args.horizon, args.seed)
    print(json.dumps({"cumulative_reward": reward, "horizon": args.horizon, "seed": args.seed}))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_config(args.config)
    report = run_comparison(cfg, args.out_dir, plots=not args.no_plots)
    for p in report.files:
        print(p)
    return EXIT_TIMEOUT if report.timed_out else EXIT_OK


def cmd_verify(args) -> int:
    ok = True
    suites = ("fixed", "linear") if args.suite == "both" else (args.suite,)
    for schedule in suites:
        results = convergence_suite(
            schedule,
            seeds=range(args.seeds),
            episodes=args.episodes,
            steps_per_episode=args.steps,
            beta=args.beta,
            kappa=args.kappa,
        )
        for r in results:
            print(
                f"{schedule} seed={r.seed} final={r.final_distance:.4f} "
                f"at20%={r.early_distance:.4f} below5%={r.passed_bar} not_worse={r.not_worse}"
            )
        need = int(np.ceil(0.8 * len(results)))
        good = sum(r.passed_bar and (schedule == "fixed" or r.not_worse) for r in results)
        print(f"{schedule}: {good}/{len(results)} seeds pass (need {need})")
        ok &= good >= need
    return EXIT_OK if ok else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynmatch", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="emit a random instance as JSON")
    g.add_argument("--m", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    o = sub.add_parser("oracle", help="exact values and decisions for every state")
    o.add_argument("--instance", required=True)
    o.add_argument("--horizon", type=int, help="override horizon_T (0 = stationary)")
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle)

    t = sub.add_parser("train", help="train one method and write a checkpoint and run record")
    t.add_argument("--method", required=True, choices=["EXACT", "QL", "DKQL", "DDPG", "DKDDPG"], type=str.upper)
    t.add_argument("--instance", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--config")
    t.add_argument("--episodes", type=int)
    t.add_argument("--kappa", type=float)
    t.add_argument("--out-dir", default=".")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="greedy rollout of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--instance", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--horizon", type=int, default=500)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="run all configured methods and seeds, write report files")
    c.add_argument("--config")
    c.add_argument("--out-dir", default="report")
    c.add_argument("--no-plots", action="store_true")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("verify", help="empirical convergence suites on the tiny instance")
    v.add_argument("--suite", choices=["fixed", "linear", "both"], default="both")
    v.add_argument("--seeds", type=int, default=5)
    v.add_argument("--episodes", type=int, default=3000)
    v.add_argument("--steps", type=int, default=500)
    v.add_argument("--beta", type=float, default=50.0)
    v.add_argument("--kappa", type=float, default=0.01)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (dio.ValidationError, ValueError, FileNotFoundError, StateSpaceTooLarge, ActionSpaceTooLarge) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

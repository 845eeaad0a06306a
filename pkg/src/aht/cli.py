"""Command line entry point: ``aht run``, ``aht plan`` and ``aht learn-bm``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .anticipation import CompletionError
from .behavior import learn_ensemble, read_traces
from .harness import ConfigError, ExperimentConfig, report, run_experiment, text_table
from .kernel import AHTError, Goal
from .planner import plan
from .simworld import HUMAN, UnknownDayTypeError, World, WorldConfig, load_domain

EXIT_CONFIG = 2


def _run(args) -> int:
    cfg = ExperimentConfig.for_experiment(
        args.exp, trials=args.trials, seed=args.seed, scenario=args.scenario, domain=args.domain,
        llm=args.llm, k=args.k, theta=args.theta, window=args.window, horizon=args.horizon,
        step_cap=args.step_cap, behavior=args.behavior)
    cfg.validate()

    def progress(trial, logs):
        steps = ", ".join(f"{v}={ep.steps_taken}" for v, ep in logs.items())
        logging.info("trial %d (%s): %s", trial.index, trial.day_type, steps)

    results = run_experiment(cfg, progress)
    paths = report(results, args.out)
    print(text_table(results), end="")
    print("wrote " + ", ".join(str(p) for p in paths))
    return 0


def _plan(args) -> int:
    config = WorldConfig.load(args.scenario)
    domain = load_domain(args.domain) if args.domain else None
    if args.task not in config.tasks:
        raise ConfigError(f"unknown task {args.task!r}")
    team = (HUMAN,) + tuple(args.agents)
    world = World(config, team, domain)
    s = world.initial_state(args.seed)
    goal: Goal = config.tasks[args.task].goal
    ts = world.planning_ts(world.goal_objects(goal))
    h = world.heuristic_factory(ts, args.actor)(goal.conjuncts)
    p = plan(ts, ts.project(s), goal, args.horizon, actor=args.actor, heuristic=h, node_budget=args.budget)
    print(f"status: {p.status}  length: {len(p)}  expanded: {p.expanded}")
    for t, a in enumerate(p.actions()):
        print(f"{t:3d}  {a if a is not None else 'noop'}")
    return 0 if p.found else 1


def _learn(args) -> int:
    rows = read_traces(args.traces)
    traces = [(cv, a) for *_, cv, a in rows]
    ens = learn_ensemble(traces, model_id=args.model_id)
    for tree in ens.trees:
        print(tree)
    print(f"families: {', '.join(ens.families)}")
    print(f"training accuracy: {ens.accuracy(traces):.3f} on {len(traces)} traces")
    if args.test:
        test = [(cv, a) for *_, cv, a in read_traces(args.test)]
        print(f"held-out accuracy: {ens.accuracy(test):.3f} on {len(test)} traces")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"model_id": ens.model_id, "families": list(ens.families),
                       "trees": [str(t) for t in ens.trees], "trained_on": ens.trained_on}, fh, indent=1)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aht", description="Ad hoc teamwork experiments in a household world.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment and write reports")
    r.add_argument("--exp", required=True, choices=["exp1", "scalability", "exp2", "exp3"])
    r.add_argument("--trials", type=int)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--scenario")
    r.add_argument("--domain")
    r.add_argument("--llm", help="mock:FILE | noisy-mock:FILE | url:ENDPOINT")
    r.add_argument("--out", default="results")
    r.add_argument("--k", type=int, default=3)
    r.add_argument("--theta", type=float, default=0.6)
    r.add_argument("--window", type=int, default=10)
    r.add_argument("--horizon", type=int, default=40)
    r.add_argument("--step-cap", type=int, default=200)
    r.add_argument("--behavior", help="scripted human behavior (default from the scenario)")
    r.set_defaults(func=_run)

    p = sub.add_parser("plan", help="plan one task from a seeded initial state")
    p.add_argument("--task", required=True)
    p.add_argument("--scenario")
    p.add_argument("--domain")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--actor", default="robot1")
    p.add_argument("--agents", nargs="*", default=["robot1"])
    p.add_argument("--horizon", type=int, default=40)
    p.add_argument("--budget", type=int, default=200_000)
    p.set_defaults(func=_plan)

    b = sub.add_parser("learn-bm", help="train behavior models from a trace file")
    b.add_argument("--traces", required=True)
    b.add_argument("--test")
    b.add_argument("--model-id", default="model")
    b.add_argument("--out")
    b.set_defaults(func=_learn)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, UnknownDayTypeError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (AHTError, CompletionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

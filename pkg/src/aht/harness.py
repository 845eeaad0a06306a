"""Experiment driver: variants, paired trials, ratio metrics, reports and the LLM-as-actor baseline."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import random
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .anticipation import (Anticipator, CompletionError, Endpoint, PromptOptions, TaskRoutine, complete,
                           make_endpoint)
from .behavior import BehaviorEnsemble, learn_ensemble, read_traces
from .kernel import AHTError, Atom, InvariantError, Kind, State
from .simworld import (HUMAN, AdHocAgent, EpisodeContext, EpisodeLog, PolicyConfig, ScriptedHuman, World,
                       WorldConfig, _unsatisfied, data_path, generate_tasks, load_domain, run_episode)

log = logging.getLogger(__name__)


class ConfigError(AHTError):
    pass


# ----------------------------------------------------------------- variants

_FULL = PolicyConfig()
VARIANTS: dict[str, tuple[PolicyConfig, int]] = {
    "ours": (_FULL, 1),
    "base1": (replace(_FULL, behavior_models=False), 1),
    "base2": (replace(_FULL, anticipation=False), 1),
    "base3": (replace(_FULL, anticipation=False, behavior_models=False), 1),
    "base4": (replace(_FULL, persona=False, few_shot=False, cot=False, validator=False), 1),
    "base5": (replace(_FULL, persona=False, few_shot=True, cot=False, validator=False), 1),
    "base6": (replace(_FULL, persona=False, few_shot=False, cot=True, validator=False), 1),
    "base7": (replace(_FULL, persona=False, few_shot=False, cot=False, validator=True), 1),
    "base8": (replace(_FULL, anticipation=False, llm_actor=True), 1),
    "team1": (_FULL, 1),
    "team2": (_FULL, 2),
    "team3": (_FULL, 3),
}

EXPERIMENTS = {
    "exp1": (("ours", "base1", "base2", "base3"), "ours", 30, "mock"),
    "scalability": (("team1", "team2", "team3"), "team1", 30, "mock"),
    "exp2": (("ours", "base4", "base5", "base6", "base7"), "ours", 20, "noisy-mock"),
    "exp3": (("ours", "base8"), "ours", 20, "noisy-mock"),
}


def variant_policy(name: str) -> PolicyConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}")
    return VARIANTS[name][0]


def team_for(name: str) -> tuple[str, ...]:
    n = VARIANTS[name][1]
    return (HUMAN,) + tuple(f"robot{i}" for i in range(1, n + 1))


# ------------------------------------------------------------------- config

@dataclass(frozen=True)
class ExperimentConfig:
    exp_id: str
    variants: tuple[str, ...]
    reference: str
    trials: int
    seed: int = 0
    llm: str = ""
    scenario: str | None = None
    domain: str | None = None
    k: int = 3
    theta: float = 0.6
    window: int = 10
    horizon: int = 40
    step_cap: int = 200
    behavior: str = ""
    day_types: tuple[str, ...] = ()

    @classmethod
    def for_experiment(cls, exp_id: str, **overrides) -> "ExperimentConfig":
        if exp_id not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {exp_id!r}")
        variants, ref, trials, mode = EXPERIMENTS[exp_id]
        values = {"variants": variants, "reference": ref, "trials": trials,
                  "llm": f"{mode}:{data_path('mock_llm.json')}"}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(exp_id, **values)

    def validate(self) -> None:
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if self.reference not in self.variants:
            raise ConfigError("reference variant must be one of the variants")
        for v in self.variants:
            variant_policy(v)
        if self.k < 1 or not 0 <= self.theta <= 1 or self.window < 1 or self.horizon < 1 or self.step_cap < 1:
            raise ConfigError("knobs out of range")


# ------------------------------------------------------------------ models

_MODEL_CACHE: dict = {}


def load_models(traces_dir: str | Path | None = None) -> dict[str, BehaviorEnsemble]:
    """One ensemble per shipped human behavior, learned from its trace file."""
    root = Path(traces_dir or data_path("traces"))
    key = str(root.resolve())
    if key not in _MODEL_CACHE:
        models = {}
        for path in sorted(root.glob("*.tsv")):
            rows = read_traces(str(path))
            models[path.stem] = learn_ensemble([(cv, a) for *_, cv, a in rows], model_id=path.stem)
        if not models:
            raise ConfigError(f"no trace files in {root}")
        _MODEL_CACHE[key] = models
    return dict(_MODEL_CACHE[key])


# ------------------------------------------------------------- trials

@dataclass(frozen=True)
class Trial:
    index: int
    day_type: str
    seed: int
    routine: tuple[str, ...]


def make_trials(cfg: ExperimentConfig, config: WorldConfig) -> list[Trial]:
    days = list(cfg.day_types or sorted(config.day_types))
    rng = random.Random(f"trials:{cfg.seed}")
    out = []
    for i in range(cfg.trials):
        day = rng.choice(days)
        seed = rng.randrange(1 << 30)
        out.append(Trial(i, day, seed, generate_tasks(config, day, seed).tasks))
    return out


@dataclass
class CorrectionBudget:
    limit: int = 3
    used: int = 0
    incidents: list = field(default_factory=list)


def actor_endpoint(llm: str):
    """Endpoint answering action prompts: the deterministic actor mock unless a URL is given."""
    return make_endpoint(llm) if llm.startswith("url:") else MockActorEndpoint()


def run_variant(name: str, trial: Trial, cfg: ExperimentConfig, config: WorldConfig, domain=None,
                endpoint: Endpoint | None = None, models: dict | None = None) -> EpisodeLog:
    policy = replace(variant_policy(name), k=cfg.k, theta=cfg.theta, window=cfg.window, horizon=cfg.horizon)
    world = World(config, team_for(name), domain)
    flags = config.context(trial.day_type)
    behavior = cfg.behavior or config.human.get("default_behavior", "batch")
    human = ScriptedHuman(world, behavior)
    endpoint = endpoint or make_endpoint(cfg.llm)
    models = models if models is not None else load_models()
    agents = [human]
    budget = CorrectionBudget()
    for rid in team_for(name)[1:]:
        anticipator = None
        if policy.anticipation:
            opts = PromptOptions(policy.persona, policy.few_shot, policy.cot)
            anticipator = Anticipator(endpoint, config.catalog(), config.history_examples(), opts,
                                      policy.validator, seed=trial.seed)
        actor = None
        if policy.llm_actor:
            acting = actor_endpoint(cfg.llm)

            def actor(agent, s, ctx, budget=budget, acting=acting):
                return llm_actor_step(agent.world, agent.id, s, ctx, acting, budget)
        agents.append(AdHocAgent(world, rid, policy, anticipator, models if policy.behavior_models else None,
                                 config.human.get("default_behavior"), actor))
    ep = run_episode(world, agents, TaskRoutine(trial.routine), flags, trial.seed, cfg.step_cap, name,
                     trial.day_type)
    if policy.llm_actor:
        ep.stats["corrections"] = budget.used
        ep.stats["incidents"] = budget.incidents
    return ep


def guest_day_showcase(config: WorldConfig | None = None, variants=("ours", "base1"),
                       models: dict | None = None) -> dict[str, EpisodeLog]:
    """Replay the pinned guest-day scenario for each variant on the same routine and seed."""
    config = config or WorldConfig.load()
    day, seed = config.showcase["day_type"], config.showcase["seed"]
    trial = Trial(0, day, seed, generate_tasks(config, day, seed).tasks)
    cfg = ExperimentConfig.for_experiment("exp1")
    return {v: run_variant(v, trial, cfg, config, models=models) for v in variants}


@dataclass
class ResultsTable:
    exp_id: str
    reference: str
    variants: tuple[str, ...]
    rows: list[dict]          # per variant summary
    trials: list[dict]        # raw trial rows

    def row(self, variant: str) -> dict:
        return next(r for r in self.rows if r["variant"] == variant)


def run_experiment(cfg: ExperimentConfig, progress=None) -> ResultsTable:
    cfg.validate()
    config = WorldConfig.load(cfg.scenario)
    domain = load_domain(cfg.domain) if cfg.domain else None
    endpoint = make_endpoint(cfg.llm)
    models = load_models()
    raw = []
    for trial in make_trials(cfg, config):
        logs = {v: run_variant(v, trial, cfg, config, domain, endpoint, models) for v in cfg.variants}
        ref = logs[cfg.reference]
        for v, ep in logs.items():
            raw.append({"trial": trial.index, "day_type": trial.day_type, "seed": trial.seed,
                        "routine": list(trial.routine), "variant": v, "steps": ep.steps_taken,
                        "time": ep.wall_time, "finished": ep.finished, "conflicts": ep.conflicts,
                        "initial_digest": ep.initial_digest,
                        "step_ratio": ep.steps_taken / ref.steps_taken,
                        "time_ratio": ep.wall_time / ref.wall_time if ref.wall_time > 0 else 1.0,
                        "corrections": ep.stats.get("corrections", 0)})
        if progress:
            progress(trial, logs)
    rows = []
    for v in cfg.variants:
        mine = [r for r in raw if r["variant"] == v]
        n = len(mine)
        rows.append({"variant": v,
                     "stepRatio": 1.0 if v == cfg.reference else sum(r["step_ratio"] for r in mine) / n,
                     "timeRatio": 1.0 if v == cfg.reference else sum(r["time_ratio"] for r in mine) / n,
                     "absSteps": sum(r["steps"] for r in mine) / n,
                     "absTime": sum(r["time"] for r in mine) / n,
                     "failures": sum(1 for r in mine if not r["finished"]),
                     "conflicts": sum(r["conflicts"] for r in mine) / n})
    return ResultsTable(cfg.exp_id, cfg.reference, cfg.variants, rows, raw)


# ------------------------------------------------------------------ report

CSV_COLUMNS = ("variant", "stepRatio", "timeRatio", "absSteps", "absTime")


def summary_csv(results: ResultsTable, with_time: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in results.rows:
        w.writerow([r["variant"], f"{r['stepRatio']:.4f}",
                    f"{r['timeRatio']:.4f}" if with_time else "",
                    f"{r['absSteps']:.2f}", f"{r['absTime']:.4f}" if with_time else ""])
    return buf.getvalue()


def text_table(results: ResultsTable) -> str:
    lines = [f"{results.exp_id}: values as a fraction of {results.reference}",
             f"{'variant':<10} {'steps':>7} {'time':>7} {'absSteps':>9} {'failures':>9} {'conflicts':>10}"]
    for r in results.rows:
        lines.append(f"{r['variant']:<10} {r['stepRatio']:>7.2f} {r['timeRatio']:>7.2f} {r['absSteps']:>9.2f} "
                     f"{r['failures']:>9d} {r['conflicts']:>10.2f}")
    return "\n".join(lines) + "\n"


def report(results: ResultsTable, out_dir: str | Path) -> list[Path]:
    """Write summary.csv, trials.jsonl and table.txt into ``out_dir``."""
    if not results.rows:
        raise InvariantError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "summary.csv", out / "trials.jsonl", out / "table.txt"]
    paths[0].write_text(summary_csv(results))
    with open(paths[1], "w") as fh:
        for row in results.trials:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    paths[2].write_text(text_table(results))
    return paths


# --------------------------------------------------------- LLM as actor

FEASIBILITY_RULES = (
    "Movement Limitation (critical): must only move to adjacent locations defined by the next_to "
    "relationships. Always check adjacency before predicting a move.",
    "Object Location: must be in the same location as an object to act on it (e.g., grab, put).",
    "Carrying Limit: cannot hold more than two objects. When holding two objects, actions like open, close, "
    "switch-on, or switch-off require you to put at least one object down first.",
    "Appliance Safety: for safety, you should not open appliance doors when they are switched on.",
    "If the human is holding an object, they will handle all actions with the object. Do not attempt to grab "
    "or interact with this object. Instead, focus on other parts of the goal.",
)

ACTION_CATALOG = (
    ("move(agent, place)", "move the agent to an adjacent place"),
    ("grab(agent, object)", "pick up an object at the agent's place"),
    ("put(agent, object)", "put a held object down at the agent's place"),
    ("put_in(agent, object, appliance)", "put a held object inside an appliance at the agent's place"),
    ("open(agent, appliance)", "open the door of an appliance"),
    ("close(agent, appliance)", "close the door of an appliance"),
    ("switch_on(agent, appliance)", "switch an appliance on"),
    ("switch_off(agent, appliance)", "switch an appliance off"),
    ("noop(agent)", "wait for one step"),
)

WORKED_EXAMPLE = ("Example. Goal: on(mug,kitchen_table). State: robot1 at kitchen_counter, mug on kitchen_counter, "
                  "robot1 holds nothing. The mug is here and a hand is free, so the plan is grab, move, put. "
                  "Next action: grab(robot1, mug)")


@dataclass(frozen=True)
class ActionPrompt:
    """Prompt asking a completion model for the ad hoc agent's next action."""

    agent: str
    task: str
    goal: tuple[str, ...]
    adjacency: tuple[tuple[str, str], ...]
    state: tuple[str, ...]
    previous: tuple[tuple[str, str], ...]
    flags: str
    feedback: tuple[str, ...] = ()
    # structured view used by the deterministic mock
    world: object = field(default=None, compare=False, repr=False)
    s: object = field(default=None, compare=False, repr=False)

    @property
    def system_message(self) -> str:
        return ("You control a household robot that works with a human. Choose the robot's next action "
                "so that the task is completed in as few steps as possible.")

    def user_message(self) -> str:
        lines = ["### Actions"]
        lines += [f"- {sig}: {purpose}" for sig, purpose in ACTION_CATALOG]
        lines.append("### Action Feasibility Rules")
        lines += [f"{i}. {rule}" for i, rule in enumerate(FEASIBILITY_RULES, 1)]
        lines.append("### Adjacent places (movement is only possible between these)")
        lines.append(", ".join(f"next_to({a},{b})" for a, b in self.adjacency))
        lines.append("### Current state")
        lines += self.state
        lines.append(f"### Day: {self.flags}")
        lines.append(f"### Task: {self.task}; goal: " + ", ".join(self.goal))
        lines.append("### Previous actions: " + (", ".join(f"{a}: {x}" for a, x in self.previous) or "none"))
        lines.append("### " + WORKED_EXAMPLE)
        for fb in self.feedback:
            lines.append(f"### Feedback: {fb}")
        lines.append(f"Give an action sequence for the goal, then the next action for {self.agent} "
                     f"after 'Next action:'.")
        return "\n".join(lines)

    def render(self) -> str:
        return f"### System\n{self.system_message}\n\n{self.user_message()}\n"


def build_action_prompt(world: World, agent: str, s: State, ctx: EpisodeContext) -> ActionPrompt:
    state = sorted(str(a) for a in s.true_atoms(Kind.INERTIAL))
    state += [f"closed({e})" for e in sorted(world.app_place)
              if world.has_door[e] and not s.value(Atom("opened", (e,)))]
    goal = tuple(str(c) for c in world.config.tasks[ctx.current].goal.sorted())
    prev = tuple((a, str(x) if x is not None else "noop") for a, x in sorted(ctx.last_actions.items()))
    return ActionPrompt(agent, world.config.tasks[ctx.current].name, goal, tuple(world.config.adjacency),
                        tuple(state), prev, ctx.flags.describe(), (), world, s)


_ACTION_RE = re.compile(r"next action:\s*([a-z_*]+)\s*\(([^)]*)\)", re.I)


def parse_action(text: str) -> Atom | None:
    m = _ACTION_RE.search(text)
    if not m:
        raise ValueError("no 'Next action:' in completion")
    name = m.group(1).lower()
    args = tuple(x.strip() for x in m.group(2).split(",") if x.strip())
    if name == "noop":
        return None
    return Atom("move*" if name == "move" else name, args)


def explain_failure(world: World, s: State, agent: str, action: Atom) -> str:
    """Corrective feedback naming the violated feasibility rule."""
    fam = action.pred.rstrip("*")
    here = world.place_of(s, agent)
    if action not in world.ts.action_index or action.args[:1] != (agent,):
        return f"{action} is not a valid action for {agent}."
    if fam == "move" and action.args[1] not in world.nbrs[here]:
        return f"Movement Limitation: {action.args[1]} is not adjacent to {here}."
    for x in action.args[1:]:
        if x in world.config.objects:
            holder = world.where(s, x)
            if holder and holder[0] == "held" and holder[1] != agent:
                return f"{x} is held by {holder[1]}; do not interact with it."
            if fam == "grab" and holder and holder != ("on", here) and not (
                    holder[0] == "in" and world.app_place[holder[1]] == here):
                return f"Object Location: {x} is not at {here}."
    if len(world.held_by(s, agent)) >= 2 and fam in ("grab", "open", "close", "switch_on", "switch_off"):
        return "Carrying Limit: put an object down first."
    return f"{action} is not executable in the current state."


def llm_actor_step(world: World, agent: str, s: State, ctx: EpisodeContext, endpoint,
                   budget: CorrectionBudget) -> Atom | None:
    """Ask the endpoint for the next action; correct infeasible answers at most ``budget.limit`` times per trial."""
    if ctx.current is None:
        return None
    prompt = build_action_prompt(world, agent, s, ctx)
    while True:
        try:
            action = parse_action(complete(endpoint, prompt))
        except (ValueError, CompletionError) as e:
            budget.incidents.append({"step": ctx.step, "error": str(e)})
            return None
        if action is None:
            return None
        a = world.ts.action_index.get(action)
        if a is not None and action.args[0] == agent and world.ts.executable(s.bits, a):
            return action
        if budget.used >= budget.limit:
            budget.incidents.append({"step": ctx.step, "error": f"uncorrected {action}"})
            return None
        budget.used += 1
        prompt = replace(prompt, feedback=prompt.feedback + (explain_failure(world, s, agent, action),))


class MockActorEndpoint:
    """Deterministic stand-in for a completion model choosing low-level actions.

    It pursues the first open goal conjunct greedily and, for a fraction of
    queries chosen by a hash of the prompt, makes one of the typical
    mistakes: a move to a non-adjacent place, a grab at the wrong place, or
    touching an object the human holds.  Feedback in the prompt makes it
    answer correctly.
    """

    def __init__(self, error_rate: float = 0.3):
        self.error_rate = error_rate
        self.calls = 0

    def complete(self, prompt) -> str:
        self.calls += 1
        if not isinstance(prompt, ActionPrompt):
            raise CompletionError("the actor mock only answers action prompts")
        w, s, me = prompt.world, prompt.s, prompt.agent
        good = self._greedy(w, s, me, prompt)
        h = int(hashlib.sha1(prompt.user_message().encode()).hexdigest()[:8], 16) / 0xFFFFFFFF
        action = good
        if not prompt.feedback and h < self.error_rate:
            action = self._mistake(w, s, me, prompt, h) or good
        text = "noop" if action is None else f"{action.pred.rstrip('*')}({', '.join(action.args)})"
        return f"Plan: work on {prompt.task}.\nNext action: {text if action is not None else 'noop()'}"

    def _targets(self, w, s, me, prompt):
        human_held = w.held_by(s, HUMAN) if HUMAN in w.team else frozenset()
        goal = w.config.tasks[next(t for t in w.config.tasks if w.config.tasks[t].name == prompt.task)].goal
        todo = [c for c in _unsatisfied(s, goal.sorted()) if not set(c.atom.args) & human_held]
        return todo, human_held

    def _greedy(self, w, s, me, prompt) -> Atom | None:
        todo, _ = self._targets(w, s, me, prompt)
        here = w.place_of(s, me)
        held = w.held_by(s, me)
        for c in todo:
            a = c.atom
            if a.pred in ("on", "in") and a.args[0] in held:
                dest = a.args[1] if a.pred == "on" else w.app_place[a.args[1]]
                if dest == here:
                    if a.pred == "on":
                        return Atom("put", (me, a.args[0]))
                    if w.has_door[a.args[1]] and not s.value(Atom("opened", (a.args[1],))):
                        return Atom("open", (me, a.args[1]))
                    return Atom("put_in", (me, a.args[0], a.args[1]))
                return self._step(w, here, dest, me)
        for c in todo:
            a = c.atom
            if a.pred in ("on", "in") and len(held) < 2:
                loc = w.where(s, a.args[0])
                if loc is None or loc[0] == "held":
                    continue
                src = loc[1] if loc[0] == "on" else w.app_place[loc[1]]
                if src == here:
                    if loc[0] == "in" and w.has_door[loc[1]] and not s.value(Atom("opened", (loc[1],))):
                        return Atom("open", (me, loc[1]))
                    return Atom("grab", (me, a.args[0]))
                return self._step(w, here, src, me)
            if a.pred in ("switched_on", "opened"):
                e = a.args[0]
                if w.app_place[e] == here:
                    fam = ("switch_on" if c.positive else "switch_off") if a.pred == "switched_on" else (
                        "open" if c.positive else "close")
                    return Atom(fam, (me, e))
                return self._step(w, here, w.app_place[e], me)
        return None

    @staticmethod
    def _step(w, here, dest, me) -> Atom:
        nxt = min((n for n in w.nbrs[here] if w.dist[n][dest] < w.dist[here][dest]), key=lambda n: n)
        return Atom("move*", (me, nxt))

    def _mistake(self, w, s, me, prompt, h) -> Atom | None:
        todo, human_held = self._targets(w, s, me, prompt)
        here = w.place_of(s, me)
        kind = int(h * 1000) % 3
        if kind == 0:
            far = [p for p in w.places if w.dist[here][p] >= 2]
            return Atom("move*", (me, far[int(h * 7919) % len(far)])) if far else None
        if kind == 1:
            objs = sorted(w.goal_objects(todo)) or sorted(w.config.objects)
            away = [o for o in objs if w.where(s, o) not in (("on", here), None)]
            return Atom("grab", (me, away[0])) if away else None
        if human_held:
            return Atom("grab", (me, sorted(human_held)[0]))
        return None


# ------------------------------------------------------------ policy swap

@dataclass
class SwapResult:
    swap_tick: int
    trigger_tick: int | None
    directive: str | None
    model_after: str | None
    accuracy_before: float
    accuracy_after: float
    log: list


def policy_swap_trial(config: WorldConfig, before: str = "batch", after: str = "supervise", swap_at: int = 80,
                      total: int = 200, seed: int = 0, window: int = 10, theta: float = 0.6,
                      models: dict | None = None, settle: int | None = None) -> SwapResult:
    """Run consecutive episodes whose human changes behavior at tick ``swap_at``.

    Accuracy before is measured over all predictions before the swap, and
    after over the predictions from ``settle`` ticks (default one window)
    past the first model revision onwards.
    """
    world = World(config, (HUMAN, "robot1"))
    models = models if models is not None else load_models()
    policy = replace(_FULL, window=window, theta=theta)
    human = ScriptedHuman(world, before)
    robot = AdHocAgent(world, "robot1", policy, None, models, before)
    rng = random.Random(f"swap:{seed}")
    tick = 0
    days = sorted(config.day_types)

    def on_step(step, s, proposals, outcomes):
        nonlocal tick
        tick += 1
        if tick == swap_at:
            human.set_behavior(after)

    while tick < total:
        day = rng.choice(days)
        ep_seed = rng.randrange(1 << 30)
        routine = generate_tasks(config, day, ep_seed)
        robot.monitor.reset()
        human.monitor.reset()
        run_episode(world, [human, robot], routine, config.context(day), ep_seed,
                    step_cap=min(200, total - tick), on_step=on_step)
    log_rows = robot.agreement_log
    after_swap = [r for r in robot.revisions if r[0] >= swap_at]
    trig = after_swap[0] if after_swap else None
    pre = [p == o for t, _, p, o in log_rows if t < swap_at]
    start = (trig[0] if trig else swap_at) + (window if settle is None else settle)
    post = [p == o for t, _, p, o in log_rows if t >= start]
    return SwapResult(swap_at, trig[0] if trig else None, trig[1] if trig else None, trig[2] if trig else None,
                      sum(pre) / max(1, len(pre)), sum(post) / max(1, len(post)), log_rows)

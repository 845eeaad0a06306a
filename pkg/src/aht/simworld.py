"""Discrete household world: scenario loading, world stepping, agents and episodes."""
from __future__ import annotations

import hashlib
import json
import random
import time
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .anticipation import (Anticipator, ContextFlags, FewShotExample, PriorityRule, TaskCatalog,
                           TaskRoutine)
from .behavior import (AgreementTracker, BehaviorEnsemble, CueVector, NONE, NOOP, family_of,
                       observe_and_maybe_revise, predict)
from .kernel import AHTError, Atom, Goal, InvariantError, Kind, Literal, State, goal_satisfied
from .lang.grounding import TransitionSystem, ground
from .lang.syntax import DomainDescription, parse_domain
from .planner import Plan, plan, plan_joint

HUMAN = "human"
FAMILIES = ("move", "grab", "put", "put_in", "open", "close", "switch_on", "switch_off")


class UnknownDayTypeError(AHTError):
    pass


def data_path(name: str) -> Path:
    return Path(str(resources.files("aht") / "data" / name))


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class TaskSpec:
    label: str
    name: str
    goal: Goal
    applicable: tuple[tuple[str, bool], ...] = ()


@dataclass
class WorldConfig:
    regions: list[str]
    places: dict[str, str]                  # fine place -> region
    adjacency: list[tuple[str, str]]
    appliances: dict[str, dict]             # name -> {place, door, switch}
    objects: dict[str, list[dict]]          # name -> default location alternatives
    start_places: dict[str, list[str]]
    tasks: dict[str, TaskSpec]
    priorities: list[PriorityRule]
    day_types: dict[str, dict]
    example_days: list[dict]
    human: dict
    book_scenario: dict = field(default_factory=dict)
    name: str = "scenario"
    showcase: dict = field(default_factory=dict)  # pinned guest-day day type and seed

    @classmethod
    def load(cls, path: str | Path | None = None) -> "WorldConfig":
        raw = json.loads(Path(path or data_path("household.json")).read_text())
        tasks = {}
        for label, t in raw["tasks"].items():
            tasks[label] = TaskSpec(label, t.get("name", label), Goal.of(label, *t["goal"]),
                                    tuple(sorted(t.get("applicable", {}).items())))
        prios = [PriorityRule(p["before"], p["after"], tuple(sorted(p.get("when", {}).items())))
                 for p in raw.get("priorities", [])]
        cfg = cls(list(raw["regions"]), dict(raw["places"]), [tuple(e) for e in raw["adjacency"]],
                  dict(raw["appliances"]), {k: list(v) for k, v in raw["objects"].items()},
                  dict(raw.get("start_places", {})), tasks, prios, dict(raw["day_types"]),
                  list(raw.get("example_days", [])), dict(raw.get("human", {})),
                  dict(raw.get("book_scenario", {})), raw.get("name", "scenario"),
                  dict(raw.get("guest_day_scenario", {})))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        nodes = set(self.places)
        for a, b in self.adjacency:
            if a not in nodes or b not in nodes:
                raise InvariantError(f"adjacency mentions unknown place {a if a not in nodes else b}")
        seen, todo = set(), [next(iter(sorted(nodes)))]
        nbrs = self.neighbours()
        while todo:
            n = todo.pop()
            if n not in seen:
                seen.add(n)
                todo.extend(nbrs[n])
        if seen != nodes:
            raise InvariantError(f"adjacency graph is not connected: {sorted(nodes - seen)} unreachable")
        if set(self.places.values()) != set(self.regions):
            raise InvariantError("every region needs at least one place and places need known regions")
        for name, a in self.appliances.items():
            if a["place"] not in nodes:
                raise InvariantError(f"appliance {name} sits at unknown place {a['place']}")
        for obj, alts in self.objects.items():
            for alt in alts:
                ((kind, where),) = alt.items()
                if (kind == "on" and where not in nodes) or (kind == "in" and where not in self.appliances):
                    raise InvariantError(f"default location {alt} of {obj} does not exist")
        for t in self.tasks.values():
            for c in t.goal.conjuncts:
                if not set(c.atom.args) <= set(self.objects) | nodes | set(self.appliances):
                    raise InvariantError(f"task {t.label} mentions unknown constants in {c}")

    def neighbours(self) -> dict[str, list[str]]:
        out: dict[str, set[str]] = {p: set() for p in self.places}
        for a, b in self.adjacency:
            out[a].add(b)
            out[b].add(a)
        return {k: sorted(v) for k, v in out.items()}

    def region_adjacency(self) -> set[tuple[str, str]]:
        out = set()
        for a, b in self.adjacency:
            ra, rb = self.places[a], self.places[b]
            if ra != rb:
                out.add((ra, rb))
                out.add((rb, ra))
        return out

    def catalog(self) -> TaskCatalog:
        labels = tuple(self.tasks)
        return TaskCatalog(labels, tuple((l, t.name) for l, t in self.tasks.items()),
                           tuple((l, t.applicable) for l, t in self.tasks.items()), tuple(self.priorities))

    def context(self, day_type: str) -> ContextFlags:
        if day_type not in self.day_types:
            raise UnknownDayTypeError(f"unknown day type {day_type!r}")
        return ContextFlags.from_dict(self.day_types[day_type]["flags"])

    def history_examples(self) -> list[FewShotExample]:
        return [FewShotExample(tuple(d["routine"]), int(d["completed"]), self.context(d["day_type"]),
                               d.get("explanation", "")) for d in self.example_days]

    def team_members(self, team: Sequence[str]) -> dict[str, list[str]]:
        return {"human": [a for a in team if a == HUMAN],
                "ad_hoc_agent": [a for a in team if a != HUMAN],
                "object": sorted(self.objects), "appliance": sorted(self.appliances),
                "region": list(self.regions), "place": sorted(self.places)}

    def static_facts(self) -> set[Atom]:
        facts = {Atom("component", (p, r)) for p, r in self.places.items()}
        facts |= {Atom("next_to", (a, b)) for a, b in self.adjacency}
        facts |= {Atom("adjacent", ab) for ab in self.region_adjacency()}
        for name, a in self.appliances.items():
            facts.add(Atom("app_at", (name, a["place"])))
            facts.add(Atom("app_in", (name, self.places[a["place"]])))
            if a.get("door"):
                facts.add(Atom("has_door", (name,)))
            if a.get("switch"):
                facts.add(Atom("has_switch", (name,)))
        return facts


def load_domain(path: str | Path | None = None) -> DomainDescription:
    return parse_domain(Path(path or data_path("household.ald")).read_text())


# -------------------------------------------------------------------- world

class World:
    """A scenario instantiated for one team: grounded system, distances and helpers."""

    _cache: dict = {}

    def __new__(cls, config: WorldConfig, team: Sequence[str], domain: DomainDescription | None = None):
        key = (id(config), tuple(team), id(domain))
        got = cls._cache.get(key)
        if got is not None:
            return got
        self = super().__new__(cls)
        self._init(config, tuple(team), domain)
        cls._cache[key] = self
        return self

    def _init(self, config: WorldConfig, team: tuple[str, ...], domain: DomainDescription | None):
        self.config = config
        self.team = team
        base = domain or load_domain()
        self.domain = base.with_instance(config.team_members(team), config.static_facts())
        self.ts = ground(self.domain, "fine")
        self.places = sorted(config.places)
        self.nbrs = config.neighbours()
        self.dist = self._all_pairs()
        self.app_place = {e: a["place"] for e, a in config.appliances.items()}
        self.has_door = {e: bool(a.get("door")) for e, a in config.appliances.items()}
        self.place_rank = {p: i for i, p in enumerate(config.human.get("place_order", self.places))}

    def _all_pairs(self) -> dict[str, dict[str, int]]:
        out = {}
        for src in self.places:
            d = {src: 0}
            q = deque([src])
            while q:
                n = q.popleft()
                for m in self.nbrs[n]:
                    if m not in d:
                        d[m] = d[n] + 1
                        q.append(m)
            out[src] = d
        return out

    # -- states
    def initial_state(self, seed: int, variation: bool = True) -> State:
        rng = random.Random(seed)
        true = []
        for obj in sorted(self.config.objects):
            alts = self.config.objects[obj]
            alt = rng.choice(alts) if variation else alts[0]
            ((kind, where),) = alt.items()
            true.append(Atom(kind, (obj, where)))
        robots = [a for a in self.team if a != HUMAN]
        robot_spots = list(self.config.start_places.get("robot", self.places))
        rng.shuffle(robot_spots)
        for i, r in enumerate(robots):
            true.append(Atom("at*", (r, robot_spots[i % len(robot_spots)] if variation else robot_spots[0])))
        if HUMAN in self.team:
            spots = self.config.start_places.get("human", self.places)
            true.append(Atom("at*", (HUMAN, rng.choice(spots) if variation else spots[0])))
        return self.ts.state(true)

    def place_of(self, s: State, agent: str) -> str:
        for p in self.places:
            if s.value(Atom("at*", (agent, p))):
                return p
        raise InvariantError(f"{agent} is nowhere")

    def where(self, s: State, obj: str) -> tuple[str, str] | None:
        """("on", place) | ("in", appliance) | ("held", agent)."""
        u = s.universe
        for p in self.places:
            a = Atom("on", (obj, p))
            if a in u.index and s.value(a):
                return "on", p
        for e in self.app_place:
            a = Atom("in", (obj, e))
            if a in u.index and s.value(a):
                return "in", e
        for ag in self.team:
            a = Atom("holding", (ag, obj))
            if a in u.index and s.value(a):
                return "held", ag
        return None

    def held_by(self, s: State, agent: str) -> frozenset[str]:
        return frozenset(a.args[1] for a in s.true_atoms(Kind.INERTIAL) if a.pred == "holding" and a.args[0] == agent)

    def digest(self, s: State) -> str:
        text = ";".join(sorted(str(a) for a in s.true_atoms(Kind.INERTIAL)))
        return hashlib.sha1(text.encode()).hexdigest()[:12]

    def check_invariants(self, s: State) -> None:
        """Object conservation and hand capacity."""
        for obj in self.config.objects:
            count = sum(1 for a in s.true_atoms(Kind.INERTIAL)
                        if a.pred in ("on", "in") and a.args[0] == obj)
            count += sum(1 for a in s.true_atoms(Kind.INERTIAL) if a.pred == "holding" and a.args[1] == obj)
            if count != 1:
                raise InvariantError(f"{obj} is in {count} places")
        for ag in self.team:
            if len(self.held_by(s, ag)) > 2:
                raise InvariantError(f"{ag} holds more than two objects")

    # -- goals and planning support
    def goal_objects(self, goal: Goal | Iterable[Literal]) -> set[str]:
        conj = goal.conjuncts if isinstance(goal, Goal) else goal
        return {x for c in conj for x in c.atom.args if x in self.config.objects}

    def things(self, atoms: Iterable[Atom]) -> set[str]:
        out = set()
        for a in atoms:
            out |= {x for x in a.args[1:] if x in self.config.objects or x in self.app_place}
        return out

    def planning_ts(self, objects: Iterable[str]) -> TransitionSystem:
        keep = set(objects) | set(self.team) | set(self.places) | set(self.config.regions) | set(self.app_place)
        return ground(self.domain, "fine", only=frozenset(keep))

    def heuristic_factory(self, ts: TransitionSystem, actor: str, exo_things: Iterable[str] = (),
                          exo_steps: int = 0):
        """Admissible step estimates for ``actor`` over sets of goal conjuncts.

        While expected teammate actions are pending, conjuncts mentioning an
        object or appliance those actions touch are not counted.
        """
        return _HouseholdHeuristic(self, ts, actor, set(exo_things), exo_steps)


class _HouseholdHeuristic:
    def __init__(self, world: World, ts: TransitionSystem, actor: str, exo_things: set[str], exo_steps: int):
        self.w, self.ts, self.actor = world, ts, actor
        self.exo_things, self.exo_steps = exo_things, exo_steps
        idx = ts.universe.index
        self.at_bits = [(1 << idx[Atom("at*", (actor, p))], p) for p in world.places]
        self.loc_bits: dict[str, list[tuple[int, str, str]]] = {}
        for o in world.config.objects:
            lst = []
            for p in world.places:
                a = Atom("on", (o, p))
                if a in idx:
                    lst.append((1 << idx[a], "on", p))
            for e in world.app_place:
                a = Atom("in", (o, e))
                if a in idx:
                    lst.append((1 << idx[a], "in", e))
            for ag in world.team:
                a = Atom("holding", (ag, o))
                if a in idx:
                    lst.append((1 << idx[a], "held", ag))
            if lst:
                self.loc_bits[o] = lst
        self.opened = {e: 1 << idx[Atom("opened", (e,))] for e in world.app_place if Atom("opened", (e,)) in idx}
        self.switched = {e: 1 << idx[Atom("switched_on", (e,))] for e in world.app_place
                         if Atom("switched_on", (e,)) in idx}

    def __call__(self, conjuncts: Iterable[Literal]):
        w, dist, app_place, door = self.w, self.w.dist, self.w.app_place, self.w.has_door
        items = []
        idx = self.ts.universe.index
        for c in sorted(conjuncts, key=str):
            a = c.atom
            bit = 1 << idx[a]
            touches = bool(set(a.args) & self.exo_things)
            if a.pred == "on" and c.positive:
                items.append(("on", bit, a.args[0], a.args[1], None, touches))
            elif a.pred == "in" and c.positive:
                items.append(("in", bit, a.args[0], app_place[a.args[1]], a.args[1], touches))
            elif a.pred in ("opened", "switched_on"):
                items.append((a.pred, bit, c.positive, app_place[a.args[0]], a.args[0], touches))
        at_bits, loc_bits, opened, actor = self.at_bits, self.loc_bits, self.opened, self.actor
        exo_steps = self.exo_steps

        def h(bits: int, t: int) -> int:
            here = None
            for b, p in at_bits:
                if bits & b:
                    here = p
                    break
            if here is None:
                return 0
            dh = dist[here]
            best_full = best_core = 0
            unsat = 0
            pending = t < exo_steps
            for kind, bit, x, target, extra, touches in items:
                if pending and touches:
                    continue
                if kind in ("on", "in"):
                    if bits & bit:
                        continue
                    where = None
                    for b, k, v in loc_bits.get(x, ()):
                        if bits & b:
                            where = (k, v)
                            break
                    if where is None:
                        continue
                    k, v = where
                    if k == "held":
                        if v != actor:
                            continue
                        core = dh[target] + 1
                    elif k == "on":
                        core = dh[v] + 1 + dist[v][target] + 1
                    else:
                        src = app_place[v]
                        core = dh[src] + 1 + dist[src][target] + 1
                    full = core
                    if k == "in" and door[v] and not bits & opened.get(v, 0):
                        full += 1
                    if kind == "in" and door[extra] and not bits & opened.get(extra, 0) and extra != (v if k == "in" else None):
                        full += 1
                else:
                    positive = x
                    if bool(bits & bit) == positive:
                        continue
                    core = dh[target] + 1
                    full = core
                    if kind == "switched_on" and positive and door[extra] and bits & opened.get(extra, 0):
                        full += 1
                unsat += 1
                if full > best_full:
                    best_full = full
                if core > best_core:
                    best_core = core
            if unsat == 0:
                return 0
            return max(best_full, best_core + unsat - 1)

        return h


# ------------------------------------------------------------- task routine

def generate_tasks(config: WorldConfig, day_type: str, seed: int) -> TaskRoutine:
    """The day's routine from its template; optional tasks are kept by a seeded draw."""
    if day_type not in config.day_types:
        raise UnknownDayTypeError(f"unknown day type {day_type!r}")
    spec = config.day_types[day_type]
    rng = random.Random(f"{day_type}:{seed}")
    optional = spec.get("optional", {})
    tasks = tuple(t for t in spec["template"] if t not in optional or rng.random() >= optional[t])
    return TaskRoutine(tasks, 0, "generator")


# -------------------------------------------------------------- world step

@dataclass(frozen=True)
class Outcome:
    ok: bool
    reason: str = ""

    def __str__(self) -> str:
        return "ok" if self.ok else f"failed({self.reason})"


def _touched(world: World, action: Atom) -> set[str]:
    return world.things([action])


def step_world(world: World, state: State, proposals: Mapping[str, Atom | None],
               priority: Sequence[str] | None = None) -> tuple[State, dict[str, Outcome], int]:
    """Advance the world one tick.

    Proposals are checked in priority order (human first by default).  A
    proposal touching an object or appliance already claimed this tick
    fails with ``conflict``; returns the new state, outcomes and the number
    of simultaneous grabs of the same object.
    """
    ts = world.ts
    order = list(priority or sorted(proposals, key=lambda a: (a != HUMAN, a)))
    outcomes: dict[str, Outcome] = {}
    accepted: list[tuple[str, int]] = []
    claimed: dict[str, str] = {}
    grab_collisions = 0
    for agent in order:
        action = proposals.get(agent)
        if action is None:
            outcomes[agent] = Outcome(True, "noop")
            continue
        a = ts.action_index.get(action)
        if a is None or action.args[0] != agent:
            outcomes[agent] = Outcome(False, "unknown-action")
            continue
        if not ts.executable(state.bits, a):
            outcomes[agent] = Outcome(False, "not-executable")
            continue
        things = _touched(world, action)
        clash = [x for x in things if x in claimed]
        if clash:
            outcomes[agent] = Outcome(False, "conflict")
            if family_of(action) == "grab" and any(claimed[x] == "grab" for x in clash):
                grab_collisions += 1
            continue
        accepted.append((agent, a))
        for x in things:
            claimed[x] = family_of(action)
        outcomes[agent] = Outcome(True)
    while True:
        ids = [a for _, a in accepted]
        concurrent = frozenset(ids)
        blocked = [ag for ag, a in accepted if not ts.executable(state.bits, a, concurrent - {a})]
        nxt = ts.try_apply(state.bits, ids) if not blocked else None
        if nxt is not None:
            return State(ts.universe, nxt), outcomes, grab_collisions
        loser = blocked[-1] if blocked else accepted[-1][0]
        outcomes[loser] = Outcome(False, "conflict")
        accepted = [(ag, a) for ag, a in accepted if ag != loser]


# ---------------------------------------------------------------- policies

@dataclass(frozen=True)
class PolicyConfig:
    anticipation: bool = True
    behavior_models: bool = True
    few_shot: bool = True
    cot: bool = True
    persona: bool = True
    validator: bool = True
    llm_actor: bool = False
    k: int = 3
    theta: float = 0.6
    window: int = 10
    horizon: int = 40
    node_budget: int = 60_000


@dataclass
class AgentHandle:
    id: str
    kind: str = "adhoc"  # adhoc | scripted_human
    policy: PolicyConfig = PolicyConfig()


@dataclass
class EpisodeContext:
    """Shared, observable facts every agent sees at a tick."""

    world: World
    flags: ContextFlags
    current: str | None
    completed: list[str]
    last_actions: dict[str, Atom | None]
    last_outcomes: dict[str, Outcome]
    step: int


def delegated_goal(world: World, s: State, goal: Goal, actor: str,
                   claimed_by_others: Iterable[str] = ()) -> frozenset[Literal]:
    """Goal conjuncts the actor should still pursue.

    Conjuncts about objects another agent holds, or that teammates are
    expected to handle, are left to them.
    """
    taken = set(claimed_by_others)
    for ag in world.team:
        if ag != actor:
            taken |= world.held_by(s, ag)
    return frozenset(c for c in goal.conjuncts if not (set(c.atom.args) & taken))


def _unsatisfied(s: State, conj: Iterable[Literal]) -> list[Literal]:
    return [c for c in conj if s.value(c.atom) != c.positive]


class _Monitor:
    """Keeps the current plan and the state it expects next."""

    def __init__(self):
        self.plan: Plan | None = None
        self.key = None
        self.pos = 0
        self.expected: int | None = None
        self.ts: TransitionSystem | None = None
        self.mask = 0

    def reset(self):
        self.plan, self.key, self.pos, self.expected = None, None, 0, None

    def next_action(self) -> Atom | None:
        if self.plan is None or self.pos >= len(self.plan):
            return None
        return self.plan.actions()[self.pos]


def _ignore_mask(ts: TransitionSystem, actor: str) -> int:
    """Atoms that locate other agents; they do not invalidate a plan."""
    m = 0
    for i, a in enumerate(ts.universe.atoms):
        if a.pred in ("at*", "at") and a.args[0] != actor:
            m |= 1 << i
    return m


class ScriptedHuman:
    """Plans for the current task only, with a fixed preference order over ties."""

    def __init__(self, world: World, behavior: str = "batch", agent_id: str = HUMAN):
        self.world = world
        self.id = agent_id
        spec = world.config.human.get("behaviors", {}).get(behavior, {})
        self.behavior = behavior
        self.one_at_a_time = bool(spec.get("one_at_a_time"))
        self.close_after_use = bool(spec.get("close_after_use"))
        self.appliances_only = bool(spec.get("appliances_only"))
        self.monitor = _Monitor()
        self.opened_by_me: set[str] = set()
        self.plans = 0
        rank_place = world.place_rank
        fam_rank = {f: i for i, f in enumerate(("put", "put_in", "grab", "switch_on", "switch_off",
                                                "open", "close", "move"))}

        def rank(action: Atom):
            fam = family_of(action)
            place = action.args[1] if fam == "move" else ""
            return (fam_rank.get(fam, 99), rank_place.get(place, 99), str(action))

        self.rank = rank

    def set_behavior(self, behavior: str) -> None:
        spec = self.world.config.human.get("behaviors", {}).get(behavior, {})
        self.behavior = behavior
        self.one_at_a_time = bool(spec.get("one_at_a_time"))
        self.close_after_use = bool(spec.get("close_after_use"))
        self.appliances_only = bool(spec.get("appliances_only"))
        self.monitor.reset()

    def act(self, s: State, ctx: EpisodeContext) -> Atom | None:
        w = self.world
        if ctx.current is None:
            return None
        goal = w.config.tasks[ctx.current].goal
        conj = delegated_goal(w, s, goal, self.id)
        if self.appliances_only:
            mine = w.held_by(s, self.id)
            conj = frozenset(c for c in conj if c.atom.args[0] in w.app_place or c.atom.args[0] in mine)
        todo = sorted(_unsatisfied(s, conj), key=lambda c: (w.place_rank.get(c.atom.args[-1], 99), str(c)))
        if self.close_after_use:
            act = self._close_rule(s, conj)
            if act is not None:
                self.monitor.reset()
                return act
        if not todo:
            self.monitor.reset()
            return None
        if self.one_at_a_time:
            target = frozenset([todo[0]]) | frozenset(c for c in conj if c not in todo)
        else:
            target = conj
        return self._follow(s, target, ctx.current)

    def _close_rule(self, s: State, conj) -> Atom | None:
        w = self.world
        here = w.place_of(s, self.id)
        if len(w.held_by(s, self.id)) >= 2:
            return None
        needed = w.goal_objects(_unsatisfied(s, conj))
        for e in sorted(self.opened_by_me):
            if w.app_place[e] != here or not s.value(Atom("opened", (e,))):
                continue
            inside = {o for o in needed if w.where(s, o) == ("in", e)}
            target = any(c.atom.pred == "in" and c.atom.args[1] == e for c in _unsatisfied(s, conj))
            if not inside and not target:
                return Atom("exo_close", (self.id, e))
        return None

    def _follow(self, s: State, conj: frozenset[Literal], label: str) -> Atom | None:
        w, m = self.world, self.monitor
        objects = w.goal_objects(conj) | w.held_by(s, self.id)
        ts = w.planning_ts(objects)
        local = ts.project(s)
        key = (conj, ts)
        if m.key == key and m.plan is not None and m.pos < len(m.plan) and m.expected is not None \
                and (local.bits & ~m.mask) == (m.expected & ~m.mask):
            pass
        else:
            goal = Goal(conj, label)
            h = w.heuristic_factory(ts, self.id)(conj)
            p = plan(ts, local, goal, 40, actor=self.id, heuristic=h, node_budget=60_000, rank=self.rank)
            self.plans += 1
            if not p.found or len(p) == 0:
                m.reset()
                return None
            m.plan, m.key, m.pos, m.ts = p, key, 0, ts
            m.mask = _ignore_mask(ts, self.id)
        action = m.plan.actions()[m.pos]
        ids = [ts.action_id(action)] if action is not None else []
        m.expected = ts.try_apply(local.bits, ids)
        m.pos += 1
        if action is not None and family_of(action) == "open":
            self.opened_by_me.add(action.args[1])
        return action


# ---------------------------------------------------------------- cue view

@dataclass
class TeammateView:
    """What an observer knows about one teammate at a tick."""

    agent: str
    history: list[str] = field(default_factory=list)  # action families, oldest first


def extract_cues(world: World, s: State, view: TeammateView, current: str | None, previous: str | None,
                 flags: ContextFlags) -> CueVector:
    """Cue vector for a teammate from the shared state and its observed actions."""
    agent = view.agent
    prev1 = view.history[-1] if view.history else NONE
    prev2 = view.history[-2] if len(view.history) > 1 else NONE
    here = world.place_of(s, agent)
    held = world.held_by(s, agent)
    others = frozenset().union(*(world.held_by(s, a) for a in world.team if a != agent))
    goal = world.config.tasks[current].goal if current else None
    needed_here = needed_closed = deliver = deliver_closed = switch = False
    idle = True
    goal_objs: frozenset[str] = frozenset()
    if goal is not None:
        goal_objs = frozenset(world.goal_objects(goal))
        todo = _unsatisfied(s, goal.conjuncts)
        for c in todo:
            a = c.atom
            if not set(a.args) & others:
                idle = False
            if a.pred in ("on", "in"):
                o = a.args[0]
                target_place = a.args[1] if a.pred == "on" else world.app_place[a.args[1]]
                loc = world.where(s, o)
                if loc is None:
                    continue
                if loc == ("held", agent) and target_place == here:
                    if a.pred == "in" and world.has_door[a.args[1]] and not s.value(Atom("opened", (a.args[1],))):
                        deliver_closed = True
                    else:
                        deliver = True
                if len(held) < 2 and loc[0] == "on" and loc[1] == here:
                    needed_here = True
                if len(held) < 2 and loc[0] == "in" and world.app_place[loc[1]] == here:
                    if world.has_door[loc[1]] and not s.value(Atom("opened", (loc[1],))):
                        needed_closed = True
                    else:
                        needed_here = True
            elif a.pred == "switched_on" and world.app_place[a.args[0]] == here:
                switch = True
    open_here = any(world.app_place[e] == here and s.value(Atom("opened", (e,))) for e in world.app_place)
    return CueVector(prev1, prev2, here, goal_objs, held, others, current or NONE, previous or NONE,
                     (flags.weekday, flags.going_to_office, flags.guests_expected),
                     needed_here, needed_closed, deliver, switch, open_here, deliver_closed, idle)


def ground_family(world: World, agent: str, family: str, s: State, current: str | None) -> Atom | None:
    """Most plausible grounded action of ``family`` for a teammate (goal objects first, then nearest)."""
    if family == NOOP:
        return None
    prefix = "exo_" if agent == HUMAN else ""
    here = world.place_of(s, agent)
    held = sorted(world.held_by(s, agent))
    goal = world.config.tasks[current].goal if current else None
    todo = _unsatisfied(s, goal.conjuncts) if goal else []
    targets: dict[str, str] = {}  # object -> target place
    for c in todo:
        if c.atom.pred == "on":
            targets[c.atom.args[0]] = c.atom.args[1]
        elif c.atom.pred == "in":
            targets[c.atom.args[0]] = world.app_place[c.atom.args[1]]
    taken = set()
    for a in world.team:
        if a != agent:
            taken |= world.held_by(s, a)
    if family == "move":
        dests = [targets[o] for o in held if o in targets]
        if not dests:
            for o, _ in sorted(targets.items()):
                loc = world.where(s, o)
                if loc and loc[0] == "on":
                    dests.append(loc[1])
                elif loc and loc[0] == "in":
                    dests.append(world.app_place[loc[1]])
            for c in todo:
                if c.atom.pred in ("switched_on", "opened"):
                    dests.append(world.app_place[c.atom.args[0]])
        dests = [d for d in dests if d != here]
        if dests:
            goal_place = min(dests, key=lambda d: (world.dist[here][d], world.place_rank.get(d, 99), d))
            step = min((n for n in world.nbrs[here] if world.dist[n][goal_place] < world.dist[here][goal_place]),
                       key=lambda n: (world.place_rank.get(n, 99), n))
        else:
            step = min(world.nbrs[here], key=lambda n: (world.place_rank.get(n, 99), n))
        return Atom(prefix + "move*", (agent, step))
    if family == "grab":
        cands = []
        for o in sorted(world.config.objects):
            loc = world.where(s, o)
            if loc is None or o in taken or loc[0] == "held":
                continue
            at_here = (loc[0] == "on" and loc[1] == here) or (loc[0] == "in" and world.app_place[loc[1]] == here)
            if at_here:
                cands.append((o not in targets, o))
        return Atom(prefix + "grab", (agent, min(cands)[1])) if cands else None
    if family == "put":
        if not held:
            return None
        o = min(held, key=lambda o: (targets.get(o) != here, o))
        return Atom(prefix + "put", (agent, o))
    if family == "put_in":
        for o in held:
            for c in todo:
                if c.atom.pred == "in" and c.atom.args[0] == o and world.app_place[c.atom.args[1]] == here:
                    return Atom(prefix + "put_in", (agent, o, c.atom.args[1]))
        apps = [e for e in sorted(world.app_place) if world.app_place[e] == here]
        return Atom(prefix + "put_in", (agent, held[0], apps[0])) if held and apps else None
    apps = [e for e in sorted(world.app_place) if world.app_place[e] == here]
    if not apps:
        return None
    if family in ("open", "close"):
        want = family == "close"
        cands = [e for e in apps if world.has_door[e] and s.value(Atom("opened", (e,))) == want]
        if family == "open":
            useful = [e for e in cands if any(world.where(s, o) == ("in", e) for o in targets)
                      or any(c.atom.pred == "in" and c.atom.args[1] == e for c in todo)]
            cands = useful or cands
        return Atom(prefix + family, (agent, cands[0])) if cands else None
    if family in ("switch_on", "switch_off"):
        want = family == "switch_off"
        cands = [e for e in apps if world.config.appliances[e].get("switch")
                 and s.value(Atom("switched_on", (e,))) == want]
        useful = [e for e in cands if any(c.atom.args[0] == e for c in todo)]
        cands = useful or cands
        return Atom(prefix + family, (agent, cands[0])) if cands else None
    return None


# ------------------------------------------------------------- ad hoc agent

def _advance_factory(world: World, agent: str, current: str | None, previous: str | None, flags: ContextFlags):
    def advance(cv: CueVector, action: Atom | None, s: State) -> CueVector:
        view = TeammateView(agent, [cv.prev_action2, cv.prev_action1, family_of(action)])
        return extract_cues(world, s, view, current, previous, flags)
    return advance


class AdHocAgent:
    """Anticipates the next task, predicts teammates and plans jointly; replans on divergence."""

    def __init__(self, world: World, agent_id: str, policy: PolicyConfig = PolicyConfig(),
                 anticipator: Anticipator | None = None, models: Mapping[str, BehaviorEnsemble] | None = None,
                 active_model: str | None = None, llm_actor: Callable | None = None):
        self.world = world
        self.id = agent_id
        self.policy = policy
        self.anticipator = anticipator if policy.anticipation else None
        self.models = dict(models or {})
        self.llm_actor = llm_actor if policy.llm_actor else None
        self.humans = [a for a in world.team if a == HUMAN]
        self.views = {h: TeammateView(h) for h in self.humans}
        mid = active_model if active_model in self.models else (sorted(self.models)[0] if self.models else None)
        self.active = {h: mid for h in self.humans}
        self.trackers = {h: AgreementTracker(size=policy.window, theta=policy.theta, active_model_id=mid or "")
                         for h in self.humans}
        self.pending: dict[str, tuple[CueVector, str]] = {}
        self.recent: dict[str, list[tuple[CueVector, str]]] = {h: [] for h in self.humans}
        self.monitor = _Monitor()
        self.stats = {"plans": 0, "predictions": 0, "correct": 0, "switches": 0, "relearns": 0,
                      "anticipated": [], "budget": 0}
        self.revisions: list[tuple[int, str, str]] = []
        self.agreement_log: list[tuple[int, str, str, str]] = []  # tick, model, predicted, observed
        self.ticks = 0

    @property
    def uses_models(self) -> bool:
        return self.policy.behavior_models and any(self.active.values())

    # -- observation
    def observe(self, s_prev: State, ctx: EpisodeContext, actions: Mapping[str, Atom | None],
                outcomes: Mapping[str, Outcome]) -> None:
        for h in self.humans:
            fam = family_of(actions.get(h))
            got = self.pending.pop(h, None)
            if got is not None:
                cv, predicted = got
                self.agreement_log.append((self.ticks, self.active[h], predicted, fam))
                self.stats["predictions"] += 1
                self.stats["correct"] += predicted == fam
                self.recent[h].append((cv, fam))
                del self.recent[h][:-200]
                ens = self.models[self.active[h]]
                tracker, directive = observe_and_maybe_revise(self.trackers[h], ens, predicted, fam,
                                                              self.recent[h], self.models)
                self.trackers[h] = tracker
                if directive.kind != "keep":
                    self.models[directive.model.model_id] = directive.model
                    self.active[h] = directive.model.model_id
                    self.stats["switches" if directive.kind == "switch" else "relearns"] += 1
                    self.revisions.append((self.ticks, directive.kind, directive.model.model_id))
                    self.monitor.reset()
            self.views[h].history.append(fam)
        self.ticks += 1

    # -- decision
    def predictions(self, s: State, ctx: EpisodeContext) -> dict[str, list[Atom | None]]:
        if not self.uses_models or ctx.current is None:
            return {}
        w = self.world
        prev = ctx.completed[-1] if ctx.completed else None
        out = {}
        for h in self.humans:
            ens = self.models[self.active[h]]
            cv = extract_cues(w, s, self.views[h], ctx.current, prev, ctx.flags)
            self.pending[h] = (cv, ens.predict_family(cv))
            out[h] = predict(ens, cv, self.policy.k, w.ts, s,
                             lambda fam, st, c, h=h: ground_family(w, h, fam, st, ctx.current),
                             _advance_factory(w, h, ctx.current, prev, ctx.flags))
        return out

    def act(self, s: State, ctx: EpisodeContext) -> Atom | None:
        if self.llm_actor is not None:
            return self.llm_actor(self, s, ctx)
        w = self.world
        if ctx.current is None:
            return None
        preds = self.predictions(s, ctx)
        exo: dict[int, list[Atom]] = {}
        claimed: set[str] = set()
        exo_objects: set[str] = set()
        for h, seq in preds.items():
            for t, a in enumerate(seq):
                if a is not None:
                    exo.setdefault(t, []).append(a)
                    if family_of(a) != "move":
                        claimed |= _touched(w, a)
            if any(a is not None for a in seq):
                exo_objects |= w.held_by(s, h)
        claimed |= self.robot_claims(s, w.config.tasks[ctx.current].goal)
        cur = delegated_goal(w, s, w.config.tasks[ctx.current].goal, self.id, claimed)
        ant_label = None
        if self.anticipator is not None:
            ant_label = self.anticipator.anticipate(ctx.flags, ctx.completed, ctx.current)
            self.stats["anticipated"].append((ctx.step, ctx.current, ant_label))
        ant = (delegated_goal(w, s, w.config.tasks[ant_label].goal, self.id, claimed)
               if ant_label and ant_label != ctx.current else frozenset())
        cur_todo, ant_todo = _unsatisfied(s, cur), _unsatisfied(s, ant)
        if not cur_todo and not ant_todo:
            self.monitor.reset()
            return None
        objects = w.goal_objects(cur | ant) | w.held_by(s, self.id) | exo_objects
        objects |= {x for acts in exo.values() for a in acts for x in a.args[1:] if x in w.config.objects}
        ts = w.planning_ts(objects)
        local = ts.project(s)
        exo = {t: [a for a in acts if a in ts.action_index] for t, acts in exo.items()}
        key = (cur, ant, ts, tuple(sorted((t, tuple(map(str, v))) for t, v in exo.items() if t > 0)))
        m = self.monitor
        if not (m.key is not None and m.key[:3] == key[:3] and m.plan is not None and m.pos < len(m.plan)
                and m.expected is not None and (local.bits & ~m.mask) == (m.expected & ~m.mask)
                and self._still_valid(ts, local, exo)):
            self._replan(ts, local, cur, ant, cur_todo, exo, claimed, ctx)
            m.key = key
        if m.plan is None:
            return None
        step = m.plan.steps[m.pos]
        action = step.action_of(self.id)
        ids = ([ts.action_id(action)] if action is not None else []) + [ts.action_id(e) for e in step.expected_exo]
        m.expected = ts.try_apply(local.bits, ids)
        m.pos += 1
        return action

    def robot_claims(self, s: State, goal: Goal) -> set[str]:
        """Goal items other ad hoc agents are expected to handle.

        Every ad hoc agent is assumed to head for the nearest open goal item;
        items are assigned one per agent, greedily by distance, ties going to
        the agent acting first.
        """
        w = self.world
        robots = [a for a in w.team if a != HUMAN]
        if len(robots) < 2:
            return set()
        taken = frozenset().union(*(w.held_by(s, a) for a in w.team))
        items: dict[str, str] = {}
        for c in _unsatisfied(s, goal.conjuncts):
            a = c.atom
            if a.pred in ("on", "in"):
                loc = w.where(s, a.args[0])
                if loc is None or a.args[0] in taken:
                    continue
                items[a.args[0]] = loc[1] if loc[0] == "on" else w.app_place[loc[1]]
            elif a.pred in ("switched_on", "opened"):
                items[a.args[0]] = w.app_place[a.args[0]]
        pairs = sorted((w.dist[w.place_of(s, r)][p], i, x) for i, r in enumerate(robots) for x, p in items.items())
        owner: dict[str, str] = {}
        for _, i, x in pairs:
            if x not in owner and robots[i] not in owner.values():
                owner[x] = robots[i]
        return {x for x, r in owner.items() if r != self.id}

    def _still_valid(self, ts: TransitionSystem, local: State, exo) -> bool:
        """The rest of the current plan still executes under the new predictions."""
        m = self.monitor
        bits = local.bits
        for t, step in enumerate(m.plan.steps[m.pos:]):
            a = step.action_of(self.id)
            ex = tuple(e for e in (ts.action_id(x) for x in exo.get(t, ())) if ts.executable(bits, e))
            if a is None:
                if not ex:
                    return False
                ids = ex
            else:
                ai = ts.action_id(a)
                if not ts.executable(bits, ai, frozenset(ex)):
                    return False
                ids = (ai,) + ex
            nxt = ts.try_apply(bits, ids)
            if nxt is None:
                return False
            bits = nxt
        return True

    def _replan(self, ts, local, cur, ant, cur_todo, exo, claimed, ctx) -> None:
        w, m, pol = self.world, self.monitor, self.policy
        k = max(exo) + 1 if exo else 0
        make_h = w.heuristic_factory(ts, self.id, claimed, k)
        self.stats["plans"] += 1
        p = None
        if cur_todo:
            p = plan_joint(ts, local, Goal(cur, ctx.current), Goal(ant, "anticipated") if ant else None,
                           pol.horizon, exo, self.id, make_h, pol.node_budget)
        if (p is None or not p.found or len(p) == 0) and _unsatisfied(local, ant):
            p = plan(ts, local, Goal(ant, "anticipated"), pol.horizon, exo, self.id, make_h(ant), pol.node_budget)
        if p is not None and p.status == "budget":
            self.stats["budget"] += 1
        if p is None or not p.found or len(p) == 0:
            m.reset()
            return
        m.plan, m.pos, m.ts = p, 0, ts
        m.mask = _ignore_mask(ts, self.id) & ~_location_mask(ts, self.humans if self.uses_models else [])


def _location_mask(ts: TransitionSystem, agents: Iterable[str]) -> int:
    agents = set(agents)
    m = 0
    for i, a in enumerate(ts.universe.atoms):
        if a.pred in ("at*", "at") and a.args[0] in agents:
            m |= 1 << i
    return m


# ----------------------------------------------------------------- episode

@dataclass
class EpisodeLog:
    variant: str
    seed: int
    day_type: str
    routine: list[str]
    team: list[str]
    initial_digest: str
    per_step: list[dict] = field(default_factory=list)
    tasks_completed: list[tuple[str, int]] = field(default_factory=list)
    conflicts: int = 0
    wall_time: float = 0.0
    finished: bool = False
    stats: dict = field(default_factory=dict)

    @property
    def steps_taken(self) -> int:
        return len(self.per_step)

    def to_records(self) -> list[dict]:
        head = {"type": "episode", "variant": self.variant, "seed": self.seed, "day_type": self.day_type,
                "routine": self.routine, "team": self.team, "initial_digest": self.initial_digest,
                "steps_taken": self.steps_taken, "finished": self.finished, "conflicts": self.conflicts,
                "tasks_completed": [list(t) for t in self.tasks_completed], "wall_time": self.wall_time,
                "stats": self.stats}
        return [head] + [{"type": "step", **row} for row in self.per_step]

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.to_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def run_episode(world: World, agents: Sequence, routine: TaskRoutine, flags: ContextFlags, seed: int,
                step_cap: int = 200, variant: str = "", day_type: str = "",
                initial: State | None = None, on_step: Callable | None = None) -> EpisodeLog:
    """Dispatch tasks one at a time and step the team until the routine is done or the cap is hit."""
    if not agents:
        raise InvariantError("team must not be empty")
    if not routine.tasks:
        raise InvariantError("routine must not be empty")
    t0 = time.perf_counter()
    s = initial if initial is not None else world.initial_state(seed)
    log = EpisodeLog(variant, seed, day_type, list(routine.tasks), [a.id for a in agents], world.digest(s))
    tasks = list(routine.tasks)
    completed: list[str] = []
    last_actions: dict[str, Atom | None] = {}
    last_outcomes: dict[str, Outcome] = {}

    def dispatch(step: int) -> str | None:
        while tasks and goal_satisfied(s, goal_of(tasks[0])):
            completed.append(tasks.pop(0))
            log.tasks_completed.append((completed[-1], step))
        return tasks[0] if tasks else None

    def goal_of(label: str) -> Goal:
        return world.config.tasks[label].goal

    current = dispatch(0)
    order = sorted((a.id for a in agents), key=lambda x: (x != HUMAN, x))
    for step in range(step_cap):
        if current is None:
            break
        ctx = EpisodeContext(world, flags, current, list(completed), last_actions, last_outcomes, step)
        proposals = {a.id: a.act(s, ctx) for a in agents}
        s_next, outcomes, grabs = step_world(world, s, proposals, order)
        world.check_invariants(s_next)
        for a in agents:
            if hasattr(a, "observe"):
                a.observe(s, ctx, proposals, outcomes)
        s = s_next
        log.conflicts += grabs
        prev = current
        current = dispatch(step + 1)
        row = {"step": step, "task": prev,
               "actions": {k: (str(v) if v is not None else "noop") for k, v in sorted(proposals.items())},
               "outcomes": {k: str(v) for k, v in sorted(outcomes.items())}, "digest": world.digest(s)}
        log.per_step.append(row)
        last_actions, last_outcomes = proposals, outcomes
        if on_step is not None:
            on_step(step, s, proposals, outcomes)
    log.finished = current is None
    log.wall_time = time.perf_counter() - t0
    for a in agents:
        if isinstance(a, AdHocAgent):
            st = dict(a.stats)
            st["anticipated"] = [list(x) for x in st["anticipated"]]
            st["revisions"] = [list(r) for r in a.revisions]
            log.stats[a.id] = st
    return log


# ------------------------------------------------------------------ traces

class TraceRecorder:
    """Records (cue vector, observed family) pairs for one teammate during episodes."""

    def __init__(self, world: World, teammate: str = HUMAN):
        self.world = world
        self.id = f"recorder:{teammate}"
        self.teammate = teammate
        self.view = TeammateView(teammate)
        self.rows: list[tuple[str, int, str, CueVector, str]] = []
        self.episode = ""

    def start(self, episode: str) -> None:
        self.episode = episode
        self.view = TeammateView(self.teammate)

    def act(self, s: State, ctx: EpisodeContext) -> None:
        return None

    def observe(self, s_prev: State, ctx: EpisodeContext, actions, outcomes) -> None:
        prev = ctx.completed[-1] if ctx.completed else None
        cv = extract_cues(self.world, s_prev, self.view, ctx.current, prev, ctx.flags)
        fam = family_of(actions.get(self.teammate))
        self.rows.append((self.episode, ctx.step, self.teammate, cv, fam))
        self.view.history.append(fam)


def collect_traces(config: WorldConfig, behavior: str, n_steps: int, seed: int = 0,
                   team: Sequence[str] = (HUMAN, "robot1")) -> list[tuple[str, int, str, CueVector, str]]:
    """Trace rows of the scripted human working with a plain ad hoc agent, ``n_steps`` in total."""
    world = World(config, tuple(team))
    rec = TraceRecorder(world)
    rng = random.Random(f"traces:{behavior}:{seed}")
    days = sorted(config.day_types)
    i = 0
    while len(rec.rows) < n_steps:
        day = rng.choice(days)
        ep_seed = rng.randrange(1 << 30)
        routine = generate_tasks(config, day, ep_seed)
        human = ScriptedHuman(world, behavior)
        robots = [AdHocAgent(world, r, PolicyConfig(anticipation=False, behavior_models=False))
                  for r in team if r != HUMAN]
        rec.start(f"{behavior}-{seed}-{i}")
        run_episode(world, [human, *robots, rec], routine, config.context(day), ep_seed)
        i += 1
    return rec.rows[:n_steps]

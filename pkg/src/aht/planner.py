"""Minimum-length planning, joint current/anticipated planning, and diagnosis.

Planning is best-first search over the grounded transition system with an
admissible heuristic (breadth-first when none is given).  Expected actions of
teammates are injected at their steps when executable and skipped otherwise.
"""
from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .kernel import (AHTError, Atom, Goal, HistoryRecord, InconsistentStateError, Kind, Literal, Obs,
                     State, goal_satisfied)
from .lang.grounding import NotExecutableError, TransitionSystem, ground
from .lang.refine import UnrefinableActionError, abstraction, zoom
from .lang.syntax import DomainDescription

Heuristic = Callable[[int, int], int]
NOOP = None


class InconsistentInitialStateError(AHTError):
    pass


class UndiagnosableError(AHTError):
    pass


class RefinementFailure(AHTError):
    def __init__(self, action: Atom, reason: str = ""):
        self.action = action
        super().__init__(f"could not implement {action} at fine resolution" + (f": {reason}" if reason else ""))


@dataclass(frozen=True)
class PlanStep:
    actions: tuple[tuple[str, Atom | None], ...]
    expected_exo: tuple[Atom, ...] = ()

    def action_of(self, agent: str) -> Atom | None:
        return dict(self.actions).get(agent)


@dataclass
class Plan:
    steps: list[PlanStep] = field(default_factory=list)
    achieves: list[tuple[str, int]] = field(default_factory=list)
    actor: str | None = None
    status: str = "ok"  # ok | no-plan | budget
    expanded: int = 0

    @property
    def found(self) -> bool:
        return self.status == "ok"

    @property
    def horizon(self) -> int:
        return len(self.steps)

    def __len__(self) -> int:
        return len(self.steps)

    def actions(self) -> list[Atom | None]:
        return [s.action_of(self.actor) for s in self.steps]

    def __str__(self) -> str:
        if not self.found:
            return f"<{self.status}>"
        return " ; ".join(str(a) if a else "noop" for a in self.actions())


# ------------------------------------------------------------------ search

def _goal_masks(ts: TransitionSystem, goal: Goal | Iterable[Literal]) -> tuple[int, int]:
    conj = goal.conjuncts if isinstance(goal, Goal) else goal
    pos = neg = 0
    for l in conj:
        i = ts.universe.idx(l.atom)
        if l.positive:
            pos |= 1 << i
        else:
            neg |= 1 << i
    return pos, neg


def _default_actor(ts: TransitionSystem) -> str:
    for a, exo in zip(ts.actions, ts.is_exo):
        if not exo:
            return a.args[0]
    raise AHTError("transition system has no agent actions")


class _Search:
    """A* over (state, step) with exogenous injections and deterministic ties."""

    def __init__(self, ts: TransitionSystem, actor: str, exo: Mapping[int, Iterable[Atom]] | None,
                 rank: Callable[[Atom], object] | None):
        self.ts = ts
        self.actor = actor
        acts = list(ts.actions_of(actor))
        if rank is not None:
            acts.sort(key=lambda i: (rank(ts.actions[i]), i))
        self.acts = acts
        self.order = {a: k for k, a in enumerate(acts)}
        self.noop_rank = len(acts)
        self.exo: dict[int, list[int]] = {}
        for t, actions in (exo or {}).items():
            ids = sorted({ts.action_id(a) for a in actions})
            if ids:
                self.exo[int(t)] = ids
        self.t_exo = max(self.exo) + 1 if self.exo else 0
        self._exo_cache: dict[tuple[int, int], tuple[int, ...]] = {}

    def exo_at(self, bits: int, t: int) -> tuple[int, ...]:
        ids = self.exo.get(t)
        if not ids:
            return ()
        key = (bits, t)
        got = self._exo_cache.get(key)
        if got is None:
            got = tuple(e for e in ids if self.ts.executable(bits, e))
            self._exo_cache[key] = got
        return got

    def children(self, bits: int, t: int):
        ts = self.ts
        exo = self.exo_at(bits, t)
        concurrent = frozenset(exo)
        for a in self.acts:
            if not ts.executable(bits, a, concurrent):
                continue
            nxt = ts.try_apply(bits, (a,) + exo)
            if nxt is not None:
                yield a, nxt
        if t < self.t_exo:
            nxt = ts.try_apply(bits, exo)
            if nxt is not None:
                yield NOOP, nxt

    def run(self, start: int, is_goal: Callable[[int, int], bool], h: Heuristic, max_h: int,
            budget: int, key_t: int | None = None, prune: Callable[[int, int], bool] | None = None):
        """Return (path of action ids, expanded, status)."""
        key_t = self.t_exo if key_t is None else max(key_t, self.t_exo)
        counter = itertools.count()
        h0 = h(start, 0)
        heap = [(h0, 0, (), next(counter), start)]
        best: dict[tuple[int, int], int] = {(start, 0): 0}
        closed = set()
        expanded = 0
        while heap:
            f, neg_g, path, _, bits = heapq.heappop(heap)
            t = -neg_g
            key = (bits, min(t, key_t))
            if key in closed:
                continue
            closed.add(key)
            if is_goal(bits, t):
                return [None if r == self.noop_rank else self.acts[r] for r in path], expanded, "ok"
            if t >= max_h:
                continue
            expanded += 1
            if expanded > budget:
                return None, expanded, "budget"
            for a, nxt in self.children(bits, t):
                t2 = t + 1
                if prune is not None and prune(nxt, t2):
                    continue
                k2 = (nxt, min(t2, key_t))
                if k2 in closed or best.get(k2, max_h + 1) <= t2:
                    continue
                hv = h(nxt, t2)
                if t2 + hv > max_h:
                    continue
                best[k2] = t2
                r = self.noop_rank if a is None else self.order[a]
                heapq.heappush(heap, (t2 + hv, -t2, path + (r,), next(counter), nxt))
        return None, expanded, "no-plan"

    def to_plan(self, start: int, path: list, goals: Sequence[tuple[Goal, int, int]], expanded: int) -> Plan:
        ts = self.ts
        steps, bits = [], start
        achieved: dict[str, int] = {}
        for g, pos, neg in goals:
            if bits & pos == pos and not bits & neg:
                achieved.setdefault(g.label, 0)
        for t, a in enumerate(path):
            exo = self.exo_at(bits, t)
            chosen = ((self.actor, ts.actions[a] if a is not None else None),)
            steps.append(PlanStep(chosen, tuple(ts.actions[e] for e in exo)))
            bits = ts.apply(bits, ((a,) if a is not None else ()) + exo)
            for g, pos, neg in goals:
                if bits & pos == pos and not bits & neg:
                    achieved.setdefault(g.label, t + 1)
        return Plan(steps, sorted(achieved.items(), key=lambda kv: (kv[1], kv[0])), self.actor, "ok", expanded)


def _check_initial(ts: TransitionSystem, s0: State) -> int:
    if s0.universe is not ts.universe:
        s0 = ts.project(s0)
    bad = ts.violated(s0.bits)
    if bad is not None or ts.derive(s0.bits) != s0.bits:
        raise InconsistentInitialStateError(f"initial state is not closed: {bad}")
    return s0.bits


def plan(ts: TransitionSystem, s0: State, goal: Goal, max_horizon: int = 30,
         exo: Mapping[int, Iterable[Atom]] | None = None, actor: str | None = None,
         heuristic: Heuristic | None = None, node_budget: int = 200_000,
         rank: Callable[[Atom], object] | None = None) -> Plan:
    """Minimum-length plan for ``actor`` reaching ``goal`` from ``s0``.

    ``exo`` maps steps to actions of other agents expected at that step; the
    actor may wait (noop) only while such expectations are pending.  The
    result has status ``no-plan`` when nothing reaches the goal within
    ``max_horizon`` and ``budget`` when the node budget ran out first.
    """
    actor = actor or _default_actor(ts)
    start = _check_initial(ts, s0)
    search = _Search(ts, actor, exo, rank)
    pos, neg = _goal_masks(ts, goal)
    h = heuristic or (lambda bits, t: 0)
    path, expanded, status = search.run(start, lambda b, t: b & pos == pos and not b & neg, h,
                                        max_horizon, node_budget)
    if path is None:
        return Plan([], [], actor, status, expanded)
    return search.to_plan(start, path, [(goal, pos, neg)], expanded)


def plan_joint(ts: TransitionSystem, s0: State, current: Goal, anticipated: Goal | None,
               max_horizon: int = 30, exo: Mapping[int, Iterable[Atom]] | None = None,
               actor: str | None = None,
               heuristic_for: Callable[[frozenset[Literal]], Heuristic] | None = None,
               node_budget: int = 200_000, rank: Callable[[Atom], object] | None = None) -> Plan:
    """Plan for the current goal while preparing for an anticipated one.

    The current goal is reached at its own minimal step L*; the plan then
    continues so that as many anticipated conjuncts as possible hold at its
    end, using as few steps as possible.  Falls back to ``plan(current)``.
    ``heuristic_for`` builds an admissible heuristic for a set of conjuncts.
    """
    actor = actor or _default_actor(ts)
    make_h = heuristic_for or (lambda conj: (lambda b, t: 0))
    h_cur = make_h(current.conjuncts)
    base = plan(ts, s0, current, max_horizon, exo, actor, h_cur, node_budget, rank)
    if not base.found or anticipated is None or anticipated.conjuncts <= current.conjuncts:
        return base
    l_star = len(base)
    start = _check_initial(ts, s0)
    cpos, cneg = _goal_masks(ts, current)
    extra = sorted(anticipated.conjuncts - current.conjuncts, key=str)
    budget = node_budget

    def prune(b, t):
        if t < l_star:
            return t + h_cur(b, t) > l_star
        return t == l_star and not (b & cpos == cpos and not b & cneg)

    for size in range(len(extra), 0, -1):
        for subset in itertools.combinations(extra, size):
            apos, aneg = _goal_masks(ts, subset)
            h_ant = make_h(frozenset(subset))

            def h(b, t, h_ant=h_ant):
                if t < l_star:
                    return max(l_star - t, h_ant(b, t))
                return h_ant(b, t)

            def is_goal(b, t, apos=apos, aneg=aneg):
                return t >= l_star and b & apos == apos and not b & aneg

            search = _Search(ts, actor, exo, rank)
            path, expanded, status = search.run(start, is_goal, h, max_horizon, budget,
                                                key_t=l_star, prune=prune)
            budget -= expanded
            if path is not None:
                goals = [(current, cpos, cneg), (anticipated, *_goal_masks(ts, anticipated))]
                return search.to_plan(start, path, goals, base.expanded + expanded)
            if budget <= 0:
                return base
    return base


def replay(ts: TransitionSystem, s0: State, p: Plan) -> list[State]:
    """States visited by a plan; raises if a planned action is not executable."""
    states = [s0]
    bits = s0.bits
    for step in p.steps:
        acts = [ts.action_id(a) for _, a in step.actions if a is not None]
        exo = [ts.action_id(e) for e in step.expected_exo]
        concurrent = frozenset(exo)
        for a in acts:
            if not ts.executable(bits, a, concurrent):
                raise NotExecutableError(ts.actions[a], ts.blocking(bits, a, concurrent))
        bits = ts.apply(bits, acts + exo)
        states.append(State(ts.universe, bits))
    return states


# --------------------------------------------------------------- diagnosis

@dataclass(frozen=True)
class DiagnosisResult:
    retracted_defaults: frozenset[Literal]
    revised_history: HistoryRecord


def history_consistent(ts: TransitionSystem, history: HistoryRecord,
                       retracted: Iterable[Literal] = ()) -> bool:
    """Does replaying ``history`` with the non-retracted defaults match every observation?

    Retracted defaults are assumed to have the opposite value; atoms neither
    observed at step 0 nor covered by a default are false.
    """
    retracted = set(retracted)
    initial: dict[Atom, bool] = {}
    for d in history.initial_defaults:
        initial[d.atom] = d.positive if d not in retracted else not d.positive
    for o in history.observations(0):
        if initial.get(o.literal.atom, o.literal.positive) != o.literal.positive:
            return False
        initial[o.literal.atom] = o.literal.positive
    try:
        bits = ts.close(ts.universe.bits_of(a for a, v in initial.items()
                                            if v and ts.universe.kind(a) is Kind.INERTIAL))
    except InconsistentStateError:
        return False
    for a, v in initial.items():
        if bool(bits >> ts.universe.idx(a) & 1) != v:
            return False
    for t in range(history.last_step + 1):
        for o in history.observations(t):
            if bool(bits >> ts.universe.idx(o.literal.atom) & 1) != o.literal.positive:
                return False
        acts = [ts.action_id(a) for a in history.actions_at(t)]
        if not acts:
            continue
        concurrent = frozenset(acts)
        if not all(ts.executable(bits, a, concurrent - {a}) for a in acts):
            return False
        nxt = ts.try_apply(bits, acts)
        if nxt is None:
            return False
        bits = nxt
    return True


def diagnose(ts: TransitionSystem, history: HistoryRecord, observation: Literal, step: int,
             max_cardinality: int = 3) -> DiagnosisResult:
    """Smallest set of initial defaults whose retraction explains ``observation``.

    Candidate sets are tried by increasing size and, within a size, in
    lexicographic order of the defaults' text.
    """
    extended = history.with_entry(Obs(step, observation))
    defaults = sorted(set(history.initial_defaults), key=str)
    for k in range(max_cardinality + 1):
        for subset in itertools.combinations(defaults, k):
            if history_consistent(ts, extended, subset):
                kept = tuple(d for d in history.initial_defaults if d not in subset)
                return DiagnosisResult(frozenset(subset), HistoryRecord(extended.entries, kept))
    raise UndiagnosableError(
        f"no retraction of at most {max_cardinality} defaults explains {observation} at step {step}")


# ------------------------------------------------------------- refinement

def plan_refined(domain: DomainDescription, s_fine: State, goal: Goal, actor: str,
                 max_horizon: int = 30, fine_horizon: int = 20, node_budget: int = 200_000,
                 max_replans: int = 3) -> Plan:
    """Plan at coarse resolution, then implement each coarse action at fine resolution."""
    coarse_ts = ground(domain, "coarse")
    fine_ts = ground(domain, "fine")
    state = fine_ts.project(s_fine)
    steps: list[PlanStep] = []
    replans = 0
    expanded = 0
    while True:
        s_c = abstraction(coarse_ts, state)
        coarse = plan(coarse_ts, s_c, goal, max_horizon, actor=actor, node_budget=node_budget)
        expanded += coarse.expanded
        if not coarse.found:
            return Plan([], [], actor, coarse.status, expanded)
        failed = None
        for action in coarse.actions():
            try:
                sub_ts, sub_goal = zoom(domain, action, state)
            except (UnrefinableActionError, NotExecutableError) as e:
                raise RefinementFailure(action, str(e)) from None
            if sub_goal is None:
                continue
            sub = plan(sub_ts, sub_ts.project(state), sub_goal, fine_horizon, actor=actor,
                       node_budget=node_budget)
            expanded += sub.expanded
            if not sub.found:
                failed = action
                break
            for a in sub.actions():
                ids = [fine_ts.action_id(a)] if a is not None else []
                state = State(fine_ts.universe, fine_ts.apply(state.bits, ids))
                steps.append(PlanStep(((actor, a),)))
        if failed is None:
            out = Plan(steps, [], actor, "ok", expanded)
            if goal_satisfied(abstraction(coarse_ts, state), goal):
                out.achieves = [(goal.label, len(steps))]
            return out
        replans += 1
        if replans > max_replans:
            raise RefinementFailure(failed, "replanning the coarse suffix did not help")

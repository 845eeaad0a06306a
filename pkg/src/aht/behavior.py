"""Teammate behavior models: fast-and-frugal trees, an arbiter tree, agreement tracking.

Each tree answers "will the teammate do an action of family F next?" by
testing binary cues one at a time; every level exits on a true cue.  An
arbiter combines the per-family answers into one predicted family.
"""
from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .kernel import AHTError, Atom, InvariantError

NONE = "none"
NOOP = "noop"
FIRE, PASS = True, False


class DegenerateDataError(AHTError):
    pass


def family_of(action: Atom | str | None) -> str:
    """Action family label: ``exo_grab(human,eggs)`` and ``grab(robot,eggs)`` are both ``grab``."""
    if action is None:
        return NOOP
    name = action.pred if isinstance(action, Atom) else str(action).split("(")[0]
    if name.startswith("exo_"):
        name = name[4:]
    return name.rstrip("*") or NOOP


@dataclass(frozen=True)
class CueVector:
    prev_action1: str = NONE
    prev_action2: str = NONE
    location: str = NONE
    goal_objects: frozenset[str] = frozenset()
    held_by_agent: frozenset[str] = frozenset()
    held_by_others: frozenset[str] = frozenset()
    current_task: str = NONE
    previous_task: str = NONE
    flags: tuple[bool, bool, bool] = (True, False, False)
    # situation cues derived from the state and the current task's goal
    needed_here: bool = False
    needed_here_closed: bool = False
    deliver_here: bool = False
    switch_here: bool = False
    open_here: bool = False
    deliver_closed: bool = False
    idle: bool = False

    def __post_init__(self):
        if len(self.held_by_agent) > 2:
            raise InvariantError("an agent cannot hold more than two objects")


CATEGORICAL = ("prev_action1", "prev_action2", "location", "current_task", "previous_task")
BOOLEAN = ("needed_here", "needed_here_closed", "deliver_here", "switch_here", "open_here", "deliver_closed",
           "idle")
FLAG_NAMES = ("weekday", "going_to_office", "guests_expected")


@dataclass(frozen=True)
class Cue:
    """Binary test over a cue vector: ``field == value`` (or its negation)."""

    field: str
    value: object
    positive: bool = True

    def __call__(self, cv: CueVector) -> bool:
        return (_read(cv, self.field) == self.value) == self.positive

    def __str__(self) -> str:
        return f"{self.field}{'=' if self.positive else '!='}{self.value}"


def _read(cv: CueVector, name: str):
    if name in FLAG_NAMES:
        return cv.flags[FLAG_NAMES.index(name)]
    if name == "held_count":
        return len(cv.held_by_agent)
    if name == "holds_goal_object":
        return bool(cv.held_by_agent & cv.goal_objects)
    if name == "others_hold_goal_object":
        return bool(cv.held_by_others & cv.goal_objects)
    return getattr(cv, name)


def generate_cues(examples: Iterable[CueVector]) -> list[Cue]:
    """One-hot tests (both polarities) for every value seen in the examples."""
    values: dict[str, set] = {}
    fields = CATEGORICAL + BOOLEAN + FLAG_NAMES + ("held_count", "holds_goal_object", "others_hold_goal_object")
    for cv in examples:
        for f in fields:
            values.setdefault(f, set()).add(_read(cv, f))
    cues = []
    for f in fields:
        for v in sorted(values.get(f, ()), key=str):
            cues.append(Cue(f, v, True))
            cues.append(Cue(f, v, False))
    return cues


# ----------------------------------------------------------------- FF tree

@dataclass(frozen=True)
class FFTree:
    target: str
    cues: tuple[tuple[Cue, bool], ...]
    final: bool = PASS

    @property
    def depth(self) -> int:
        return len(self.cues)

    def decide(self, cv: CueVector, trace: list | None = None) -> bool:
        for cue, exit_decision in self.cues:
            if trace is not None:
                trace.append(cue)
            if cue(cv):
                return exit_decision
        return self.final

    def __str__(self) -> str:
        lines = [f"FF tree for {self.target}:"]
        for cue, d in self.cues:
            lines.append(f"  if {cue}: {'fire' if d else 'pass'}")
        lines.append(f"  else: {'fire' if self.final else 'pass'}")
        return "\n".join(lines)


def _block_decision(pos: int, neg: int, fp_weight: float) -> bool:
    """Decision minimising weighted errors on one block; ties go to pass."""
    return (1 - fp_weight) * pos > fp_weight * neg


def exit_cost(pos: int, neg: int, decision: bool, fp_weight: float) -> float:
    return fp_weight * neg if decision else (1 - fp_weight) * pos


def learn_fftree(examples: Sequence[tuple[CueVector, bool]], target: str, cues: Sequence[Cue] | None = None,
                 max_depth: int = 6, min_support: int = 3, fp_weight: float = 0.6) -> FFTree:
    """Fit a fast-and-frugal tree for one action family.

    Cues are chosen greedily.  At each level, among the examples that have
    not exited yet, the cue whose true-block exit plus the best single
    decision on the rest gives the smallest weighted training error wins;
    ties go to the purer block (positive predictive value closest to 0 or
    1), then to larger support, then to the cue that sorts first by text.
    A false positive costs ``fp_weight`` and a false negative
    ``1 - fp_weight``.  Growth stops when no cue lowers the error.
    """
    labels = np.array([bool(y) for _, y in examples])
    if labels.all() or not labels.any():
        raise InvariantError("need at least one positive and one negative example")
    xs = [x for x, _ in examples]
    cues = sorted(cues if cues is not None else generate_cues(xs), key=str)
    kept, cols = [], []
    for c in cues:
        col = np.fromiter((c(x) for x in xs), dtype=bool, count=len(xs))
        if col.all() or not col.any():
            continue  # constant cue, dropped
        kept.append(c)
        cols.append(col)
    if not kept:
        raise DegenerateDataError("every cue is constant on the examples")
    truth = np.vstack(cols)
    remaining = np.ones(len(xs), dtype=bool)
    chosen: list[tuple[Cue, bool]] = []
    used = np.zeros(len(kept), dtype=bool)
    while len(chosen) < max_depth:
        n_rem = int(remaining.sum())
        rpos = int((labels & remaining).sum())
        if n_rem == 0 or rpos == 0 or rpos == n_rem:
            break
        hits = truth & remaining
        ns = hits.sum(axis=1)
        ps = (hits & labels).sum(axis=1)
        rneg = n_rem - rpos
        current = min(exit_cost(rpos, rneg, False, fp_weight), exit_cost(rpos, rneg, True, fp_weight))
        best = None
        for j in range(len(kept)):
            n, p = int(ns[j]), int(ps[j])
            if used[j] or n < min_support or n == n_rem:
                continue
            block = min(exit_cost(p, n - p, False, fp_weight), exit_cost(p, n - p, True, fp_weight))
            rp, rn = rpos - p, rneg - (n - p)
            rest = min(exit_cost(rp, rn, False, fp_weight), exit_cost(rp, rn, True, fp_weight))
            cost = block + rest
            if cost >= current - 1e-9:
                continue
            key = (-round(cost, 9), Fraction(max(p, n - p), n), n)
            if best is None or key > best[0]:
                best = (key, j, n, p)
        if best is None:
            break
        _, j, n, p = best
        chosen.append((kept[j], _block_decision(p, n - p, fp_weight)))
        used[j] = True
        remaining &= ~truth[j]
    n_rem = int(remaining.sum())
    rpos = int((labels & remaining).sum())
    final = _block_decision(rpos, n_rem - rpos, fp_weight)
    return FFTree(target, tuple(chosen), final)


def training_cost(tree: FFTree, examples: Sequence[tuple[CueVector, bool]], fp_weight: float = 0.6) -> float:
    fp = sum(1 for x, y in examples if not y and tree.decide(x))
    fn = sum(1 for x, y in examples if y and not tree.decide(x))
    return fp_weight * fp + (1 - fp_weight) * fn


# ----------------------------------------------------------------- arbiter

@dataclass(frozen=True)
class ArbiterNode:
    label: str
    feature: int | None = None
    left: "ArbiterNode | None" = None   # feature false
    right: "ArbiterNode | None" = None  # feature true

    def predict(self, x: Sequence[bool]) -> str:
        node = self
        while node.feature is not None:
            node = node.right if x[node.feature] else node.left
        return node.label


def _gini(counts: Counter) -> float:
    n = sum(counts.values())
    return 1.0 - sum((c / n) ** 2 for c in counts.values()) if n else 0.0


def _majority(counts: Counter, order: Sequence[str]) -> str:
    return max(order, key=lambda f: (counts.get(f, 0), -order.index(f)))


def learn_arbiter(xs: Sequence[Sequence[bool]], ys: Sequence[str], order: Sequence[str],
                  max_depth: int = 4, min_leaf: int = 2) -> ArbiterNode:
    """Small CART classifier over boolean features with Gini splits."""
    idx = list(range(len(xs)))

    def build(rows, depth):
        counts = Counter(ys[i] for i in rows)
        label = _majority(counts, order)
        if depth == max_depth or len(counts) == 1 or len(rows) < 2 * min_leaf:
            return ArbiterNode(label)
        parent = _gini(counts)
        best = None
        for f in range(len(xs[0]) if xs else 0):
            t = [i for i in rows if xs[i][f]]
            e = [i for i in rows if not xs[i][f]]
            if len(t) < min_leaf or len(e) < min_leaf:
                continue
            g = (len(t) * _gini(Counter(ys[i] for i in t)) + len(e) * _gini(Counter(ys[i] for i in e))) / len(rows)
            if parent - g > 1e-12 and (best is None or g < best[0] - 1e-12):
                best = (g, f, t, e)
        if best is None:
            return ArbiterNode(label)
        _, f, t, e = best
        return ArbiterNode(label, f, build(e, depth + 1), build(t, depth + 1))

    return build(idx, 0)


def arbiter_depth(node: ArbiterNode) -> int:
    if node.feature is None:
        return 0
    return 1 + max(arbiter_depth(node.left), arbiter_depth(node.right))


# ---------------------------------------------------------------- ensemble

@dataclass(frozen=True)
class BehaviorEnsemble:
    trees: tuple[FFTree, ...]
    arbiter: ArbiterNode
    families: tuple[str, ...]
    trained_on: int
    model_id: str = "model"

    def features(self, cv: CueVector) -> tuple[bool, ...]:
        return tuple(t.decide(cv) for t in self.trees) + tuple(cv.flags)

    def predict_family(self, cv: CueVector) -> str:
        return self.arbiter.predict(self.features(cv))

    def accuracy(self, traces: Sequence[tuple[CueVector, str]]) -> float:
        if not traces:
            return 0.0
        return sum(self.predict_family(cv) == fam for cv, fam in traces) / len(traces)


def learn_ensemble(traces: Sequence[tuple[CueVector, str]], model_id: str = "model", max_depth: int = 6,
                   fp_weight: float = 0.6, arbiter_max_depth: int = 4) -> BehaviorEnsemble:
    """One-vs-rest FF tree per observed family plus an arbiter over their outputs."""
    families = sorted({fam for _, fam in traces})
    if len(families) < 2:
        raise InvariantError("traces must cover at least two action families")
    xs = [cv for cv, _ in traces]
    cues = generate_cues(xs)
    trees = []
    for fam in families:
        examples = [(cv, f == fam) for cv, f in traces]
        trees.append(learn_fftree(examples, fam, cues, max_depth=max_depth, fp_weight=fp_weight))
    partial = BehaviorEnsemble(tuple(trees), ArbiterNode(families[0]), tuple(families), len(traces), model_id)
    feats = [partial.features(cv) for cv in xs]
    arb = learn_arbiter(feats, [f for _, f in traces], families, max_depth=arbiter_max_depth)
    return replace(partial, arbiter=arb)


# -------------------------------------------------------------- prediction

Grounder = Callable[[str, object, CueVector], "Atom | None"]
Advance = Callable[[CueVector, "Atom | None", object], CueVector]


def predict(ens: BehaviorEnsemble, cues: CueVector, k: int, ts, s, ground: Grounder, advance: Advance,
            executable: Callable[[object, Atom], bool] | None = None) -> list[Atom | None]:
    """Roll the ensemble forward ``k`` steps.

    ``ground`` turns a predicted family into a grounded teammate action
    (``None`` when nothing fits); ``advance`` updates the cue vector after
    the simulated step.  Predictions that are not executable become noops.
    """
    if k < 1:
        raise InvariantError("prediction depth must be at least 1")
    out: list[Atom | None] = []
    for _ in range(k):
        fam = ens.predict_family(cues)
        action = None if fam == NOOP else ground(fam, s, cues)
        if action is not None:
            a = ts.action_index.get(action)
            ok = a is not None and (executable(s, action) if executable else ts.executable(s.bits, a))
            if ok:
                nxt = ts.try_apply(s.bits, [a])
                if nxt is None:
                    action = None
                else:
                    s = type(s)(s.universe, nxt)
            else:
                action = None
        out.append(action)
        cues = advance(cues, action, s)
    return out


# ------------------------------------------------------- agreement tracking

@dataclass(frozen=True)
class AgreementTracker:
    window: tuple[bool, ...] = ()
    size: int = 10
    theta: float = 0.6
    active_model_id: str = "model"

    @property
    def full(self) -> bool:
        return len(self.window) >= self.size

    @property
    def agreement_rate(self) -> float | None:
        if not self.window:
            return None
        return sum(self.window) / len(self.window)

    def record(self, predicted: str, observed: str) -> "AgreementTracker":
        w = (self.window + (predicted == observed,))[-self.size:]
        return replace(self, window=w)

    def reset(self, model_id: str | None = None) -> "AgreementTracker":
        return replace(self, window=(), active_model_id=model_id or self.active_model_id)


@dataclass(frozen=True)
class Directive:
    kind: str  # keep | switch | relearn
    model: BehaviorEnsemble | None = None


def observe_and_maybe_revise(tracker: AgreementTracker, ens: BehaviorEnsemble, predicted: str, observed: str,
                             recent_traces: Sequence[tuple[CueVector, str]],
                             stored: Mapping[str, BehaviorEnsemble] | None = None,
                             relearn_size: int = 200) -> tuple[AgreementTracker, Directive]:
    """Record one (prediction, observation) pair and revise the model on sustained disagreement.

    Below ``theta`` over a full window, the stored model agreeing best with
    the recent window is adopted if it clears ``theta``; otherwise a model is
    relearned from the most recent ``relearn_size`` traces.
    """
    tracker = tracker.record(predicted, observed)
    if not tracker.full or tracker.agreement_rate >= tracker.theta:
        return tracker, Directive("keep", ens)
    window = list(recent_traces)[-tracker.size:]
    best = None
    for mid in sorted(stored or {}):
        if mid == ens.model_id:
            continue
        rate = stored[mid].accuracy(window)
        if rate >= tracker.theta and (best is None or rate > best[0]):
            best = (rate, stored[mid])
    if best is not None:
        return tracker.reset(best[1].model_id), Directive("switch", best[1])
    recent = list(recent_traces)[-relearn_size:]
    if len({f for _, f in recent}) >= 2:
        try:
            model = learn_ensemble(recent, model_id=f"{ens.model_id}+relearned")
        except (InvariantError, DegenerateDataError):
            return tracker.reset(), Directive("keep", ens)
        return tracker.reset(model.model_id), Directive("relearn", model)
    return tracker.reset(), Directive("keep", ens)


# ---------------------------------------------------------------- trace IO

TRACE_FIELDS = ("episode", "step", "agent", "prev_action1", "prev_action2", "location", "goal_objects",
                "held_by_agent", "held_by_others", "current_task", "previous_task", "weekday",
                "going_to_office", "guests_expected") + BOOLEAN + ("action",)


def write_traces(path: str, rows: Iterable[tuple[str, int, str, CueVector, str]]) -> None:
    """Tab-separated trace file with a header line; sets are ``|``-joined."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for episode, step, agent, cv, action in rows:
            w.writerow([episode, step, agent, cv.prev_action1, cv.prev_action2, cv.location,
                        "|".join(sorted(cv.goal_objects)), "|".join(sorted(cv.held_by_agent)),
                        "|".join(sorted(cv.held_by_others)), cv.current_task, cv.previous_task,
                        *(int(f) for f in cv.flags), *(int(getattr(cv, b)) for b in BOOLEAN), action])


def read_traces(path: str) -> list[tuple[str, int, str, CueVector, str]]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            def s(name):
                return frozenset(x for x in row[name].split("|") if x)
            cv = CueVector(row["prev_action1"], row["prev_action2"], row["location"], s("goal_objects"),
                           s("held_by_agent"), s("held_by_others"), row["current_task"], row["previous_task"],
                           tuple(bool(int(row[f])) for f in FLAG_NAMES),
                           *(bool(int(row[b])) for b in BOOLEAN))
            out.append((row["episode"], int(row["step"]), row["agent"], cv, row["action"]))
    return out

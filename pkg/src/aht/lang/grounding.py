"""Eager grounding of a domain into an indexed transition system.

States inside a :class:`TransitionSystem` are plain ``int`` bitsets over its
universe; the public :func:`successor` wraps the bitset machinery with
:class:`~aht.kernel.State` values and descriptive errors.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable

from ..kernel import (AHTError, Atom, GroundConstraint, InconsistentStateError, InvariantError, Kind,
                      Literal, State, Universe)
from .syntax import CAUSAL, CONSTRAINT, EXECUTABILITY, Axiom, Cmp, DomainDescription, SLit, is_var

DEFAULT_ATOM_BUDGET = 200_000


class GroundingBudgetError(AHTError):
    pass


class NotExecutableError(AHTError):
    def __init__(self, action: Atom, condition: "GroundAxiom | None" = None, reason: str = ""):
        self.action, self.condition = action, condition
        why = f"blocked by `{condition}`" if condition else reason
        super().__init__(f"{action} is not executable: {why}")


class EffectConflictError(AHTError):
    pass


class InconsistentSuccessorError(AHTError):
    pass


@dataclass(frozen=True)
class GroundAxiom:
    kind: str
    head: Literal
    body: tuple[Literal, ...]
    action: Atom | None = None

    def __str__(self) -> str:
        body = ", ".join(map(str, self.body))
        if self.kind == CAUSAL:
            return f"{self.action} causes {self.head}" + (f" if {body}" if body else "")
        if self.kind == EXECUTABILITY:
            return f"impossible {self.head.atom} if {body}"
        return f"{self.head} if {body}" if body else str(self.head)


def _bits(x: int):
    while x:
        low = x & -x
        yield low.bit_length() - 1
        x ^= low


class TransitionSystem:
    """Grounded axioms over one universe, indexed by action and by atom."""

    def __init__(self, resolution: str, universe: Universe, actions: list[Atom],
                 action_kinds: dict[str, str], ground_axioms: list[GroundAxiom], static_true: set[Atom]):
        self.resolution = resolution
        self.universe = universe
        self.actions: tuple[Atom, ...] = tuple(actions)
        self.action_index = {a: i for i, a in enumerate(self.actions)}
        self.is_exo = [action_kinds[a.pred] == "exo" for a in self.actions]
        self.ground_axioms = ground_axioms
        self.static_bits = universe.bits_of(static_true)
        self.defined_mask = universe.mask[Kind.DEFINED]
        self.inertial_mask = universe.mask[Kind.INERTIAL]
        n = len(self.actions)
        self.laws: list[list[tuple[int, int, int, int]]] = [[] for _ in range(n)]
        self.exec_any = [0] * n
        self.exec_need = [0] * n
        self.exec_general: list[list[tuple[int, int, frozenset[int]]]] = [[] for _ in range(n)]
        self.laws_by_action: list[list[GroundAxiom]] = [[] for _ in range(n)]
        self.conditions_by_action: list[list[GroundAxiom]] = [[] for _ in range(n)]
        self.cons: list[tuple[int, bool, int, int]] = []
        self.cons_src: list[GroundAxiom] = []
        self.rules: list[tuple[int, int, int]] = []
        self.by_atom: dict[int, list[int]] = {}
        self.by_head: dict[int, list[int]] = {}
        idx = universe.idx

        def masks(body):
            pos = neg = 0
            for l in body:
                if l.positive:
                    pos |= 1 << idx(l.atom)
                else:
                    neg |= 1 << idx(l.atom)
            return pos, neg

        uncond: dict[int, list[int]] = {}
        for g in ground_axioms:
            if g.kind == CAUSAL:
                a = self.action_index[g.action]
                pos, neg = masks(g.body)
                hb = 1 << idx(g.head.atom)
                law = (pos, neg, hb if g.head.positive else 0, 0 if g.head.positive else hb)
                self.laws_by_action[a].append(g)
                if pos == neg == 0:
                    acc = uncond.setdefault(a, [0, 0, 0, 0])
                    acc[2] |= law[2]
                    acc[3] |= law[3]
                else:
                    self.laws[a].append(law)
            elif g.kind == EXECUTABILITY:
                a = self.action_index[g.head.atom]
                self.conditions_by_action[a].append(g)
                state_lits = [l for l in g.body if l.atom in universe]
                others = frozenset(self.action_index[l.atom] for l in g.body if l.atom not in universe)
                pos, neg = masks(state_lits)
                if not others and neg == 0 and pos and pos & (pos - 1) == 0:
                    self.exec_any[a] |= pos
                elif not others and pos == 0 and neg and neg & (neg - 1) == 0:
                    self.exec_need[a] |= neg
                else:
                    self.exec_general[a].append((pos, neg, others))
            else:
                hi = idx(g.head.atom)
                pos, neg = masks(g.body)
                if universe.kinds[hi] is Kind.DEFINED:
                    self.rules.append((1 << hi, pos, neg))
                    continue
                ci = len(self.cons)
                self.cons.append((1 << hi, g.head.positive, pos, neg))
                self.cons_src.append(g)
                for i in {hi, *_bits(pos | neg)}:
                    self.by_atom.setdefault(i, []).append(ci)
                self.by_head.setdefault(hi, []).append(ci)
        for a, (p, n_, t, f) in uncond.items():
            self.laws[a].insert(0, (0, 0, t, f))
        # defined atoms whose rules read only non-defined atoms can be re-derived locally
        self.recursive = any((pos | neg) & self.defined_mask for _, pos, neg in self.rules)
        self.rules_by_head: dict[int, list[tuple[int, int]]] = {}
        self.heads_by_atom: dict[int, int] = {}
        for head, pos, neg in self.rules:
            self.rules_by_head.setdefault(head, []).append((pos, neg))
            for i in _bits(pos | neg):
                self.heads_by_atom[i] = self.heads_by_atom.get(i, 0) | head
        self._actor_cache: dict[str, list[int]] = {}

    # ------------------------------------------------------------ queries
    def __repr__(self) -> str:
        return (f"TransitionSystem({self.resolution}, atoms={len(self.universe)}, "
                f"actions={len(self.actions)}, axioms={len(self.ground_axioms)})")

    @property
    def ground_constraints(self) -> list[GroundConstraint]:
        return [GroundConstraint(g.head, g.body) for g in self.ground_axioms if g.kind == CONSTRAINT]

    def axioms_for(self, action: Atom) -> list[GroundAxiom]:
        a = self.action_index[action]
        return self.laws_by_action[a] + self.conditions_by_action[a]

    def actions_of(self, actor: str) -> list[int]:
        """Indices of grounded actions whose first argument is ``actor``."""
        if actor not in self._actor_cache:
            self._actor_cache[actor] = [i for i, a in enumerate(self.actions) if a.args[:1] == (actor,)]
        return self._actor_cache[actor]

    def action_id(self, action: Atom) -> int:
        try:
            return self.action_index[action]
        except KeyError:
            raise InvariantError(f"unknown action {action}") from None

    # ------------------------------------------------------------- bitsets
    def derive(self, bits: int) -> int:
        """Recompute defined atoms of ``bits`` as a least fixpoint."""
        if not self.rules:
            return bits
        bits &= ~self.defined_mask
        changed = True
        while changed:
            changed = False
            for head, pos, neg in self.rules:
                if not bits & head and bits & pos == pos and not bits & neg:
                    bits |= head
                    changed = True
        return bits

    def rederive(self, bits: int, changed: int) -> int:
        """Same as :meth:`derive` when only the atoms in ``changed`` differ from a derived state."""
        if self.recursive:
            return self.derive(bits)
        heads = 0
        hba = self.heads_by_atom
        for i in _bits(changed & ~self.defined_mask):
            heads |= hba.get(i, 0)
        for i in _bits(heads):
            hb = 1 << i
            for pos, neg in self.rules_by_head[hb]:
                if bits & pos == pos and not bits & neg:
                    bits |= hb
                    break
            else:
                bits &= ~hb
        return bits

    def violated(self, bits: int) -> GroundAxiom | None:
        for (hb, hp, pos, neg), src in zip(self.cons, self.cons_src):
            if bits & pos == pos and not bits & neg and bool(bits & hb) != hp:
                return src
        return None

    def _violated_near(self, bits: int, changed: int) -> GroundAxiom | None:
        """Violated constraints mentioning a changed atom (the rest held before)."""
        cons, seen = self.cons, set()
        for i in _bits(changed):
            for ci in self.by_atom.get(i, ()):
                if ci in seen:
                    continue
                seen.add(ci)
                hb, hp, pos, neg = cons[ci]
                if bits & pos == pos and not bits & neg and bool(bits & hb) != hp:
                    return self.cons_src[ci]
        return None

    def close(self, bits: int) -> int:
        bits = self.derive((bits & ~self.defined_mask) | self.static_bits)
        bad = self.violated(bits)
        if bad is not None:
            raise InconsistentStateError(bad)
        return bits

    def executable(self, bits: int, a: int, concurrent: frozenset[int] = frozenset()) -> bool:
        if bits & self.exec_any[a]:
            return False
        need = self.exec_need[a]
        if bits & need != need:
            return False
        for pos, neg, others in self.exec_general[a]:
            if bits & pos == pos and not bits & neg and others <= concurrent:
                return False
        return True

    def blocking(self, bits: int, a: int, concurrent: Iterable[int] = ()) -> GroundAxiom | None:
        concurrent = set(concurrent)
        for g in self.conditions_by_action[a]:
            ok = True
            for l in g.body:
                if l.atom in self.universe.index:
                    if bool(bits >> self.universe.index[l.atom] & 1) != l.positive:
                        ok = False
                        break
                elif (self.action_index[l.atom] in concurrent) != l.positive:
                    ok = False
                    break
            if ok:
                return g
        return None

    def apply(self, bits: int, acts: Iterable[int]) -> int:
        """Successor bitset of ``bits`` under the simultaneous actions ``acts``.

        Executability is not checked here.  Direct effects are fixed first;
        state constraints then override inertia (ramifications) and every
        ramified literal must be supported by the effects plus the literals
        that kept their value.
        """
        et = ef = 0
        for a in acts:
            for pos, neg, t, f in self.laws[a]:
                if bits & pos == pos and not bits & neg:
                    et |= t
                    ef |= f
        if et & ef:
            atoms = [str(x) for x in self.universe.atoms_of(et & ef)]
            raise EffectConflictError(f"actions assign opposite values to {', '.join(atoms)}")
        cand = (bits & ~ef) | et
        if self.rules:
            cand = self.rederive(cand, cand ^ bits)
        fixed_t, fixed_f = et, ef
        cand, fixed_t, fixed_f, ramified = self._propagate(cand, cand ^ bits, fixed_t, fixed_f, 0)
        # a ramification fired on a literal that later changed loses its support: undo and retry
        for _ in range(len(self.universe)):
            if not ramified:
                break
            lost = self._unsupported(bits, cand, et, ef, ramified)
            if not lost:
                break
            cand = (cand & ~lost) | (bits & lost)
            fixed_t &= ~lost
            fixed_f &= ~lost
            ramified &= ~lost
            if self.rules:
                cand = self.rederive(cand, lost)
            cand, fixed_t, fixed_f, ramified = self._propagate(cand, lost, fixed_t, fixed_f, ramified)
        bad = self._violated_near(cand, cand ^ bits)
        if bad is not None:
            raise InconsistentSuccessorError(f"constraint `{bad}` contradicts the effects")
        if ramified:
            lost = self._unsupported(bits, cand, et, ef, ramified)
            if lost:
                atoms = ", ".join(str(x) for x in self.universe.atoms_of(lost))
                raise InconsistentSuccessorError(f"no support for ramified change of {atoms}")
        return cand

    def _propagate(self, cand: int, work: int, fixed_t: int, fixed_f: int, ramified: int):
        """Fire state constraints touching ``work`` until nothing changes."""
        cons, by_atom = self.cons, self.by_atom
        while work:
            while work:
                low = work & -work
                work ^= low
                for ci in by_atom.get(low.bit_length() - 1, ()):
                    hb, hp, pos, neg = cons[ci]
                    if cand & pos != pos or cand & neg:
                        continue
                    if hp and not cand & hb:
                        if fixed_f & hb:
                            continue  # may be resolved later; checked by the caller
                        cand |= hb
                        fixed_t |= hb
                    elif not hp and cand & hb:
                        if fixed_t & hb:
                            continue
                        cand &= ~hb
                        fixed_f |= hb
                    else:
                        continue
                    ramified |= hb
                    work |= hb
            if self.rules and ramified:
                new = self.rederive(cand, ramified)
                work = new ^ cand
                cand = new
        return cand, fixed_t, fixed_f, ramified

    def _unsupported(self, before: int, after: int, et: int, ef: int, ramified: int) -> int:
        """Ramified atoms of ``after`` not derivable from the effects and unchanged literals."""
        ramified &= after ^ before
        if not ramified:
            return 0
        changed = (after ^ before) & ~self.defined_mask
        full = (1 << len(self.universe)) - 1
        known_t = (after & ~changed) | et | (after & self.defined_mask)
        known_f = (~after & full & ~changed) | ef | (~after & full & self.defined_mask)
        pending = ramified
        progress = True
        while pending and progress:
            progress = False
            for i in _bits(pending):
                hb = 1 << i
                for ci in self.by_head.get(i, ()):
                    _, hp, pos, neg = self.cons[ci]
                    if hp == bool(after & hb) and known_t & pos == pos and known_f & neg == neg:
                        if hp:
                            known_t |= hb
                        else:
                            known_f |= hb
                        pending &= ~hb
                        progress = True
                        break
        return pending

    def try_apply(self, bits: int, acts: Iterable[int]) -> int | None:
        try:
            return self.apply(bits, acts)
        except (EffectConflictError, InconsistentSuccessorError):
            return None

    # ------------------------------------------------------------ states
    def state(self, true_atoms: Iterable[Atom]) -> State:
        """A closed state whose true inertial atoms are ``true_atoms``."""
        bits = 0
        idx = self.universe.index
        for a in true_atoms:
            if a not in idx:
                raise InvariantError(f"atom {a} is not in the universe")
            if self.universe.kinds[idx[a]] is Kind.INERTIAL:
                bits |= 1 << idx[a]
        return State(self.universe, self.close(bits))

    def project(self, state: State) -> State:
        """Restrict a state from a larger universe to this system's atoms."""
        if state.universe is self.universe:
            return state
        idx = self.universe.index
        bits = 0
        for a in state.true_atoms(Kind.INERTIAL):
            i = idx.get(a)
            if i is not None and self.universe.kinds[i] is Kind.INERTIAL:
                bits |= 1 << i
        return State(self.universe, self.close(bits))

    def wrap(self, bits: int) -> State:
        return State(self.universe, bits)


# -------------------------------------------------------------- grounding

def _arg_tuples(sorts, arg_sorts, allowed) -> list[tuple[str, ...]]:
    pools = [[o for o in sorts.objects(s) if allowed is None or o in allowed] for s in arg_sorts]
    return list(itertools.product(*pools))


def _instantiate(ax: Axiom, sorts, allowed, static_pred: set[str], static_true: set[Atom]):
    """Yield variable bindings satisfying the axiom's comparisons and static literals."""
    variables = [v for v, _ in ax.variables]
    pools = {v: [o for o in sorts.objects(s) if allowed is None or o in allowed] for v, s in ax.variables}
    checks: list[tuple[int, object]] = []
    position = {v: i for i, v in enumerate(variables)}
    for b in ax.body:
        if isinstance(b, Cmp):
            terms = [t for t in (b.left, b.right) if is_var(t)]
        elif b.atom.pred in static_pred:
            terms = [t for t in b.atom.args if is_var(t)]
        else:
            continue
        checks.append((max((position[t] for t in terms), default=-1), b))
    by_depth: dict[int, list] = {}
    for d, b in checks:
        by_depth.setdefault(d, []).append(b)
    env: dict[str, str] = {}

    def val(t):
        return env[t] if is_var(t) else t

    def ok(b) -> bool:
        if isinstance(b, Cmp):
            return (val(b.left) == val(b.right)) == b.equal
        a = Atom(b.atom.pred, tuple(val(t) for t in b.atom.args))
        return (a in static_true) == b.positive

    if any(not ok(b) for b in by_depth.get(-1, [])):
        return

    def rec(i):
        if i == len(variables):
            yield dict(env)
            return
        v = variables[i]
        for o in pools[v]:
            env[v] = o
            if all(ok(b) for b in by_depth.get(i, ())):
                yield from rec(i + 1)
        env.pop(v, None)

    yield from rec(0)


def _ground_lit(l: SLit, env) -> Literal:
    return Literal(Atom(l.atom.pred, tuple(env.get(t, t) for t in l.atom.args)), l.positive)


def ground(domain: DomainDescription, resolution: str = "coarse", only: Iterable[str] | None = None,
           atom_budget: int = DEFAULT_ATOM_BUDGET) -> TransitionSystem:
    """Instantiate every schematic axiom of ``resolution`` over the object universe.

    ``only`` restricts the universe to the given constants (used when zooming
    and when planning over goal-relevant objects).
    """
    allowed = None if only is None else frozenset(only)
    cache = domain.__dict__.setdefault("_grounded", {})
    key = (resolution, allowed, atom_budget)
    if key not in cache:
        if len(cache) > 512:
            cache.clear()
        cache[key] = _ground(domain, resolution, allowed, atom_budget)
    return cache[key]


def _ground(domain, resolution, allowed, atom_budget) -> TransitionSystem:
    sorts = domain.sorts
    fluents = domain.fluents(resolution)
    statics = domain.statics(resolution)
    action_decls = domain.actions(resolution)
    decls = list(statics.values()) + list(fluents.values())
    size = {d.name: math.prod(len([o for o in sorts.objects(s) if allowed is None or o in allowed])
                              for s in d.arg_sorts) for d in decls}
    total = sum(size.values())
    if total > atom_budget:
        biggest = sorted(size.items(), key=lambda kv: -kv[1])[:3]
        raise GroundingBudgetError(
            f"grounding would create {total} atoms (budget {atom_budget}); largest: "
            + ", ".join(f"{n}={c}" for n, c in biggest))
    atoms, kinds = [], []
    for d in decls:
        for args in _arg_tuples(sorts, d.arg_sorts, allowed):
            atoms.append(Atom(d.name, args))
            kinds.append(d.kind)
    universe = Universe(atoms, kinds)
    static_pred = set(statics)
    static_true = {f for f in domain.facts if f in universe.index}
    axioms = domain.axioms(resolution)
    # statics derived by rules over statics
    static_rules = [ax for ax in axioms if ax.kind == CONSTRAINT and ax.head.atom.pred in static_pred]
    changed = True
    while changed:
        changed = False
        for ax in static_rules:
            for env in _instantiate(ax, sorts, allowed, static_pred, static_true):
                h = _ground_lit(ax.head, env)
                if h.positive and h.atom in universe.index and h.atom not in static_true:
                    static_true.add(h.atom)
                    changed = True
    actions = sorted((Atom(d.name, args) for d in action_decls.values()
                      for args in _arg_tuples(sorts, d.arg_sorts, allowed)), key=str)
    action_set = set(actions)
    ground_axioms: list[GroundAxiom] = []
    for ax in axioms:
        if ax in static_rules:
            continue
        for env in _instantiate(ax, sorts, allowed, static_pred, static_true):
            body = tuple(_ground_lit(b, env) for b in ax.body
                         if isinstance(b, SLit) and b.atom.pred not in static_pred)
            if any(b.atom not in universe.index and b.atom not in action_set for b in body):
                continue
            if ax.kind == CAUSAL:
                act = Atom(ax.action.pred, tuple(env.get(t, t) for t in ax.action.args))
                head = _ground_lit(ax.head, env)
                if act not in action_set or head.atom not in universe.index:
                    continue
                ground_axioms.append(GroundAxiom(CAUSAL, head, body, act))
            elif ax.kind == EXECUTABILITY:
                head = _ground_lit(ax.head, env)
                if head.atom not in action_set:
                    continue
                ground_axioms.append(GroundAxiom(EXECUTABILITY, head, body))
            else:
                head = _ground_lit(ax.head, env)
                if head.atom not in universe.index:
                    continue
                ground_axioms.append(GroundAxiom(CONSTRAINT, head, body))
    kinds_by_name = {d.name: d.actor for d in action_decls.values()}
    return TransitionSystem(resolution, universe, actions, kinds_by_name, ground_axioms, static_true)


# ------------------------------------------------------------ public API

def successor(ts: TransitionSystem, s: State, actions: Iterable[Atom]) -> State:
    """State reached from ``s`` when ``actions`` occur simultaneously."""
    acts = [ts.action_id(a) for a in actions]
    actors = [ts.actions[a].args[0] for a in acts]
    if len(set(actors)) != len(actors):
        raise InvariantError("at most one action per agent per step")
    if s.universe is not ts.universe:
        raise InvariantError("state belongs to a different universe")
    concurrent = frozenset(acts)
    for a in acts:
        if not ts.executable(s.bits, a, concurrent - {a}):
            raise NotExecutableError(ts.actions[a], ts.blocking(s.bits, a, concurrent - {a}))
    return State(ts.universe, ts.apply(s.bits, acts))

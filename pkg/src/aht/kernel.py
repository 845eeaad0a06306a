"""Core vocabulary: sorts, atoms, literals, states, histories and goals.

States are bitsets over a fixed, ordered universe of grounded atoms.  Every
atom is inertial, defined or static.  Defined atoms are never stored by the
caller; they are derived by :func:`close_state` under a closed-world reading.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Mapping, Sequence


class AHTError(Exception):
    """Base class for every error raised by this package."""


class UniverseMismatchError(AHTError, KeyError):
    pass


class InconsistentStateError(AHTError):
    def __init__(self, constraint, message: str | None = None):
        self.constraint = constraint
        super().__init__(message or f"state violates constraint: {constraint}")


class NonUniqueFixpointError(AHTError):
    pass


class InvariantError(AHTError, ValueError):
    pass


class Kind(str, Enum):
    INERTIAL = "inertial"
    DEFINED = "defined"
    STATIC = "static"


@dataclass(frozen=True, order=True)
class Atom:
    pred: str
    args: tuple[str, ...] = ()

    def __str__(self) -> str:
        if not self.args:
            return self.pred
        return f"{self.pred}({','.join(self.args)})"


@dataclass(frozen=True, order=True)
class Literal:
    atom: Atom
    positive: bool = True

    def __neg__(self) -> "Literal":
        return Literal(self.atom, not self.positive)

    def __str__(self) -> str:
        return ("" if self.positive else "-") + str(self.atom)


def lit(text: str) -> Literal:
    """Parse a grounded literal such as ``-at(robot,kitchen)``."""
    text = text.strip()
    positive = not text.startswith("-")
    text = text.lstrip("-").strip()
    if "(" in text:
        pred, rest = text.split("(", 1)
        args = tuple(a.strip() for a in rest.rstrip(")").split(",") if a.strip())
    else:
        pred, args = text, ()
    return Literal(Atom(pred.strip(), args), positive)


# ---------------------------------------------------------------- signature

@dataclass
class SortTree:
    sorts: set[str] = field(default_factory=set)
    parent: dict[str, str] = field(default_factory=dict)
    members: dict[str, set[str]] = field(default_factory=dict)

    def add_sort(self, name: str, parent: str | None = None) -> None:
        if parent is not None:
            if parent not in self.sorts:
                raise InvariantError(f"unknown parent sort {parent!r}")
            # walking up from the parent must never reach the new sort
            if name in self.ancestors(parent) or name == parent:
                raise InvariantError(f"sort cycle through {name!r}")
            self.parent[name] = parent
        self.sorts.add(name)
        self.members.setdefault(name, set())

    def add_member(self, sort: str, obj: str) -> None:
        if sort not in self.sorts:
            raise InvariantError(f"unknown sort {sort!r}")
        owner = self.sort_of(obj)
        if owner is not None and owner != sort:
            raise InvariantError(f"{obj!r} already belongs to sort {owner!r}")
        self.members[sort].add(obj)

    def ancestors(self, sort: str) -> list[str]:
        out, seen = [], {sort}
        while sort in self.parent:
            sort = self.parent[sort]
            if sort in seen:
                raise InvariantError("sort hierarchy is cyclic")
            seen.add(sort)
            out.append(sort)
        return out

    def is_subsort(self, sub: str, sup: str) -> bool:
        return sub == sup or sup in self.ancestors(sub)

    def children(self, sort: str) -> list[str]:
        return sorted(s for s, p in self.parent.items() if p == sort)

    def objects(self, sort: str) -> list[str]:
        """All constants of ``sort`` including those of its subsorts, sorted."""
        out = set(self.members.get(sort, ()))
        for child in self.children(sort):
            out.update(self.objects(child))
        return sorted(out)

    def sort_of(self, obj: str) -> str | None:
        for s, objs in self.members.items():
            if obj in objs:
                return s
        return None

    def belongs(self, obj: str, sort: str) -> bool:
        s = self.sort_of(obj)
        return s is not None and self.is_subsort(s, sort)

    def copy(self) -> "SortTree":
        return SortTree(set(self.sorts), dict(self.parent),
                        {k: set(v) for k, v in self.members.items()})


@dataclass(frozen=True)
class FluentDecl:
    name: str
    arg_sorts: tuple[str, ...]
    kind: Kind


@dataclass(frozen=True)
class ActionDecl:
    name: str
    arg_sorts: tuple[str, ...]
    actor: str  # "agent" or "exo"


# ------------------------------------------------------------------ states

class Universe:
    """An ordered set of grounded atoms, each tagged with its kind."""

    def __init__(self, atoms: Sequence[Atom], kinds: Sequence[Kind]):
        if len(atoms) != len(kinds):
            raise InvariantError("atoms and kinds differ in length")
        self.atoms: tuple[Atom, ...] = tuple(atoms)
        self.kinds: tuple[Kind, ...] = tuple(Kind(k) for k in kinds)
        self.index: dict[Atom, int] = {a: i for i, a in enumerate(self.atoms)}
        if len(self.index) != len(self.atoms):
            raise InvariantError("duplicate atom in universe")
        self.mask = {k: 0 for k in Kind}
        for i, k in enumerate(self.kinds):
            self.mask[k] |= 1 << i

    def __len__(self) -> int:
        return len(self.atoms)

    def __contains__(self, atom: Atom) -> bool:
        return atom in self.index

    def idx(self, atom: Atom) -> int:
        try:
            return self.index[atom]
        except KeyError:
            raise UniverseMismatchError(f"atom {atom} is not in the universe") from None

    def kind(self, atom: Atom) -> Kind:
        return self.kinds[self.idx(atom)]

    def bits_of(self, atoms: Iterable[Atom]) -> int:
        b = 0
        for a in atoms:
            b |= 1 << self.idx(a)
        return b

    def atoms_of(self, bits: int) -> Iterator[Atom]:
        i = 0
        while bits:
            if bits & 1:
                yield self.atoms[i]
            bits >>= 1
            i += 1


@dataclass(frozen=True)
class State:
    universe: Universe = field(compare=False, hash=False, repr=False)
    bits: int

    @classmethod
    def from_true(cls, universe: Universe, atoms: Iterable[Atom]) -> "State":
        return cls(universe, universe.bits_of(atoms))

    def value(self, atom: Atom) -> bool:
        return bool(self.bits >> self.universe.idx(atom) & 1)

    def true_atoms(self, kind: Kind | None = None) -> list[Atom]:
        bits = self.bits if kind is None else self.bits & self.universe.mask[kind]
        return list(self.universe.atoms_of(bits))

    def as_dict(self) -> dict[Atom, bool]:
        return {a: bool(self.bits >> i & 1) for i, a in enumerate(self.universe.atoms)}

    def __str__(self) -> str:
        return "{" + ", ".join(str(a) for a in self.true_atoms()) + "}"


def holds(state: State, literal: Literal) -> bool:
    return state.value(literal.atom) == literal.positive


@dataclass(frozen=True)
class GroundConstraint:
    head: Literal
    body: tuple[Literal, ...]

    def __str__(self) -> str:
        return f"{self.head} if {', '.join(map(str, self.body))}" if self.body else str(self.head)


def _masks(universe: Universe, body: Iterable[Literal]) -> tuple[int, int]:
    pos = neg = 0
    for l in body:
        if l.positive:
            pos |= 1 << universe.idx(l.atom)
        else:
            neg |= 1 << universe.idx(l.atom)
    return pos, neg


def _defined_fixpoint(rules, bits: int) -> int:
    changed = True
    while changed:
        changed = False
        for head, pos, neg in rules:
            if not bits & head and bits & pos == pos and not bits & neg:
                bits |= head
                changed = True
    return bits


def close_state(partial: Mapping[Atom, bool] | State,
                constraints: Iterable[GroundConstraint],
                universe: Universe | None = None) -> State:
    """Extend ``partial`` to a complete, constraint-closed state.

    Inertial and static atoms are taken from ``partial`` (missing ones read as
    false); defined atoms are recomputed as the least fixpoint of the
    constraints whose head is a positive defined literal.  Any other
    constraint whose body holds must already have its head satisfied.
    """
    if isinstance(partial, State):
        universe = partial.universe
        base = partial.bits & ~universe.mask[Kind.DEFINED]
    else:
        if universe is None:
            raise InvariantError("a universe is required for a partial assignment")
        base = universe.bits_of(a for a, v in partial.items()
                                if v and universe.kind(a) is not Kind.DEFINED)
    defined_mask = universe.mask[Kind.DEFINED]
    rules, checks, nonmonotone = [], [], False
    for c in constraints:
        head_i = universe.idx(c.head.atom)
        pos, neg = _masks(universe, c.body)
        if universe.kinds[head_i] is Kind.DEFINED and c.head.positive:
            rules.append((1 << head_i, pos, neg))
            nonmonotone |= bool(neg & defined_mask)
        else:
            checks.append((c, head_i, pos, neg))
    bits = _defined_fixpoint(rules, base)
    if nonmonotone:
        supported = base
        for head, pos, neg in rules:
            if bits & pos == pos and not bits & neg:
                supported |= head
        if supported != bits or _defined_fixpoint(rules[::-1], base) != bits:
            raise NonUniqueFixpointError("defined fluents depend on their own negation")
    for c, head_i, pos, neg in checks:
        if bits & pos == pos and not bits & neg:
            if bool(bits >> head_i & 1) != c.head.positive:
                raise InconsistentStateError(c)
    return State(universe, bits)


# ------------------------------------------------------------------- goals

@dataclass(frozen=True)
class Goal:
    conjuncts: frozenset[Literal]
    label: str = ""

    def __post_init__(self):
        if not self.conjuncts:
            raise InvariantError(f"goal {self.label!r} has no conjuncts")
        object.__setattr__(self, "conjuncts", frozenset(self.conjuncts))

    @classmethod
    def of(cls, label: str, *literals: Literal | str) -> "Goal":
        return cls(frozenset(lit(l) if isinstance(l, str) else l for l in literals), label)

    def sorted(self) -> list[Literal]:
        return sorted(self.conjuncts, key=str)

    def __str__(self) -> str:
        return f"{self.label}: " + ", ".join(map(str, self.sorted()))


def goal_satisfied(state: State, goal: Goal) -> bool:
    return all(holds(state, c) for c in goal.conjuncts)


# ----------------------------------------------------------------- history

@dataclass(frozen=True, order=True)
class Obs:
    step: int
    literal: Literal


@dataclass(frozen=True, order=True)
class Hpd:
    step: int
    action: Atom


@dataclass(frozen=True)
class HistoryRecord:
    entries: tuple[Obs | Hpd, ...] = ()
    initial_defaults: tuple[Literal, ...] = ()

    def __post_init__(self):
        for e in self.entries:
            if e.step < 0:
                raise InvariantError("history steps must be non-negative")
        object.__setattr__(self, "entries",
                           tuple(sorted(self.entries, key=lambda e: (e.step, isinstance(e, Hpd), str(e)))))

    def observations(self, step: int | None = None) -> list[Obs]:
        return [e for e in self.entries if isinstance(e, Obs) and (step is None or e.step == step)]

    def actions_at(self, step: int) -> list[Atom]:
        return [e.action for e in self.entries if isinstance(e, Hpd) and e.step == step]

    @property
    def last_step(self) -> int:
        return max((e.step for e in self.entries), default=0)

    def with_entry(self, entry: Obs | Hpd) -> "HistoryRecord":
        return HistoryRecord(self.entries + (entry,), self.initial_defaults)

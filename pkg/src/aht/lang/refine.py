"""Coarse abstraction of fine states and zooming to the relevant fine part."""
from __future__ import annotations

from ..kernel import AHTError, Atom, Goal, Kind, Literal, State
from .grounding import NotExecutableError, TransitionSystem, ground
from .syntax import DomainDescription


class UnrefinableActionError(AHTError):
    pass


def abstraction(coarse_ts: TransitionSystem, s_fine: State) -> State:
    """The coarse state described by a fine state.

    Coarse inertial atoms take the value of the fine atom with the same name;
    fine defined atoms (``at`` from ``at*`` via the component bridge) are how
    the coarse location atoms are obtained.
    """
    fine_index = s_fine.universe.index
    true = []
    for i, a in enumerate(coarse_ts.universe.atoms):
        if coarse_ts.universe.kinds[i] is not Kind.INERTIAL:
            continue
        j = fine_index.get(a)
        if j is not None and s_fine.bits >> j & 1:
            true.append(a)
    return coarse_ts.state(true)


def _objects_of(domain: DomainDescription, args, sorts_of_interest=("object", "appliance")) -> set[str]:
    return {x for x in args if any(s in domain.sorts.sorts and domain.sorts.belongs(x, s)
                                    for s in sorts_of_interest)}


def relevant_constants(domain: DomainDescription, coarse_action: Atom, s_coarse: State,
                       region_sort: str = "region", relation: str = "component") -> set[str]:
    """Constants a fine system needs in order to implement ``coarse_action``.

    That is the acting agent, the objects and appliances the action names,
    whatever the agent holds, the regions that are mentioned or occupied by
    those, and every fine location inside those regions.
    """
    actor = coarse_action.args[0]
    keep = {actor}
    things = _objects_of(domain, coarse_action.args[1:])
    for a in s_coarse.true_atoms(Kind.INERTIAL):
        if a.pred == "holding" and a.args[0] == actor:
            things.add(a.args[1])
    keep |= things
    regions = {x for x in coarse_action.args if domain.sorts.belongs(x, region_sort)}
    for a in s_coarse.true_atoms():
        if a.args and a.args[0] in keep | things and len(a.args) == 2 and domain.sorts.belongs(a.args[1], region_sort):
            regions.add(a.args[1])
    for a in domain.facts:
        if a.args and a.args[0] in things and len(a.args) == 2 and domain.sorts.belongs(a.args[1], region_sort):
            regions.add(a.args[1])
    # appliances holding the named objects must be reachable too
    for a in s_coarse.true_atoms(Kind.INERTIAL):
        if a.pred == "in" and a.args[0] in things:
            keep.add(a.args[1])
    for a in domain.facts:
        if a.args and a.args[0] in keep and len(a.args) == 2 and domain.sorts.belongs(a.args[1], region_sort):
            regions.add(a.args[1])
    keep |= regions
    keep |= {loc for loc, reg in domain.component_map(relation).items() if reg in regions}
    return keep


def zoom(domain: DomainDescription, coarse_action: Atom, s_fine: State,
         fine_ts: TransitionSystem | None = None) -> tuple[TransitionSystem, Goal | None]:
    """Fine system over the part of the world ``coarse_action`` touches, and its fine goal.

    The goal is the set of coarse literals the action changes; since coarse
    locations are defined from fine ones, reaching the goal in the fine
    system implies the coarse effect.  ``None`` is returned as goal when the
    effect already holds.
    """
    coarse_ts = ground(domain, "coarse")
    implementers = [f for f, c in domain.refines.items() if c == coarse_action.pred]
    if not implementers:
        raise UnrefinableActionError(f"no fine action implements {coarse_action}")
    s_c = abstraction(coarse_ts, s_fine)
    a = coarse_ts.action_id(coarse_action)
    if not coarse_ts.executable(s_c.bits, a):
        raise NotExecutableError(coarse_action, coarse_ts.blocking(s_c.bits, a))
    after = coarse_ts.apply(s_c.bits, [a])
    changed = (after ^ s_c.bits) & ~coarse_ts.static_bits
    keep = relevant_constants(domain, coarse_action, s_c)
    ts = ground(domain, "fine", only=keep)
    conjuncts = set()
    for atom in coarse_ts.universe.atoms_of(changed):
        if atom in ts.universe:
            conjuncts.add(Literal(atom, bool(after >> coarse_ts.universe.index[atom] & 1)))
    if not conjuncts:
        return ts, None
    return ts, Goal(frozenset(conjuncts), f"refine {coarse_action}")

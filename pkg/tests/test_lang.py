import pytest
from hypothesis import given, settings, strategies as st

from aht.kernel import Atom, Kind, lit
from aht.lang.grounding import (CAUSAL, CONSTRAINT, EXECUTABILITY, EffectConflictError,
                                GroundingBudgetError, NotExecutableError, ground, successor)
from aht.lang.refine import abstraction, zoom
from aht.lang.syntax import (DomainSyntaxError, SemanticError, SortError, parse_domain, pretty,
                             structurally_equal)
from aht.planner import plan
from conftest import atoms

TINY = """
sorts
  agent.
  ad_hoc_agent < agent.
  appliance.
  object.
  place.
objects
  robot, helper : ad_hoc_agent.
  %s
  kitchen, bedroom, hall : place.
fluents inertial
  at(agent, place).
  opened(appliance).
  on(object, appliance).
actions agent
  open(ad_hoc_agent, appliance).
  grab(ad_hoc_agent, object).
axioms
  open(A, E) causes opened(E).
  -at(A, L1) if at(A, L2), L1 != L2.
  impossible grab(A, O) if on(O, E), -opened(E).
"""


def tiny(appliances=("fridge",)):
    objs = (", ".join(appliances) + " : appliance.\n  eggs : object.") if appliances else "eggs : object."
    return parse_domain(TINY % objs)


def test_parse_axiom_kinds():
    d = tiny()
    kinds = [ax.kind for ax in d.coarse_axioms]
    assert kinds == [CAUSAL, CONSTRAINT, EXECUTABILITY]
    causal, constraint, cond = d.coarse_axioms
    assert str(causal.head) == "opened(E)"
    assert str(cond.head) == "grab(A, O)"
    assert len(constraint.body) == 2


def test_grounding_counts_constraint_instances():
    ts = ground(tiny(), "coarse")
    unique = [g for g in ts.ground_axioms if g.kind == CONSTRAINT]
    assert len(unique) == 2 * 3 * 2


def test_empty_sort_grounds_no_causal_laws():
    ts = ground(tiny(appliances=()), "coarse")
    assert not [g for g in ts.ground_axioms if g.kind == CAUSAL]


def test_grounding_budget_guard():
    with pytest.raises(GroundingBudgetError):
        ground(tiny(), "coarse", atom_budget=3)


def test_shipped_house_grounds_below_budget(scenario, household_domain):
    from aht.simworld import World
    world = World(scenario, ("human", "robot1"))
    assert len(world.ts.universe) < 200_000


@pytest.mark.parametrize("text, error", [
    ("sorts\n  a.\nfluents inertial\n  f(b).\n", SortError),
    ("sorts\n  a.\nobjects\n  x : a.\nfluents defined\n  d(a).\nactions agent\n  act(a).\n"
     "axioms\n  act(X) causes d(X).\n", SemanticError),
    ("sorts\n  a.\nfluents inertial\n  f(a)\n", DomainSyntaxError),
])
def test_parse_errors(text, error):
    with pytest.raises((error, SortError, SemanticError)) as err:
        parse_domain(text)
    assert isinstance(err.value, error)


def test_syntax_error_reports_position():
    with pytest.raises(DomainSyntaxError) as err:
        parse_domain("sorts\n  a.\nfluents inertial\n  f(a) g.\n")
    assert err.value.line == 4


def test_unstratified_definition_rejected():
    text = ("sorts\n  a.\nobjects\n  x : a.\nfluents inertial\n  p(a).\nfluents defined\n  d(a).\n"
            "axioms\n  d(X) if p(X), -d(X).\n")
    with pytest.raises(SemanticError):
        parse_domain(text)


def test_pretty_round_trip(household_domain):
    again = parse_domain(pretty(household_domain))
    assert structurally_equal(household_domain, again)


# ------------------------------------------------------------------ successor

def test_successor_open_fridge(coarse_ts):
    s = coarse_ts.state(atoms("at(robot,kitchen)", "in(eggs,fridge)", "at(alice,livingroom)"))
    s2 = successor(coarse_ts, s, atoms("open(robot,fridge)"))
    assert s2.value(lit("opened(fridge)").atom)
    assert (s2.bits ^ s.bits) == 1 << coarse_ts.universe.idx(lit("opened(fridge)").atom)


def test_successor_grab_from_closed_fridge_blocked(coarse_ts):
    s = coarse_ts.state(atoms("at(robot,kitchen)", "in(eggs,fridge)"))
    with pytest.raises(NotExecutableError) as err:
        successor(coarse_ts, s, atoms("grab(robot,eggs)"))
    assert "opened(fridge)" in str(err.value.condition)


def test_successor_empty_action_set_is_inertia(coarse_ts):
    s = coarse_ts.state(atoms("at(robot,kitchen)", "loc(book,library)"))
    assert successor(coarse_ts, s, []) == s


def test_successor_effect_conflict(coarse_ts):
    s = coarse_ts.state(atoms("at(robot,kitchen)", "at(alice,kitchen)", "opened(fridge)"))
    acts = [coarse_ts.action_id(a) for a in atoms("open(robot,fridge)", "exo_close(alice,fridge)")]
    with pytest.raises(EffectConflictError):
        coarse_ts.apply(s.bits, acts)


def test_ramification_moves_held_object(coarse_ts):
    s = coarse_ts.state(atoms("at(robot,kitchen)", "loc(eggs,kitchen)"))
    s = successor(coarse_ts, s, atoms("grab(robot,eggs)"))
    assert not s.value(lit("loc(eggs,kitchen)").atom)
    s = successor(coarse_ts, s, atoms("move(robot,livingroom)"))
    s = successor(coarse_ts, s, atoms("put(robot,eggs)"))
    assert s.value(lit("loc(eggs,livingroom)").atom)


def _reachable(ts, s0, limit=400):
    seen, frontier = {s0.bits}, [s0]
    while frontier and len(seen) < limit:
        s = frontier.pop()
        for a in ts.actions_of("robot"):
            if ts.executable(s.bits, a):
                nxt = ts.try_apply(s.bits, [a])
                if nxt is not None and nxt not in seen:
                    seen.add(nxt)
                    frontier.append(ts.wrap(nxt))
    return [ts.wrap(b) for b in sorted(seen)]


def test_frame_property_on_reachable_states(coarse_ts):
    s0 = coarse_ts.state(atoms("at(robot,livingroom)", "at(alice,library)", "in(eggs,fridge)",
                               "loc(book,library)"))
    inertial = coarse_ts.inertial_mask
    for s in _reachable(coarse_ts, s0):
        for a in coarse_ts.actions_of("robot"):
            if not coarse_ts.executable(s.bits, a):
                continue
            nxt = coarse_ts.try_apply(s.bits, [a])
            if nxt is None:
                continue
            touched = 0
            for g in coarse_ts.laws_by_action[a]:
                touched |= 1 << coarse_ts.universe.idx(g.head.atom)
            for c in coarse_ts.ground_constraints:
                touched |= 1 << coarse_ts.universe.idx(c.head.atom)
            assert (nxt ^ s.bits) & inertial & ~touched == 0
            assert coarse_ts.violated(nxt) is None


# ---------------------------------------------------------------------- zoom

def fine_start(fine_ts, *extra):
    return fine_ts.state(atoms("at*(robot,sofa)", "at*(alice,shelf)", "in(eggs,fridge)", "on(book,shelf)",
                               *extra))


def test_zoom_move_restricts_to_regions(small_house, fine_ts):
    s = fine_start(fine_ts)
    ts, goal = zoom(small_house, lit("move(robot,kitchen)").atom, s)
    places = {a.args[1] for a in ts.universe.atoms if a.pred == "at*"}
    assert places == {"sofa", "kitchen_table", "counter"}
    assert lit("at(robot,kitchen)") in goal.conjuncts


def test_zoom_grab_needs_colocation(small_house, fine_ts):
    s = fine_start(fine_ts, "opened(fridge)")
    s = fine_ts.state([a for a in s.true_atoms(Kind.INERTIAL) if a.pred != "at*"]
                      + atoms("at*(robot,kitchen_table)"))
    ts, goal = zoom(small_house, lit("grab(robot,eggs)").atom, s)
    local = ts.project(s)
    with pytest.raises(NotExecutableError):
        successor(ts, local, atoms("grab(robot,eggs)"))
    assert plan(ts, local, goal, 4, actor="robot").found


def test_zoom_rejects_inexecutable_coarse_action(small_house, fine_ts):
    with pytest.raises(NotExecutableError):
        s = fine_ts.state(atoms("at*(robot,counter)", "in(eggs,fridge)"))
        zoom(small_house, lit("move(robot,library)").atom, s)


def test_coarse_fine_soundness_for_move_and_grab(small_house, fine_ts, coarse_ts):
    """Every coarse move/grab from a reachable state is implemented by its zoomed fine plan."""
    starts = [fine_start(fine_ts, "opened(fridge)"), fine_start(fine_ts)]
    checked = 0
    for s_fine in starts:
        s_c = abstraction(coarse_ts, s_fine)
        for a in coarse_ts.actions_of("robot"):
            act = coarse_ts.actions[a]
            if act.pred not in ("move", "grab") or not coarse_ts.executable(s_c.bits, a):
                continue
            expected = coarse_ts.apply(s_c.bits, [a])
            ts, goal = zoom(small_house, act, s_fine)
            state = s_fine
            if goal is not None:
                p = plan(ts, ts.project(s_fine), goal, 8, actor="robot")
                assert p.found
                for x in p.actions():
                    state = successor(fine_ts, state, [x])
            assert abstraction(coarse_ts, state).bits == expected
            checked += 1
    assert checked >= 4


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3))
def test_grounding_monotone_in_objects(extra):
    small = tiny(("fridge",))
    bigger = tiny(("fridge",) + tuple(f"oven{i}" for i in range(extra)))
    a = {str(g) for g in ground(small, "coarse").ground_axioms}
    b = {str(g) for g in ground(bigger, "coarse").ground_axioms}
    assert a <= b

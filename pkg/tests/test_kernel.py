import random

import pytest
from hypothesis import given, settings, strategies as st

from aht.kernel import (Atom, Goal, GroundConstraint, HistoryRecord, Hpd, InconsistentStateError,
                        InvariantError, Kind, Literal, NonUniqueFixpointError, Obs, SortTree, State,
                        Universe, UniverseMismatchError, close_state, goal_satisfied, holds, lit)

AT_K = lit("at(robot,kitchen)").atom
AT_B = lit("at(robot,bedroom)").atom


def loc_universe():
    atoms = [AT_K, AT_B, lit("at*(robot,kitchen_table)").atom, lit("at*(robot,bed)").atom]
    kinds = [Kind.DEFINED, Kind.DEFINED, Kind.INERTIAL, Kind.INERTIAL]
    return Universe(atoms, kinds)


def bridge_constraints():
    return [GroundConstraint(lit("at(robot,kitchen)"), (lit("at*(robot,kitchen_table)"),)),
            GroundConstraint(lit("at(robot,bedroom)"), (lit("at*(robot,bed)"),))]


def test_holds_lookup_and_negation():
    u = Universe([AT_K, AT_B], [Kind.INERTIAL, Kind.INERTIAL])
    s = State.from_true(u, [AT_K])
    assert holds(s, lit("at(robot,kitchen)"))
    assert not holds(s, lit("-at(robot,kitchen)"))


def test_holds_unknown_atom():
    u = Universe([AT_K], [Kind.INERTIAL])
    with pytest.raises(UniverseMismatchError):
        holds(State.from_true(u, []), lit("at(robot,garage)"))


def test_close_state_derives_region_from_place():
    u = loc_universe()
    s = close_state({lit("at*(robot,kitchen_table)").atom: True}, bridge_constraints(), u)
    assert s.value(AT_K) and not s.value(AT_B)


def test_close_state_two_places_inconsistent():
    u = Universe([AT_K, AT_B], [Kind.INERTIAL, Kind.INERTIAL])
    unique = [GroundConstraint(lit("-at(robot,bedroom)"), (lit("at(robot,kitchen)"),))]
    with pytest.raises(InconsistentStateError) as err:
        close_state({AT_K: True, AT_B: True}, unique, u)
    assert err.value.constraint == unique[0]


def test_close_state_identity_without_constraints():
    u = Universe([AT_K, AT_B], [Kind.INERTIAL, Kind.INERTIAL])
    s = State.from_true(u, [AT_B])
    assert close_state(s, []) == s


def test_close_state_rejects_self_negating_definitions():
    p, d = Atom("p"), Atom("d")
    u = Universe([p, d], [Kind.INERTIAL, Kind.DEFINED])
    with pytest.raises(NonUniqueFixpointError):
        close_state({p: True}, [GroundConstraint(Literal(d), (Literal(p), Literal(d, False)))], u)


def test_goal_satisfied():
    u = Universe([lit("on(eggs,kitchen_table)").atom, lit("off(stove)").atom], [Kind.INERTIAL] * 2)
    s = State.from_true(u, [lit("on(eggs,kitchen_table)").atom])
    assert goal_satisfied(s, Goal.of("g", "on(eggs,kitchen_table)"))
    assert not goal_satisfied(s, Goal.of("g", "on(eggs,kitchen_table)", "off(stove)"))
    with pytest.raises(InvariantError):
        Goal(frozenset(), "empty")


def test_sort_tree_rejects_cycles_and_double_membership():
    t = SortTree()
    t.add_sort("thing")
    t.add_sort("object", "thing")
    t.add_member("object", "eggs")
    assert t.objects("thing") == ["eggs"]
    assert t.belongs("eggs", "thing")
    with pytest.raises(InvariantError):
        t.add_sort("thing", "object")
    t.add_sort("appliance", "thing")
    with pytest.raises(InvariantError):
        t.add_member("appliance", "eggs")


def test_history_orders_entries_and_rejects_negative_steps():
    h = HistoryRecord((Hpd(1, Atom("grab", ("robot", "book"))), Obs(0, lit("loc(book,library)"))))
    assert isinstance(h.entries[0], Obs) and h.last_step == 1
    with pytest.raises(InvariantError):
        HistoryRecord((Obs(-1, lit("p")),))


# ----------------------------------------------------------------- properties

@st.composite
def closure_problems(draw):
    """Random inertial/defined universes with defined rules over inertial atoms."""
    n_in = draw(st.integers(1, 5))
    n_def = draw(st.integers(0, 3))
    inertial = [Atom(f"p{i}") for i in range(n_in)]
    defined = [Atom(f"d{i}") for i in range(n_def)]
    u = Universe(inertial + defined, [Kind.INERTIAL] * n_in + [Kind.DEFINED] * n_def)
    rules = []
    for k, d in enumerate(defined):
        lower = inertial + defined[:k]
        for _ in range(draw(st.integers(1, 2))):
            body = draw(st.lists(st.sampled_from(lower), min_size=1, max_size=2, unique=True))
            signs = draw(st.lists(st.booleans(), min_size=len(body), max_size=len(body)))
            # defined atoms only occur positively in bodies
            rules.append(GroundConstraint(Literal(d), tuple(Literal(a, s or a in defined)
                                                            for a, s in zip(body, signs))))
    truth = draw(st.lists(st.booleans(), min_size=n_in, max_size=n_in))
    return u, rules, {a: v for a, v in zip(inertial, truth)}


@settings(max_examples=300, deadline=None)
@given(closure_problems(), st.randoms(use_true_random=False))
def test_close_state_idempotent_and_order_independent(problem, rnd):
    u, rules, partial = problem
    s = close_state(partial, rules, u)
    assert close_state(s, rules) == s
    shuffled = list(rules)
    rnd.shuffle(shuffled)
    assert close_state(partial, shuffled, u) == s
    for c in rules:
        if all(holds(s, l) for l in c.body):
            assert holds(s, c.head)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 15), st.integers(0, 3))
def test_holds_xor_negation(bits, i):
    u = Universe([Atom(f"p{k}") for k in range(4)], [Kind.INERTIAL] * 4)
    s = State(u, bits)
    a = u.atoms[i]
    assert holds(s, Literal(a)) != holds(s, Literal(a, False))


def test_literal_parse_roundtrip():
    rng = random.Random(3)
    for _ in range(50):
        args = tuple(rng.choice(["a", "b", "kitchen"]) for _ in range(rng.randint(0, 3)))
        l = Literal(Atom("f", args), rng.random() < 0.5)
        assert lit(str(l)) == l

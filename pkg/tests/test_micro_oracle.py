from hypothesis import given, settings, strategies as st

from aht.kernel import Atom, Goal, Literal
from aht.planner import plan
from oracle import _package, planner_agreement, random_micro, total_violations, transition_violations


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10**9), st.integers(1, 6))
def test_plan_length_equals_bfs_minimum(seed, horizon):
    m = random_micro(seed)
    ref, ambiguous = m.shortest(horizon)
    if ambiguous:
        return
    ts = _package(m)
    s0 = ts.state(Atom(p) for p in m.init)
    p = plan(ts, s0, Goal(frozenset(Literal(Atom(n), v) for n, v in m.goal), "g"), horizon, actor="r")
    assert (len(p) if p.found else None) == ref


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10**9))
def test_successor_matches_reference_semantics(seed):
    m = random_micro(seed)
    ts = _package(m)
    states = m.states()
    for s in states:
        bits = ts.state(Atom(p) for p in s if p in m.inertial).bits
        for a in m.actions:
            ai = ts.action_id(Atom(a, ("r",)))
            assert ts.executable(bits, ai) == m.executable(s, a)
            ref = m.successors(s, a, states)
            if len(ref) > 1:
                continue
            got = ts.try_apply(bits, [ai])
            got = None if got is None else frozenset(str(x) for x in ts.universe.atoms_of(got))
            assert got == (ref[0] if ref else None)


def test_seeded_sweeps_are_clean():
    agreement = planner_agreement(50, seed=11)
    assert agreement["agree"] == agreement["domains"] == 50
    assert total_violations(transition_violations(1000, seed=11)) == 0

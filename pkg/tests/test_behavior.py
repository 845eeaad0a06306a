import itertools
import random
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from aht.behavior import (NOOP, NONE, AgreementTracker, ArbiterNode, BehaviorEnsemble, Cue, CueVector,
                          FFTree, arbiter_depth, family_of, generate_cues, learn_ensemble, learn_fftree,
                          observe_and_maybe_revise, predict, read_traces, training_cost, write_traces)
from aht.harness import load_models
from aht.kernel import Atom, InvariantError
from aht.simworld import (HUMAN, AdHocAgent, PolicyConfig, ScriptedHuman, TeammateView, World,
                          extract_cues, generate_tasks, ground_family, run_episode)

TASKS = ("prepare_activities", "prepare_breakfast", "serve_snacks", "read_book")
PLACES = ("kitchen_table", "sofa", "desk", "bookshelf")
ACTIONS = (NONE, "move", "grab", "put", "open")


def random_cue_vector(rng: random.Random) -> CueVector:
    return CueVector(rng.choice(ACTIONS), rng.choice(ACTIONS), rng.choice(PLACES),
                     current_task=rng.choice(TASKS), previous_task=rng.choice((NONE,) + TASKS),
                     flags=(rng.random() < 0.5, rng.random() < 0.3, rng.random() < 0.3),
                     needed_here=rng.random() < 0.3, open_here=rng.random() < 0.2)


# --------------------------------------------------------------------- cues

@pytest.fixture(scope="module")
def world(scenario):
    return World(scenario, (HUMAN, "robot1"))


def test_first_step_cues_use_none(world, scenario):
    s = world.initial_state(0)
    cv = extract_cues(world, s, TeammateView(HUMAN), "prepare_breakfast", None, scenario.context("weekday_wfh"))
    assert cv.prev_action1 == cv.prev_action2 == NONE
    assert cv.flags == (True, False, False)


def test_cues_read_held_objects(world, scenario):
    s = world.initial_state(0)
    true = [a for a in s.true_atoms() if world.ts.universe.kind(a).value == "inertial"
            and not (a.pred in ("on", "in") and a.args[0] in ("eggs", "plate"))]
    s = world.ts.state(true + [Atom("holding", (HUMAN, "eggs")), Atom("holding", (HUMAN, "plate"))])
    cv = extract_cues(world, s, TeammateView(HUMAN, ["move", "grab"]), "prepare_breakfast", None,
                      scenario.context("weekday_wfh"))
    assert cv.held_by_agent == {"eggs", "plate"}
    assert (cv.prev_action1, cv.prev_action2) == ("grab", "move")


def test_family_of():
    assert family_of(Atom("exo_grab", (HUMAN, "eggs"))) == "grab"
    assert family_of(Atom("move*", ("robot1", "sofa"))) == "move"
    assert family_of(None) == NOOP


# ------------------------------------------------------------------ FF trees

def test_perfect_single_cue_gives_depth_one_tree():
    rng = random.Random(0)
    xs = [random_cue_vector(rng) for _ in range(300)]
    tree = learn_fftree([(x, x.current_task == "prepare_activities") for x in xs], "grab")
    assert tree.depth == 1
    cue, decision = tree.cues[0]
    assert (str(cue), decision) in {("current_task=prepare_activities", True),
                                    ("current_task!=prepare_activities", False)}


def test_all_negative_examples_rejected():
    with pytest.raises(InvariantError):
        learn_fftree([(CueVector(), False)] * 5, "grab")


def hidden_tree() -> FFTree:
    return FFTree("grab", ((Cue("current_task", "serve_snacks"), True),
                           (Cue("prev_action1", "move"), False),
                           (Cue("location", "sofa"), True)), False)


def test_hidden_depth_three_tree_recovered():
    rng = random.Random(7)
    hidden = hidden_tree()
    train = [random_cue_vector(rng) for _ in range(1000)]
    test = [random_cue_vector(rng) for _ in range(1000)]
    learned = learn_fftree([(x, hidden.decide(x)) for x in train], "grab")
    agree = sum(learned.decide(x) == hidden.decide(x) for x in test) / len(test)
    assert agree >= 0.95


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_exits_minimise_training_cost_for_their_cue_order(seed):
    rng = random.Random(seed)
    xs = [random_cue_vector(rng) for _ in range(rng.randint(20, 120))]
    labels = [rng.random() < 0.3 or x.needed_here for x in xs]
    if all(labels) or not any(labels):
        return
    examples = list(zip(xs, labels))
    tree = learn_fftree(examples, "grab", max_depth=4)
    best = min(training_cost(FFTree("grab", tuple(zip((c for c, _ in tree.cues), exits[:-1])), exits[-1]), examples)
               for exits in itertools.product((False, True), repeat=tree.depth + 1))
    assert training_cost(tree, examples) <= best + 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_decision_path_follows_cue_order(seed):
    rng = random.Random(seed)
    tree = hidden_tree()
    trace: list = []
    tree.decide(random_cue_vector(rng), trace)
    assert len(trace) <= tree.depth
    assert trace == [c for c, _ in tree.cues[:len(trace)]]


def test_constant_cues_dropped():
    rng = random.Random(1)
    xs = [random_cue_vector(rng) for _ in range(100)]
    cues = generate_cues(xs) + [Cue("idle", True)]
    tree = learn_fftree([(x, x.location == "sofa") for x in xs], "move", cues)
    assert all(str(c) != "idle=True" for c, _ in tree.cues)


# ------------------------------------------------------------------ ensemble

def family_traces(n, seed):
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        x = random_cue_vector(rng)
        fam = "grab" if x.needed_here else "move" if x.prev_action1 == "put" else "put" \
            if x.current_task == "serve_snacks" else NOOP
        out.append((x, fam))
    return out


def test_single_family_rejected():
    with pytest.raises(InvariantError):
        learn_ensemble([(CueVector(), "move")] * 10)


def test_ensemble_deterministic_under_reordering():
    traces = family_traces(400, 3)
    shuffled = list(traces)
    random.Random(0).shuffle(shuffled)
    assert learn_ensemble(traces) == learn_ensemble(shuffled)


def test_fuzzed_predictions_are_declared_families():
    ens = learn_ensemble(family_traces(500, 4))
    assert arbiter_depth(ens.arbiter) <= 4
    rng = random.Random(5)
    for _ in range(10_000):
        assert ens.predict_family(random_cue_vector(rng)) in ens.families


def test_shipped_models_predict_declared_families():
    models = load_models()
    rng = random.Random(9)
    for ens in models.values():
        assert arbiter_depth(ens.arbiter) <= 4
        for _ in range(2000):
            assert ens.predict_family(random_cue_vector(rng)) in ens.families


# ---------------------------------------------------------------- prediction

def fixed_ensemble(label_when_fired: str) -> BehaviorEnsemble:
    tree = FFTree(label_when_fired, ((Cue("current_task", "read_book"), True),), False)
    arb = ArbiterNode(NOOP, 0, ArbiterNode(NOOP), ArbiterNode(label_when_fired))
    return BehaviorEnsemble((tree,), arb, (label_when_fired, NOOP), 0)


def test_fire_path_grounds_grab_book(world, scenario):
    s = world.initial_state(0)
    true = [a for a in s.true_atoms() if world.ts.universe.kind(a).value == "inertial" and
            not (a.pred == "at*" and a.args[0] == HUMAN)]
    s = world.ts.state(true + [Atom("at*", (HUMAN, "bookshelf"))])
    flags = scenario.context("weekday_wfh")
    cv = extract_cues(world, s, TeammateView(HUMAN), "read_book", None, flags)
    out = predict(fixed_ensemble("grab"), cv, 1, world.ts, s,
                  lambda fam, st, c: ground_family(world, HUMAN, fam, st, "read_book"), lambda c, a, st: c)
    assert out == [Atom("exo_grab", (HUMAN, "book"))]


def test_always_pass_ensemble_predicts_noops(world, scenario):
    s = world.initial_state(0)
    cv = extract_cues(world, s, TeammateView(HUMAN), "prepare_breakfast", None, scenario.context("weekend"))
    out = predict(fixed_ensemble("grab"), cv, 3, world.ts, s, lambda *a: None, lambda c, a, st: c)
    assert out == [None, None, None]


def test_k3_rollouts_match_scripted_human(world, scenario):
    models = load_models()

    class Recorder(AdHocAgent):
        def predictions(self, s, ctx):
            out = super().predictions(s, ctx)
            if HUMAN in out:
                self.log[ctx.step] = (s, out[HUMAN])
            return out

    rng = random.Random(0)
    matched, rollouts = 0, 0
    while rollouts < 100:
        day = rng.choice(sorted(scenario.day_types))
        seed = rng.randrange(1 << 30)
        robot = Recorder(world, "robot1", PolicyConfig(anticipation=False), None, models, "batch")
        robot.log = {}
        actual = {}
        run_episode(world, [ScriptedHuman(world, "batch"), robot], generate_tasks(scenario, day, seed),
                    scenario.context(day), seed,
                    on_step=lambda step, s, props, outs: actual.__setitem__(step, props.get(HUMAN)))
        for t in sorted(robot.log):
            s, seq = robot.log[t]
            if rollouts == 100 or not all(t + i in actual for i in range(3)):
                continue
            rollouts += 1
            matched += sum(seq[i] == actual[t + i] for i in range(3))
            for a in seq:  # predictions are executable where they are simulated
                if a is not None:
                    assert world.ts.executable(s.bits, world.ts.action_id(a))
                    s = world.ts.wrap(world.ts.apply(s.bits, [world.ts.action_id(a)]))
    assert matched / rollouts >= 2


# ------------------------------------------------------------------ tracking

def test_full_agreement_keeps_model():
    ens = learn_ensemble(family_traces(200, 1))
    tracker = AgreementTracker(size=10, theta=0.6)
    for _ in range(10):
        tracker, directive = observe_and_maybe_revise(tracker, ens, "move", "move", [])
        assert directive.kind == "keep"
    assert tracker.agreement_rate == 1.0


def test_partial_window_never_triggers():
    ens = learn_ensemble(family_traces(200, 1))
    tracker = AgreementTracker(size=10, theta=0.6)
    for _ in range(9):
        tracker, directive = observe_and_maybe_revise(tracker, ens, "move", "grab", [])
        assert directive.kind == "keep"


def test_sustained_disagreement_switches_to_better_model():
    traces = family_traces(300, 2)
    good = learn_ensemble(traces, model_id="good")
    bad = replace(good, arbiter=ArbiterNode(NOOP), model_id="bad")
    tracker = AgreementTracker(size=10, theta=0.6, active_model_id="bad")
    recent = [t for t in traces if t[1] != NOOP][:10]
    directive = None
    for cv, fam in recent:
        tracker, directive = observe_and_maybe_revise(tracker, bad, NOOP, fam, recent,
                                                      {"good": good, "bad": bad})
    assert directive.kind == "switch" and directive.model.model_id == "good"
    assert tracker.active_model_id == "good" and tracker.window == ()


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(ACTIONS), st.sampled_from(ACTIONS)), max_size=30), st.integers(1, 12))
def test_agreement_rate_bounds(pairs, size):
    t = AgreementTracker(size=size)
    for p, o in pairs:
        t = t.record(p, o)
    if t.window:
        assert 0.0 <= t.agreement_rate <= 1.0
        assert len(t.window) == min(size, len(pairs))
    if t.full:
        assert t.agreement_rate == sum(p == o for p, o in pairs[-size:]) / size


def test_trace_file_round_trip(tmp_path):
    rows = [("ep", i, HUMAN, cv, fam) for i, (cv, fam) in enumerate(family_traces(20, 6))]
    path = tmp_path / "t.tsv"
    write_traces(str(path), rows)
    assert read_traces(str(path)) == rows

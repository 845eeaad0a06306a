import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from hypothesis import given, settings, strategies as st

from aht.anticipation import (Anticipator, CompletionTimeout, ContextFlags, EmptyAfterValidationError,
                              EmptyParseError, HTTPEndpoint, MockEndpoint, MockKeyMissingError, PromptOptions,
                              ProtocolError, TaskRoutine, build_prompt, complete, make_endpoint,
                              parse_routine, validate)
from aht.mocks import day_routines
from aht.simworld import data_path

WFH = ContextFlags(True, False, False)


@pytest.fixture(scope="module")
def catalog(scenario):
    return scenario.catalog()


@pytest.fixture(scope="module")
def history(scenario):
    return scenario.history_examples()


def wfh_prompt(catalog, history, options=PromptOptions(), done=()):
    return build_prompt(catalog, history, WFH, TaskRoutine(tuple(done), len(done)), options, seed=0)


def test_prompt_has_three_sections(catalog, history):
    p = wfh_prompt(catalog, history)
    text = p.render()
    assert len(p.few_shot) == 2 and not p.warnings
    assert "### System" in text and "### Examples" in text and "### Query" in text
    assert text.count("Explanation:") == 2
    for t in catalog.candidates:
        assert catalog.name(t) in text


def test_prompt_without_history_degrades(catalog):
    p = wfh_prompt(catalog, [])
    assert p.few_shot == () and p.warnings
    assert "### Examples" not in p.render()


def test_prompt_deterministic(catalog, history):
    assert wfh_prompt(catalog, history).render() == wfh_prompt(catalog, history).render()


def test_prompt_tiers(catalog, history):
    assert wfh_prompt(catalog, history).tier == "good"
    assert wfh_prompt(catalog, history, PromptOptions(cot=False)).tier == "fewshot"
    assert wfh_prompt(catalog, history, PromptOptions(few_shot=False)).tier == "cot"
    assert wfh_prompt(catalog, history, PromptOptions(few_shot=False, cot=False)).tier == "none"


def answer(raw):
    return raw.split("Answer:")[-1].strip()


def test_good_mock_wfh_routine(catalog, history):
    raw = complete(MockEndpoint(str(data_path("mock_llm.json"))), wfh_prompt(catalog, history))
    assert answer(raw) == "Prepare breakfast, Prepare home work-station, Prepare coffee, Prepare lunch"


def test_noisy_mock_without_prompt_engineering(catalog, history):
    raw = complete(MockEndpoint(str(data_path("mock_llm.json")), noisy=True),
                   wfh_prompt(catalog, history, PromptOptions(few_shot=False, cot=False)))
    assert raw == "Prepare breakfast, Prepare coffee, Prepare home work-station, Pack bag"


def test_mock_key_missing(catalog, history, tmp_path):
    path = tmp_path / "empty.json"
    path.write_text(json.dumps({"records": []}))
    endpoint = MockEndpoint(str(path))
    with pytest.raises(MockKeyMissingError):
        complete(endpoint, wfh_prompt(catalog, history))
    assert endpoint.calls == 3


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        reply = {"text": "Prepare breakfast"} if body["model"] == "default" else {"nope": 1}
        data = json.dumps(reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    httpd = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{httpd.server_port}/complete"
    httpd.shutdown()


def test_http_endpoint_protocol(server, catalog, history):
    endpoint = make_endpoint(f"url:{server}")
    assert complete(endpoint, wfh_prompt(catalog, history)) == "Prepare breakfast"
    with pytest.raises(ProtocolError):
        complete(HTTPEndpoint(server, model="other"), wfh_prompt(catalog, history))


def test_unreachable_endpoint_times_out_after_retries(catalog, history):
    endpoint = HTTPEndpoint("http://127.0.0.1:9/complete", timeout=0.5)
    with pytest.raises(CompletionTimeout):
        complete(endpoint, wfh_prompt(catalog, history))
    assert endpoint.calls == 3


# ------------------------------------------------------------------ parsing

def test_parse_numbered_list(catalog):
    r = parse_routine("1. Prepare breakfast\n2. Prepare lunch", catalog)
    assert r.tasks == ("prepare_breakfast", "prepare_lunch")


def test_parse_keeps_out_of_context_task(catalog):
    r = parse_routine("Prepare breakfast, Pack bag", catalog)
    assert r.tasks == ("prepare_breakfast", "pack_bag")


def test_parse_gibberish(catalog):
    with pytest.raises(EmptyParseError):
        parse_routine("qwerty zxcv", catalog)


def test_parse_unknown_fragments_kept(catalog):
    r = parse_routine("Prepare breakfast, Walk the dog", catalog)
    assert r.unmatched == ("Walk the dog",)


# --------------------------------------------------------------- validation

def test_validator_fixes_both_defects(catalog):
    r = TaskRoutine(("prepare_breakfast", "prepare_coffee", "prepare_home_workstation", "pack_bag"))
    report = validate(r, WFH, catalog)
    assert report.accepted.tasks == ("prepare_breakfast", "prepare_home_workstation", "prepare_coffee")
    assert ("pack_bag", "not-applicable") in report.removed and report.reordered


def test_validator_identity_on_valid_routine(catalog):
    r = TaskRoutine(("prepare_breakfast", "prepare_home_workstation", "prepare_coffee", "prepare_lunch"))
    report = validate(r, WFH, catalog)
    assert report.accepted.tasks == r.tasks and not report.reordered and not report.removed


def test_validator_empty_result(catalog):
    with pytest.raises(EmptyAfterValidationError):
        validate(TaskRoutine(("pack_bag",)), WFH, catalog)


def routines_and_contexts(scenario):
    out = []
    for day in scenario.day_types:
        flags = scenario.context(day)
        for routine in day_routines(scenario, day):
            out.append((routine, flags))
    return out


@settings(max_examples=300, deadline=None)
@given(st.data())
def test_validator_properties(scenario, catalog, data):
    flags = data.draw(st.sampled_from([scenario.context(d) for d in sorted(scenario.day_types)]))
    tasks = data.draw(st.lists(st.sampled_from(catalog.candidates + ("unknown_task",)), max_size=8))
    try:
        report = validate(TaskRoutine(tuple(tasks)), flags, catalog)
    except EmptyAfterValidationError:
        return
    out = report.accepted.tasks
    assert set(out) <= set(catalog.candidates) and len(set(out)) == len(out)
    assert validate(report.accepted, flags, catalog).accepted.tasks == out
    kept = [t for t in dict.fromkeys(tasks) if t in out]
    assert sorted(kept) == sorted(out)
    # minimal edit: every pair whose order changed is ordered by an applicable priority rule
    rules = {(r.before, r.after) for r in catalog.priorities if r.applies(flags)}
    pos = {t: i for i, t in enumerate(out)}
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            if pos[a] > pos[b]:
                assert (b, a) in rules


def test_validator_properties_on_shipped_suite(scenario, catalog):
    """Exhaustive over every generator routine and every mock completion of the shipped scenario."""
    records = json.loads(data_path("mock_llm.json").read_text())["records"]
    for r in records:
        flags = ContextFlags.from_dict(r["flags"])
        try:
            report = validate(parse_routine(r["text"], catalog), flags, catalog, r["prefix"])
        except EmptyAfterValidationError:
            continue
        out = report.accepted.tasks
        assert set(out) <= set(catalog.candidates) and len(set(out)) == len(out)
        assert validate(report.accepted, flags, catalog, r["prefix"]).accepted.tasks == out
    for routine, flags in routines_and_contexts(scenario):
        assert validate(TaskRoutine(routine), flags, catalog).accepted.tasks == routine


def test_good_mock_anticipates_next_weekday_task(scenario, catalog, history):
    endpoint = MockEndpoint(str(data_path("mock_llm.json")))
    hits = total = 0
    for day in ("weekday_wfh", "weekday_office"):
        flags = scenario.context(day)
        for routine in day_routines(scenario, day):
            a = Anticipator(endpoint, catalog, history)
            for i in range(len(routine) - 1):
                total += 1
                hits += a.anticipate(flags, routine[:i], routine[i]) == routine[i + 1]
    assert hits / total >= 0.9

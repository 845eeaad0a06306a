"""Routine anticipation: prompt building, completion endpoints, parsing and validation."""
from __future__ import annotations

import json
import logging
import os
import random
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

from .kernel import AHTError, InvariantError

log = logging.getLogger(__name__)

API_KEY_ENV = "AHT_LLM_API_KEY"


class EmptyParseError(AHTError):
    pass


class EmptyAfterValidationError(AHTError):
    pass


class CompletionError(AHTError):
    pass


class CompletionTimeout(CompletionError):
    pass


class ProtocolError(CompletionError):
    pass


class MockKeyMissingError(CompletionError):
    pass


# ------------------------------------------------------------------ types

@dataclass(frozen=True)
class ContextFlags:
    weekday: bool = True
    going_to_office: bool = False
    guests_expected: bool = False
    extras: tuple[tuple[str, str], ...] = ()

    def as_dict(self) -> dict[str, bool]:
        return {"weekday": self.weekday, "going_to_office": self.going_to_office,
                "guests_expected": self.guests_expected}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ContextFlags":
        extras = tuple(sorted((k, str(v)) for k, v in d.items()
                              if k not in ("weekday", "going_to_office", "guests_expected")))
        return cls(bool(d.get("weekday", True)), bool(d.get("going_to_office", False)),
                   bool(d.get("guests_expected", False)), extras)

    def key(self) -> str:
        return ",".join(f"{k}={int(v)}" for k, v in self.as_dict().items())

    def describe(self) -> str:
        parts = ["weekday" if self.weekday else "weekend",
                 "going to the office" if self.going_to_office else
                 ("working from home" if self.weekday else "staying home"),
                 "guests expected" if self.guests_expected else "no guests expected"]
        parts += [f"{k}: {v}" for k, v in self.extras]
        return ", ".join(parts)

    def matches(self, required: Mapping[str, bool]) -> bool:
        values = self.as_dict()
        return all(values.get(k) == v for k, v in required.items())


@dataclass(frozen=True)
class TaskRoutine:
    tasks: tuple[str, ...]
    completed: int = 0
    source: str = "generator"  # generator | llm | validated
    unmatched: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not 0 <= self.completed <= len(self.tasks):
            raise InvariantError("completed prefix longer than the routine")

    @property
    def done(self) -> tuple[str, ...]:
        return self.tasks[:self.completed]

    @property
    def remaining(self) -> tuple[str, ...]:
        return self.tasks[self.completed:]

    def next_after(self, current: str, completed: Sequence[str] = ()) -> str | None:
        """The task expected right after ``current``."""
        rest = [t for t in self.tasks if t not in set(completed)]
        if current in rest:
            i = rest.index(current)
            return rest[i + 1] if i + 1 < len(rest) else None
        return next((t for t in rest if t != current), None)


@dataclass(frozen=True)
class PriorityRule:
    before: str
    after: str
    when: tuple[tuple[str, bool], ...] = ()

    def applies(self, context: ContextFlags) -> bool:
        return context.matches(dict(self.when))


@dataclass(frozen=True)
class TaskCatalog:
    """Candidate tasks with display names, applicability and priorities."""

    candidates: tuple[str, ...]
    names: tuple[tuple[str, str], ...]
    applicability: tuple[tuple[str, tuple[tuple[str, bool], ...]], ...] = ()
    priorities: tuple[PriorityRule, ...] = ()

    def name(self, task: str) -> str:
        return dict(self.names).get(task, task.replace("_", " ").capitalize())

    def applicable(self, task: str, context: ContextFlags) -> bool:
        return context.matches(dict(dict(self.applicability).get(task, ())))


@dataclass(frozen=True)
class FewShotExample:
    routine: tuple[str, ...]
    completed: int
    context: ContextFlags
    explanation: str = ""


@dataclass(frozen=True)
class PromptOptions:
    persona: bool = True
    few_shot: bool = True
    cot: bool = True
    n_examples: int = 2


@dataclass(frozen=True)
class PromptSpec:
    system_message: str
    few_shot: tuple[FewShotExample, ...]
    query: TaskRoutine
    context: ContextFlags
    candidate_tasks: tuple[str, ...]
    options: PromptOptions
    catalog: TaskCatalog
    current: str | None = None
    warnings: tuple[str, ...] = ()

    @property
    def tier(self) -> str:
        """Which prompt-engineering sections are present (keys the noisy mock)."""
        if self.options.few_shot and self.few_shot and self.options.cot:
            return "good"
        if self.options.few_shot and self.few_shot:
            return "fewshot"
        if self.options.cot:
            return "cot"
        return "none"

    def user_message(self) -> str:
        names = self.catalog.name
        out = []
        if self.few_shot:
            out.append("### Examples")
            for i, ex in enumerate(self.few_shot, 1):
                out.append(f"Example {i}:")
                out.append(f"Context: {ex.context.describe()}")
                out.append("Completed tasks: " + (", ".join(map(names, ex.routine[:ex.completed])) or "none"))
                out.append("Remaining tasks: " + ", ".join(map(names, ex.routine[ex.completed:])))
                if self.options.cot and ex.explanation:
                    out.append(f"Explanation: {ex.explanation}")
            out.append("")
        out.append("### Query")
        out.append("Candidate tasks: " + ", ".join(map(names, self.candidate_tasks)))
        out.append(f"Context: {self.context.describe()}")
        out.append("Completed tasks: " + (", ".join(map(names, self.query.done)) or "none"))
        if self.current:
            out.append(f"Task in progress: {names(self.current)}")
        if self.options.cot:
            out.append("Think step by step about what has to happen first, then give the full routine "
                       "for the day after 'Answer:' as a comma-separated list.")
        else:
            out.append("Give the full routine for the day as a comma-separated list.")
        return "\n".join(out)

    def render(self) -> str:
        return f"### System\n{self.system_message}\n\n{self.user_message()}\n"


PERSONA = ("You are an experienced household assistant who knows the daily habits of the family you "
           "work for. ")
OBJECTIVE = ("Your objective is to predict the sequence of household tasks for the rest of the day, "
             "choosing only from the candidate tasks.")


def build_prompt(catalog: TaskCatalog, history: Sequence[FewShotExample], context: ContextFlags,
                 partial: TaskRoutine, options: PromptOptions = PromptOptions(), seed: int = 0,
                 current: str | None = None) -> PromptSpec:
    """Assemble the prompt; few-shot days are chosen by seed among same-context days first."""
    if not catalog.candidates:
        raise InvariantError("candidate task list is empty")
    warnings = []
    examples: tuple[FewShotExample, ...] = ()
    if options.few_shot:
        same = [h for h in history if h.context == context]
        other = [h for h in history if h.context != context]
        rng = random.Random(seed)
        pool = rng.sample(same, len(same)) + rng.sample(other, len(other))
        examples = tuple(pool[:options.n_examples])
        if len(examples) < options.n_examples:
            warnings.append(f"only {len(examples)} example routine(s) available")
            log.warning("few-shot section has %d of %d examples", len(examples), options.n_examples)
    system = (PERSONA if options.persona else "") + OBJECTIVE
    return PromptSpec(system, examples, partial, context, tuple(catalog.candidates), options, catalog,
                      current, tuple(warnings))


# --------------------------------------------------------------- endpoints

class Endpoint(Protocol):
    def complete(self, prompt: PromptSpec) -> str: ...


def _norm_prefix(tasks: Iterable[str]) -> tuple[str, ...]:
    return tuple(tasks)


@dataclass
class MockEndpoint:
    """Table-driven completions keyed by (context flags, completed prefix[, tier]).

    File format (JSON)::

        {"records": [{"flags": {"weekday": true, ...}, "prefix": ["prepare_breakfast"],
                      "tier": "good", "text": "Prepare breakfast, ..."}]}

    A plain mock only reads ``good`` records; a noisy mock picks the record
    whose tier matches the prompt sections that are present.
    """

    path: str
    noisy: bool = False
    table: dict = field(default_factory=dict, repr=False)
    calls: int = 0

    def __post_init__(self):
        data = json.loads(Path(self.path).read_text())
        for r in data["records"]:
            key = (ContextFlags.from_dict(r["flags"]).key(), _norm_prefix(r["prefix"]), r.get("tier", "good"))
            self.table[key] = r["text"]

    def complete(self, prompt: PromptSpec) -> str:
        self.calls += 1
        tier = prompt.tier if self.noisy else "good"
        key = (prompt.context.key(), _norm_prefix(prompt.query.done), tier)
        if key not in self.table:
            raise MockKeyMissingError(f"no mock completion for {key}")
        return self.table[key]


@dataclass
class HTTPEndpoint:
    """Client for the completion protocol.

    Request body: ``{"model": str, "system": str, "user": str, "temperature": float}``.
    Response body: ``{"text": str}``.  The bearer token is read from
    ``AHT_LLM_API_KEY`` when set.
    """

    url: str
    model: str = "default"
    timeout: float = 30.0
    temperature: float = 0.0
    calls: int = 0

    def complete(self, prompt: PromptSpec) -> str:
        self.calls += 1
        body = json.dumps({"model": self.model, "system": prompt.system_message,
                           "user": prompt.user_message(), "temperature": self.temperature}).encode()
        headers = {"Content-Type": "application/json"}
        if os.environ.get(API_KEY_ENV):
            headers["Authorization"] = f"Bearer {os.environ[API_KEY_ENV]}"
        req = urllib.request.Request(self.url, body, headers)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode())
        except (TimeoutError, urllib.error.URLError, OSError) as e:
            raise CompletionTimeout(f"endpoint {self.url} unreachable: {e}") from None
        except json.JSONDecodeError as e:
            raise ProtocolError(f"endpoint returned invalid JSON: {e}") from None
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            raise ProtocolError("response has no 'text' field")
        return payload["text"]


def make_endpoint(spec: str, timeout: float = 30.0) -> Endpoint:
    """``mock:FILE``, ``noisy-mock:FILE`` or ``url:ENDPOINT``."""
    kind, _, rest = spec.partition(":")
    if kind == "mock":
        return MockEndpoint(rest)
    if kind == "noisy-mock":
        return MockEndpoint(rest, noisy=True)
    if kind == "url":
        return HTTPEndpoint(rest, timeout=timeout)
    raise InvariantError(f"unknown endpoint spec {spec!r}")


def complete(endpoint: Endpoint, prompt: PromptSpec, retries: int = 2, backoff: float = 0.0) -> str:
    """Query the endpoint, retrying failed requests at most ``retries`` times."""
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            return endpoint.complete(prompt)
        except CompletionError as e:
            last = e
            if backoff and attempt < retries:
                time.sleep(backoff * (attempt + 1))
    assert last is not None
    raise last


# ----------------------------------------------------------------- parsing

def _normalize(text: str) -> str:
    text = text.lower().replace("_", " ").replace("-", " ")
    return " ".join(re.sub(r"[^a-z0-9 ]", " ", text).split())


def parse_routine(raw: str, catalog: TaskCatalog) -> TaskRoutine:
    """Ordered task labels found in a completion; unknown fragments are kept aside."""
    if "answer:" in raw.lower():
        raw = raw[raw.lower().rindex("answer:") + len("answer:"):]
    lookup = {}
    for t in catalog.candidates:
        lookup[_normalize(t)] = t
        lookup[_normalize(catalog.name(t))] = t
        lookup[_normalize(catalog.name(t)).replace(" ", "")] = t
    tasks, unknown = [], []
    for frag in re.split(r"[\n,;]|\bthen\b|\band\b(?= [A-Za-z])", raw):
        frag = re.sub(r"^\s*(?:\d+[.)]|[-*•])\s*", "", frag).strip().rstrip(".")
        if not frag:
            continue
        key = _normalize(frag)
        label = lookup.get(key) or lookup.get(key.replace(" ", ""))
        if label is None:
            unknown.append(frag)
        elif label not in tasks:
            tasks.append(label)
    if not tasks:
        raise EmptyParseError(f"no task recognised in {raw[:60]!r}")
    return TaskRoutine(tuple(tasks), 0, "llm", tuple(unknown))


# -------------------------------------------------------------- validation

@dataclass(frozen=True)
class ValidationReport:
    accepted: TaskRoutine
    removed: tuple[tuple[str, str], ...]
    reordered: bool


def validate(routine: TaskRoutine, context: ContextFlags, catalog: TaskCatalog,
             completed: Sequence[str] = ()) -> ValidationReport:
    """Drop unknown, duplicate and inapplicable tasks; swap adjacent priority violations.

    Tasks already completed today are kept as they are.  Nothing else changes.
    """
    removed: list[tuple[str, str]] = [(u, "unknown-task") for u in routine.unmatched]
    kept: list[str] = []
    for t in routine.tasks:
        if t not in catalog.candidates:
            removed.append((t, "unknown-task"))
        elif t in kept:
            removed.append((t, "duplicate"))
        elif t not in completed and not catalog.applicable(t, context):
            removed.append((t, "not-applicable"))
        else:
            kept.append(t)
    rules = [r for r in catalog.priorities if r.applies(context)]
    reordered = False
    changed = True
    while changed:
        changed = False
        for i in range(len(kept) - 1):
            a, b = kept[i], kept[i + 1]
            if a in completed or b in completed:
                continue
            if any(r.before == b and r.after == a for r in rules):
                kept[i], kept[i + 1] = b, a
                reordered = changed = True
    if not kept:
        raise EmptyAfterValidationError("every anticipated task was rejected")
    done = sum(1 for t in kept if t in completed)
    return ValidationReport(TaskRoutine(tuple(kept), min(done, len(kept)), "validated"), tuple(removed), reordered)


# ------------------------------------------------------------ anticipator

@dataclass
class Anticipator:
    """Asks the endpoint for the day's routine and returns the task expected next."""

    endpoint: Endpoint
    catalog: TaskCatalog
    history: Sequence[FewShotExample]
    options: PromptOptions = PromptOptions()
    use_validator: bool = True
    seed: int = 0
    queries: int = 0
    failures: int = 0
    records: list = field(default_factory=list)
    _cache: dict = field(default_factory=dict)

    def anticipate(self, context: ContextFlags, completed: Sequence[str], current: str | None) -> str | None:
        key = (context, tuple(completed), current)
        if key in self._cache:
            return self._cache[key]
        partial = TaskRoutine(tuple(completed), len(completed), "generator")
        prompt = build_prompt(self.catalog, self.history, context, partial, self.options, self.seed, current)
        self.queries += 1
        routine = None
        try:
            routine = parse_routine(complete(self.endpoint, prompt), self.catalog)
            if self.use_validator:
                routine = validate(routine, context, self.catalog, completed).accepted
        except (CompletionError, EmptyParseError, EmptyAfterValidationError) as e:
            self.failures += 1
            log.info("anticipation failed: %s", e)
        nxt = routine.next_after(current, completed) if routine and current else (
            routine.tasks[0] if routine else None)
        if nxt is not None and nxt not in self.catalog.candidates:
            nxt = None
        self.records.append({"completed": list(completed), "current": current,
                             "routine": list(routine.tasks) if routine else None, "anticipated": nxt})
        self._cache[key] = nxt
        return nxt

"""Deterministic completion tables for the mock endpoints.

Each record answers one (context flags, completed prefix) query.  The
``good`` tier returns the true routine; the other tiers model the typical
mistakes of a completion model prompted without some prompt sections:

* ``fewshot``: a task that does not fit the day is inserted after the current one;
* ``cot``: the next task is replaced by a plausible task that is not part of the day;
* ``none``: the order of the next two tasks is swapped and a task that does
  not fit the day is added (at the end for a fresh day, right after the
  current task later on).
"""
from __future__ import annotations

import itertools
import json
from pathlib import Path

from .anticipation import ContextFlags

TIERS = ("good", "fewshot", "cot", "none")


def day_routines(config, day_type: str) -> list[tuple[str, ...]]:
    """Every routine the generator can produce for ``day_type``, template first."""
    spec = config.day_types[day_type]
    template = tuple(spec["template"])
    optional = [t for t in template if t in spec.get("optional", {})]
    out = []
    for r in range(len(optional) + 1):
        for dropped in itertools.combinations(optional, r):
            out.append(tuple(t for t in template if t not in dropped))
    return out


def _misfit(config, flags: ContextFlags, routine) -> str | None:
    """First candidate task that is not applicable under ``flags``."""
    cat = config.catalog()
    for t in cat.candidates:
        if t not in routine and not cat.applicable(t, flags):
            return t
    return None


def _plausible(config, flags: ContextFlags, routine) -> str | None:
    """First applicable candidate task that is not part of ``routine``."""
    cat = config.catalog()
    for t in cat.candidates:
        if t not in routine and cat.applicable(t, flags):
            return t
    return None


def corrupt(config, flags: ContextFlags, routine: tuple[str, ...], done: int, tier: str) -> list[str]:
    r = list(routine)
    if tier == "good" or done >= len(r):
        return r
    nxt = done + 1
    bad = _misfit(config, flags, routine)
    if tier == "fewshot":
        if bad is not None:
            r.insert(nxt, bad)
    elif tier == "cot":
        other = _plausible(config, flags, routine)
        if other is not None and nxt < len(r):
            r[nxt] = other
        elif other is not None:
            r.append(other)
    elif tier == "none":
        if nxt + 1 < len(r):
            r[nxt], r[nxt + 1] = r[nxt + 1], r[nxt]
        if bad is not None:
            if done == 0 and len(r) - 1 > nxt + 1:
                r[-1] = bad
            elif done == 0:
                r.append(bad)
            else:
                r.insert(nxt, bad)
    return r


def _text(config, flags: ContextFlags, tasks: list[str], done: int, tier: str) -> str:
    cat = config.catalog()
    names = ", ".join(cat.name(t) for t in tasks)
    if tier in ("good", "cot"):
        finished = ", ".join(cat.name(t) for t in tasks[:done]) or "nothing yet"
        return (f"Context: {flags.describe()}. Done so far: {finished}. "
                f"Breakfast needs to be prepared first, and the remaining tasks follow the usual order "
                f"for such a day.\nAnswer: {names}")
    return names


def build_records(config) -> list[dict]:
    records, seen = [], set()
    for day_type in config.day_types:
        flags = config.context(day_type)
        for routine in day_routines(config, day_type):
            for done in range(len(routine) + 1):
                prefix = routine[:done]
                for tier in TIERS:
                    key = (flags.key(), prefix, tier)
                    if key in seen:
                        continue
                    seen.add(key)
                    tasks = corrupt(config, flags, routine, done, tier)
                    records.append({"flags": flags.as_dict(), "prefix": list(prefix), "tier": tier,
                                    "day_type": day_type, "text": _text(config, flags, tasks, done, tier)})
    return records


def write_mock(config, path: str | Path) -> int:
    records = build_records(config)
    Path(path).write_text(json.dumps({"records": records}, indent=1, sort_keys=True) + "\n")
    return len(records)

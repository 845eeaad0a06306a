"""Parser and printer for ``.ald`` domain files.

A file holds a coarse level and an optional fine level::

    coarse:
    sorts
      agent.  ad_hoc_agent < agent.  region.
    objects
      robot : ad_hoc_agent.  kitchen, livingroom : region.
    statics
      adjacent(region, region).
    facts
      adjacent(kitchen, livingroom).
    fluents inertial
      at(agent, region).
    actions agent
      move(ad_hoc_agent, region).
    axioms
      move(A, R) causes at(A, R).
      -at(A, L1) if at(A, L2), L1 != L2.
      impossible move(A, R2) if at(A, R1), -adjacent(R1, R2).

``%`` starts a comment.  Identifiers may end in ``*`` (``at*``, ``move*``).
Capitalised identifiers are variables.  A file without level headers is a
single coarse level.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..kernel import AHTError, ActionDecl, Atom, FluentDecl, Kind, SortTree

SECTION_WORDS = {"sorts", "objects", "facts", "statics", "fluents", "actions", "axioms", "bridge"}
LEVEL_WORDS = {"coarse", "fine"}


class DomainSyntaxError(AHTError):
    def __init__(self, message: str, line: int, col: int):
        self.line, self.col = line, col
        super().__init__(f"{message} (line {line}, column {col})")


class SortError(AHTError):
    pass


class SemanticError(AHTError):
    pass


# ------------------------------------------------------------------ AST

def is_var(term: str) -> bool:
    return term[:1].isupper()


@dataclass(frozen=True)
class SAtom:
    pred: str
    args: tuple[str, ...] = ()

    def __str__(self) -> str:
        return f"{self.pred}({', '.join(self.args)})" if self.args else self.pred

    def variables(self) -> list[str]:
        return [a for a in self.args if is_var(a)]


@dataclass(frozen=True)
class SLit:
    atom: SAtom
    positive: bool = True

    def __str__(self) -> str:
        return ("" if self.positive else "-") + str(self.atom)


@dataclass(frozen=True)
class Cmp:
    left: str
    right: str
    equal: bool = False

    def __str__(self) -> str:
        return f"{self.left} {'=' if self.equal else '!='} {self.right}"


CAUSAL, CONSTRAINT, EXECUTABILITY = "causal_law", "state_constraint", "executability"


@dataclass(frozen=True)
class Axiom:
    kind: str
    head: SLit
    body: tuple[SLit | Cmp, ...]
    action: SAtom | None = None  # triggering action of a causal law
    variables: tuple[tuple[str, str], ...] = ()
    line: int = 0

    def literals(self) -> list[SLit]:
        return [b for b in self.body if isinstance(b, SLit)]

    def __str__(self) -> str:
        body = ", ".join(map(str, self.body))
        if self.kind == CAUSAL:
            return f"{self.action} causes {self.head}" + (f" if {body}" if body else "") + "."
        if self.kind == EXECUTABILITY:
            return f"impossible {self.head.atom} if {body}."
        return f"{self.head} if {body}." if body else f"{self.head}."

    def structure(self):
        return (self.kind, self.head, self.body, self.action, self.variables)


@dataclass
class Level:
    fluents: dict[str, FluentDecl] = field(default_factory=dict)
    statics: dict[str, FluentDecl] = field(default_factory=dict)
    actions: dict[str, ActionDecl] = field(default_factory=dict)
    axioms: list[Axiom] = field(default_factory=list)


@dataclass
class DomainDescription:
    """Sorted signature plus axioms at one or two resolutions.

    The fine signature extends the coarse one: declarations in the fine level
    are added to (or override) the coarse declarations.  ``refines`` records
    which fine actions implement which coarse action (``move*`` refines
    ``move``; ``grab`` at both levels is the same action).
    """

    sorts: SortTree
    coarse: Level
    fine: Level | None = None
    bridge: list[Axiom] = field(default_factory=list)
    facts: set[Atom] = field(default_factory=set)
    sort_order: list[tuple[str, str | None]] = field(default_factory=list)

    # -- signature views
    def fluents(self, resolution: str = "coarse") -> dict[str, FluentDecl]:
        out = dict(self.coarse.fluents)
        if resolution == "fine" and self.fine:
            out.update(self.fine.fluents)
        return out

    def statics(self, resolution: str = "coarse") -> dict[str, FluentDecl]:
        out = dict(self.coarse.statics)
        if resolution == "fine" and self.fine:
            out.update(self.fine.statics)
        return out

    def actions(self, resolution: str = "coarse") -> dict[str, ActionDecl]:
        if resolution == "coarse" or not self.fine:
            return dict(self.coarse.actions)
        # coarse actions survive at the fine level only if fine axioms use them
        used = set()
        for ax in self.fine.axioms + self.bridge:
            if ax.action is not None:
                used.add(ax.action.pred)
            if ax.kind == EXECUTABILITY:
                used.add(ax.head.atom.pred)
        out = {n: d for n, d in self.coarse.actions.items() if n in used}
        out.update(self.fine.actions)
        return out

    def axioms(self, resolution: str = "coarse") -> list[Axiom]:
        if resolution == "coarse":
            return list(self.coarse.axioms)
        if not self.fine:
            raise SemanticError("domain has no fine level")
        return list(self.fine.axioms) + list(self.bridge)

    @property
    def coarse_axioms(self) -> list[Axiom]:
        return self.coarse.axioms

    @property
    def fine_axioms(self) -> list[Axiom]:
        return self.fine.axioms if self.fine else []

    @property
    def bridge_axioms(self) -> list[Axiom]:
        return self.bridge

    @property
    def refines(self) -> dict[str, str]:
        if not self.fine:
            return {}
        coarse = self.coarse.actions
        out = {}
        for name in self.actions("fine"):
            base = name.rstrip("*")
            if base in coarse:
                out[name] = base
        return out

    def component_map(self, relation: str = "component") -> dict[str, str]:
        return {f.args[0]: f.args[1] for f in self.facts if f.pred == relation and len(f.args) == 2}

    def check_component_map(self, relation: str = "component") -> None:
        decl = self.statics("fine").get(relation)
        if decl is None:
            return
        fine_sort, coarse_sort = decl.arg_sorts
        cmap = self.component_map(relation)
        fine_locs = set(self.sorts.objects(fine_sort))
        coarse_locs = set(self.sorts.objects(coarse_sort))
        missing = fine_locs - set(cmap)
        if missing:
            raise SemanticError(f"{relation} is not total: no region for {sorted(missing)}")
        if set(cmap.values()) != coarse_locs:
            raise SemanticError(f"{relation} image differs from the {coarse_sort} set")
        owners = [f.args[0] for f in self.facts if f.pred == relation]
        if len(owners) != len(set(owners)):
            raise SemanticError(f"a location belongs to two regions under {relation}")

    def with_instance(self, members: dict[str, list[str]], facts) -> "DomainDescription":
        """Copy of this domain with extra objects and static facts."""
        sorts = self.sorts.copy()
        for sort, objs in members.items():
            for o in objs:
                sorts.add_member(sort, o)
        out = DomainDescription(sorts, self.coarse, self.fine, self.bridge,
                                set(self.facts) | set(facts), list(self.sort_order))
        if out.fine:
            out.check_component_map()
        return out


# ----------------------------------------------------------------- lexer

_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r]+) | (?P<nl>\n) | (?P<comment>%[^\n]*)
  | (?P<neq>!=) | (?P<ident>[A-Za-z_][A-Za-z0-9_]*\*?)
  | (?P<punct>[().,:<=\-{}])
""", re.VERBOSE)


@dataclass(frozen=True)
class Tok:
    kind: str
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Tok]:
    out, pos, line, line_start = [], 0, 1, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise DomainSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            out.append(Tok(kind, m.group(), line, m.start() - line_start + 1))
        pos = m.end()
    out.append(Tok("eof", "", line, pos - line_start + 1))
    return out


# ---------------------------------------------------------------- parser

class _Parser:
    def __init__(self, text: str):
        self.toks = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Tok:
        return self.toks[self.i]

    def fail(self, msg: str, tok: Tok | None = None):
        tok = tok or self.tok
        raise DomainSyntaxError(msg, tok.line, tok.col)

    def next(self) -> Tok:
        t = self.tok
        self.i += 1
        return t

    def expect(self, text: str) -> Tok:
        if self.tok.text != text:
            self.fail(f"expected {text!r}, found {self.tok.text or 'end of input'!r}")
        return self.next()

    def ident(self) -> Tok:
        if self.tok.kind != "ident":
            self.fail(f"expected identifier, found {self.tok.text or 'end of input'!r}")
        return self.next()

    def at_statement_end(self) -> bool:
        return self.tok.kind == "eof" or (
            self.tok.kind == "ident" and self.tok.text in SECTION_WORDS | LEVEL_WORDS
            and self.toks[self.i + 1].text != "(")

    # -- grammar
    def parse(self):
        levels: dict[str, list] = {"coarse": [], "fine": []}
        current = "coarse"
        declared: set[str] = set()
        while self.tok.kind != "eof":
            t = self.tok
            if t.text in LEVEL_WORDS and self.toks[self.i + 1].text == ":":
                self.i += 2
                if t.text in declared:
                    self.fail(f"level {t.text!r} declared twice", t)
                declared.add(t.text)
                current = t.text
                continue
            if t.text not in SECTION_WORDS:
                self.fail(f"expected a section keyword, found {t.text!r}")
            self.next()
            levels[current].append(self.section(t))
        return levels

    def section(self, head: Tok):
        name = head.text
        qualifier = None
        if name == "fluents":
            qualifier = self.ident().text
            if qualifier not in ("inertial", "defined"):
                self.fail("fluents must be 'inertial' or 'defined'", self.toks[self.i - 1])
        elif name == "actions":
            qualifier = self.ident().text
            if qualifier not in ("agent", "exo"):
                self.fail("actions must be 'agent' or 'exo'", self.toks[self.i - 1])
        items = []
        while not self.at_statement_end():
            if name == "sorts":
                items.append(self.sortdecl())
            elif name == "objects":
                items.append(self.objdecl())
            elif name in ("statics", "fluents", "actions"):
                items.append(self.decl())
            elif name == "facts":
                a = self.atom()
                self.expect(".")
                items.append(a)
            else:
                items.append(self.axiom())
        if not items:
            self.fail(f"empty {name} section", head)
        return name, qualifier, items, head.line

    def sortdecl(self):
        name = self.ident()
        parent = None
        if self.tok.text == "<":
            self.next()
            parent = self.ident().text
        self.expect(".")
        return name.text, parent, name.line

    def objdecl(self):
        names = [self.ident().text]
        while self.tok.text == ",":
            self.next()
            names.append(self.ident().text)
        self.expect(":")
        sort = self.ident().text
        self.expect(".")
        return names, sort

    def decl(self):
        name = self.ident()
        args: list[str] = []
        if self.tok.text == "(":
            self.next()
            if self.tok.text != ")":
                args.append(self.ident().text)
                while self.tok.text == ",":
                    self.next()
                    args.append(self.ident().text)
            self.expect(")")
        self.expect(".")
        return name.text, tuple(args), name.line

    def atom(self) -> SAtom:
        name = self.ident().text
        args: list[str] = []
        if self.tok.text == "(":
            self.next()
            if self.tok.text != ")":
                args.append(self.ident().text)
                while self.tok.text == ",":
                    self.next()
                    args.append(self.ident().text)
            self.expect(")")
        return SAtom(name, tuple(args))

    def literal(self) -> SLit:
        positive = True
        if self.tok.text == "-":
            self.next()
            positive = False
        return SLit(self.atom(), positive)

    def body_item(self):
        if self.tok.kind == "ident" and self.toks[self.i + 1].text in ("!=", "="):
            left = self.next().text
            op = self.next().text
            right = self.ident().text
            return Cmp(left, right, op == "=")
        return self.literal()

    def body(self):
        items = [self.body_item()]
        while self.tok.text == ",":
            self.next()
            items.append(self.body_item())
        return tuple(items)

    def axiom(self):
        start = self.tok
        if start.text == "impossible" and self.toks[self.i + 1].text != "(":
            self.next()
            act = self.atom()
            if self.tok.text != "if":
                self.fail("executability condition needs 'if'")
            self.next()
            body = self.body()
            self.expect(".")
            return Axiom(EXECUTABILITY, SLit(act), body, None, (), start.line)
        first = self.literal()
        if self.tok.text == "causes":
            self.next()
            if not first.positive:
                self.fail("an action cannot be negated", start)
            head = self.literal()
            body: tuple = ()
            if self.tok.text == "if":
                self.next()
                body = self.body()
            self.expect(".")
            return Axiom(CAUSAL, head, body, first.atom, (), start.line)
        if self.tok.text == "if":
            self.next()
            body = self.body()
            self.expect(".")
            return Axiom(CONSTRAINT, first, body, None, (), start.line)
        self.expect(".")
        return Axiom(CONSTRAINT, first, (), None, (), start.line)


# ------------------------------------------------------------- validation

def _type_axiom(ax: Axiom, sorts: SortTree, preds: dict[str, tuple[str, ...]],
                actions: dict[str, ActionDecl]) -> Axiom:
    """Infer the sort of every variable; return the axiom with ``variables`` set."""
    occurrences: dict[str, list[str]] = {}

    def visit(atom: SAtom, is_action: bool):
        table = actions if is_action else preds
        if atom.pred not in table:
            kind = "action" if is_action else "fluent or static"
            raise SortError(f"line {ax.line}: unknown {kind} {atom.pred!r}")
        arg_sorts = table[atom.pred].arg_sorts if is_action else table[atom.pred]
        if len(arg_sorts) != len(atom.args):
            raise SortError(f"line {ax.line}: {atom.pred} expects {len(arg_sorts)} arguments, got {len(atom.args)}")
        for term, sort in zip(atom.args, arg_sorts):
            if is_var(term):
                occurrences.setdefault(term, []).append(sort)
            elif sorts.sort_of(term) is not None and not sorts.belongs(term, sort):
                raise SortError(f"line {ax.line}: constant {term!r} is not a {sort}")

    if ax.kind == CAUSAL:
        visit(ax.action, True)
        visit(ax.head.atom, False)
    elif ax.kind == EXECUTABILITY:
        visit(ax.head.atom, True)
    else:
        visit(ax.head.atom, False)
    for b in ax.body:
        if isinstance(b, SLit):
            visit(b.atom, b.atom.pred in actions and b.atom.pred not in preds)
    for b in ax.body:
        if isinstance(b, Cmp):
            for t in (b.left, b.right):
                if is_var(t) and t not in occurrences:
                    raise SortError(f"line {ax.line}: variable {t} only occurs in a comparison")
    typed = []
    for var, cands in occurrences.items():
        best = cands[0]
        for s in cands[1:]:
            if sorts.is_subsort(s, best):
                best = s
            elif not sorts.is_subsort(best, s):
                raise SortError(f"line {ax.line}: variable {var} used as both {best} and {s}")
        typed.append((var, best))
    return Axiom(ax.kind, ax.head, ax.body, ax.action, tuple(typed), ax.line)


def _check_axiom(ax: Axiom, fluents: dict[str, FluentDecl], statics: dict[str, FluentDecl],
                 actions: dict[str, ActionDecl]) -> None:
    if ax.kind == CAUSAL:
        decl = fluents.get(ax.head.atom.pred)
        if decl is None or decl.kind is not Kind.INERTIAL:
            raise SemanticError(f"line {ax.line}: causal law on non-inertial {ax.head.atom.pred!r}")
    elif ax.kind == EXECUTABILITY:
        if not ax.body:
            raise SemanticError(f"line {ax.line}: executability condition with empty body")
    else:
        pred = ax.head.atom.pred
        if pred in actions:
            raise SemanticError(f"line {ax.line}: an action cannot head a state constraint")
        decl = fluents.get(pred) or statics.get(pred)
        if decl and decl.kind is Kind.DEFINED and not ax.head.positive:
            raise SemanticError(f"line {ax.line}: defined fluent {pred!r} cannot head a negative literal")
        if decl and decl.kind is Kind.STATIC:
            for b in ax.literals():
                if b.atom.pred not in statics:
                    raise SemanticError(f"line {ax.line}: static {pred!r} derived from a fluent")
    for b in ax.literals():
        decl = fluents.get(b.atom.pred)
        if ax.kind == CONSTRAINT and decl and decl.kind is Kind.DEFINED and not b.positive:
            raise SemanticError(
                f"line {ax.line}: unstratified: negated defined fluent {b.atom.pred!r} in a constraint body")
        if ax.kind == CAUSAL and b.atom.pred in actions:
            raise SemanticError(f"line {ax.line}: causal law bodies may not mention actions")


def _check_actor(decl: ActionDecl, sorts: SortTree, line: int) -> None:
    if not decl.arg_sorts:
        raise SortError(f"line {line}: action {decl.name} has no actor argument")
    first = decl.arg_sorts[0]
    if decl.actor == "agent" and "ad_hoc_agent" in sorts.sorts and not sorts.is_subsort(first, "ad_hoc_agent"):
        raise SortError(f"line {line}: agent action {decl.name} must be performed by an ad_hoc_agent")
    if decl.actor == "exo" and "agent" in sorts.sorts and not sorts.is_subsort(first, "agent"):
        raise SortError(f"line {line}: exo action {decl.name} must be performed by an agent")


def parse_domain(text: str) -> DomainDescription:
    levels = _Parser(text).parse()
    sorts = SortTree()
    sort_order: list[tuple[str, str | None]] = []
    facts: set[Atom] = set()
    built: dict[str, Level] = {}
    bridge_raw: list[Axiom] = []
    raw_axioms: dict[str, list[Axiom]] = {"coarse": [], "fine": []}

    for level_name in ("coarse", "fine"):
        if not levels[level_name] and level_name == "fine":
            continue
        level = Level()
        for name, qual, items, line in levels[level_name]:
            if name == "sorts":
                for sname, parent, sline in items:
                    if parent is not None and parent not in sorts.sorts:
                        raise SortError(f"line {sline}: unknown parent sort {parent!r}")
                    if sname in sorts.sorts:
                        raise SortError(f"line {sline}: sort {sname!r} declared twice")
                    sorts.add_sort(sname, parent)
                    sort_order.append((sname, parent))
            elif name == "objects":
                for names, sort in items:
                    if sort not in sorts.sorts:
                        raise SortError(f"unknown sort {sort!r} for objects {names}")
                    for n in names:
                        try:
                            sorts.add_member(sort, n)
                        except Exception as e:
                            raise SortError(str(e)) from None
            elif name == "facts":
                for a in items:
                    if any(is_var(x) for x in a.args):
                        raise SemanticError(f"fact {a} is not ground")
                    facts.add(Atom(a.pred, a.args))
            elif name in ("statics", "fluents", "actions"):
                for dname, args, dline in items:
                    for s in args:
                        if s not in sorts.sorts:
                            raise SortError(f"line {dline}: unknown sort {s!r} in {dname}")
                    if name == "statics":
                        level.statics[dname] = FluentDecl(dname, args, Kind.STATIC)
                    elif name == "fluents":
                        level.fluents[dname] = FluentDecl(dname, args, Kind(qual))
                    else:
                        decl = ActionDecl(dname, args, qual)
                        _check_actor(decl, sorts, dline)
                        level.actions[dname] = decl
            elif name == "axioms":
                raw_axioms[level_name].extend(items)
            elif name == "bridge":
                if level_name != "fine":
                    raise SemanticError(f"line {line}: bridge axioms belong to the fine level")
                bridge_raw.extend(items)
        built[level_name] = level

    dom = DomainDescription(sorts, built["coarse"], built.get("fine"), [], facts, sort_order)
    for level_name in built:
        fluents, statics = dom.fluents(level_name), dom.statics(level_name)
        all_actions = dict(dom.coarse.actions)
        if level_name == "fine":
            all_actions.update(dom.fine.actions)
        preds = {n: d.arg_sorts for n, d in {**statics, **fluents}.items()}
        typed = []
        for ax in raw_axioms[level_name] + (bridge_raw if level_name == "fine" else []):
            ax = _type_axiom(ax, sorts, preds, all_actions)
            _check_axiom(ax, fluents, statics, all_actions)
            typed.append(ax)
        n_bridge = len(bridge_raw) if level_name == "fine" else 0
        main = typed[:len(typed) - n_bridge] if n_bridge else typed
        built[level_name].axioms = main
        if level_name == "fine":
            dom.bridge = typed[len(main):]
    for f in facts:
        statics = dom.statics("fine" if dom.fine else "coarse")
        if f.pred not in statics:
            raise SemanticError(f"fact {f} is not an instance of a declared static")
    if dom.fine:
        dom.check_component_map()
    return dom


# ---------------------------------------------------------------- printer

def _decl_text(d) -> str:
    return f"{d.name}({', '.join(d.arg_sorts)})." if d.arg_sorts else f"{d.name}."


def pretty(dom: DomainDescription) -> str:
    """Render a domain back to ``.ald`` text (members and facts included)."""
    out: list[str] = []

    def level(name: str, lv: Level, include_sorts: bool):
        out.append(f"{name}:")
        if include_sorts:
            out.append("sorts")
            out.extend(f"  {s} < {p}." if p else f"  {s}." for s, p in dom.sort_order)
            members = [(s, sorted(dom.sorts.members[s])) for s, _ in dom.sort_order if dom.sorts.members.get(s)]
            if members:
                out.append("objects")
                out.extend(f"  {', '.join(objs)} : {s}." for s, objs in members)
        if lv.statics:
            out.append("statics")
            out.extend("  " + _decl_text(d) for d in lv.statics.values())
        if include_sorts and dom.facts:
            out.append("facts")
            out.extend(f"  {SAtom(f.pred, f.args)}." for f in sorted(dom.facts))
        for kind in (Kind.INERTIAL, Kind.DEFINED):
            ds = [d for d in lv.fluents.values() if d.kind is kind]
            if ds:
                out.append(f"fluents {kind.value}")
                out.extend("  " + _decl_text(d) for d in ds)
        for actor in ("agent", "exo"):
            ds = [d for d in lv.actions.values() if d.actor == actor]
            if ds:
                out.append(f"actions {actor}")
                out.extend("  " + _decl_text(d) for d in ds)
        if lv.axioms:
            out.append("axioms")
            out.extend("  " + str(a) for a in lv.axioms)

    level("coarse", dom.coarse, True)
    if dom.fine:
        level("fine", dom.fine, False)
        if dom.bridge:
            out.append("bridge")
            out.extend("  " + str(a) for a in dom.bridge)
    return "\n".join(out) + "\n"


def structurally_equal(a: DomainDescription, b: DomainDescription) -> bool:
    def lv(x: Level | None):
        if x is None:
            return None
        return (x.fluents, x.statics, x.actions, [ax.structure() for ax in x.axioms])

    return (a.sort_order == b.sort_order and a.sorts.members == b.sorts.members
            and a.facts == b.facts and lv(a.coarse) == lv(b.coarse) and lv(a.fine) == lv(b.fine)
            and [x.structure() for x in a.bridge] == [x.structure() for x in b.bridge])

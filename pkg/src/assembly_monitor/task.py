"""Assembly-task formalism and the ``.task`` definition language.

A task is a set of objects (elements and trays), predicate schemas, steps with
preconditions and add/delete effects, and the initial and final
configurations.  Configurations are kept in canonical form (predicates sorted
by name, then arguments) so they can be hashed and compared directly.

The ``.task`` grammar, whitespace and newline insensitive, ``#`` comments::

    task      := ["task" STRING] objects ["work" ":" IDENT] predicates
                 steps initial final
    objects   := "objects" ":" (("element" | "tray") IDENT ([","] IDENT)*)+
    predicates:= "predicates" ":" (IDENT "/" INT [","])+
    steps     := "steps" ":" step*
    step      := "step" STRING ":" ( ("actions" | "pre" | "add" | "del") ":" atoms )*
    initial   := "initial" ":" atoms
    final     := "final" ":" atoms
    atoms     := (IDENT "(" [IDENT ([","] IDENT)*] ")" [","])*
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

ELEMENTARY_ACTIONS = frozenset({"join", "split", "mount", "remove", "put", "take"})
MAX_ARITY = 2

KEYWORDS = frozenset(
    {"task", "objects", "element", "tray", "work", "predicates", "steps", "step",
     "actions", "pre", "add", "del", "initial", "final"}
)
SECTION_KEYWORDS = frozenset({"work", "predicates", "steps", "step", "initial", "final",
                              "actions", "pre", "add", "del"})


class TaskError(Exception):
    pass


@dataclass(frozen=True)
class Diagnostic:
    line: int
    column: int
    message: str

    def __str__(self) -> str:
        return f"{self.line}:{self.column}: {self.message}"


class TaskParseError(TaskError):
    """Raised with every diagnostic collected while reading a task file."""

    def __init__(self, diagnostics: list[Diagnostic], source: str = "<task>"):
        self.diagnostics = list(diagnostics)
        self.source = source
        lines = "\n".join(f"{source}:{d}" for d in self.diagnostics)
        super().__init__(lines)


class PreconditionError(TaskError):
    def __init__(self, step: "Step", missing: Iterable["Predicate"]):
        self.step = step
        self.missing = tuple(sorted(missing))
        super().__init__(
            f"step {step.name!r} not applicable; missing: "
            + ", ".join(str(p) for p in self.missing)
        )


@dataclass(frozen=True)
class ObjectDecl:
    name: str
    kind: str  # "element" | "tray"


@dataclass(frozen=True, order=True)
class Predicate:
    name: str
    args: tuple[str, ...] = ()

    def __str__(self) -> str:
        return f"{self.name}({', '.join(self.args)})"


@dataclass(frozen=True)
class Action:
    name: str
    args: tuple[str, ...] = ()

    def __str__(self) -> str:
        return f"{self.name}({', '.join(self.args)})"


@dataclass(frozen=True)
class Configuration:
    """Immutable, canonically ordered set of predicates."""

    predicates: tuple[Predicate, ...] = ()

    def __post_init__(self):
        canon = tuple(sorted(set(self.predicates)))
        object.__setattr__(self, "predicates", canon)
        object.__setattr__(self, "_set", frozenset(canon))

    @classmethod
    def of(cls, predicates: Iterable[Predicate]) -> "Configuration":
        return cls(tuple(predicates))

    def __contains__(self, p: Predicate) -> bool:
        return p in self._set

    def __iter__(self) -> Iterator[Predicate]:
        return iter(self.predicates)

    def __len__(self) -> int:
        return len(self.predicates)

    def as_set(self) -> frozenset[Predicate]:
        return self._set

    def __str__(self) -> str:
        return "{" + ", ".join(str(p) for p in self.predicates) + "}"


@dataclass(frozen=True)
class Step:
    name: str
    actions: tuple[Action, ...] = ()
    preconditions: frozenset[Predicate] = frozenset()
    add_effects: frozenset[Predicate] = frozenset()
    del_effects: frozenset[Predicate] = frozenset()

    def __post_init__(self):
        for attr in ("preconditions", "add_effects", "del_effects"):
            object.__setattr__(self, attr, frozenset(getattr(self, attr)))
        if self.add_effects & self.del_effects:
            raise TaskError(f"step {self.name!r}: add and del effects overlap")


@dataclass(frozen=True)
class TaskDefinition:
    objects: tuple[ObjectDecl, ...]
    predicate_schemas: tuple[tuple[str, int], ...]
    steps: tuple[Step, ...]
    initial: Configuration
    final: Configuration
    name: str = ""
    work_tray: str | None = None
    _kinds: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_kinds", {o.name: o.kind for o in self.objects})

    @property
    def elements(self) -> list[str]:
        return [o.name for o in self.objects if o.kind == "element"]

    @property
    def trays(self) -> list[str]:
        return [o.name for o in self.objects if o.kind == "tray"]

    def kind_of(self, name: str) -> str | None:
        return self._kinds.get(name)

    def step_index(self, name: str) -> int:
        for i, s in enumerate(self.steps):
            if s.name == name:
                return i
        raise KeyError(name)


def check_preconditions(c: Configuration, s: Step) -> bool:
    return s.preconditions <= c.as_set()


def apply_step(c: Configuration, s: Step) -> Configuration:
    missing = s.preconditions - c.as_set()
    if missing:
        raise PreconditionError(s, missing)
    return Configuration.of((c.as_set() - s.del_effects) | s.add_effects)


# --------------------------------------------------------------------------
# Lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<int>[0-9]+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*'*)
  | (?P<punct>[:,()/])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # ident, string, int, punct, eof
    text: str
    line: int
    column: int

    def describe(self) -> str:
        return "end of file" if self.kind == "eof" else repr(self.text)


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if m is None:
            raise TaskParseError([Diagnostic(line, col, f"unexpected character {text[pos]!r}")])
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "string":
            raw = m.group()[1:-1]
            tokens.append(Token("string", re.sub(r"\\(.)", r"\1", raw), line, col))
        elif kind not in ("ws", "comment"):
            tokens.append(Token(kind, m.group(), line, col))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


# --------------------------------------------------------------------------
# Parser


@dataclass
class _Atom:
    name: str
    args: tuple[str, ...]
    token: Token
    arg_tokens: tuple[Token, ...]


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.toks = tokens
        self.i = 0

    @property
    def cur(self) -> Token:
        return self.toks[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def fail(self, expected: Iterable[str]):
        exp = ", ".join(sorted(expected))
        t = self.cur
        raise TaskParseError([Diagnostic(t.line, t.column, f"expected {exp}; got {t.describe()}")])

    def is_kw(self, word: str) -> bool:
        return self.cur.kind == "ident" and self.cur.text == word

    def expect_kw(self, word: str) -> Token:
        if not self.is_kw(word):
            self.fail([repr(word)])
        return self.advance()

    def expect_punct(self, p: str) -> Token:
        if not (self.cur.kind == "punct" and self.cur.text == p):
            self.fail([repr(p)])
        return self.advance()

    def expect_ident(self) -> Token:
        if self.cur.kind != "ident" or self.cur.text in KEYWORDS:
            self.fail(["identifier"])
        return self.advance()

    def advance(self) -> Token:
        t = self.cur
        self.i += 1
        return t

    def skip_comma(self):
        if self.cur.kind == "punct" and self.cur.text == ",":
            self.advance()

    def at_atom(self) -> bool:
        nxt = self.peek()
        return (self.cur.kind == "ident" and self.cur.text not in KEYWORDS
                and nxt.kind == "punct" and nxt.text == "(")

    def atoms(self) -> list[_Atom]:
        out = []
        while self.at_atom():
            head = self.advance()
            self.expect_punct("(")
            args = []
            while not (self.cur.kind == "punct" and self.cur.text == ")"):
                args.append(self.expect_ident())
                if not (self.cur.kind == "punct" and self.cur.text == ")"):
                    if self.cur.kind == "punct" and self.cur.text == ",":
                        self.advance()
                    elif self.cur.kind != "ident":
                        self.fail(["','", "')'"])
            self.advance()
            out.append(_Atom(head.text, tuple(a.text for a in args), head, tuple(args)))
            self.skip_comma()
        return out

    def parse(self):
        name = ""
        if self.is_kw("task"):
            self.advance()
            if self.cur.kind != "string":
                self.fail(["string"])
            name = self.advance().text

        self.expect_kw("objects")
        self.expect_punct(":")
        objects: list[tuple[str, Token]] = []  # (kind, token)
        if not (self.is_kw("element") or self.is_kw("tray")):
            self.fail(["'element'", "'tray'"])
        while self.is_kw("element") or self.is_kw("tray"):
            kind = self.advance().text
            objects.append((kind, self.expect_ident()))
            self.skip_comma()
            while self.cur.kind == "ident" and self.cur.text not in KEYWORDS:
                objects.append((kind, self.advance()))
                self.skip_comma()

        work = None
        if self.is_kw("work"):
            self.advance()
            self.expect_punct(":")
            work = self.expect_ident()

        self.expect_kw("predicates")
        self.expect_punct(":")
        schemas: list[tuple[Token, int]] = []
        while self.cur.kind == "ident" and self.cur.text not in KEYWORDS:
            ident = self.advance()
            self.expect_punct("/")
            if self.cur.kind != "int":
                self.fail(["arity"])
            schemas.append((ident, int(self.advance().text)))
            self.skip_comma()
        if not schemas:
            self.fail(["predicate schema"])

        self.expect_kw("steps")
        self.expect_punct(":")
        steps = []
        while self.is_kw("step"):
            self.advance()
            if self.cur.kind != "string":
                self.fail(["step name string"])
            name_tok = self.advance()
            self.expect_punct(":")
            parts: dict[str, list[_Atom]] = {}
            while self.cur.kind == "ident" and self.cur.text in ("actions", "pre", "add", "del"):
                kw = self.advance()
                if kw.text in parts:
                    raise TaskParseError([Diagnostic(kw.line, kw.column,
                                                     f"duplicate {kw.text!r} in step")])
                self.expect_punct(":")
                parts[kw.text] = self.atoms()
            steps.append((name_tok, parts))

        self.expect_kw("initial")
        self.expect_punct(":")
        initial = self.atoms()
        self.expect_kw("final")
        self.expect_punct(":")
        final = self.atoms()
        if self.cur.kind != "eof":
            self.fail(["end of file"])
        return name, objects, work, schemas, steps, initial, final


def _build(parsed, source: str) -> TaskDefinition:
    name, objects, work, schemas, steps, initial, final = parsed
    diags: list[Diagnostic] = []

    def err(tok: Token, msg: str):
        diags.append(Diagnostic(tok.line, tok.column, msg))

    kinds: dict[str, str] = {}
    decls = []
    for kind, tok in objects:
        if tok.text in kinds:
            err(tok, f"duplicate object {tok.text!r}")
            continue
        kinds[tok.text] = kind
        decls.append(ObjectDecl(tok.text, kind))
    if not any(k == "element" for k in kinds.values()):
        err(objects[0][1], "task declares no element")
    if not any(k == "tray" for k in kinds.values()):
        err(objects[0][1], "task declares no tray")

    arity: dict[str, int] = {}
    for tok, n in schemas:
        if tok.text in arity:
            err(tok, f"duplicate predicate schema {tok.text!r}")
        elif not 1 <= n <= MAX_ARITY:
            err(tok, f"predicate {tok.text!r}: arity must be 1..{MAX_ARITY}, got {n}")
        else:
            arity[tok.text] = n

    if work is not None and kinds.get(work.text) != "tray":
        err(work, f"work tray {work.text!r} is not a declared tray")

    def check_args(atom: _Atom):
        ok = True
        for a in atom.arg_tokens:
            if a.text not in kinds:
                err(a, f"undeclared object {a.text!r}")
                ok = False
        return ok

    def predicates(atoms: list[_Atom]) -> set[Predicate]:
        out = set()
        for atom in atoms:
            ok = True
            if atom.name not in arity:
                err(atom.token, f"undeclared predicate {atom.name!r}")
                ok = False
            elif len(atom.args) != arity[atom.name]:
                err(atom.token, f"predicate {atom.name!r} expects {arity[atom.name]} "
                                f"argument(s), got {len(atom.args)}")
                ok = False
            ok = check_args(atom) and ok
            if ok:
                out.add(Predicate(atom.name, atom.args))
        return out

    built_steps = []
    seen_steps: set[str] = set()
    for name_tok, parts in steps:
        if name_tok.text in seen_steps:
            err(name_tok, f"duplicate step name {name_tok.text!r}")
        seen_steps.add(name_tok.text)
        actions = []
        for atom in parts.get("actions", []):
            if atom.name not in ELEMENTARY_ACTIONS:
                err(atom.token, f"unknown action {atom.name!r}; expected one of "
                                + ", ".join(sorted(ELEMENTARY_ACTIONS)))
            check_args(atom)
            actions.append(Action(atom.name, atom.args))
        pre = predicates(parts.get("pre", []))
        add = predicates(parts.get("add", []))
        dele = predicates(parts.get("del", []))
        overlap = add & dele
        if overlap:
            err(name_tok, f"step {name_tok.text!r}: predicates both added and deleted: "
                          + ", ".join(str(p) for p in sorted(overlap)))
            dele -= overlap
        built_steps.append(Step(name_tok.text, tuple(actions), frozenset(pre),
                                frozenset(add), frozenset(dele)))

    init_c = Configuration.of(predicates(initial))
    final_c = Configuration.of(predicates(final))
    if diags:
        diags.sort(key=lambda d: (d.line, d.column))
        raise TaskParseError(diags, source)
    return TaskDefinition(
        objects=tuple(decls),
        predicate_schemas=tuple((t.text, n) for t, n in schemas),
        steps=tuple(built_steps),
        initial=init_c,
        final=final_c,
        name=name,
        work_tray=work.text if work is not None else None,
    )


def parse_task_definition(text: str, source: str = "<task>") -> TaskDefinition:
    """Parse ``.task`` source text.

    Raises :class:`TaskParseError` carrying line/column diagnostics for
    syntax errors (first error only) or semantic errors (all of them).
    """
    try:
        parsed = _Parser(tokenize(text)).parse()
    except TaskParseError as e:
        raise TaskParseError(e.diagnostics, source) from None
    return _build(parsed, source)


def load_task(path: str | Path) -> TaskDefinition:
    path = Path(path)
    return parse_task_definition(path.read_text(encoding="utf-8"), source=str(path))


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def serialize_task(task: TaskDefinition) -> str:
    """Canonical, byte-stable text form (LF endings, two-space indent)."""
    out: list[str] = []
    if task.name:
        out += [f"task {_quote(task.name)}", ""]
    out.append("objects:")
    for kind in ("element", "tray"):
        names = [o.name for o in task.objects if o.kind == kind]
        if names:
            out.append(f"  {kind} " + ", ".join(names))
    if task.work_tray:
        out += ["", f"work: {task.work_tray}"]
    out += ["", "predicates:"]
    out += [f"  {n}/{a}" for n, a in task.predicate_schemas]
    out += ["", "steps:"]
    for s in task.steps:
        out.append(f"  step {_quote(s.name)}:")
        out.append("    actions: " + ", ".join(str(a) for a in s.actions))
        for label, preds in (("pre", s.preconditions), ("add", s.add_effects),
                             ("del", s.del_effects)):
            out.append(f"    {label}:")
            out += [f"      {p}" for p in sorted(preds)]
    for label, conf in (("initial", task.initial), ("final", task.final)):
        out += ["", f"{label}:"]
        out += [f"  {p}" for p in conf]
    return "\n".join(line.rstrip() for line in out) + "\n"

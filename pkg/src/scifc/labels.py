"""Integrity labels over the free distributive lattice of principals.

A label is read as a monotone propositional formula over principal atoms:
meet is conjunction, join is disjunction and ``any`` is ``true``.  A label
``l1`` flows to ``l2`` when ``l1`` entails ``l2``, so more trusted labels are
logically stronger.  Dynamically checked trust facts ``a => b`` act as
implication axioms between atoms.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping

Principal = str
Clause = frozenset  # frozenset[Principal]
Dnf = frozenset  # frozenset[Clause]
TrustEnv = frozenset  # frozenset[tuple[Principal, Principal]]

EMPTY_TRUST: TrustEnv = frozenset()
ORACLE_MAX_ATOMS = 16


class LabelError(ValueError):
    pass


class Label:
    """Base class of label syntax trees."""

    __slots__ = ()

    def __or__(self, other: Label) -> Label:
        return Join(self, other)

    def __and__(self, other: Label) -> Label:
        return Meet(self, other)

    def __str__(self) -> str:
        return show(self)


@dataclass(frozen=True, repr=False)
class Atom(Label):
    id: Principal

    def __repr__(self) -> str:
        return f"Atom({self.id!r})"


@dataclass(frozen=True, repr=False)
class This(Label):
    def __repr__(self) -> str:
        return "This()"


@dataclass(frozen=True, repr=False)
class Any(Label):
    def __repr__(self) -> str:
        return "Any()"


@dataclass(frozen=True, repr=False)
class Bot(Label):
    """Label of literal constants: nothing influenced them.

    Not expressible in source text; it is the empty join.
    """

    def __repr__(self) -> str:
        return "Bot()"


@dataclass(frozen=True, repr=False)
class Join(Label):
    left: Label
    right: Label

    def __repr__(self) -> str:
        return f"Join({self.left!r}, {self.right!r})"


@dataclass(frozen=True, repr=False)
class Meet(Label):
    left: Label
    right: Label

    def __repr__(self) -> str:
        return f"Meet({self.left!r}, {self.right!r})"


THIS = This()
ANY = Any()
BOT = Bot()


def resolve_this(l: Label, self_addr: Principal) -> Label:
    """Replace every ``this`` in ``l`` by the atom ``self_addr``."""
    match l:
        case This():
            return Atom(self_addr)
        case Join(a, b):
            return Join(resolve_this(a, self_addr), resolve_this(b, self_addr))
        case Meet(a, b):
            return Meet(resolve_this(a, self_addr), resolve_this(b, self_addr))
        case _:
            return l


def substitute(l: Label, mapping: Mapping[Principal, Label]) -> Label:
    """Replace atoms by labels (used for parameter and dependent-key binding)."""
    match l:
        case Atom(p) if p in mapping:
            return mapping[p]
        case Join(a, b):
            return Join(substitute(a, mapping), substitute(b, mapping))
        case Meet(a, b):
            return Meet(substitute(a, mapping), substitute(b, mapping))
        case _:
            return l


def atoms(l: Label) -> frozenset:
    match l:
        case Atom(p):
            return frozenset((p,))
        case Join(a, b) | Meet(a, b):
            return atoms(a) | atoms(b)
        case _:
            return frozenset()


def contains_this(l: Label) -> bool:
    match l:
        case This():
            return True
        case Join(a, b) | Meet(a, b):
            return contains_this(a) or contains_this(b)
        case _:
            return False


def _minimize(clauses: Iterable[Clause]) -> Dnf:
    # drop clauses that strictly contain another clause (absorption)
    cs = sorted(set(clauses), key=len)
    kept: list[Clause] = []
    for c in cs:
        if not any(k <= c for k in kept):
            kept.append(c)
    return frozenset(kept)


@lru_cache(maxsize=65536)
def dnf(l: Label) -> Dnf:
    """Disjunctive normal form as an antichain of atom sets."""
    match l:
        case Atom(p):
            return frozenset((frozenset((p,)),))
        case Any():
            return frozenset((frozenset(),))
        case Bot():
            return frozenset()
        case This():
            raise LabelError("label contains unresolved 'this'")
        case Join(a, b):
            return _minimize(dnf(a) | dnf(b))
        case Meet(a, b):
            return _minimize(x | y for x in dnf(a) for y in dnf(b))
    raise LabelError(f"not a label: {l!r}")


def _clause_label(c: Clause) -> Label:
    if not c:
        return ANY
    out: Label | None = None
    for p in sorted(c):
        out = Atom(p) if out is None else Meet(out, Atom(p))
    return out


def _sort_key(c: Clause) -> tuple:
    return (len(c), sorted(c))


def from_dnf(d: Dnf) -> Label:
    if not d:
        return BOT
    out: Label | None = None
    for c in sorted(d, key=_sort_key):
        cl = _clause_label(c)
        out = cl if out is None else Join(out, cl)
    return out


def normalize(l: Label) -> Label:
    """Canonical label: sorted antichain DNF rebuilt as a left-nested tree."""
    return from_dnf(dnf(l))


def canonical(l: Label) -> str:
    """Canonical text of a ``this``-free label; the comparison key for labels."""
    d = dnf(l)
    if not d:
        return "<const>"
    parts = []
    for c in sorted(d, key=_sort_key):
        parts.append("any" if not c else " /\\ ".join(sorted(c)))
    return " \\/ ".join(parts)


def equivalent(l1: Label, l2: Label) -> bool:
    return dnf(l1) == dnf(l2)


def _close(clause: Clause, trust: TrustEnv) -> Clause:
    if not trust:
        return clause
    out = set(clause)
    changed = True
    while changed:
        changed = False
        for a, b in trust:
            if a in out and b not in out:
                out.add(b)
                changed = True
    return frozenset(out)


def _check_trust(trust: Iterable) -> TrustEnv:
    t = frozenset(trust)
    for pair in t:
        if not (isinstance(pair, tuple) and len(pair) == 2
                and all(isinstance(p, str) for p in pair)):
            raise LabelError(f"trust hypotheses relate principals only, got {pair!r}")
    return t


@lru_cache(maxsize=262144)
def _flows(d1: Dnf, d2: Dnf, trust: TrustEnv) -> bool:
    for c in d1:
        closed = _close(c, trust)
        if not any(k <= closed for k in d2):
            return False
    return True


def flows_to(l1: Label, l2: Label, trust: Iterable = EMPTY_TRUST) -> bool:
    """Decide ``l1 => l2`` in the lattice quotiented by ``trust``."""
    return _flows(dnf(l1), dnf(l2), _check_trust(trust))


def join(l1: Label, l2: Label) -> Label:
    """Least upper bound: the combination is as untrusted as either input."""
    return normalize(Join(l1, l2))


def meet(l1: Label, l2: Label) -> Label:
    return normalize(Meet(l1, l2))


def join_all(labels: Iterable[Label]) -> Label:
    out: Label = BOT
    for l in labels:
        out = Join(out, l)
    return normalize(out)


def _eval(d: Dnf, true_atoms: frozenset) -> bool:
    return any(c <= true_atoms for c in d)


def oracle_flows_to(l1: Label, l2: Label, trust: Iterable = EMPTY_TRUST) -> bool:
    """Brute-force entailment over every valuation of the atoms involved."""
    t = _check_trust(trust)
    d1, d2 = dnf(l1), dnf(l2)
    names = sorted(atoms(l1) | atoms(l2) | {p for pair in t for p in pair})
    if len(names) > ORACLE_MAX_ATOMS:
        raise LabelError(f"oracle limited to {ORACLE_MAX_ATOMS} atoms, got {len(names)}")
    for bits in itertools.product((False, True), repeat=len(names)):
        true_atoms = frozenset(n for n, b in zip(names, bits) if b)
        if any(a in true_atoms and b not in true_atoms for a, b in t):
            continue
        if _eval(d1, true_atoms) and not _eval(d2, true_atoms):
            return False
    return True


def show(l: Label) -> str:
    """Source-style rendering; meet binds tighter than join."""
    match l:
        case Atom(p):
            return p
        case This():
            return "this"
        case Any():
            return "any"
        case Bot():
            return "<const>"
        case Join(a, b):
            return f"{show(a)} \\/ {show(b)}"
        case Meet(a, b):
            return f"{_show_meet_arg(a)} /\\ {_show_meet_arg(b)}"
    return repr(l)


def _show_meet_arg(l: Label) -> str:
    return f"({show(l)})" if isinstance(l, Join) else show(l)


# -- text syntax ---------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(\\/)|(/\\)|(\()|(\))|([@A-Za-z_$?][\w.#@$?]*))")


def tokenize_label(text: str) -> list[str]:
    out, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise LabelError(f"unexpected character at {pos}: {text[pos:pos + 10]!r}")
        out.append(next(g for g in m.groups() if g is not None))
        pos = m.end()
    return out


class _LabelParser:
    def __init__(self, toks: list[str]):
        self.toks = toks
        self.i = 0

    def peek(self) -> str | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def take(self) -> str:
        tok = self.peek()
        if tok is None:
            raise LabelError("unexpected end of label")
        self.i += 1
        return tok

    def join(self) -> Label:
        l = self.meet()
        while self.peek() == "\\/":
            self.take()
            l = Join(l, self.meet())
        return l

    def meet(self) -> Label:
        l = self.atom()
        while self.peek() == "/\\":
            self.take()
            l = Meet(l, self.atom())
        return l

    def atom(self) -> Label:
        tok = self.take()
        if tok == "(":
            l = self.join()
            if self.take() != ")":
                raise LabelError("expected ')'")
            return l
        if tok in ("\\/", "/\\", ")"):
            raise LabelError(f"unexpected {tok!r}")
        if tok == "this":
            return THIS
        if tok == "any":
            return ANY
        return Atom(tok)


def parse_label(text: str) -> Label:
    """Parse ``A /\\ (B \\/ any)``-style label text."""
    p = _LabelParser(tokenize_label(text))
    l = p.join()
    if p.peek() is not None:
        raise LabelError(f"trailing input at {p.peek()!r}")
    return l

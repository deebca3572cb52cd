"""Parser for the structural-alert pattern language.

A SMARTS-flavoured subset::

    chain   := atom tail*
    tail    := bond? DIGIT | bond? atom | '(' bond? chain ')'
    atom    := (ELEMENT | '*' | '[' item (',' item)* ']') charge? '@'?
    item    := ELEMENT | '*'
    charge  := '{' ('+' | '-')? DIGITS '}'
    bond    := ('-' | '=' | '#' | ':' | '~') '@'?

An omitted bond means single-or-aromatic, as in SMARTS.
"""

from __future__ import annotations

from dataclasses import dataclass, field

ELEMENTS = ("Cl", "Br", "C", "N", "O", "S", "P", "F", "I", "H")
BOND_SYMBOLS = {"-": frozenset({1}), "=": frozenset({2}), "#": frozenset({3}), ":": frozenset({4}), "~": None}
DEFAULT_BOND = frozenset({1, 4})


class PatternSyntaxError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


@dataclass(frozen=True)
class QueryAtom:
    elements: frozenset | None  # None = wildcard
    charge: int | None = None
    in_ring: bool = False

    def matches(self, element: str, charge: int, ring: bool) -> bool:
        if self.elements is not None and element not in self.elements:
            return False
        if self.charge is not None and charge != self.charge:
            return False
        return ring or not self.in_ring


@dataclass(frozen=True)
class QueryBond:
    orders: frozenset | None  # None = any existing bond
    in_ring: bool = False

    def matches(self, order: int, ring: bool) -> bool:
        if order == 0:
            return False
        if self.orders is not None and order not in self.orders:
            return False
        return ring or not self.in_ring


@dataclass
class QueryGraph:
    atoms: list[QueryAtom] = field(default_factory=list)
    bonds: dict = field(default_factory=dict)  # (i, j) with i < j -> QueryBond

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def neighbors(self, i: int) -> list[tuple[int, QueryBond]]:
        out = []
        for (a, b), bond in self.bonds.items():
            if a == i:
                out.append((b, bond))
            elif b == i:
                out.append((a, bond))
        return sorted(out, key=lambda x: x[0])

    def bond(self, i: int, j: int) -> QueryBond | None:
        return self.bonds.get((min(i, j), max(i, j)))

    def is_connected(self) -> bool:
        if not self.atoms:
            return False
        seen, stack = {0}, [0]
        while stack:
            u = stack.pop()
            for v, _ in self.neighbors(u):
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == self.n_atoms


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.graph = QueryGraph()
        self.open_rings: dict = {}

    # byte offset of the current character position
    def offset(self) -> int:
        return len(self.text[: self.pos].encode("utf-8"))

    def error(self, msg: str):
        raise PatternSyntaxError(msg, self.offset())

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def element(self) -> str:
        for sym in ELEMENTS:
            if self.text.startswith(sym, self.pos):
                self.pos += len(sym)
                return sym
        self.error("expected element symbol")

    def parse(self) -> QueryGraph:
        if not self.text:
            self.error("empty pattern")
        self.chain()
        if self.pos != len(self.text):
            self.error(f"unexpected character {self.peek()!r}")
        if self.open_rings:
            digit, (_, _, off) = next(iter(self.open_rings.items()))
            raise PatternSyntaxError(f"unclosed ring closure {digit}", off)
        if not self.graph.is_connected():
            raise PatternSyntaxError("disconnected pattern", 0)
        return self.graph

    def chain(self) -> int:
        first = prev = self.atom()
        while True:
            c = self.peek()
            if c == "(":
                self.pos += 1
                bond = self.bond_opt()
                branch = self.chain()
                self.add_bond(prev, branch, bond)
                if self.peek() != ")":
                    self.error("expected ')'")
                self.pos += 1
            elif c in BOND_SYMBOLS or c.isdigit():
                bond = self.bond_opt()
                if self.peek().isdigit():
                    self.ring_closure(prev, bond)
                else:
                    nxt = self.atom()
                    self.add_bond(prev, nxt, bond)
                    prev = nxt
            elif c and (c in "*[" or c.isupper()):
                nxt = self.atom()
                self.add_bond(prev, nxt, None)
                prev = nxt
            else:
                return first

    def bond_opt(self):
        c = self.peek()
        if not c or c not in BOND_SYMBOLS:
            return None
        self.pos += 1
        ring = False
        if self.peek() == "@":
            self.pos += 1
            ring = True
        return QueryBond(BOND_SYMBOLS[c], ring)

    def ring_closure(self, atom: int, bond):
        off = self.offset()
        digit = self.peek()
        self.pos += 1
        if digit in self.open_rings:
            other, other_bond, _ = self.open_rings.pop(digit)
            if other == atom:
                self.error("ring closure onto the same atom")
            if bond is not None and other_bond is not None and bond != other_bond:
                self.error("conflicting ring-closure bonds")
            self.add_bond(other, atom, bond if bond is not None else other_bond)
        else:
            self.open_rings[digit] = (atom, bond, off)

    def add_bond(self, i: int, j: int, bond):
        key = (min(i, j), max(i, j))
        if key in self.graph.bonds:
            self.error("duplicate bond")
        self.graph.bonds[key] = bond if bond is not None else QueryBond(DEFAULT_BOND)

    def atom(self) -> int:
        c = self.peek()
        if c == "*":
            self.pos += 1
            elements = None
        elif c == "[":
            self.pos += 1
            items = []
            while True:
                if self.peek() == "*":
                    self.pos += 1
                    items.append(None)
                else:
                    items.append(self.element())
                if self.peek() == ",":
                    self.pos += 1
                    continue
                if self.peek() != "]":
                    self.error("expected ',' or ']'")
                self.pos += 1
                break
            elements = None if None in items else frozenset(items)
        else:
            elements = frozenset({self.element()})
        charge = None
        if self.peek() == "{":
            self.pos += 1
            start = self.pos
            if self.peek() and self.peek() in "+-":
                self.pos += 1
            while self.peek().isdigit():
                self.pos += 1
            body = self.text[start : self.pos]
            if body in ("", "+", "-"):
                self.error("expected charge value")
            charge = int(body)
            if self.peek() != "}":
                self.error("expected '}'")
            self.pos += 1
        ring = False
        if self.peek() == "@":
            self.pos += 1
            ring = True
        self.graph.atoms.append(QueryAtom(elements, charge, ring))
        return len(self.graph.atoms) - 1


def parse_pattern(text: str) -> QueryGraph:
    return _Parser(text.strip()).parse()


def load_patterns(path) -> list[tuple[str, QueryGraph]]:
    from .molecule import read_rule_lines

    return [(line, parse_pattern(line)) for line in read_rule_lines(path)]

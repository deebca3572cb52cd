"""Molecule data model, atom vocabulary and JSON-lines I/O."""

from __future__ import annotations

import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BOND_NONE, BOND_SINGLE, BOND_DOUBLE, BOND_TRIPLE, BOND_AROMATIC = range(5)
N_BOND_TYPES = 5

# valence contribution of each bond code
BOND_ORDER_VALUE = np.array([0.0, 1.0, 2.0, 3.0, 1.5])


class MoleculeFormatError(ValueError):
    """Raised for malformed molecule records or invariant violations."""


def read_rule_lines(path) -> list[str]:
    """Non-empty lines of a UTF-8 data file with comments stripped.

    A comment starts at a ``#`` that opens the line or follows whitespace, so
    ``#`` inside a token (a triple bond in a pattern) is kept.
    """
    out = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = re.split(r"(?:^|\s)#", raw, maxsplit=1)[0].strip()
            if line:
                out.append(line)
    return out


def data_path(name: str) -> Path:
    return Path(str(resources.files("dfmol.molgraph").joinpath("data", name)))


@dataclass(frozen=True)
class AtomVocabulary:
    """Ordered element symbols, the charge categories, and the valence table.

    ``valences`` maps ``(element, charge)`` to the set of allowed valences. The
    charge categories (``charges``) are what the generative model predicts;
    they need not all be allowed for every element.
    """

    elements: tuple[str, ...]
    charges: tuple[int, ...] = (-1, 0, 1)
    valences: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if len(set(self.elements)) != len(self.elements):
            raise ValueError("duplicate element in vocabulary")
        for el in self.elements:
            if not any(k[0] == el and v for k, v in self.valences.items()):
                raise ValueError(f"element {el} has no allowed valence")

    @classmethod
    def from_table(cls, elements: Sequence[str], charges: Sequence[int] = (-1, 0, 1), path=None):
        table = load_valence_table(path if path is not None else data_path("valences.txt"))
        table = {k: v for k, v in table.items() if k[0] in set(elements)}
        return cls(tuple(elements), tuple(charges), table)

    @property
    def n_types(self) -> int:
        return len(self.elements)

    @property
    def n_charges(self) -> int:
        return len(self.charges)

    def index(self, symbol: str) -> int:
        try:
            return self.elements.index(symbol)
        except ValueError:
            raise MoleculeFormatError(f"unknown element symbol {symbol!r}") from None

    def charge_index(self, charge: int) -> int:
        try:
            return self.charges.index(int(charge))
        except ValueError:
            raise MoleculeFormatError(f"charge {charge} not in vocabulary charges {self.charges}") from None

    def allowed(self, element: str, charge: int) -> frozenset | None:
        return self.valences.get((element, int(charge)))

    def to_json(self) -> dict:
        return {
            "elements": list(self.elements),
            "charges": list(self.charges),
            "valences": [[el, q, sorted(v)] for (el, q), v in sorted(self.valences.items())],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AtomVocabulary":
        table = {(el, int(q)): frozenset(int(x) for x in v) for el, q, v in obj["valences"]}
        return cls(tuple(obj["elements"]), tuple(int(q) for q in obj["charges"]), table)


def load_valence_table(path) -> dict:
    table: dict = {}
    for line in read_rule_lines(path):
        parts = line.split()
        if len(parts) < 3:
            raise MoleculeFormatError(f"bad valence rule: {line!r}")
        key = (parts[0], int(parts[1]))
        table[key] = frozenset(int(x) for x in parts[2:])
    return table


DEFAULT_ELEMENTS = ("C", "N", "O", "H", "F", "S", "Cl", "Br", "I", "P", "B", "Si")
TOY_ELEMENTS = ("C", "N", "O", "H")


def default_vocabulary() -> AtomVocabulary:
    return AtomVocabulary.from_table(DEFAULT_ELEMENTS)


def toy_vocabulary() -> AtomVocabulary:
    return AtomVocabulary.from_table(TOY_ELEMENTS)


@dataclass(eq=False)
class Molecule:
    """A 3D molecular graph on a fully connected atom set.

    ``atom_types`` index into the vocabulary's elements; ``charges`` hold the
    formal charges themselves (not category indices); ``bonds`` is the
    symmetric matrix of bond codes, 0 meaning no bond and 4 aromatic.
    """

    positions: np.ndarray
    atom_types: np.ndarray
    charges: np.ndarray
    bonds: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.atom_types = np.asarray(self.atom_types, dtype=np.int64).reshape(-1)
        self.charges = np.asarray(self.charges, dtype=np.int64).reshape(-1)
        self.bonds = np.asarray(self.bonds, dtype=np.int64)

    @property
    def n_atoms(self) -> int:
        return len(self.atom_types)

    def validate(self, vocab: AtomVocabulary | None = None) -> None:
        n = self.n_atoms
        if n < 1:
            raise MoleculeFormatError("molecule has no atoms")
        if self.positions.shape != (n, 3) or self.charges.shape != (n,):
            raise MoleculeFormatError("inconsistent per-atom array lengths")
        if self.bonds.shape != (n, n):
            raise MoleculeFormatError("bond matrix shape mismatch")
        if not np.array_equal(self.bonds, self.bonds.T):
            raise MoleculeFormatError("asymmetric bond matrix")
        if np.any(np.diag(self.bonds) != 0):
            raise MoleculeFormatError("self bond on diagonal")
        if self.bonds.min() < 0 or self.bonds.max() >= N_BOND_TYPES:
            raise MoleculeFormatError("bond code out of range")
        if not np.all(np.isfinite(self.positions)):
            raise MoleculeFormatError("non-finite coordinates")
        if vocab is not None:
            if self.atom_types.min() < 0 or self.atom_types.max() >= vocab.n_types:
                raise MoleculeFormatError("atom type index outside vocabulary")

    def symbols(self, vocab: AtomVocabulary) -> list[str]:
        return [vocab.elements[i] for i in self.atom_types]

    def bond_list(self) -> list[tuple[int, int, int]]:
        iu, ju = np.nonzero(np.triu(self.bonds, 1))
        return [(int(i), int(j), int(self.bonds[i, j])) for i, j in zip(iu, ju)]

    def permuted(self, perm: Sequence[int]) -> "Molecule":
        """Molecule with new atom ``k`` equal to old atom ``perm[k]``."""
        p = np.asarray(perm)
        return Molecule(self.positions[p], self.atom_types[p], self.charges[p], self.bonds[np.ix_(p, p)])

    def copy(self) -> "Molecule":
        return Molecule(self.positions.copy(), self.atom_types.copy(), self.charges.copy(), self.bonds.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Molecule):
            return NotImplemented
        return (
            np.array_equal(self.positions, other.positions)
            and np.array_equal(self.atom_types, other.atom_types)
            and np.array_equal(self.charges, other.charges)
            and np.array_equal(self.bonds, other.bonds)
        )

    __hash__ = None


def molecule_to_record(mol: Molecule, vocab: AtomVocabulary) -> dict:
    atoms = [
        {"el": vocab.elements[a], "q": int(q), "xyz": [float(v) for v in xyz]}
        for a, q, xyz in zip(mol.atom_types, mol.charges, mol.positions)
    ]
    return {"atoms": atoms, "bonds": [list(b) for b in mol.bond_list()]}


def molecule_from_record(rec: dict, vocab: AtomVocabulary) -> Molecule:
    atoms = rec["atoms"]
    n = len(atoms)
    if n == 0:
        raise MoleculeFormatError("molecule has no atoms")
    pos = np.array([a["xyz"] for a in atoms], dtype=np.float64)
    types = [vocab.index(a["el"]) for a in atoms]
    charges = [int(a.get("q", 0)) for a in atoms]
    bonds = np.zeros((n, n), dtype=np.int64)
    seen: dict = {}
    for entry in rec.get("bonds", []):
        i, j, order = (int(v) for v in entry)
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise MoleculeFormatError(f"bad bond indices ({i}, {j})")
        if order not in (1, 2, 3, 4):
            raise MoleculeFormatError(f"bond order {order} not in 1..4")
        key = (min(i, j), max(i, j))
        if key in seen and seen[key] != order:
            raise MoleculeFormatError(f"asymmetric bond between atoms {key[0]} and {key[1]}")
        seen[key] = order
        bonds[i, j] = bonds[j, i] = order
    mol = Molecule(pos, types, charges, bonds)
    mol.validate(vocab)
    return mol


def load_molecules(path, vocab: AtomVocabulary | None = None) -> list[Molecule]:
    vocab = vocab or default_vocabulary()
    mols = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                mols.append(molecule_from_record(rec, vocab))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise MoleculeFormatError(f"line {lineno}: parse failure: {exc}") from exc
            except MoleculeFormatError as exc:
                raise MoleculeFormatError(f"line {lineno}: {exc}") from exc
    return mols


def _dumps(rec: dict) -> str:
    # repr of a Python float is the shortest string that round-trips exactly
    return json.dumps(rec, separators=(",", ":"))


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_molecules(mols: Iterable[Molecule], path, vocab: AtomVocabulary | None = None) -> None:
    vocab = vocab or default_vocabulary()
    lines = []
    for mol in mols:
        mol.validate(vocab)
        lines.append(_dumps(molecule_to_record(mol, vocab)) + "\n")
    atomic_write_text(path, "".join(lines))

"""Valence accounting, atom/molecule stability and the validity approximation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from .molecule import BOND_ORDER_VALUE, AtomVocabulary, Molecule


@dataclass
class StabilityReport:
    valence: np.ndarray
    atom_stable: np.ndarray
    molecule_stable: bool
    molecule_valid: bool

    @property
    def n_stable_atoms(self) -> int:
        return int(self.atom_stable.sum())


def atom_valences(mol: Molecule) -> np.ndarray:
    return BOND_ORDER_VALUE[mol.bonds].sum(axis=1)


def is_connected(bonds: np.ndarray) -> bool:
    n = bonds.shape[0]
    if n <= 1:
        return True
    n_comp, _ = connected_components(bonds > 0, directed=False)
    return n_comp == 1


def _valence_ok(v: float, allowed) -> bool:
    if not allowed:
        return False
    if v == int(v):
        return int(v) in allowed
    # aromatic half-integer valence: either rounding is acceptable
    return math.floor(v) in allowed or math.ceil(v) in allowed


def check_stability(mol: Molecule, vocab: AtomVocabulary) -> StabilityReport:
    """Per-atom valence and stability flags.

    "Valid" here is an approximation: stable, connected, and every
    (element, charge) pair known to the valence table.
    """
    valence = atom_valences(mol)
    stable = np.zeros(mol.n_atoms, dtype=bool)
    known_charge = True
    for i, (a, q) in enumerate(zip(mol.atom_types, mol.charges)):
        allowed = vocab.allowed(vocab.elements[a], int(q))
        if allowed is None:
            known_charge = False
        stable[i] = _valence_ok(float(valence[i]), allowed)
    mol_stable = bool(stable.all())
    valid = mol_stable and known_charge and is_connected(mol.bonds)
    return StabilityReport(valence, stable, mol_stable, valid)

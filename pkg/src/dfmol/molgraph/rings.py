"""Ring perception and fused ring-system keys."""

from __future__ import annotations

import networkx as nx
import numpy as np

from .canon import canonical_graph_key
from .molecule import AtomVocabulary, Molecule


def bond_graph(mol: Molecule) -> nx.Graph:
    g = nx.Graph()
    g.add_nodes_from(range(mol.n_atoms))
    iu, ju = np.nonzero(np.triu(mol.bonds, 1))
    g.add_edges_from(zip(iu.tolist(), ju.tolist()))
    return g


def atom_label(mol: Molecule, i: int, vocab: AtomVocabulary | None = None) -> str:
    el = vocab.elements[mol.atom_types[i]] if vocab is not None else str(int(mol.atom_types[i]))
    q = int(mol.charges[i])
    return f"{el}{q:+d}" if q else el


def ring_systems(mol: Molecule) -> list[list[int]]:
    """Atom index sets of fused ring systems (rings sharing an atom are merged)."""
    cycles = nx.cycle_basis(bond_graph(mol))
    parent = list(range(mol.n_atoms))

    def find(u):
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    in_ring = set()
    for cyc in cycles:
        in_ring.update(cyc)
        root = find(cyc[0])
        for v in cyc[1:]:
            parent[find(v)] = root
    groups: dict = {}
    for v in sorted(in_ring):
        groups.setdefault(find(v), []).append(v)
    return sorted(groups.values())


def extract_ring_systems(mol: Molecule, vocab: AtomVocabulary | None = None) -> list[str]:
    keys = []
    for atoms in ring_systems(mol):
        sub = mol.bonds[np.ix_(atoms, atoms)]
        labels = [atom_label(mol, i, vocab) for i in atoms]
        keys.append(canonical_graph_key(labels, sub))
    return sorted(keys)


def ring_membership(mol: Molecule) -> tuple[np.ndarray, set]:
    """Atoms lying on a cycle and the set of ring bonds ``(i, j)`` with ``i < j``."""
    g = bond_graph(mol)
    bridges = {tuple(sorted(e)) for e in nx.bridges(g)}
    ring_bonds = {tuple(sorted(e)) for e in g.edges() if tuple(sorted(e)) not in bridges}
    atoms = np.zeros(mol.n_atoms, dtype=bool)
    for i, j in ring_bonds:
        atoms[i] = atoms[j] = True
    return atoms, ring_bonds

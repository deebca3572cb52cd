"""Substructure matching of query patterns against molecules."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .molecule import AtomVocabulary, Molecule
from .pattern import QueryGraph
from .rings import ring_membership


def _match_order(query: QueryGraph) -> list[int]:
    # BFS from atom 0 so every atom after the first has a mapped neighbour
    order, seen = [0], {0}
    k = 0
    while k < len(order):
        for v, _ in query.neighbors(order[k]):
            if v not in seen:
                seen.add(v)
                order.append(v)
        k += 1
    return order


def iter_embeddings(query: QueryGraph, mol: Molecule, vocab: AtomVocabulary) -> Iterator[tuple[int, ...]]:
    """All injective maps query atom -> molecule atom preserving query bonds.

    Yields tuples indexed by query atom. Non-bonded query atom pairs carry no
    constraint (monomorphism semantics, as for SMARTS substructure search).
    """
    n = mol.n_atoms
    ring_atoms, ring_bonds = ring_membership(mol)
    symbols = mol.symbols(vocab)
    candidates = [
        [v for v in range(n) if qa.matches(symbols[v], int(mol.charges[v]), bool(ring_atoms[v]))]
        for qa in query.atoms
    ]
    order = _match_order(query)
    neighbors = [query.neighbors(i) for i in range(query.n_atoms)]
    nbr_lists = [np.nonzero(mol.bonds[v])[0].tolist() for v in range(n)]
    mapping: dict = {}
    used: set = set()

    def feasible(qi: int, v: int) -> bool:
        for qj, qbond in neighbors[qi]:
            if qj in mapping:
                w = mapping[qj]
                ring = (min(v, w), max(v, w)) in ring_bonds
                if not qbond.matches(int(mol.bonds[v, w]), ring):
                    return False
        return True

    def extend(depth: int):
        if depth == len(order):
            yield tuple(mapping[i] for i in range(query.n_atoms))
            return
        qi = order[depth]
        anchor = next((qj for qj, _ in neighbors[qi] if qj in mapping), None)
        pool = candidates[qi] if anchor is None else [v for v in nbr_lists[mapping[anchor]] if v in cand_sets[qi]]
        for v in pool:
            if v in used or not feasible(qi, v):
                continue
            mapping[qi] = v
            used.add(v)
            yield from extend(depth + 1)
            del mapping[qi]
            used.discard(v)

    cand_sets = [set(c) for c in candidates]
    yield from extend(0)


def match_count(query: QueryGraph, mol: Molecule, vocab: AtomVocabulary) -> int:
    """Number of distinct molecule atom subsets hit by at least one embedding."""
    return len({frozenset(m) for m in iter_embeddings(query, mol, vocab)})

"""Canonical text keys for small labelled graphs.

Colour refinement followed by individualisation of the first non-singleton
cell; every leaf of the search tree yields an ordering, and the key is the
lexicographically smallest encoding over all leaves.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

MAX_ATOMS = 64


def _rank(signatures: list) -> list[int]:
    order = {sig: k for k, sig in enumerate(sorted(set(signatures)))}
    return [order[s] for s in signatures]


def _refine(colors: list[int], adj: list[list[tuple[int, int]]]) -> list[int]:
    n_cells = len(set(colors))
    while True:
        sigs = [(colors[v], tuple(sorted((o, colors[u]) for u, o in adj[v]))) for v in range(len(colors))]
        new = _rank(sigs)
        n_new = len(set(new))
        if n_new == n_cells:
            return new
        colors, n_cells = new, n_new


def _encode(order: Sequence[int], labels: Sequence[str], bonds: np.ndarray) -> tuple:
    pos = {v: k for k, v in enumerate(order)}
    atoms = tuple(labels[v] for v in order)
    edges = []
    n = len(order)
    for i in range(n):
        for j in range(i + 1, n):
            if bonds[i, j]:
                a, b = sorted((pos[i], pos[j]))
                edges.append((a, b, int(bonds[i, j])))
    return atoms, tuple(sorted(edges))


def canonical_graph_key(labels: Sequence[str], bonds: np.ndarray) -> str:
    """Key invariant under relabelling of the vertices.

    ``labels`` are per-vertex strings (element plus charge for molecules) and
    ``bonds`` the symmetric bond-code matrix restricted to the subgraph.
    """
    n = len(labels)
    if n > MAX_ATOMS:
        raise ValueError(f"graph has {n} atoms; canonical keys support at most {MAX_ATOMS}")
    bonds = np.asarray(bonds)
    adj = [[(j, int(bonds[i, j])) for j in range(n) if j != i and bonds[i, j]] for i in range(n)]
    start = _refine(_rank(list(labels)), adj)

    best = None
    stack = [start]
    while stack:
        colors = stack.pop()
        if len(set(colors)) == n:
            order = sorted(range(n), key=lambda v: colors[v])
            enc = _encode(order, labels, bonds)
            if best is None or enc < best:
                best = enc
            continue
        counts: dict = {}
        for c in colors:
            counts[c] = counts.get(c, 0) + 1
        target = min(c for c, k in counts.items() if k > 1)
        for v in (u for u in range(n) if colors[u] == target):
            indiv = [(c, 0 if u == v else 1) if c == target else (c, 0) for u, c in enumerate(colors)]
            stack.append(_refine(_rank(indiv), adj))

    atoms, edges = best
    return ".".join(atoms) + "|" + ",".join(f"{a}-{b}:{o}" for a, b, o in edges)

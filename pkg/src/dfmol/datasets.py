"""Toy molecule templates, atom-count sampling and batch featurisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .molgraph import AtomVocabulary, Molecule, check_stability, toy_vocabulary

BH = 1.09  # C-H / N-H style bond length used for hydrogens

# unit directions of a tetrahedron with one bond along +x
_TET = np.array(
    [
        [1.0, 0.0, 0.0],
        [-1 / 3, 2 * np.sqrt(2) / 3, 0.0],
        [-1 / 3, -np.sqrt(2) / 3, np.sqrt(2 / 3)],
        [-1 / 3, -np.sqrt(2) / 3, -np.sqrt(2 / 3)],
    ]
)


def _ring(heavy: list[str], orders: list[int], bond: float, h_on: list[bool]):
    n = len(heavy)
    radius = bond / (2 * np.sin(np.pi / n))
    ang = 2 * np.pi * np.arange(n) / n
    radial = np.stack([np.cos(ang), np.sin(ang), np.zeros(n)], -1)
    pos = list(radius * radial)
    els = list(heavy)
    bonds = [(i, (i + 1) % n, orders[i]) for i in range(n)]
    for i in range(n):
        if h_on[i]:
            bonds.append((i, len(els), 1))
            els.append("H")
            pos.append((radius + BH) * radial[i])
    return els, np.array(pos), bonds


def _oxirane():
    # triangle C-C-O with two hydrogens per carbon above and below the plane
    c0, c1, o = np.array([-0.73, 0.0, 0.0]), np.array([0.73, 0.0, 0.0]), np.array([0.0, 1.23, 0.0])
    pos = [c0, c1, o]
    bonds = [(0, 1, 1), (1, 2, 1), (0, 2, 1)]
    els = ["C", "C", "O"]
    for ci, c in ((0, c0), (1, c1)):
        out = np.array([np.sign(c[0]) * 0.5, -0.5, 0.0])
        for z in (0.9, -0.9):
            d = out + np.array([0.0, 0.0, z])
            bonds.append((ci, len(els), 1))
            els.append("H")
            pos.append(c + BH * d / np.linalg.norm(d))
    return els, np.array(pos), bonds


def _sp3_pair(a: str, b: str, ab: float, h_a: int, h_b: int, bh_b: float):
    """X-Y single bond with tetrahedral hydrogens: ``h_a`` on X, ``h_b`` on Y."""
    pa, pb = np.zeros(3), np.array([ab, 0.0, 0.0])
    els, pos, bonds = [a, b], [pa, pb], [(0, 1, 1)]
    for k in range(h_a):
        bonds.append((0, len(els), 1))
        els.append("H")
        pos.append(pa + BH * _TET[1 + k])
    # mirror the tetrahedron so Y's bonds point away from X
    for k in range(h_b):
        bonds.append((1, len(els), 1))
        els.append("H")
        pos.append(pb + bh_b * (_TET[1 + k] * np.array([-1.0, 1.0, -1.0])))
    return els, np.array(pos), bonds


def _formaldehyde():
    els = ["C", "O", "H", "H"]
    pos = np.array([[0, 0, 0], [1.21, 0, 0], [-0.55, 0.94, 0], [-0.55, -0.94, 0]], dtype=float)
    return els, pos, [(0, 1, 2), (0, 2, 1), (0, 3, 1)]


def _formamide():
    # H-C(=O)-NH2, branched at the carbon
    els = ["C", "O", "N", "H", "H", "H"]
    pos = np.array(
        [[0, 0, 0], [0.6, 1.05, 0], [0.67, -1.16, 0], [-1.09, 0, 0], [1.68, -1.16, 0], [0.16, -2.03, 0]],
        dtype=float,
    )
    return els, pos, [(0, 1, 2), (0, 2, 1), (0, 3, 1), (2, 4, 1), (2, 5, 1)]


def toy_templates() -> list[Molecule]:
    """Eight fixed molecules with explicit hydrogens, 4 to 9 atoms each."""
    raw = [
        _formaldehyde(),
        _sp3_pair("C", "O", 1.43, 3, 1, 0.96),  # methanol
        _formamide(),
        _sp3_pair("C", "N", 1.47, 3, 2, 1.01),  # methylamine
        _oxirane(),
        _ring(["C"] * 4, [2, 1, 2, 1], 1.45, [True] * 4),  # cyclobutadiene
        _ring(["O", "C", "C", "C", "C"], [1, 2, 1, 2, 1], 1.39, [False, True, True, True, True]),  # furan
        _ring(["C", "N"] * 3, [2, 1, 2, 1, 2, 1], 1.34, [True, False] * 3),  # 1,3,5-triazine
    ]
    vocab = toy_vocabulary()
    mols = []
    for els, pos, bond_list in raw:
        n = len(els)
        bonds = np.zeros((n, n), dtype=np.int64)
        for i, j, o in bond_list:
            bonds[i, j] = bonds[j, i] = o
        pos = pos - pos.mean(axis=0)
        mol = Molecule(pos, np.array([vocab.index(e) for e in els]), np.zeros(n, dtype=np.int64), bonds)
        mol.validate(vocab)
        mols.append(mol)
    return mols


def generate_toy_dataset(n_mols: int, rng: np.random.Generator, jitter: float = 0.05) -> list[Molecule]:
    """Molecule ``i`` is template ``i % 8`` with Gaussian coordinate jitter."""
    if n_mols < 1:
        raise ValueError("n_mols must be at least 1")
    templates = toy_templates()
    vocab = toy_vocabulary()
    for k, mol in enumerate(templates):
        if not check_stability(mol, vocab).molecule_stable:
            raise AssertionError(f"toy template {k} is not stable")
    out = []
    for i in range(n_mols):
        mol = templates[i % len(templates)].copy()
        if jitter > 0:
            mol.positions = mol.positions + jitter * rng.standard_normal(mol.positions.shape)
        out.append(mol)
    return out


@dataclass
class AtomCountSampler:
    sizes: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if len(self.sizes) == 0 or len(self.sizes) != len(self.probs):
            raise ValueError("atom-count histogram must be nonempty and aligned")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9 or np.any(self.sizes < 1):
            raise ValueError("invalid atom-count histogram")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.sizes[rng.choice(len(self.sizes), size=n, p=self.probs)]

    def to_json(self) -> dict:
        return {"sizes": self.sizes.tolist(), "probs": self.probs.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "AtomCountSampler":
        return cls(np.array(obj["sizes"]), np.array(obj["probs"]))


def fit_atom_count_sampler(dataset: list[Molecule]) -> AtomCountSampler:
    if not dataset:
        raise ValueError("cannot fit atom counts on an empty dataset")
    sizes, counts = np.unique([m.n_atoms for m in dataset], return_counts=True)
    return AtomCountSampler(sizes, counts / counts.sum())


def category_marginals(dataset: list[Molecule], vocab: AtomVocabulary) -> dict:
    """Empirical frequencies of atom types, charges and pair bond codes."""
    from .molgraph import N_BOND_TYPES

    a = np.zeros(vocab.n_types)
    c = np.zeros(vocab.n_charges)
    e = np.zeros(N_BOND_TYPES)
    for m in dataset:
        a += np.bincount(m.atom_types, minlength=vocab.n_types)
        c += np.bincount([vocab.charge_index(int(q)) for q in m.charges], minlength=vocab.n_charges)
        iu, ju = np.triu_indices(m.n_atoms, 1)
        e += np.bincount(m.bonds[iu, ju], minlength=N_BOND_TYPES)
    out = {}
    for k, v in (("a", a), ("c", c), ("e", e)):
        out[k] = v / v.sum() if v.sum() > 0 else np.full(len(v), 1.0 / len(v))
    return out

"""Sample-quality metrics and the atom assignment-time analysis."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .molgraph import (
    AtomVocabulary,
    Molecule,
    QueryGraph,
    check_stability,
    data_path,
    extract_ring_systems,
    match_count,
    read_rule_lines,
)
from .molgraph.molecule import molecule_to_record

ABSENT = "absent"
DEFAULT_BOND_LENGTH = 1.5


@dataclass
class EvalReport:
    """Percentages and rates as ``(mean, ci95)`` pairs; ``None`` marks an absent metric."""

    pct_mols_stable: tuple
    pct_mols_valid: tuple
    pct_atoms_stable: tuple
    js_energy: float | None = None
    alerts_per_mol: tuple | None = None
    ood_rings_per_mol: tuple | None = None
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        def enc(v):
            if v is None:
                return ABSENT
            if isinstance(v, tuple):
                return {"mean": v[0], "ci95": v[1]}
            return v

        out = {k: enc(getattr(self, k)) for k in ("pct_mols_stable", "pct_mols_valid", "pct_atoms_stable", "js_energy", "alerts_per_mol", "ood_rings_per_mol")}
        out["metadata"] = self.metadata
        return out


def _mean_ci(per_fold: list[float], overall: float) -> tuple:
    r = len(per_fold)
    if r < 2:
        return (float(overall), 0.0)
    return (float(overall), float(1.96 * np.std(per_fold, ddof=1) / math.sqrt(r)))


def canonical_order(mols: list[Molecule], vocab: AtomVocabulary) -> list[int]:
    keys = [json.dumps(molecule_to_record(m, vocab), sort_keys=True) for m in mols]
    return sorted(range(len(mols)), key=lambda i: keys[i])


def load_bond_lengths(path=None) -> dict:
    table = {}
    for line in read_rule_lines(path if path is not None else data_path("bond_lengths.txt")):
        a, b, code, length = line.split()
        table[(*sorted((a, b)), int(code))] = float(length)
    return table


def pseudo_energy(mol: Molecule, vocab: AtomVocabulary, reference_lengths: dict | None = None) -> float:
    """Sum over bonds of (d_ij - L)^2, L the tabulated length for the bond.

    A bond-stretch proxy, not a force-field energy. Missing table entries
    fall back to 1.5 Å with a warning.
    """
    table = reference_lengths if reference_lengths is not None else load_bond_lengths()
    total = 0.0
    for i, j, code in mol.bond_list():
        key = (*sorted((vocab.elements[mol.atom_types[i]], vocab.elements[mol.atom_types[j]])), code)
        ref = table.get(key)
        if ref is None:
            warnings.warn(f"no reference length for bond {key}; using {DEFAULT_BOND_LENGTH}", stacklevel=2)
            ref = DEFAULT_BOND_LENGTH
        d = float(np.linalg.norm(mol.positions[i] - mol.positions[j]))
        total += (d - ref) ** 2
    return total


def js_divergence(samples_a, samples_b, n_bins: int = 64) -> float:
    """Base-2 Jensen-Shannon divergence of histograms on a shared support."""
    a = np.asarray(samples_a, dtype=np.float64).ravel()
    b = np.asarray(samples_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("js_divergence needs nonempty samples")
    if n_bins < 1:
        raise ValueError("n_bins must be positive")
    lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
    if hi <= lo:
        return 0.0
    edges = np.linspace(lo, hi, n_bins + 1)
    p = np.histogram(a, edges)[0] / a.size
    q = np.histogram(b, edges)[0] / b.size
    if np.array_equal(p, q):
        return 0.0
    s = p + q
    # JS = 1 + (1/2) sum [p log2(p/(p+q)) + q log2(q/(p+q))], exact at disjoint supports
    tp = np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0) / np.where(s > 0, s, 1.0)), 0.0)
    tq = np.where(q > 0, q * np.log2(np.where(q > 0, q, 1.0) / np.where(s > 0, s, 1.0)), 0.0)
    return float(min(1.0, max(0.0, 1.0 + 0.5 * (tp.sum() + tq.sum()))))


def load_ring_library(path) -> set:
    return set(read_rule_lines(path))


def ood_ring_counts(mols: list[Molecule], ring_library: set, vocab: AtomVocabulary | None = None) -> np.ndarray:
    return np.array([sum(k not in ring_library for k in extract_ring_systems(m, vocab)) for m in mols], dtype=np.float64)


def ood_ring_rate(mols: list[Molecule], ring_library: set, vocab: AtomVocabulary | None = None) -> float:
    if not mols:
        return 0.0
    return float(ood_ring_counts(mols, ring_library, vocab).mean())


def alert_counts(mols: list[Molecule], patterns: list, vocab: AtomVocabulary) -> np.ndarray:
    graphs = [p[1] if isinstance(p, tuple) else p for p in patterns]
    return np.array([sum(match_count(q, m, vocab) for q in graphs) for m in mols], dtype=np.float64)


def evaluate_batch(
    mols: list[Molecule],
    vocab: AtomVocabulary,
    alert_patterns: list[tuple[str, QueryGraph]] | None = None,
    ring_library: set | None = None,
    repeats: int = 1,
    reference: list[Molecule] | None = None,
    reference_lengths: dict | None = None,
    seed: int | None = None,
) -> EvalReport:
    """Stability, validity, alert and OOD-ring rates with fold-based 95% CIs.

    Molecules are put in a canonical order before being split into
    ``repeats`` folds, so the report does not depend on input order. Empty
    pattern lists or ring libraries give absent metrics.
    """
    if not mols:
        raise ValueError("cannot evaluate an empty batch")
    if repeats < 1 or repeats > len(mols):
        raise ValueError("repeats must be between 1 and the batch size")
    order = canonical_order(mols, vocab)
    mols = [mols[i] for i in order]
    reps = [check_stability(m, vocab) for m in mols]
    stable = np.array([r.molecule_stable for r in reps], dtype=np.float64)
    valid = np.array([r.molecule_valid for r in reps], dtype=np.float64)
    atom_ok = [r.atom_stable for r in reps]
    folds = np.array_split(np.arange(len(mols)), repeats)

    def pct(per_mol):
        return _mean_ci([100.0 * per_mol[f].mean() for f in folds], 100.0 * per_mol.mean())

    def atoms_pct(idx):
        arr = np.concatenate([atom_ok[i] for i in idx])
        return 100.0 * arr.mean()

    report = EvalReport(
        pct(stable),
        pct(valid),
        _mean_ci([atoms_pct(f) for f in folds], atoms_pct(range(len(mols)))),
    )
    if alert_patterns:
        counts = alert_counts(mols, alert_patterns, vocab)
        report.alerts_per_mol = _mean_ci([counts[f].mean() for f in folds], counts.mean())
    if ring_library:
        counts = ood_ring_counts(mols, ring_library, vocab)
        report.ood_rings_per_mol = _mean_ci([counts[f].mean() for f in folds], counts.mean())
    notes = ["validity = stable and connected with known (element, charge) pairs"]
    if reference:
        lengths = reference_lengths if reference_lengths is not None else load_bond_lengths()
        ours = [pseudo_energy(m, vocab, lengths) for m, r in zip(mols, reps) if r.molecule_valid]
        ref = [pseudo_energy(m, vocab, lengths) for m in reference if check_stability(m, vocab).molecule_valid]
        if ours and ref:
            report.js_energy = js_divergence(ours, ref)
        notes.append("energy = bond-stretch pseudo-energy, not a force field")
    report.metadata = {"n_mols": len(mols), "repeats": repeats, "seed": seed, "notes": notes}
    return report


# ---------------------------------------------------------------------------
# assignment times


@dataclass
class AssignmentRecord:
    """Per-atom (or per-pair) assignment times of one trajectory and modality."""

    modality: str
    grid: np.ndarray
    t_state: np.ndarray
    t_pred: np.ndarray


def discretize(values: np.ndarray, tokens: bool) -> np.ndarray:
    """Nearest one-hot (argmax) for real rows, identity for tokens."""
    values = np.asarray(values)
    return values.astype(np.int64) if tokens else values.argmax(-1)


def final_assignment_time(seq: np.ndarray, times: np.ndarray, mask_token: int | None = None) -> float:
    """Start of the final constant run of ``seq`` after mask entries are dropped."""
    seq = np.asarray(seq)
    keep = np.arange(len(seq)) if mask_token is None else np.nonzero(seq != mask_token)[0]
    if len(keep) == 0:
        return float(times[-1])
    vals = seq[keep]
    k = len(vals) - 1
    while k > 0 and vals[k - 1] == vals[-1]:
        k -= 1
    return float(times[keep[k]])


def assignment_times(trajectory, modality: str) -> AssignmentRecord:
    if modality not in ("a", "c", "e"):
        raise ValueError("assignment times are defined for categorical modalities a, c, e")
    grid = np.asarray(trajectory.t, dtype=np.float64)
    if len(grid) < 2:
        raise ValueError("trajectory needs at least two recorded steps")
    tokens = trajectory.variant == "ctmc"
    states = discretize(trajectory.states[modality], tokens)
    preds = discretize(trajectory.preds[modality], False)
    d = np.asarray(trajectory.preds[modality]).shape[-1]
    mask_token = d if tokens else None
    n = states.shape[1]
    ts = np.array([final_assignment_time(states[:, i], grid, mask_token) for i in range(n)])
    tp = np.array([final_assignment_time(preds[:, i], grid) for i in range(n)])
    return AssignmentRecord(modality, grid, ts, tp)


def assignment_cdf(records: list[AssignmentRecord]) -> np.ndarray:
    """Rows ``(t, cdf_state, cdf_pred)`` of empirical CDFs on the time grid."""
    if not records:
        raise ValueError("no assignment records")
    ts = np.concatenate([r.t_state for r in records])
    tp = np.concatenate([r.t_pred for r in records])
    if ts.size == 0:
        raise ValueError("no atoms in assignment records")
    grid = np.unique(np.concatenate([r.grid for r in records]))
    cdf_s = np.searchsorted(np.sort(ts), grid, side="right") / ts.size
    cdf_p = np.searchsorted(np.sort(tp), grid, side="right") / tp.size
    return np.stack([grid, cdf_s, cdf_p], axis=1)


def cdf_to_csv(table: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "cdf_state", "cdf_pred"])
    for row in table:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def median_lag(records: list[AssignmentRecord]) -> float:
    """median(t_assign_state) - median(t_assign_pred) over all atoms."""
    ts = np.concatenate([r.t_state for r in records])
    tp = np.concatenate([r.t_pred for r in records])
    if ts.size == 0:
        raise ValueError("no atoms in assignment records")
    return float(np.median(ts) - np.median(tp))

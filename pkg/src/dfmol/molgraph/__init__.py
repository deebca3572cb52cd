from .canon import canonical_graph_key
from .match import iter_embeddings, match_count
from .molecule import (
    BOND_ORDER_VALUE,
    N_BOND_TYPES,
    AtomVocabulary,
    Molecule,
    MoleculeFormatError,
    data_path,
    default_vocabulary,
    load_molecules,
    read_rule_lines,
    save_molecules,
    toy_vocabulary,
)
from .pattern import PatternSyntaxError, QueryAtom, QueryBond, QueryGraph, load_patterns, parse_pattern
from .rings import extract_ring_systems, ring_membership, ring_systems
from .valence import StabilityReport, atom_valences, check_stability, is_connected

__all__ = [
    "AtomVocabulary",
    "BOND_ORDER_VALUE",
    "Molecule",
    "MoleculeFormatError",
    "N_BOND_TYPES",
    "PatternSyntaxError",
    "QueryAtom",
    "QueryBond",
    "QueryGraph",
    "StabilityReport",
    "atom_valences",
    "canonical_graph_key",
    "check_stability",
    "data_path",
    "default_vocabulary",
    "extract_ring_systems",
    "is_connected",
    "iter_embeddings",
    "load_molecules",
    "load_patterns",
    "match_count",
    "parse_pattern",
    "read_rule_lines",
    "ring_membership",
    "ring_systems",
    "save_molecules",
    "toy_vocabulary",
]

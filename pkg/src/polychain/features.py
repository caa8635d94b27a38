"""Atom and bond feature encoding (31-dim atoms, 14-dim bonds)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .psmiles import Atom, Bond, BondOrder, BondStereo, Chirality, Element, Hybridization, MolGraph, perceive

CHEMICAL = "chemical"
TOPOLOGY_ONLY = "topology-only"
SCHEMA_VERSION = 1

ATOM_BLOCKS = (
    ("type", 12), ("hybridization", 4), ("chirality", 3), ("degree", 7),
    ("aromatic", 1), ("in_ring", 1), ("num_h", 1), ("charge", 1), ("mass", 1),
)
BOND_BLOCKS = (("type", 5), ("stereo", 7), ("conjugated", 1), ("in_ring", 1))
ATOM_DIM = sum(w for _, w in ATOM_BLOCKS)
BOND_DIM = sum(w for _, w in BOND_BLOCKS)
assert (ATOM_DIM, BOND_DIM) == (31, 14)


def _offsets(blocks):
    out, pos = {}, 0
    for name, width in blocks:
        out[name] = slice(pos, pos + width)
        pos += width
    return out


ATOM_SLICES = _offsets(ATOM_BLOCKS)
BOND_SLICES = _offsets(BOND_BLOCKS)
ATOM_ONEHOT_BLOCKS = ("type", "hybridization", "chirality", "degree")
BOND_ONEHOT_BLOCKS = ("type", "stereo")


@dataclass(frozen=True)
class FeatureSchema:
    mode: str = CHEMICAL
    version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.mode not in (CHEMICAL, TOPOLOGY_ONLY):
            raise ValueError(f"unknown feature mode {self.mode!r}")

    @property
    def atom_dim(self) -> int:
        return ATOM_DIM if self.mode == CHEMICAL else 1

    @property
    def bond_dim(self) -> int:
        return BOND_DIM if self.mode == CHEMICAL else 1

    @property
    def tag(self) -> str:
        return f"{self.mode}/v{self.version}"


def featurize_atom(atom: Atom, degree: int, num_h: int, in_ring: bool, hybridization: int) -> np.ndarray:
    """Feature vector of a single atom given its perceived attributes."""
    v = np.zeros(ATOM_DIM, dtype=np.float32)
    v[ATOM_SLICES["type"].start + int(atom.element)] = 1.0
    v[ATOM_SLICES["hybridization"].start + int(hybridization)] = 1.0
    v[ATOM_SLICES["chirality"].start + int(atom.chirality)] = 1.0
    v[ATOM_SLICES["degree"].start + (degree if 0 <= degree <= 5 else 6)] = 1.0
    v[ATOM_SLICES["aromatic"].start] = float(atom.is_aromatic)
    v[ATOM_SLICES["in_ring"].start] = float(in_ring)
    v[ATOM_SLICES["num_h"].start] = float(num_h)
    v[ATOM_SLICES["charge"].start] = float(atom.formal_charge)
    v[ATOM_SLICES["mass"].start] = atom.atomic_mass / 100.0
    return v


def featurize_bond(bond: Bond, conjugated: bool, in_ring: bool) -> np.ndarray:
    v = np.zeros(BOND_DIM, dtype=np.float32)
    v[BOND_SLICES["type"].start + int(bond.order)] = 1.0
    v[BOND_SLICES["stereo"].start + int(bond.stereo)] = 1.0
    v[BOND_SLICES["conjugated"].start] = float(conjugated)
    v[BOND_SLICES["in_ring"].start] = float(in_ring)
    return v


def featurize_mol(mol: MolGraph) -> tuple[np.ndarray, np.ndarray]:
    """Chemical-mode feature matrices ``(X, E)`` for a perceived molecule."""
    if mol.perceived is None:
        mol = perceive(mol)
    p = mol.perceived
    x = np.zeros((mol.n_atoms, ATOM_DIM), dtype=np.float32)
    for i, atom in enumerate(mol.atoms):
        x[i] = featurize_atom(atom, int(p.degree[i]), int(p.implicit_h[i]),
                              bool(p.atom_in_ring[i]), int(p.hybridization[i]))
    e = np.zeros((mol.n_bonds, BOND_DIM), dtype=np.float32)
    for i, bond in enumerate(mol.bonds):
        e[i] = featurize_bond(bond, bool(p.conjugated[i]), bool(p.bond_in_ring[i]))
    return x, e


def featurize_topology_only(n_nodes: int, n_edges: int) -> tuple[np.ndarray, np.ndarray]:
    """All-ones node and edge features; chemistry is discarded."""
    return np.ones((n_nodes, 1), dtype=np.float32), np.ones((n_edges, 1), dtype=np.float32)


def inter_unit_bond_features(conjugated: np.ndarray) -> np.ndarray:
    """Rows for single, non-ring, stereo-free bonds joining repeat units."""
    e = np.zeros((len(conjugated), BOND_DIM), dtype=np.float32)
    e[:, BOND_SLICES["type"].start + int(BondOrder.SINGLE)] = 1.0
    e[:, BOND_SLICES["stereo"].start + int(BondStereo.NONE)] = 1.0
    e[:, BOND_SLICES["conjugated"].start] = conjugated.astype(np.float32)
    return e


def atom_class_targets(x: np.ndarray) -> np.ndarray:
    """Masked-atom SSL labels: 11 classes (B..I, other) from the type one-hot.

    Attachment atoms never occur in assembled graphs; they would map to -1.
    """
    types = np.argmax(x[:, ATOM_SLICES["type"]], axis=1)
    return types - 1


def bond_class_targets(e: np.ndarray) -> np.ndarray:
    return np.argmax(e[:, BOND_SLICES["type"]], axis=1)


def hybridization_is_unsaturated(hyb: np.ndarray, aromatic: np.ndarray) -> np.ndarray:
    return (hyb == Hybridization.SP) | (hyb == Hybridization.SP2) | aromatic


__all__ = [
    "ATOM_DIM", "BOND_DIM", "CHEMICAL", "TOPOLOGY_ONLY", "FeatureSchema", "featurize_atom",
    "featurize_bond", "featurize_mol", "featurize_topology_only", "atom_class_targets",
    "bond_class_targets", "Chirality", "Element",
]

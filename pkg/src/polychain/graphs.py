"""Polymer graph construction: chains, cups, repeat-unit baselines and SSL trimers.

Two routes assemble chains.  :func:`build_chain` works on :class:`MolGraph`
objects and re-runs perception on the assembled chain; it is the reference.
Cups use :class:`UnitTemplate`, which precomputes per-unit features for each
position context (solo, first, middle, last) by running that reference route
on a one-unit and a three-unit chain, then gathers rows with numpy.  Because
the inter-unit bond is a single, acyclic (bridge) bond, an atom's perceived
attributes depend only on its own unit and whether that unit has a predecessor
and/or successor, so both routes produce identical graphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Iterator, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import features as F
from .errors import BuildError, InvalidDescriptors, PolychainError
from .mmd import (CHAINS_PER_CUP, DP_MAX, N_BINS, counter_rng, cup_seed_sequence,
                  parameterize, sample_cup)
from .psmiles import Bond, BondOrder, MolGraph, from_psmiles, molar_mass, perceive

LARGE = "large"
REPEAT_UNIT = "repeat-unit"

SOLO, FIRST, MIDDLE, LAST = range(4)


@dataclass(frozen=True)
class PolymerRecord:
    id: str
    psmiles_1: str
    mn: float
    mw: float
    m0: float | None = None
    psmiles_2: str | None = None
    phi: tuple[float, float] = (1.0, 0.0)
    m0_1: float | None = None
    m0_2: float | None = None
    tg: float | None = None

    def __post_init__(self):
        phi1, phi2 = self.phi
        if not (0.0 <= phi1 <= 1.0 and 0.0 <= phi2 <= 1.0) or abs(phi1 + phi2 - 1.0) > 1e-9:
            raise InvalidDescriptors(f"{self.id}: fractions {self.phi} must lie in [0,1] and sum to 1")
        if self.psmiles_2 is None and self.phi != (1.0, 0.0):
            raise InvalidDescriptors(f"{self.id}: homopolymer must have phi = (1, 0)")
        if self.m0 is None and self.m0_1 is None:
            raise InvalidDescriptors(f"{self.id}: no repeat-unit molar mass given")

    @property
    def is_copolymer(self) -> bool:
        return self.psmiles_2 is not None

    @property
    def dispersity(self) -> float:
        return self.mw / self.mn

    @property
    def m0_eff(self) -> float:
        phi1, phi2 = self.phi
        if self.is_copolymer and self.m0_1 is not None and self.m0_2 is not None:
            return phi1 * self.m0_1 + phi2 * self.m0_2
        if self.m0 is not None:
            return self.m0
        return self.m0_1

    @property
    def globals(self) -> np.ndarray:
        return np.array([self.mn, self.mw, self.dispersity, self.m0_eff, *self.phi], dtype=np.float64)


@dataclass(eq=False)
class PolymerGraph:
    """One graph instance: chains concatenated into a disconnected graph.

    ``edge_index`` stores each undirected bond once with shape ``(2, |E|)``.
    """

    x: np.ndarray
    edge_index: np.ndarray
    edge_attr: np.ndarray
    component_id: np.ndarray
    globals: np.ndarray
    polymer_id: str = ""
    cup_index: int = 0

    @property
    def n_nodes(self) -> int:
        return int(self.x.shape[0])

    @property
    def n_edges(self) -> int:
        return int(self.edge_index.shape[1])

    @property
    def n_components(self) -> int:
        return int(np.unique(self.component_id).size)

    def equals(self, other: "PolymerGraph") -> bool:
        """Bitwise equality of all arrays and identifiers."""
        return (
            self.polymer_id == other.polymer_id
            and self.cup_index == other.cup_index
            and all(
                a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in zip(self._arrays(), other._arrays())
            )
        )

    def _arrays(self):
        return (self.x, self.edge_index, self.edge_attr, self.component_id, self.globals)


# ---------------------------------------------------------------------------
# reference route on MolGraph


def _unit_parts(unit: MolGraph):
    """Core atom indices, intra-unit bonds (re-indexed), entry and exit atoms."""
    if len(unit.attachment_sites) != 2:
        from .errors import WrongAttachmentCount
        raise WrongAttachmentCount(len(unit.attachment_sites))
    stars = set(unit.attachment_sites)
    core = [i for i in range(unit.n_atoms) if i not in stars]
    remap = {old: new for new, old in enumerate(core)}
    intra = [Bond(remap[b.begin], remap[b.end], b.order, b.stereo)
             for b in unit.bonds if b.begin not in stars and b.end not in stars]
    entry_star, exit_star = unit.attachment_sites
    entry = remap[unit.neighbors(entry_star)[0]]
    exit_ = remap[unit.neighbors(exit_star)[0]]
    return [unit.atoms[i] for i in core], intra, entry, exit_


def draw_sequence(dp: int, phi: tuple[float, float], rng, copolymer: bool) -> np.ndarray:
    """Unit index (0 or 1) per chain position, i.i.d. with probabilities phi."""
    if not copolymer:
        return np.zeros(dp, dtype=np.int64)
    return (rng.random(dp) >= phi[0]).astype(np.int64)


def build_chain(unit1: MolGraph, unit2: MolGraph | None, dp: int,
                phi: tuple[float, float] = (1.0, 0.0), rng_seed=0,
                sequence: Sequence[int] | None = None) -> MolGraph:
    """Linear chain of ``dp`` repeat units joined head-to-tail by single bonds.

    Attachment atoms are removed; chain ends get implicit hydrogens through
    re-perception.  Bond order in the result: intra-unit bonds position by
    position, then the ``dp - 1`` inter-unit bonds.
    """
    if dp < 1:
        raise ValueError("dp must be >= 1")
    units = [_unit_parts(unit1)]
    if unit2 is not None:
        units.append(_unit_parts(unit2))
    if sequence is None:
        sequence = draw_sequence(dp, phi, counter_rng(rng_seed), unit2 is not None)
    atoms, bonds, links = [], [], []
    prev_exit = None
    for u in sequence:
        core, intra, entry, exit_ = units[u]
        off = len(atoms)
        atoms.extend(core)
        bonds.extend(Bond(b.begin + off, b.end + off, b.order, b.stereo) for b in intra)
        if prev_exit is not None:
            links.append(Bond(prev_exit, entry + off, BondOrder.SINGLE))
        prev_exit = exit_ + off
    return perceive(MolGraph(tuple(atoms), tuple(bonds + links), ()))


# ---------------------------------------------------------------------------
# vectorized route


@dataclass(frozen=True)
class UnitTemplate:
    """Per-context feature blocks of one repeat unit (contexts: solo, first, middle, last)."""

    psmiles: str
    n_atoms: int
    intra_bonds: np.ndarray          # (n_bonds, 2) local endpoints
    entry: int
    exit: int
    x: np.ndarray                    # (4, n_atoms, 31)
    e: np.ndarray                    # (4, n_bonds, 14)
    entry_unsaturated: np.ndarray    # (4,) bool
    exit_unsaturated: np.ndarray     # (4,) bool
    mass: float

    @property
    def n_bonds(self) -> int:
        return len(self.intra_bonds)


def _unsaturated(mol: MolGraph) -> np.ndarray:
    p = mol.perceived
    aromatic = np.array([a.is_aromatic for a in mol.atoms], dtype=bool)
    return F.hybridization_is_unsaturated(p.hybridization, aromatic)


@lru_cache(maxsize=4096)
def unit_template(psmiles: str) -> UnitTemplate:
    unit = from_psmiles(psmiles, repeat_unit=True)
    core, intra, entry, exit_ = _unit_parts(unit)
    n, m = len(core), len(intra)
    solo = build_chain(unit, None, 1)
    trimer = build_chain(unit, None, 3)
    xs, es = F.featurize_mol(solo)
    xt, et = F.featurize_mol(trimer)
    x = np.stack([xs, xt[:n], xt[n:2 * n], xt[2 * n:]])
    e = np.stack([es, et[:m], et[m:2 * m], et[2 * m:3 * m]])
    us, ut = _unsaturated(solo), _unsaturated(trimer)
    entry_u = np.array([us[entry], ut[entry], ut[n + entry], ut[2 * n + entry]])
    exit_u = np.array([us[exit_], ut[exit_], ut[n + exit_], ut[2 * n + exit_]])
    bonds = np.array([[b.begin, b.end] for b in intra], dtype=np.int64).reshape(-1, 2)
    for arr in (x, e, bonds, entry_u, exit_u):
        arr.setflags(write=False)
    return UnitTemplate(psmiles, n, bonds, entry, exit_, x, e, entry_u, exit_u, molar_mass(unit))


def _exclusive_cumsum(a: np.ndarray) -> np.ndarray:
    out = np.zeros(len(a), dtype=np.int64)
    np.cumsum(a[:-1], out=out[1:])
    return out


def assemble(templates: Sequence[UnitTemplate], sequences: Sequence[np.ndarray]):
    """Gather feature rows for a set of chains; one chain per entry of ``sequences``.

    Returns ``(x, edge_index, edge_attr, component_id)``.  Edge order: all
    intra-unit bonds in position order, then all inter-unit bonds.
    """
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    if len(lengths) == 0 or lengths.min() < 1:
        raise ValueError("every chain needs at least one repeat unit")
    unit = np.concatenate([np.asarray(s, dtype=np.int64) for s in sequences])
    chain = np.repeat(np.arange(len(lengths)), lengths)
    pos = np.arange(len(unit)) - np.repeat(_exclusive_cumsum(lengths), lengths)
    length = lengths[chain]
    ctx = np.where(length == 1, SOLO, np.where(pos == 0, FIRST, np.where(pos == length - 1, LAST, MIDDLE)))

    n_atoms = np.array([t.n_atoms for t in templates], dtype=np.int64)
    n_bonds = np.array([t.n_bonds for t in templates], dtype=np.int64)
    x_table = np.concatenate([t.x.reshape(-1, t.x.shape[-1]) for t in templates])
    e_table = np.concatenate([t.e.reshape(-1, t.e.shape[-1]) for t in templates])
    b_table = np.concatenate([np.tile(t.intra_bonds, (4, 1)) for t in templates])
    x_start = _exclusive_cumsum(4 * n_atoms)[unit] + ctx * n_atoms[unit]
    e_start = _exclusive_cumsum(4 * n_bonds)[unit] + ctx * n_bonds[unit]

    na = n_atoms[unit]
    atom_off = _exclusive_cumsum(na)
    total_atoms = int(na.sum())
    rows = np.repeat(x_start - atom_off, na) + np.arange(total_atoms)
    x = x_table[rows]
    component_id = np.repeat(chain, na)

    nb = n_bonds[unit]
    bond_off = _exclusive_cumsum(nb)
    total_bonds = int(nb.sum())
    brows = np.repeat(e_start - bond_off, nb) + np.arange(total_bonds)
    intra_attr = e_table[brows]
    intra_index = b_table[brows] + np.repeat(atom_off, nb)[:, None]

    has_next = pos < length - 1
    p = np.nonzero(has_next)[0]
    entry = np.array([t.entry for t in templates])
    exit_ = np.array([t.exit for t in templates])
    entry_u = np.stack([t.entry_unsaturated for t in templates])
    exit_u = np.stack([t.exit_unsaturated for t in templates])
    src = atom_off[p] + exit_[unit[p]]
    dst = atom_off[p + 1] + entry[unit[p + 1]]
    conj = exit_u[unit[p], ctx[p]] & entry_u[unit[p + 1], ctx[p + 1]]
    link_attr = F.inter_unit_bond_features(conj)

    edge_index = np.concatenate([intra_index, np.stack([src, dst], axis=1)]).T.astype(np.int64)
    edge_attr = np.concatenate([intra_attr, link_attr])
    return x, np.ascontiguousarray(edge_index), edge_attr, component_id


def _finish(x, edge_index, edge_attr, component_id, feature_mode, globals_, polymer_id, cup_index):
    if feature_mode == F.TOPOLOGY_ONLY:
        x, edge_attr = F.featurize_topology_only(len(x), edge_index.shape[1])
    elif feature_mode != F.CHEMICAL:
        raise ValueError(f"unknown feature mode {feature_mode!r}")
    return PolymerGraph(x, edge_index, edge_attr, component_id, globals_, polymer_id, cup_index)


# ---------------------------------------------------------------------------
# builders


@dataclass(frozen=True)
class BuildConfig:
    construction: str = LARGE
    features: str = F.CHEMICAL
    n_cups: int = 4
    n_chains: int = CHAINS_PER_CUP
    n_bins: int = N_BINS
    dp_max: int = DP_MAX
    seed: int = 0

    def __post_init__(self):
        if self.construction not in (LARGE, REPEAT_UNIT):
            raise ValueError(f"unknown construction {self.construction!r}")
        F.FeatureSchema(self.features)


def _templates(record: PolymerRecord) -> list[UnitTemplate]:
    out = [unit_template(record.psmiles_1)]
    if record.is_copolymer:
        out.append(unit_template(record.psmiles_2))
    return out


def cup_sequences(record: PolymerRecord, cup_index: int, config: BuildConfig):
    """Chain lengths and per-chain unit sequences for one cup (deterministic)."""
    params = parameterize(record.mn, record.mw, record.m0_eff, config.dp_max)
    sampler_ss, sequence_ss = cup_seed_sequence(record.id, cup_index, config.seed).spawn(2)
    sample = sample_cup(params, config.n_chains, config.n_bins, counter_rng(sampler_ss))
    rng = counter_rng(sequence_ss)
    seqs = [draw_sequence(int(dp), record.phi, rng, record.is_copolymer) for dp in sample.dps]
    return sample, seqs


def build_cup(record: PolymerRecord, cup_index: int, config: BuildConfig = BuildConfig()) -> PolymerGraph:
    """One stratified cup: ``n_chains`` sampled chains in one disconnected graph."""
    try:
        templates = _templates(record)
        _, seqs = cup_sequences(record, cup_index, config)
        parts = assemble(templates, seqs)
    except PolychainError as exc:
        raise BuildError(record.id, exc) from exc
    return _finish(*parts, config.features, record.globals, record.id, cup_index)


def build_repeat_unit(record: PolymerRecord, features: str = F.CHEMICAL) -> PolymerGraph:
    """Baseline graph: the repeat unit(s) with attachment atoms removed."""
    try:
        templates = _templates(record)
    except PolychainError as exc:
        raise BuildError(record.id, exc) from exc
    seqs = [np.array([i]) for i in range(len(templates))]
    return _finish(*assemble(templates, seqs), features, record.globals, record.id, 0)


def build_trimer(psmiles: str, features: str = F.CHEMICAL, polymer_id: str = "") -> PolymerGraph:
    """Three-unit homopolymer chain for masked-graph pretraining (globals zeroed)."""
    template = unit_template(psmiles)
    parts = assemble([template], [np.zeros(3, dtype=np.int64)])
    return _finish(*parts, features, np.zeros(6), polymer_id or psmiles, 0)


def iter_graphs(records: Iterable[PolymerRecord], config: BuildConfig = BuildConfig()) -> Iterator[PolymerGraph]:
    """Stream graphs record by record (cups in index order)."""
    for record in records:
        if config.construction == REPEAT_UNIT:
            yield build_repeat_unit(record, config.features)
        else:
            for c in range(config.n_cups):
                yield build_cup(record, c, config)


def iter_trimers(psmiles: Iterable[str], features: str = F.CHEMICAL):
    """Yield ``(index, graph_or_None, error_or_None)``; failures do not abort."""
    for i, s in enumerate(psmiles):
        try:
            yield i, build_trimer(s, features, polymer_id=f"corpus-{i}"), None
        except PolychainError as exc:
            yield i, None, str(exc)


class PolymerGraphBuilder(TransformerMixin, BaseEstimator):
    """Transformer turning :class:`PolymerRecord` objects into graphs.

    Stateless: ``fit`` only validates parameters.  ``transform`` returns a
    list; use :meth:`iter_transform` to stream large datasets.
    """

    def __init__(self, construction=LARGE, features=F.CHEMICAL, n_cups=4, n_chains=CHAINS_PER_CUP,
                 n_bins=N_BINS, dp_max=DP_MAX, seed=0):
        self.construction = construction
        self.features = features
        self.n_cups = n_cups
        self.n_chains = n_chains
        self.n_bins = n_bins
        self.dp_max = dp_max
        self.seed = seed

    @property
    def config(self) -> BuildConfig:
        return BuildConfig(self.construction, self.features, self.n_cups, self.n_chains,
                           self.n_bins, self.dp_max, self.seed)

    def fit(self, X=None, y=None):
        self.config  # validates
        self.schema_ = F.FeatureSchema(self.features)
        return self

    def __sklearn_is_fitted__(self):
        return True

    def iter_transform(self, records):
        return iter_graphs(records, self.config)

    def transform(self, records):
        return list(self.iter_transform(records))

"""Tokenizer, parser and chemistry perception for a restricted PSMILES grammar.

The grammar covers the organic subset (``B C N O P S F Cl Br I`` and aromatic
``b c n o p s``), bracket atoms with chirality, hydrogen count and charge,
the ``[*]`` attachment atom, bond symbols ``- = # : / \\``, branches and ring
closures (digits and ``%nn``).  Anything else is reported via
:class:`~polychain.errors.UnknownToken` rather than coerced.

Hydrogens are never materialized as graph nodes; they are carried as counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DanglingBond,
    DuplicateBond,
    InvalidChiralContext,
    ParseError,
    UnbalancedBracket,
    UnclosedRingBond,
    UnknownToken,
    WrongAttachmentCount,
)


class Element(IntEnum):
    """Atom vocabulary; the integer value is the atom-type one-hot index."""

    STAR = 0
    B = 1
    C = 2
    N = 3
    O = 4
    F = 5
    P = 6
    S = 7
    CL = 8
    BR = 9
    I = 10
    OTHER = 11


class Hybridization(IntEnum):
    SP = 0
    SP2 = 1
    SP3 = 2
    OTHER = 3


class Chirality(IntEnum):
    CW = 0
    CCW = 1
    UNSPECIFIED = 2


class BondOrder(IntEnum):
    SINGLE = 0
    DOUBLE = 1
    TRIPLE = 2
    AROMATIC = 3
    OTHER = 4


class BondStereo(IntEnum):
    NONE = 0
    Z = 1
    E = 2
    CIS = 3
    TRANS = 4
    ANY = 5
    OTHER = 6


# standard atomic weights (g/mol); the vocabulary elements plus common "other" ones
ATOMIC_MASS = {
    "H": 1.008, "He": 4.0026, "Li": 6.94, "Be": 9.0122, "B": 10.81, "C": 12.011,
    "N": 14.007, "O": 15.999, "F": 18.998, "Ne": 20.180, "Na": 22.990, "Mg": 24.305,
    "Al": 26.982, "Si": 28.085, "P": 30.974, "S": 32.06, "Cl": 35.45, "Ar": 39.948,
    "K": 39.098, "Ca": 40.078, "Ti": 47.867, "V": 50.942, "Cr": 51.996, "Mn": 54.938,
    "Fe": 55.845, "Co": 58.933, "Ni": 58.693, "Cu": 63.546, "Zn": 65.38, "Ga": 69.723,
    "Ge": 72.630, "As": 74.922, "Se": 78.971, "Br": 79.904, "Kr": 83.798, "Rb": 85.468,
    "Sr": 87.62, "Zr": 91.224, "Mo": 95.95, "Ru": 101.07, "Rh": 102.91, "Pd": 106.42,
    "Ag": 107.87, "Cd": 112.41, "In": 114.82, "Sn": 118.71, "Sb": 121.76, "Te": 127.60,
    "I": 126.90, "Xe": 131.29, "Cs": 132.91, "Ba": 137.33, "Pt": 195.08, "Au": 196.97,
    "Hg": 200.59, "Pb": 207.2, "Bi": 208.98,
}
HYDROGEN_MASS = ATOMIC_MASS["H"]

_VOCAB = {
    "*": Element.STAR, "B": Element.B, "C": Element.C, "N": Element.N, "O": Element.O,
    "F": Element.F, "P": Element.P, "S": Element.S, "Cl": Element.CL, "Br": Element.BR,
    "I": Element.I,
}
_ORGANIC = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")  # two-letter first
_AROMATIC_ORGANIC = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}
_AROMATIC_BRACKET = {"se": "Se", "as": "As", **_AROMATIC_ORGANIC}

DEFAULT_VALENCE = {
    Element.B: 3, Element.C: 4, Element.N: 3, Element.O: 2, Element.F: 1,
    Element.P: 3, Element.S: 2, Element.CL: 1, Element.BR: 1, Element.I: 1,
}
# largest valences considered chemically sane; exceeding them is a valence anomaly
_ALLOWED_VALENCES = {
    Element.B: (3,), Element.C: (4,), Element.N: (3, 5), Element.O: (2,), Element.F: (1,),
    Element.P: (3, 5), Element.S: (2, 4, 6), Element.CL: (1, 3, 5, 7),
    Element.BR: (1, 3, 5, 7), Element.I: (1, 3, 5, 7),
}
_BOND_SYMBOLS = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE, "#": BondOrder.TRIPLE,
                 ":": BondOrder.AROMATIC, "/": BondOrder.SINGLE, "\\": BondOrder.SINGLE}
_BOND_WEIGHT = {BondOrder.SINGLE: 1.0, BondOrder.DOUBLE: 2.0, BondOrder.TRIPLE: 3.0,
                BondOrder.AROMATIC: 1.5, BondOrder.OTHER: 1.0}


@dataclass(frozen=True)
class Token:
    """One lexical unit.  ``kind`` is one of atom, bond, open, close, ring."""

    kind: str
    text: str
    position: int
    atom: "Atom | None" = None
    ring_label: int | None = None


@dataclass(frozen=True)
class Atom:
    element: Element
    symbol: str
    is_aromatic: bool = False
    formal_charge: int = 0
    chirality: Chirality = Chirality.UNSPECIFIED
    explicit_h: int | None = None
    atomic_mass: float = 0.0
    bracket: bool = False


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: BondOrder = BondOrder.SINGLE
    stereo: BondStereo = BondStereo.NONE

    @property
    def endpoints(self) -> tuple[int, int]:
        return (self.begin, self.end)


@dataclass(frozen=True)
class Perception:
    """Derived per-atom and per-bond attributes (read-only arrays)."""

    degree: np.ndarray
    implicit_h: np.ndarray
    atom_in_ring: np.ndarray
    hybridization: np.ndarray
    bond_in_ring: np.ndarray
    conjugated: np.ndarray


@dataclass(frozen=True)
class MolGraph:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    attachment_sites: tuple[int, ...] = ()
    perceived: Perception | None = field(default=None, compare=False)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_bonds(self) -> int:
        return len(self.bonds)

    def neighbors(self, index: int) -> list[int]:
        out = []
        for b in self.bonds:
            if b.begin == index:
                out.append(b.end)
            elif b.end == index:
                out.append(b.begin)
        return out


# ---------------------------------------------------------------------------
# tokenizer


def _read_bracket(text: str, start: int) -> tuple[Atom, int]:
    """Parse a bracket atom starting at ``text[start] == '['``; return (atom, next pos)."""
    close = text.find("]", start + 1)
    if close < 0:
        raise UnbalancedBracket("unterminated bracket atom", text, start)
    if "[" in text[start + 1:close]:
        raise UnbalancedBracket("nested '[' inside bracket atom", text, start)
    body = text[start + 1:close]
    i = 0

    if i < len(body) and body[i].isdigit():
        raise UnknownToken("isotope labels are not supported", text, start + 1)

    aromatic = False
    if body[i:i + 1] == "*":
        symbol, element, i = "*", Element.STAR, i + 1
    elif body[i:i + 2] in _AROMATIC_BRACKET:
        symbol, aromatic, i = _AROMATIC_BRACKET[body[i:i + 2]], True, i + 2
        element = _VOCAB.get(symbol, Element.OTHER)
    elif body[i:i + 1] in _AROMATIC_BRACKET:
        symbol, aromatic, i = _AROMATIC_BRACKET[body[i]], True, i + 1
        element = _VOCAB.get(symbol, Element.OTHER)
    elif body[i:i + 2] in ATOMIC_MASS and len(body[i:i + 2]) == 2:
        symbol, i = body[i:i + 2], i + 2
        element = _VOCAB.get(symbol, Element.OTHER)
    elif body[i:i + 1] in ATOMIC_MASS:
        symbol, i = body[i], i + 1
        element = _VOCAB.get(symbol, Element.OTHER)
    else:
        raise UnknownToken(f"unknown element in bracket atom [{body}]", text, start + 1)

    chirality = Chirality.UNSPECIFIED
    if body[i:i + 2] == "@@":
        chirality, i = Chirality.CW, i + 2
    elif body[i:i + 1] == "@":
        chirality, i = Chirality.CCW, i + 1
    if chirality is not Chirality.UNSPECIFIED and body[i:i + 1].isalpha() and body[i] != "H":
        raise UnknownToken("extended chirality classes are not supported", text, start + 1 + i)

    hcount = 0
    if body[i:i + 1] == "H":
        i += 1
        j = i
        while j < len(body) and body[j].isdigit():
            j += 1
        hcount = int(body[i:j]) if j > i else 1
        i = j

    charge = 0
    if body[i:i + 1] in ("+", "-"):
        sign = 1 if body[i] == "+" else -1
        j = i + 1
        while j < len(body) and body[j].isdigit():
            j += 1
        if j > i + 1:
            charge = sign * int(body[i + 1:j])
        else:
            while j < len(body) and body[j] == body[i]:
                j += 1
            charge = sign * (j - i)
        i = j
        if not -4 <= charge <= 4:
            raise ParseError(f"formal charge {charge} out of range", text, start)

    if i != len(body):
        raise UnknownToken(f"unsupported bracket atom content '{body[i:]}'", text, start + 1 + i)

    mass = 0.0 if element is Element.STAR else ATOMIC_MASS[symbol]
    atom = Atom(
        element=element,
        symbol=symbol,
        is_aromatic=aromatic,
        formal_charge=charge,
        chirality=chirality,
        explicit_h=0 if element is Element.STAR else hcount,
        atomic_mass=mass,
        bracket=True,
    )
    return atom, close + 1


def tokenize(psmiles: str) -> list[Token]:
    """Split a PSMILES string into tokens.

    Implicit bonds are not materialized; ``"[*]CC[*]"`` yields four atom tokens.
    """
    if not psmiles:
        raise ParseError("empty PSMILES string")
    if not psmiles.isascii():
        raise UnknownToken("non-ASCII character", psmiles, next(i for i, c in enumerate(psmiles) if not c.isascii()))

    tokens: list[Token] = []
    i, n = 0, len(psmiles)
    depth = 0
    while i < n:
        ch = psmiles[i]
        if ch == "[":
            atom, j = _read_bracket(psmiles, i)
            tokens.append(Token("atom", psmiles[i:j], i, atom=atom))
            i = j
        elif ch == "]":
            raise UnbalancedBracket("']' without matching '['", psmiles, i)
        elif ch == "*":
            tokens.append(Token("atom", ch, i, atom=Atom(Element.STAR, "*", explicit_h=0)))
            i += 1
        elif ch in _AROMATIC_ORGANIC:
            symbol = _AROMATIC_ORGANIC[ch]
            atom = Atom(_VOCAB[symbol], symbol, is_aromatic=True, atomic_mass=ATOMIC_MASS[symbol])
            tokens.append(Token("atom", ch, i, atom=atom))
            i += 1
        elif ch.isupper():
            for symbol in _ORGANIC:
                if psmiles.startswith(symbol, i):
                    break
            else:
                raise UnknownToken(f"'{ch}' is not an organic-subset atom outside brackets", psmiles, i)
            atom = Atom(_VOCAB[symbol], symbol, atomic_mass=ATOMIC_MASS[symbol])
            tokens.append(Token("atom", symbol, i, atom=atom))
            i += len(symbol)
        elif ch in _BOND_SYMBOLS:
            tokens.append(Token("bond", ch, i))
            i += 1
        elif ch == "(":
            depth += 1
            tokens.append(Token("open", ch, i))
            i += 1
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise UnbalancedBracket("')' without matching '('", psmiles, i)
            tokens.append(Token("close", ch, i))
            i += 1
        elif ch.isdigit():
            tokens.append(Token("ring", ch, i, ring_label=int(ch)))
            i += 1
        elif ch == "%":
            label = psmiles[i + 1:i + 3]
            if len(label) != 2 or not label.isdigit():
                raise UnknownToken("'%' must be followed by two digits", psmiles, i)
            tokens.append(Token("ring", psmiles[i:i + 3], i, ring_label=int(label)))
            i += 3
        else:
            raise UnknownToken(f"unexpected character '{ch}'", psmiles, i)
    if depth != 0:
        raise UnbalancedBracket("unclosed '('", psmiles, n)
    return tokens


# ---------------------------------------------------------------------------
# parser


def _side(first: int, second: int, char: str, anchor: int) -> int:
    """+1 if the substituent of ``anchor`` lies 'up', -1 if 'down'."""
    up = char == "/"
    if anchor == second:  # written "X/A": X sits below A
        return -1 if up else 1
    return 1 if up else -1


def _resolve_stereo(atoms, bonds, directional) -> list[Bond]:
    """Assign double-bond stereo from directional single-bond markers."""
    if not directional:
        return bonds
    marks: dict[int, list[tuple[int, int]]] = {}
    for bond_index, first, second, char in directional:
        for anchor, other in ((first, second), (second, first)):
            marks.setdefault(anchor, []).append((other, _side(first, second, char, anchor)))
    heavy_degree = [0] * len(atoms)
    for b in bonds:
        heavy_degree[b.begin] += 1
        heavy_degree[b.end] += 1
    out = list(bonds)
    for idx, b in enumerate(bonds):
        if b.order is not BondOrder.DOUBLE:
            continue
        left = [m for m in marks.get(b.begin, []) if m[0] != b.end]
        right = [m for m in marks.get(b.end, []) if m[0] != b.begin]
        if not left and not right:
            continue
        if not left or not right:
            out[idx] = replace(b, stereo=BondStereo.ANY)
            continue
        same_side = left[0][1] == right[0][1]
        # with a single heavy substituent per end, that substituent has top CIP
        # priority over the implicit H, so the relation is an absolute Z/E label
        if heavy_degree[b.begin] == 2 and heavy_degree[b.end] == 2:
            stereo = BondStereo.Z if same_side else BondStereo.E
        else:
            stereo = BondStereo.CIS if same_side else BondStereo.TRANS
        out[idx] = replace(b, stereo=stereo)
    return out


def parse(tokens: Sequence[Token], repeat_unit: bool = True, text: str | None = None) -> MolGraph:
    """Assemble a :class:`MolGraph` from tokens.

    With ``repeat_unit=True`` the molecule must contain exactly two ``[*]``
    atoms, each with exactly one bond.
    """
    atoms: list[Atom] = []
    bonds: list[Bond] = []
    seen: set[frozenset] = set()
    directional: list[tuple[int, int, int, str]] = []
    open_rings: dict[int, tuple[int, str | None, int]] = {}
    stack: list[int] = []
    prev: int | None = None
    pending: Token | None = None

    def add_bond(a: int, b: int, symbol: str | None, pos: int):
        if a == b:
            raise DuplicateBond("atom bonded to itself", text, pos)
        key = frozenset((a, b))
        if key in seen:
            raise DuplicateBond(f"duplicate bond between atoms {a} and {b}", text, pos)
        seen.add(key)
        if symbol is None:
            both_aromatic = atoms[a].is_aromatic and atoms[b].is_aromatic
            order = BondOrder.AROMATIC if both_aromatic else BondOrder.SINGLE
        else:
            order = _BOND_SYMBOLS[symbol]
        if symbol in ("/", "\\"):
            directional.append((len(bonds), a, b, symbol))
        bonds.append(Bond(a, b, order))

    for tok in tokens:
        if tok.kind == "atom":
            atoms.append(tok.atom)
            idx = len(atoms) - 1
            if prev is not None:
                add_bond(prev, idx, pending.text if pending else None, tok.position)
            elif pending is not None:
                raise DanglingBond("bond without a preceding atom", text, pending.position)
            pending = None
            prev = idx
        elif tok.kind == "bond":
            if pending is not None:
                raise DanglingBond("two consecutive bond symbols", text, tok.position)
            if prev is None:
                raise DanglingBond("bond without a preceding atom", text, tok.position)
            pending = tok
        elif tok.kind == "open":
            if prev is None:
                raise ParseError("branch without a preceding atom", text, tok.position)
            if pending is not None:
                raise DanglingBond("bond symbol before '('", text, pending.position)
            stack.append(prev)
        elif tok.kind == "close":
            if pending is not None:
                raise DanglingBond("bond symbol before ')'", text, pending.position)
            if not stack:
                raise UnbalancedBracket("')' without matching '('", text, tok.position)
            if prev == stack[-1]:
                raise ParseError("empty branch", text, tok.position)
            prev = stack.pop()
        elif tok.kind == "ring":
            if prev is None:
                raise ParseError("ring closure without a preceding atom", text, tok.position)
            label = tok.ring_label
            symbol = pending.text if pending else None
            if label in open_rings:
                partner, open_symbol, _ = open_rings.pop(label)
                if symbol and open_symbol and symbol != open_symbol and not (
                    symbol in "/\\" and open_symbol in "/\\"
                ):
                    raise ParseError(f"conflicting bond symbols on ring bond {label}", text, tok.position)
                if symbol is not None:
                    add_bond(prev, partner, symbol, tok.position)
                else:
                    add_bond(partner, prev, open_symbol, tok.position)
            else:
                open_rings[label] = (prev, symbol, tok.position)
            pending = None
        else:  # pragma: no cover - tokenizer never emits other kinds
            raise UnknownToken(f"bad token kind {tok.kind}", text, tok.position)

    if pending is not None:
        raise DanglingBond("trailing bond symbol", text, pending.position)
    if stack:
        raise UnbalancedBracket("unclosed '('", text)
    if open_rings:
        raise UnclosedRingBond(min(open_rings), text)
    if not atoms:
        raise ParseError("no atoms", text)

    bonds = _resolve_stereo(atoms, bonds, directional)

    degree = [0] * len(atoms)
    for b in bonds:
        degree[b.begin] += 1
        degree[b.end] += 1
    for i, a in enumerate(atoms):
        if a.chirality is not Chirality.UNSPECIFIED:
            n_neighbors = degree[i] + (a.explicit_h or 0)
            if n_neighbors not in (3, 4):
                raise InvalidChiralContext(
                    f"chiral atom {i} has {n_neighbors} neighbours", text
                )

    stars = tuple(i for i, a in enumerate(atoms) if a.element is Element.STAR)
    if repeat_unit:
        if len(stars) != 2:
            raise WrongAttachmentCount(len(stars), text)
        for s in stars:
            if degree[s] != 1:
                raise ParseError(f"attachment site {s} must have exactly one bond", text)
    return MolGraph(tuple(atoms), tuple(bonds), stars)


# ---------------------------------------------------------------------------
# perception


def bridges(n_nodes: int, edges: Sequence[tuple[int, int]]) -> set[int]:
    """Indices of edges whose removal disconnects the graph (iterative Tarjan)."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n_nodes)]
    for e, (u, v) in enumerate(edges):
        adj[u].append((v, e))
        adj[v].append((u, e))
    disc = [-1] * n_nodes
    low = [0] * n_nodes
    out: set[int] = set()
    clock = 0
    for root in range(n_nodes):
        if disc[root] >= 0:
            continue
        disc[root] = low[root] = clock
        clock += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            node, via, it = stack[-1]
            advanced = False
            for nxt, e in it:
                if e == via:
                    continue
                if disc[nxt] < 0:
                    disc[nxt] = low[nxt] = clock
                    clock += 1
                    stack.append((nxt, e, iter(adj[nxt])))
                    advanced = True
                    break
                low[node] = min(low[node], disc[nxt])
            if advanced:
                continue
            stack.pop()
            if stack:
                parent = stack[-1][0]
                low[parent] = min(low[parent], low[node])
                if low[node] > disc[parent]:
                    out.add(via)
    return out


def charged_valence(element: Element, valence: int, charge: int) -> int:
    """Valence adjusted for formal charge (isoelectronic rule), floored at 0."""
    if element is Element.C:
        v = valence - abs(charge)
    elif element is Element.B:
        v = valence - charge
    else:
        v = valence + charge
    return max(v, 0)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def perceive(mol: MolGraph) -> MolGraph:
    """Return a copy of ``mol`` with ring, hydrogen, hybridization and conjugation perceived."""
    n, m = mol.n_atoms, mol.n_bonds
    degree = np.zeros(n, dtype=np.int64)
    order_sum = np.zeros(n)
    n_double = np.zeros(n, dtype=np.int64)
    has_triple = np.zeros(n, dtype=bool)
    has_aromatic = np.zeros(n, dtype=bool)
    for b in mol.bonds:
        w = _BOND_WEIGHT[b.order]
        for a in (b.begin, b.end):
            degree[a] += 1
            order_sum[a] += w
            if b.order is BondOrder.DOUBLE:
                n_double[a] += 1
            elif b.order is BondOrder.TRIPLE:
                has_triple[a] = True
            elif b.order is BondOrder.AROMATIC:
                has_aromatic[a] = True

    bridge_set = bridges(n, [b.endpoints for b in mol.bonds])
    bond_in_ring = np.array([i not in bridge_set for i in range(m)], dtype=bool)
    atom_in_ring = np.zeros(n, dtype=bool)
    for i, b in enumerate(mol.bonds):
        if bond_in_ring[i]:
            atom_in_ring[b.begin] = atom_in_ring[b.end] = True

    implicit_h = np.zeros(n, dtype=np.int64)
    hyb = np.full(n, Hybridization.OTHER, dtype=np.int64)
    for i, a in enumerate(mol.atoms):
        if a.element in (Element.STAR, Element.OTHER):
            implicit_h[i] = (a.explicit_h or 0) if a.element is Element.OTHER else 0
            continue
        bond_valence = _round_half_up(order_sum[i])
        if a.explicit_h is not None:
            h = a.explicit_h
        else:
            h = max(0, charged_valence(a.element, DEFAULT_VALENCE[a.element], a.formal_charge) - bond_valence)
        implicit_h[i] = h
        max_valence = max(charged_valence(a.element, v, a.formal_charge) for v in _ALLOWED_VALENCES[a.element])
        if bond_valence + h > max_valence:
            hyb[i] = Hybridization.OTHER
        elif has_triple[i] or n_double[i] >= 2:
            hyb[i] = Hybridization.SP
        elif n_double[i] >= 1 or has_aromatic[i] or a.is_aromatic:
            hyb[i] = Hybridization.SP2
        else:
            hyb[i] = Hybridization.SP3

    unsaturated = (hyb == Hybridization.SP) | (hyb == Hybridization.SP2)
    for i, a in enumerate(mol.atoms):
        unsaturated[i] |= a.is_aromatic
    conjugated = np.array([bool(unsaturated[b.begin] and unsaturated[b.end]) for b in mol.bonds], dtype=bool)

    arrays = [degree, implicit_h, atom_in_ring, hyb, bond_in_ring, conjugated]
    for arr in arrays:
        arr.setflags(write=False)
    return replace(mol, perceived=Perception(*arrays))


def from_psmiles(psmiles: str, repeat_unit: bool = True) -> MolGraph:
    """Tokenize, parse and perceive in one step."""
    return perceive(parse(tokenize(psmiles), repeat_unit=repeat_unit, text=psmiles))


def molar_mass(mol: MolGraph) -> float:
    """Molar mass of the written atoms plus their hydrogens (attachment atoms weigh 0)."""
    if mol.perceived is None:
        mol = perceive(mol)
    heavy = sum(a.atomic_mass for a in mol.atoms)
    return float(heavy + HYDROGEN_MASS * int(mol.perceived.implicit_h.sum()))


def check_corpus(strings: Iterable[str], repeat_unit: bool = True) -> list[tuple[int, str, str]]:
    """Parse every string; return ``(line_index, string, error)`` for failures."""
    failures = []
    for i, s in enumerate(strings):
        try:
            from_psmiles(s, repeat_unit=repeat_unit)
        except ParseError as exc:
            failures.append((i, s, str(exc)))
    return failures

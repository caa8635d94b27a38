"""Synthetic polymer datasets with a known Tg ground-truth function.

Stands in for the unreleased labelled data.  Repeat units come from a small
fragment grammar; each fragment carries a Tg contribution and the label is

    Tg = Tg_inf(composition) - K / Mn - C * ln(D) + noise,   clipped to [173, 506] K

with ``Tg_inf`` the phi-weighted mean of the unit values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import PolymerRecord
from .psmiles import from_psmiles, molar_mass

FLORY_FOX_K = 5.0e4
DISPERSITY_COEF = 8.0
NOISE_K = 4.0
TG_CLIP = (173.0, 506.0)
MN_MEDIAN = 16500.0
MN_CLIP = (800.0, 1.905882e6)
D_CLIP = (1.0, 3.5)
HOMO_SHARE = 180 / 381

# vinyl side groups: "[*]CC([*])R"
SIDE_GROUPS = {
    "": 0.0, "C": 60.0, "CC": 30.0, "CCCC": -20.0, "CCCCCC": -40.0, "c1ccccc1": 175.0,
    "c1ccc(C)cc1": 190.0, "c1ccc(Cl)cc1": 205.0, "Cl": 160.0, "F": 120.0, "C#N": 175.0,
    "C(=O)OC": 85.0, "C(=O)OCC": 55.0, "C(=O)OCCCC": 20.0, "OC(C)=O": 110.0, "OC": 50.0,
    "C(=O)N": 240.0, "O": 165.0,
}
# alpha-methyl vinyl units: "[*]CC([*])(C)R"
ALPHA_GROUPS = {"C(=O)OC": 180.0, "C(=O)OCC": 145.0, "C(=O)OCCCC": 100.0, "c1ccccc1": 245.0, "C": 10.0}
BACKBONES = {
    "[*]C(F)(F)C(F)(F)[*]": 400.0, "[*]CC([*])(F)F": 235.0, "[*]O[Si](C)(C)[*]": 150.0,
    "[*]CCOCCS([*])(=O)=O": 265.0, "[*]c1ccc(O[*])cc1": 380.0, "[*]NCCCCCC(=O)[*]": 320.0,
    "[*]CCOC(=O)c1ccc(C(=O)O[*])cc1": 345.0, "[*]CCc1ccc(C[*])cc1": 330.0, "[*]CC=CC[*]": 175.0,
    "[*]CC(C)=CC[*]": 200.0, "[*]C=C[*]": 280.0,
    "[*]c1ccc(Oc2ccc(C(=O)[*])cc2)cc1": 425.0, "[*]c1ccc(S(=O)(=O)c2ccc(O[*])cc2)cc1": 490.0,
    "[*]OC(=O)Oc1ccc(C(C)(C)c2ccc([*])cc2)cc1": 425.0, "[*]c1ccc(-c2ccc([*])cc2)cc1": 470.0,
    "[*]CC([*])c1ccc2ccccc2c1": 420.0, "[*]CC([*])(C)C(=O)OC1CCCCC1": 380.0,
}
ETHER_TG = {1: 215.0, 2: 205.0, 3: 195.0, 4: 190.0}
VINYL_BASE = 195.0


def unit_library() -> dict[str, float]:
    """Every repeat unit the grammar can emit, with its high-Mn Tg contribution."""
    lib = {}
    for r, dt in SIDE_GROUPS.items():
        lib["[*]CC[*]" if not r else f"[*]CC([*]){r}"] = VINYL_BASE + dt
    for r, dt in ALPHA_GROUPS.items():
        lib[f"[*]CC([*])(C){r}"] = VINYL_BASE + dt
    for n, tg in ETHER_TG.items():
        lib["[*]" + "C" * n + "O[*]"] = tg
    lib.update(BACKBONES)
    return lib


def ground_truth_tg(tg_units, phi, mn, dispersity) -> float:
    """Noise-free label before clipping."""
    tg_inf = float(np.dot(phi[: len(tg_units)], tg_units))
    return tg_inf - FLORY_FOX_K / mn - DISPERSITY_COEF * np.log(dispersity)


@dataclass
class SyntheticSet:
    records: list[PolymerRecord]
    corpus: list[str]


def synth_generate(n_polymers: int = 381, n_corpus: int = 1000, seed: int = 0) -> SyntheticSet:
    """Deterministic labelled records plus an unlabelled PSMILES corpus."""
    rng = np.random.default_rng(seed)
    lib = unit_library()
    units = sorted(lib)
    mass = {u: molar_mass(from_psmiles(u)) for u in units}
    n_homo = int(round(n_polymers * HOMO_SHARE))
    records = []
    width = max(4, len(str(n_polymers)))
    for i in range(n_polymers):
        pid = f"SYN{i:0{width}d}"
        mn = float(np.clip(MN_MEDIAN * np.exp(rng.normal(0.0, 1.1)), *MN_CLIP))
        d = 1.0 if rng.random() < 0.02 else float(np.clip(1.0 + np.exp(rng.normal(np.log(0.6), 0.6)), *D_CLIP))
        mn, mw = round(mn, 1), round(mn * d, 1)
        if i < n_homo:
            u = units[rng.integers(len(units))]
            tg = ground_truth_tg([lib[u]], np.array([1.0, 0.0]), mn, mw / mn)
            rec = dict(psmiles_1=u, m0=round(mass[u], 3))
        else:
            a, b = rng.choice(len(units), size=2, replace=False)
            u1, u2 = units[a], units[b]
            phi1 = round(float(rng.uniform(0.1, 0.9)), 2)
            phi = (phi1, round(1.0 - phi1, 2))
            tg = ground_truth_tg([lib[u1], lib[u2]], np.array(phi), mn, mw / mn)
            m0 = phi[0] * mass[u1] + phi[1] * mass[u2]
            rec = dict(psmiles_1=u1, psmiles_2=u2, phi=phi, m0=round(m0, 3), m0_1=round(mass[u1], 3),
                       m0_2=round(mass[u2], 3))
        tg = float(np.clip(tg + rng.normal(0.0, NOISE_K), *TG_CLIP))
        records.append(PolymerRecord(pid, mn=mn, mw=mw, tg=round(tg, 2), **rec))
    order = rng.permutation(n_polymers)
    records = [records[i] for i in order]
    corpus = [units[i] for i in rng.integers(len(units), size=n_corpus)]
    return SyntheticSet(records, corpus)

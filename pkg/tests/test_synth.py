import numpy as np
import pytest

from polychain.psmiles import check_corpus, from_psmiles, molar_mass
from polychain.synth import TG_CLIP, ground_truth_tg, synth_generate, unit_library


def test_split_range_and_determinism():
    a = synth_generate(381, 200, seed=0)
    b = synth_generate(381, 200, seed=0)
    assert [r.__dict__ for r in a.records] == [r.__dict__ for r in b.records] and a.corpus == b.corpus
    assert sum(not r.is_copolymer for r in a.records) == 180
    assert sum(r.is_copolymer for r in a.records) == 201
    tg = np.array([r.tg for r in a.records])
    assert tg.min() >= TG_CLIP[0] and tg.max() <= TG_CLIP[1]
    assert len({r.id for r in a.records}) == 381
    assert synth_generate(381, 0, seed=1).records[0].__dict__ != a.records[0].__dict__


def test_every_string_parses():
    data = synth_generate(381, 1000, seed=0)
    strings = data.corpus + [r.psmiles_1 for r in data.records] + [r.psmiles_2 for r in data.records if r.psmiles_2]
    assert check_corpus(strings) == []
    assert check_corpus(list(unit_library())) == []


def test_descriptors_in_range():
    for r in synth_generate(381, 0, seed=0).records:
        assert 800 <= r.mn <= 1.905882e6 and 1.0 <= r.dispersity <= 3.5 + 1e-3
        assert abs(sum(r.phi) - 1) < 1e-9
        if r.is_copolymer:
            assert abs(r.m0_1 - molar_mass(from_psmiles(r.psmiles_1))) < 1e-3


def test_ground_truth_function():
    assert ground_truth_tg([300.0], np.array([1.0, 0.0]), 1e12, 1.0) == pytest.approx(300.0, abs=1e-6)
    high = ground_truth_tg([300.0, 400.0], np.array([0.5, 0.5]), 5e4, np.e)
    assert high == 350.0 - 1.0 - 8.0

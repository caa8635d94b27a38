import json
import struct
import warnings

import numpy as np
import pytest

from conftest import record
from polychain import errors as E
from polychain import features as F
from polychain.graphs import BuildConfig, build_cup, build_repeat_unit
from polychain.io import (COLUMNS, GraphCache, GraphCacheWriter, MetricsLog, RangeWarning, TopologyOnlyView,
                          file_hash, read_cache, read_corpus, read_dataset, read_rows, write_cache, write_dataset,
                          write_manifest, write_rows)
from polychain.synth import synth_generate

HEADER = ",".join(COLUMNS)


def write_csv(path, *rows, header=HEADER):
    path.write_text("\n".join([header, *rows]) + "\n")
    return path


class TestDataset:
    def test_round_trip(self, tmp_path):
        recs = synth_generate(20, 0, seed=2).records
        write_dataset(tmp_path / "d.csv", recs)
        back = read_dataset(tmp_path / "d.csv")
        assert [r.id for r in back] == [r.id for r in recs]
        for a, b in zip(recs, back):
            assert (a.psmiles_1, a.psmiles_2, a.phi, a.mn, a.mw, a.tg) == (b.psmiles_1, b.psmiles_2, b.phi, b.mn, b.mw, b.tg)
            assert a.m0_eff == pytest.approx(b.m0_eff, rel=1e-12)

    def test_homopolymer_defaults(self, tmp_path):
        p = write_csv(tmp_path / "d.csv", "A,[*]CC[*],,,,5000,10000,28.054,")
        (r,) = read_dataset(p)
        assert r.phi == (1.0, 0.0) and r.psmiles_2 is None and r.tg is None

    @pytest.mark.parametrize("row, needle", [
        ("A,[*]CC[*],,1,0,abc,10000,28,300", "not a number"),
        ("A,[*]CC[*],,1,0,5000,nan,28,300", "not finite"),
        ("A,[*]CC[*],,1,0,5000,4000,28,300", "Mn <= Mw"),
        ("A,[*]CC[*],,1,0,,4000,28,300", "missing value"),
        (",[*]CC[*],,1,0,5000,8000,28,300", "empty id"),
        ("A,[*]CC[*],,0.5,0.4,5000,8000,28,300", "sum to 1"),
    ])
    def test_errors_carry_line(self, tmp_path, row, needle):
        p = write_csv(tmp_path / "d.csv", "OK,[*]CC[*],,1,0,5000,8000,28,300", row)
        with pytest.raises(E.DatasetError) as info:
            read_dataset(p)
        assert info.value.line == 3 and info.value.path == str(p) and needle in str(info.value)

    def test_missing_column_and_duplicate(self, tmp_path):
        p = write_csv(tmp_path / "a.csv", "A,[*]CC[*],5000", header="id,psmiles_1,mn_g_mol")
        with pytest.raises(E.DatasetError) as info:
            read_dataset(p)
        assert info.value.line == 1
        p = write_csv(tmp_path / "b.csv", "A,[*]CC[*],,1,0,5000,8000,28,300", "A,[*]CC[*],,1,0,5000,8000,28,300")
        with pytest.raises(E.DatasetError, match="duplicate"):
            read_dataset(p)

    def test_range_warnings(self, tmp_path):
        p = write_csv(tmp_path / "d.csv", "A,[*]CC[*],,1,0,500,800,28,300", "B,[*]CC[*],,1,0,5000,8000,28,600")
        with pytest.warns(RangeWarning) as caught:
            read_dataset(p)
        assert len(caught) == 2

    def test_copolymer_m0_consistency(self, tmp_path):
        header = HEADER + ",m0_1,m0_2"
        p = write_csv(tmp_path / "d.csv", "C,[*]CC[*],[*]CC([*])C,0.5,0.5,5000,8000,99,300,28,42", header=header)
        with pytest.warns(RangeWarning, match="differs"):
            (r,) = read_dataset(p)
        assert r.m0_eff == pytest.approx(35.0)
        p = write_csv(tmp_path / "e.csv", "C,[*]CC[*],[*]CC([*])C,0.5,0.5,5000,8000,35,300")
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            (r,) = read_dataset(p)
        assert r.m0_eff == 35.0

    def test_corpus_and_rows(self, tmp_path):
        (tmp_path / "c.txt").write_text("# comment\n[*]CC[*]\n\n  [*]CC([*])C  \n")
        assert read_corpus(tmp_path / "c.txt") == ["[*]CC[*]", "[*]CC([*])C"]
        write_rows(tmp_path / "r.csv", [{"a": 1, "b": 2.5}, {"a": 3, "c": "x"}])
        assert read_rows(tmp_path / "r.csv") == [{"a": "1", "b": "2.5", "c": ""}, {"a": "3", "b": "", "c": "x"}]


def some_graphs():
    cfg = BuildConfig(n_cups=2, dp_max=25)
    recs = [record("A", "[*]CC([*])(C)C(=O)OC", 3000, 1.7),
            record("Bé", "[*]CC[*]", 2000, 2.2, unit2="[*]CC([*])c1ccccc1", phi=(0.3, 0.7))]
    return [build_cup(r, c, cfg) for r in recs for c in range(2)] + [build_repeat_unit(recs[0])]


class TestCache:
    @pytest.mark.parametrize("compress", [True, False])
    def test_bit_exact_round_trip(self, tmp_path, compress):
        graphs = some_graphs()
        n = write_cache(tmp_path / "g.pchg", graphs, F.FeatureSchema(), compress)
        assert n == len(graphs)
        back = read_cache(tmp_path / "g.pchg", F.FeatureSchema())
        assert len(back) == len(graphs) and all(a.equals(b) for a, b in zip(graphs, back))

    def test_random_access_meta_and_lazy(self, tmp_path):
        graphs = some_graphs()
        write_cache(tmp_path / "g.pchg", graphs, F.FeatureSchema())
        with GraphCache(tmp_path / "g.pchg") as cache:
            assert len(cache) == 5 and cache[3].equals(graphs[3])
            pid, cup, n, e, glob = cache.meta(2)
            assert (pid, cup, n, e) == ("Bé", 0, graphs[2].n_nodes, graphs[2].n_edges)
            lazy = cache.lazy(cache_size=2)
            assert lazy[1].polymer_id == "A" and np.array_equal(lazy[1].x, graphs[1].x)
            assert np.array_equal(lazy[4].edge_index, graphs[4].edge_index)
            assert lazy[1].materialize().equals(graphs[1])

    def test_schema_and_version_errors(self, tmp_path):
        p = tmp_path / "g.pchg"
        write_cache(p, some_graphs()[:1], F.FeatureSchema())
        with pytest.raises(E.CacheFormatError):
            GraphCache(p, expect=F.FeatureSchema(F.TOPOLOGY_ONLY))
        data = bytearray(p.read_bytes())
        struct.pack_into("<H", data, 4, 2)
        (tmp_path / "v.pchg").write_bytes(bytes(data))
        with pytest.raises(E.CacheFormatError, match="format"):
            GraphCache(tmp_path / "v.pchg")
        data = bytearray(p.read_bytes())
        struct.pack_into("<H", data, 6, 7)
        (tmp_path / "s.pchg").write_bytes(bytes(data))
        with pytest.raises(E.CacheFormatError, match="schema"):
            GraphCache(tmp_path / "s.pchg")
        (tmp_path / "m.pchg").write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(E.CacheFormatError):
            GraphCache(tmp_path / "m.pchg")
        (tmp_path / "t.pchg").write_bytes(p.read_bytes()[:-10])
        with pytest.raises(E.CacheFormatError):
            read_cache(tmp_path / "t.pchg")

    def test_writer_rejects_wrong_width(self, tmp_path):
        with GraphCacheWriter(tmp_path / "g.pchg", F.FeatureSchema(F.TOPOLOGY_ONLY)) as w:
            with pytest.raises(E.CacheFormatError):
                w.write(some_graphs()[0])

    def test_topology_view(self):
        g = some_graphs()[0]
        v = TopologyOnlyView(g)
        assert v.x.shape == (g.n_nodes, 1) and np.all(v.edge_attr == 1)
        assert v.edge_index is g.edge_index and v.polymer_id == g.polymer_id


def test_metrics_and_manifest(tmp_path):
    log = MetricsLog(tmp_path / "m.jsonl")
    log({"epoch": 1, "loss": np.float32(0.5)})
    log({"epoch": 2, "loss": 0.25})
    log.close()
    lines = [json.loads(s) for s in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert lines == [{"epoch": 1, "loss": 0.5}, {"epoch": 2, "loss": 0.25}]
    (tmp_path / "in.csv").write_text("abc")
    path = write_manifest(tmp_path / "out", "build", {"cups": 4}, inputs=[tmp_path / "in.csv"])
    m = json.loads(path.read_text())
    assert m["command"] == "build" and m["arguments"] == {"cups": 4}
    assert m["inputs"][str(tmp_path / "in.csv")] == file_hash(tmp_path / "in.csv")
    assert file_hash(tmp_path / "in.csv") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"

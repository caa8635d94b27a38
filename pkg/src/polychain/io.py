"""Dataset CSV files, the binary graph cache, metrics logs and run manifests."""

from __future__ import annotations

import csv
import functools
import hashlib
import json
import logging
import math
import platform
import struct
import sys
import time
import warnings
import zlib
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import features as F
from .errors import CacheFormatError, DatasetError, InvalidDescriptors
from .graphs import PolymerGraph, PolymerRecord

log = logging.getLogger(__name__)

COLUMNS = ("id", "psmiles_1", "psmiles_2", "phi_1", "phi_2", "mn_g_mol", "mw_g_mol", "m0_g_mol", "tg_K")
OPTIONAL_COLUMNS = ("m0_1", "m0_2")
MN_RANGE = (800.0, 1.905882e6)
TG_RANGE = (173.0, 506.0)


class RangeWarning(UserWarning):
    """A descriptor lies outside the range seen in the reference dataset."""


# ---------------------------------------------------------------------------
# dataset CSV


def _float(row, key, path, line, required=True):
    raw = (row.get(key) or "").strip()
    if not raw:
        if required:
            raise DatasetError(f"missing value for {key!r}", path, line)
        return None
    try:
        value = float(raw)
    except ValueError:
        raise DatasetError(f"{key}={raw!r} is not a number", path, line) from None
    if not math.isfinite(value):
        raise DatasetError(f"{key}={raw!r} is not finite", path, line)
    return value


def _record_from_row(row: dict, path, line) -> PolymerRecord:
    pid = (row.get("id") or "").strip()
    if not pid:
        raise DatasetError("empty id", path, line)
    p1 = (row.get("psmiles_1") or "").strip()
    p2 = (row.get("psmiles_2") or "").strip() or None
    if not p1:
        raise DatasetError("empty psmiles_1", path, line)
    phi1 = _float(row, "phi_1", path, line, required=False)
    phi2 = _float(row, "phi_2", path, line, required=False)
    phi = (1.0 if phi1 is None else phi1, 0.0 if phi2 is None else phi2)
    mn = _float(row, "mn_g_mol", path, line)
    mw = _float(row, "mw_g_mol", path, line)
    m0 = _float(row, "m0_g_mol", path, line, required=False)
    m0_1 = _float(row, "m0_1", path, line, required=False)
    m0_2 = _float(row, "m0_2", path, line, required=False)
    tg = _float(row, "tg_K", path, line, required=False)
    if mn <= 0 or mw < mn:
        raise DatasetError(f"need 0 < Mn <= Mw, got Mn={mn}, Mw={mw}", path, line)
    if p2 is not None and m0_1 is not None and m0_2 is not None and m0 is not None:
        eff = phi[0] * m0_1 + phi[1] * m0_2
        if abs(eff - m0) > 1e-3 * eff:
            warnings.warn(f"{path}:{line}: m0_g_mol={m0} differs from phi-weighted unit masses {eff:.3f}; "
                          "using the per-unit values", RangeWarning, stacklevel=3)
    if not MN_RANGE[0] <= mn <= MN_RANGE[1]:
        warnings.warn(f"{path}:{line}: Mn={mn} outside {MN_RANGE}", RangeWarning, stacklevel=3)
    if tg is not None and not TG_RANGE[0] <= tg <= TG_RANGE[1]:
        warnings.warn(f"{path}:{line}: Tg={tg} outside {TG_RANGE}", RangeWarning, stacklevel=3)
    try:
        return PolymerRecord(pid, p1, mn, mw, m0=m0, psmiles_2=p2, phi=phi, m0_1=m0_1, m0_2=m0_2, tg=tg)
    except InvalidDescriptors as exc:
        raise DatasetError(str(exc), path, line) from None


def read_dataset(path) -> list[PolymerRecord]:
    """Parse a dataset CSV; errors carry the file path and line number."""
    path = str(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise DatasetError(f"missing columns {missing}", path, 1)
        records, seen = [], set()
        for row in reader:
            line = reader.line_num
            rec = _record_from_row(row, path, line)
            if rec.id in seen:
                raise DatasetError(f"duplicate id {rec.id!r}", path, line)
            seen.add(rec.id)
            records.append(rec)
    return records


def write_dataset(path, records: Iterable[PolymerRecord]):
    fmt = lambda v: "" if v is None else repr(float(v))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS + OPTIONAL_COLUMNS)
        for r in records:
            w.writerow([r.id, r.psmiles_1, r.psmiles_2 or "", fmt(r.phi[0]), fmt(r.phi[1]), fmt(r.mn), fmt(r.mw),
                        fmt(r.m0), fmt(r.tg), fmt(r.m0_1), fmt(r.m0_2)])


def read_corpus(path) -> list[str]:
    """One PSMILES per line; blank lines and ``#`` comments are skipped."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            s = line.strip()
            if s and not s.startswith("#"):
                out.append(s)
    return out


def write_rows(path, rows: Sequence[dict]):
    rows = list(rows)
    fieldnames = list(dict.fromkeys(k for r in rows for k in r)) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        w.writerows(rows)


def read_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# graph cache
#
# little-endian layout
#   header: b"PCHG" | u16 format | u16 schema | u8 mode | u16 atom_dim | u16 bond_dim | u32 n_graphs
#   record: u16 id_len | id utf-8 | u32 cup | u32 nodes | u32 edges | 6 x f64 globals
#           | u8 codec (0 raw, 1 zlib) | u32 payload_len | payload
#   payload: X f32 (nodes x atom_dim) | edge_index i64 (2 x edges) | E f32 (edges x bond_dim)
#            | component i64 (nodes)

CACHE_MAGIC = b"PCHG"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sHHBHHI")
_RECORD = struct.Struct("<III6d")
_PAYLOAD = struct.Struct("<BI")
_MODES = {F.CHEMICAL: 0, F.TOPOLOGY_ONLY: 1}
RAW, ZLIB = 0, 1


class GraphCacheWriter:
    """Streams graphs to a cache file; the graph count is patched on close."""

    def __init__(self, path, schema: F.FeatureSchema, compress: bool = True, level: int = 1):
        self.path = Path(path)
        self.schema = schema
        self.codec = ZLIB if compress else RAW
        self.level = level
        self.count = 0
        self._fh = open(self.path, "wb")
        self._fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, schema.version, _MODES[schema.mode],
                                    schema.atom_dim, schema.bond_dim, 0))

    def write(self, g: PolymerGraph):
        if g.x.shape[1] != self.schema.atom_dim or g.edge_attr.shape[1] != self.schema.bond_dim:
            raise CacheFormatError(f"{g.polymer_id}: graph widths do not match cache schema {self.schema.tag}")
        payload = b"".join([
            np.ascontiguousarray(g.x, dtype="<f4").tobytes(),
            np.ascontiguousarray(g.edge_index, dtype="<i8").tobytes(),
            np.ascontiguousarray(g.edge_attr, dtype="<f4").tobytes(),
            np.ascontiguousarray(g.component_id, dtype="<i8").tobytes(),
        ])
        if self.codec == ZLIB:
            payload = zlib.compress(payload, self.level)
        pid = g.polymer_id.encode("utf-8")
        self._fh.write(struct.pack("<H", len(pid)) + pid)
        self._fh.write(_RECORD.pack(g.cup_index, g.n_nodes, g.n_edges, *np.asarray(g.globals, dtype=np.float64)))
        self._fh.write(_PAYLOAD.pack(self.codec, len(payload)))
        self._fh.write(payload)
        self.count += 1

    def close(self):
        if self._fh.closed:
            return
        self._fh.seek(_HEADER.size - 4)
        self._fh.write(struct.pack("<I", self.count))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class GraphCache:
    """Random-access reader for cache files.  Schema or version mismatch is a hard error."""

    def __init__(self, path, expect: F.FeatureSchema | None = None):
        self.path = Path(path)
        self._fh = open(self.path, "rb")
        head = self._fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise CacheFormatError(f"{path}: truncated header")
        magic, version, schema_v, mode, adim, bdim, n = _HEADER.unpack(head)
        if magic != CACHE_MAGIC:
            raise CacheFormatError(f"{path}: not a graph cache")
        if version != CACHE_VERSION:
            raise CacheFormatError(f"{path}: cache format {version}, reader supports {CACHE_VERSION}")
        if schema_v != F.SCHEMA_VERSION:
            raise CacheFormatError(f"{path}: feature schema v{schema_v}, expected v{F.SCHEMA_VERSION}")
        modes = {v: k for k, v in _MODES.items()}
        if mode not in modes:
            raise CacheFormatError(f"{path}: unknown feature mode code {mode}")
        self.schema = F.FeatureSchema(modes[mode], schema_v)
        if (adim, bdim) != (self.schema.atom_dim, self.schema.bond_dim):
            raise CacheFormatError(f"{path}: widths ({adim}, {bdim}) inconsistent with {self.schema.tag}")
        if expect is not None and expect != self.schema:
            raise CacheFormatError(f"{path}: cache holds {self.schema.tag}, expected {expect.tag}")
        self.n_graphs = n
        self._offsets: list[int] | None = None

    def _index(self) -> list[int]:
        if self._offsets is None:
            offsets, pos = [], _HEADER.size
            fh = self._fh
            for _ in range(self.n_graphs):
                offsets.append(pos)
                fh.seek(pos)
                (id_len,) = struct.unpack("<H", fh.read(2))
                fh.seek(pos + 2 + id_len + _RECORD.size)
                _, plen = _PAYLOAD.unpack(fh.read(_PAYLOAD.size))
                pos += 2 + id_len + _RECORD.size + _PAYLOAD.size + plen
            self._offsets = offsets
        return self._offsets

    def _read_at(self, pos: int) -> PolymerGraph:
        fh = self._fh
        fh.seek(pos)
        (id_len,) = struct.unpack("<H", fh.read(2))
        pid = fh.read(id_len).decode("utf-8")
        cup, n, e, *glob = _RECORD.unpack(fh.read(_RECORD.size))
        codec, plen = _PAYLOAD.unpack(fh.read(_PAYLOAD.size))
        payload = fh.read(plen)
        if len(payload) != plen:
            raise CacheFormatError(f"{self.path}: truncated record for {pid}")
        if codec == ZLIB:
            payload = zlib.decompress(payload)
        elif codec != RAW:
            raise CacheFormatError(f"{self.path}: unknown codec {codec}")
        a, b = self.schema.atom_dim, self.schema.bond_dim
        sizes = [4 * n * a, 16 * e, 4 * e * b, 8 * n]
        if len(payload) != sum(sizes):
            raise CacheFormatError(f"{self.path}: payload size mismatch for {pid}")
        cuts = np.cumsum([0] + sizes)
        x = np.frombuffer(payload, "<f4", n * a, cuts[0]).reshape(n, a).astype(np.float32)
        ei = np.frombuffer(payload, "<i8", 2 * e, cuts[1]).reshape(2, e).astype(np.int64)
        ea = np.frombuffer(payload, "<f4", e * b, cuts[2]).reshape(e, b).astype(np.float32)
        comp = np.frombuffer(payload, "<i8", n, cuts[3]).astype(np.int64)
        return PolymerGraph(x, ei, ea, comp, np.array(glob, dtype=np.float64), pid, cup)

    def __len__(self) -> int:
        return self.n_graphs

    def __getitem__(self, i: int) -> PolymerGraph:
        offsets = self._index()
        return self._read_at(offsets[i])

    def meta(self, i: int) -> tuple[str, int, int, int, np.ndarray]:
        """``(polymer_id, cup, nodes, edges, globals)`` without decoding the payload."""
        fh = self._fh
        fh.seek(self._index()[i])
        (id_len,) = struct.unpack("<H", fh.read(2))
        pid = fh.read(id_len).decode("utf-8")
        cup, n, e, *glob = _RECORD.unpack(fh.read(_RECORD.size))
        return pid, cup, n, e, np.array(glob, dtype=np.float64)

    def lazy(self, cache_size: int = 32) -> list["LazyGraph"]:
        """Proxies that decode arrays on first access; bounded memory for large caches."""
        load = functools.lru_cache(maxsize=cache_size)(self.__getitem__)
        return [LazyGraph(i, *self.meta(i), load) for i in range(self.n_graphs)]

    def __iter__(self) -> Iterator[PolymerGraph]:
        for pos in self._index():
            yield self._read_at(pos)

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LazyGraph:
    """Stand-in for :class:`PolymerGraph` backed by a cache record."""

    __slots__ = ("index", "polymer_id", "cup_index", "n_nodes", "n_edges", "globals", "_load")

    def __init__(self, index, polymer_id, cup_index, n_nodes, n_edges, globals_, load):
        self.index = index
        self.polymer_id = polymer_id
        self.cup_index = cup_index
        self.n_nodes = n_nodes
        self.n_edges = n_edges
        self.globals = globals_
        self._load = load

    def materialize(self) -> PolymerGraph:
        return self._load(self.index)

    x = property(lambda self: self.materialize().x)
    edge_index = property(lambda self: self.materialize().edge_index)
    edge_attr = property(lambda self: self.materialize().edge_attr)
    component_id = property(lambda self: self.materialize().component_id)


class TopologyOnlyView:
    """Presents a chemical-mode graph with all-ones node and edge features."""

    __slots__ = ("graph",)

    def __init__(self, graph):
        self.graph = graph

    def __getattr__(self, name):
        return getattr(self.graph, name)

    @property
    def x(self):
        return np.ones((self.graph.n_nodes, 1), dtype=np.float32)

    @property
    def edge_attr(self):
        return np.ones((self.graph.n_edges, 1), dtype=np.float32)


def write_cache(path, graphs: Iterable[PolymerGraph], schema: F.FeatureSchema, compress: bool = True) -> int:
    with GraphCacheWriter(path, schema, compress) as w:
        for g in graphs:
            w.write(g)
        return w.count


def read_cache(path, expect: F.FeatureSchema | None = None) -> list[PolymerGraph]:
    with GraphCache(path, expect) as cache:
        return list(cache)


# ---------------------------------------------------------------------------
# metrics and manifests


class MetricsLog:
    """Line-delimited JSON metrics, one object per line."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "a", encoding="utf-8")

    def __call__(self, record: dict):
        self._fh.write(json.dumps(record, default=float) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, arguments: dict, config: dict | None = None,
                   inputs: Sequence = (), extra: dict | None = None) -> Path:
    """Record what a run did and with which inputs, next to its outputs."""
    from . import __version__
    import torch

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "arguments": arguments,
        "config": config,
        "inputs": {str(p): file_hash(p) for p in inputs if p and Path(p).is_file()},
        "package_version": __version__,
        "python": sys.version.split()[0],
        "torch": torch.__version__,
        "numpy": np.__version__,
        "platform": platform.platform(),
        "created_unix": time.time(),
    }
    if extra:
        manifest.update(extra)
    path = out / f"manifest-{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path

"""GINE / GATv2 encoders with GraphNorm, mean-pool readout, Tg decoder and SSL heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import engine
from . import features as F
from .errors import DimensionMismatch, EmptyMask, SchemaMismatch

GINE = "gine"
GATV2 = "gatv2"
N_GLOBALS = 6
N_ATOM_CLASSES = 11
N_BOND_CLASSES = 5

# Mn, Mw, M0 span orders of magnitude; they enter the decoder on a log10 scale
LOG_GLOBALS = np.array([True, True, False, True, False, False])

TRAIN, EVAL, MC_DROPOUT = "train", "eval", "mc-dropout"


@dataclass(frozen=True)
class EncoderConfig:
    arch: str = GINE
    layers: int = 3
    hidden: int = 32
    dropout_p: float = 0.1
    residual: bool = True
    decoder_hidden: int = 16
    decoder_dropout: float = 0.45
    features: str = F.CHEMICAL

    def __post_init__(self):
        if self.arch not in (GINE, GATV2):
            raise ValueError(f"unknown encoder {self.arch!r}")

    @property
    def schema(self) -> F.FeatureSchema:
        return F.FeatureSchema(self.features)


@dataclass
class Batch:
    x: torch.Tensor
    edge_index: torch.Tensor       # (2, E) undirected, stored once
    edge_attr: torch.Tensor
    graph_index: torch.Tensor      # node -> graph
    globals: torch.Tensor          # (B, 6) raw descriptors
    num_graphs: int
    node_mask: torch.Tensor | None = None
    edge_mask: torch.Tensor | None = None

    @property
    def num_nodes(self) -> int:
        return int(self.x.shape[0])


def collate(graphs: Sequence, dtype=torch.float32) -> Batch:
    """Stack graphs into one disconnected batch graph."""
    offsets = np.cumsum([0] + [g.n_nodes for g in graphs[:-1]])
    x = torch.from_numpy(np.concatenate([g.x for g in graphs])).to(dtype)
    edge_index = torch.from_numpy(
        np.concatenate([g.edge_index + off for g, off in zip(graphs, offsets)], axis=1)
    ).long()
    edge_attr = torch.from_numpy(np.concatenate([g.edge_attr for g in graphs])).to(dtype)
    graph_index = torch.from_numpy(np.repeat(np.arange(len(graphs)), [g.n_nodes for g in graphs])).long()
    globals_ = torch.from_numpy(np.stack([g.globals for g in graphs])).to(dtype)
    return Batch(x, edge_index, edge_attr, graph_index, globals_, len(graphs))


def _directed(edge_index: torch.Tensor, edge_values: torch.Tensor):
    src = torch.cat([edge_index[0], edge_index[1]])
    dst = torch.cat([edge_index[1], edge_index[0]])
    return src, dst, torch.cat([edge_values, edge_values])


class GraphNorm(nn.Module):
    """Per-graph normalization with learnable mean shift ``alpha``, scale and bias."""

    def __init__(self, dim: int, floor: float = 1e-5):
        super().__init__()
        self.alpha = nn.Parameter(torch.ones(dim))
        self.gamma = nn.Parameter(torch.ones(dim))
        self.beta = nn.Parameter(torch.zeros(dim))
        self.floor = floor

    def forward(self, h, graph_index, num_graphs):
        mean = engine.segment_reduce(h, graph_index, num_graphs, engine.MEAN, check=False)
        var = engine.segment_reduce((h - mean[graph_index]) ** 2, graph_index, num_graphs,
                                    engine.MEAN, check=False)
        std = var.clamp(min=self.floor ** 2).sqrt()
        return self.gamma * (h - self.alpha * mean[graph_index]) / std[graph_index] + self.beta


class _Block(nn.Module):
    """Shared post-aggregation stack: GraphNorm -> GELU -> dropout -> residual."""

    def __init__(self, dim, dropout_p, residual):
        super().__init__()
        self.norm = GraphNorm(dim)
        self.dropout = nn.Dropout(dropout_p)
        self.residual = residual

    def finish(self, h, z, graph_index, num_graphs):
        z = self.dropout(engine.gelu(self.norm(z, graph_index, num_graphs)))
        return h + z if self.residual else z


class GINELayer(_Block):
    def __init__(self, dim, edge_dim, dropout_p=0.1, residual=True):
        super().__init__(dim, dropout_p, residual)
        self.edge_proj = nn.Linear(edge_dim, dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))
        self.eps = nn.Parameter(torch.zeros(1))

    def aggregate(self, h, edge_index, edge_emb):
        src, dst, e = _directed(edge_index, edge_emb)
        msg = torch.relu(h[src] + e)
        return engine.segment_reduce(msg, dst, h.shape[0], engine.SUM, check=False)

    def forward(self, h, edge_index, edge_attr, graph_index, num_graphs, edge_token=None):
        if h.shape[1] != self.mlp[0].in_features:
            raise DimensionMismatch(f"node dim {h.shape[1]} != {self.mlp[0].in_features}")
        e = self.edge_proj(edge_attr)
        if edge_token is not None:
            e = e + edge_token
        m = self.aggregate(h, edge_index, e)
        z = self.mlp((1.0 + self.eps) * h + m)
        return self.finish(h, z, graph_index, num_graphs)


class GATv2Layer(_Block):
    """Single-head GATv2 with edge features in the attention score."""

    def __init__(self, dim, edge_dim, dropout_p=0.1, residual=True, slope=0.2):
        super().__init__(dim, dropout_p, residual)
        self.edge_proj = nn.Linear(edge_dim, dim)
        self.score = nn.Linear(3 * dim, dim)
        self.att = nn.Parameter(torch.empty(dim))
        self.value = nn.Linear(dim, dim)
        self.slope = slope
        nn.init.normal_(self.att, std=dim ** -0.5)

    def attention(self, h, edge_index, edge_emb):
        src, dst, e = _directed(edge_index, edge_emb)
        pre = self.score(torch.cat([h[dst], h[src], e], dim=1))
        s = engine.leaky_relu(pre, self.slope) @ self.att
        alpha = engine.segment_softmax(s, dst, h.shape[0])
        return src, dst, alpha

    def forward(self, h, edge_index, edge_attr, graph_index, num_graphs, edge_token=None):
        if h.shape[1] != self.value.in_features:
            raise DimensionMismatch(f"node dim {h.shape[1]} != {self.value.in_features}")
        e = self.edge_proj(edge_attr)
        if edge_token is not None:
            e = e + edge_token
        src, dst, alpha = self.attention(h, edge_index, e)
        msg = alpha.unsqueeze(1) * self.value(h)[src]
        z = engine.segment_reduce(msg, dst, h.shape[0], engine.SUM, check=False)
        return self.finish(h, z, graph_index, num_graphs)


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        schema = config.schema
        self.config = config
        self.atom_dim, self.bond_dim = schema.atom_dim, schema.bond_dim
        if config.features == F.CHEMICAL:
            assert (self.atom_dim, self.bond_dim) == (31, 14)
        d = config.hidden
        self.input = nn.Linear(self.atom_dim, d)
        layer_cls = GINELayer if config.arch == GINE else GATv2Layer
        self.layers = nn.ModuleList(
            layer_cls(d, self.bond_dim, config.dropout_p, config.residual) for _ in range(config.layers)
        )
        self.node_mask_token = nn.Parameter(torch.zeros(d))
        self.edge_mask_token = nn.Parameter(torch.zeros(d))

    def forward(self, batch: Batch) -> torch.Tensor:
        x, e = batch.x, batch.edge_attr
        if x.shape[1] != self.atom_dim or e.shape[1] != self.bond_dim:
            raise SchemaMismatch(
                f"features ({x.shape[1]}, {e.shape[1]}) do not match encoder ({self.atom_dim}, {self.bond_dim})"
            )
        node_mask, edge_mask = batch.node_mask, batch.edge_mask
        if node_mask is not None:
            x = x.masked_fill(node_mask.unsqueeze(1), 0.0)
        h = self.input(x)
        if node_mask is not None:
            h = h + node_mask.unsqueeze(1).to(h.dtype) * self.node_mask_token
        edge_token = None
        if edge_mask is not None:
            e = e.masked_fill(edge_mask.unsqueeze(1), 0.0)
            edge_token = edge_mask.unsqueeze(1).to(h.dtype) * self.edge_mask_token
        for layer in self.layers:
            h = layer(h, batch.edge_index, e, batch.graph_index, batch.num_graphs, edge_token)
        return h


class Decoder(nn.Module):
    def __init__(self, hidden=32, width=16, dropout_p=0.45):
        super().__init__()
        self.fc1 = nn.Linear(hidden + N_GLOBALS, width)
        self.dropout = nn.Dropout(dropout_p)
        self.fc2 = nn.Linear(width, 1)
        assert self.fc1.in_features == 38 or hidden != 32

    def forward(self, pooled, globals_scaled):
        z = torch.cat([pooled, globals_scaled], dim=1)
        return self.fc2(self.dropout(engine.gelu(self.fc1(z)))).squeeze(1)


class SSLHeads(nn.Module):
    """Linear atom-type (11 classes) and bond-type (5 classes) heads over masked positions."""

    def __init__(self, hidden=32, bond_dim=F.BOND_DIM):
        super().__init__()
        self.atom = nn.Linear(hidden, N_ATOM_CLASSES)
        self.edge_input = nn.Linear(bond_dim, hidden)
        self.bond = nn.Linear(hidden, N_BOND_CLASSES)

    def forward(self, node_emb, edge_index, edge_attr, node_idx, edge_idx, edge_token=None):
        if len(node_idx) == 0 and len(edge_idx) == 0:
            raise EmptyMask("no masked nodes or edges")
        atom_logits = self.atom(node_emb[node_idx])
        ends = edge_index[:, edge_idx]
        e_in = self.edge_input(edge_attr[edge_idx])
        if edge_token is not None:
            e_in = e_in + edge_token
        edge_emb = 0.5 * (node_emb[ends[0]] + node_emb[ends[1]]) + e_in
        return atom_logits, self.bond(edge_emb)


class GlobalScaler(nn.Module):
    """log10 on molar masses, then standardization fitted on training graphs."""

    def __init__(self):
        super().__init__()
        self.register_buffer("mean", torch.zeros(N_GLOBALS))
        self.register_buffer("std", torch.ones(N_GLOBALS))
        self.register_buffer("log_mask", torch.from_numpy(LOG_GLOBALS.astype(np.float32)))

    def _log(self, g):
        mask = self.log_mask.bool()
        return torch.where(mask, torch.log10(g.clamp(min=1e-12)), g)

    @torch.no_grad()
    def fit(self, globals_: np.ndarray):
        g = self._log(torch.as_tensor(np.asarray(globals_), dtype=self.mean.dtype))
        self.mean.copy_(g.mean(0))
        std = g.std(0, unbiased=False)
        self.std.copy_(torch.where(std > 1e-8, std, torch.ones_like(std)))
        return self

    def forward(self, g):
        return (self._log(g) - self.mean) / self.std


class TgModel(nn.Module):
    """Encoder, mean-pool readout, global-feature concatenation and decoder."""

    def __init__(self, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.scaler = GlobalScaler()
        self.decoder = Decoder(config.hidden, config.decoder_hidden, config.decoder_dropout)

    def embed(self, batch: Batch) -> torch.Tensor:
        h = self.encoder(batch)
        return engine.segment_reduce(h, batch.graph_index, batch.num_graphs, engine.MEAN, check=False)

    def forward(self, batch: Batch) -> torch.Tensor:
        return self.decoder(self.embed(batch), self.scaler(batch.globals))

    def set_mode(self, mode: str):
        if mode == TRAIN:
            self.train()
        elif mode == EVAL:
            self.eval()
        elif mode == MC_DROPOUT:
            self.eval()
            for m in self.modules():
                if isinstance(m, nn.Dropout):
                    m.train()
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return self

    def manifest(self) -> dict:
        return {"arch": self.config.arch, "schema": self.config.schema.tag,
                "encoder_config": asdict(self.config)}


class PretrainModel(nn.Module):
    def __init__(self, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        if config.features != F.CHEMICAL:
            raise ValueError("masked-graph pretraining needs chemical features")
        self.config = config
        self.encoder = Encoder(config)
        self.heads = SSLHeads(config.hidden, self.encoder.bond_dim)

    def forward(self, batch: Batch):
        h = self.encoder(batch)
        node_idx = torch.nonzero(batch.node_mask).squeeze(1)
        edge_idx = torch.nonzero(batch.edge_mask).squeeze(1)
        e = batch.edge_attr.masked_fill(batch.edge_mask.unsqueeze(1), 0.0)
        token = self.encoder.edge_mask_token
        return self.heads(h, batch.edge_index, e, node_idx, edge_idx, token), node_idx, edge_idx


@torch.no_grad()
def predict(model: TgModel, graphs: Sequence, mode: str = EVAL, batch_size: int = 8) -> np.ndarray:
    """Per-graph predictions in transformed-target units."""
    model.set_mode(mode)
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(graphs), batch_size):
        out.append(model(collate(graphs[i:i + batch_size], dtype)).cpu().numpy())
    return np.concatenate(out) if out else np.zeros(0)

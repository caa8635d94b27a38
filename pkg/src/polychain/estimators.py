"""scikit-learn style wrappers around pretraining and fine-tuning."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .errors import SchemaMismatch
from .features import FeatureSchema
from .graphs import PolymerGraph
from .models import EVAL, EncoderConfig
from .training import FinetuneConfig, PretrainConfig, finetune, polymer_mean, pretrain
from .evaluation import validation_split


def check_graphs(graphs, schema: FeatureSchema | None = None) -> list[PolymerGraph]:
    """Validate a graph collection: non-empty, consistent widths, finite features."""
    graphs = list(graphs)
    if not graphs:
        raise ValueError("expected at least one graph")
    widths = {(g.x.shape[1], g.edge_attr.shape[1]) for g in graphs}
    if len(widths) != 1:
        raise SchemaMismatch(f"graphs mix feature widths {sorted(widths)}")
    if schema is not None and widths != {(schema.atom_dim, schema.bond_dim)}:
        raise SchemaMismatch(f"graph widths {widths.pop()} do not match {schema.tag}")
    for g in graphs:
        if g.n_nodes == 0:
            raise ValueError(f"{g.polymer_id}: graph has no nodes")
        if not (np.isfinite(g.x).all() and np.isfinite(g.edge_attr).all() and np.isfinite(g.globals).all()):
            raise ValueError(f"{g.polymer_id}: non-finite features")
    return graphs


def check_targets(graphs: Sequence[PolymerGraph], y) -> dict[str, float]:
    """Per-graph targets to a polymer-id map; cups of one polymer must agree."""
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.shape[0] != len(graphs):
        raise ValueError(f"{len(graphs)} graphs but {y.shape[0]} targets")
    if not np.isfinite(y).all():
        raise ValueError("targets must be finite")
    out: dict[str, float] = {}
    for g, t in zip(graphs, y):
        if out.setdefault(g.polymer_id, float(t)) != float(t):
            raise ValueError(f"{g.polymer_id}: cups carry different targets")
    return out


class MaskedGraphPretrainer(BaseEstimator):
    """Masked atom/bond type prediction on unlabelled graphs; exposes the encoder weights."""

    def __init__(self, arch="gine", layers=3, hidden=32, lr=5e-4, weight_decay=1e-4, batch_size=64, epochs=65,
                 patience=10, node_mask_frac=0.15, edge_mask_frac=0.15, val_fraction=0.05, random_state=0):
        self.arch = arch
        self.layers = layers
        self.hidden = hidden
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.node_mask_frac = node_mask_frac
        self.edge_mask_frac = edge_mask_frac
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _configs(self):
        enc = EncoderConfig(arch=self.arch, layers=self.layers, hidden=self.hidden)
        cfg = PretrainConfig(self.lr, self.weight_decay, self.batch_size, self.epochs, self.patience,
                             self.node_mask_frac, self.edge_mask_frac, self.val_fraction)
        return enc, cfg

    def fit(self, graphs, y=None):
        enc, cfg = self._configs()
        graphs = check_graphs(graphs, enc.schema)
        result = pretrain(graphs, cfg, enc, seed=self.random_state)
        self.model_ = result.model
        self.history_ = result.history
        self.encoder_state_ = result.encoder_state
        return self


class TgRegressor(RegressorMixin, BaseEstimator):
    """Graph-level Tg regressor.  ``predict`` returns one Kelvin value per graph (cup);
    :meth:`predict_polymers` averages cups per polymer."""

    def __init__(self, arch="gine", layers=3, hidden=32, features="chemical", lr=5e-5, weight_decay=3e-4,
                 batch_size=2, epochs=85, patience=30, warmup=15, huber_delta=1.0, val_fraction=0.15,
                 n_checkpoints=3, init_encoder=None, random_state=0):
        self.arch = arch
        self.layers = layers
        self.hidden = hidden
        self.features = features
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.warmup = warmup
        self.huber_delta = huber_delta
        self.val_fraction = val_fraction
        self.n_checkpoints = n_checkpoints
        self.init_encoder = init_encoder
        self.random_state = random_state

    def _configs(self):
        enc = EncoderConfig(arch=self.arch, layers=self.layers, hidden=self.hidden, features=self.features)
        cfg = replace(FinetuneConfig(), lr=self.lr, weight_decay=self.weight_decay, batch_size=self.batch_size,
                      epochs=self.epochs, patience=self.patience, warmup=self.warmup,
                      huber_delta=self.huber_delta, val_fraction=self.val_fraction,
                      n_checkpoints=self.n_checkpoints)
        return enc, cfg

    def fit(self, graphs, y, val_graphs=None, val_y=None):
        enc, cfg = self._configs()
        graphs = check_graphs(graphs, enc.schema)
        targets = check_targets(graphs, y)
        if val_graphs is None:
            fit_ids, val_ids = validation_split(list(targets), targets, cfg.val_fraction, self.random_state)
            chosen = set(val_ids)
            val_graphs = [g for g in graphs if g.polymer_id in chosen]
            graphs = [g for g in graphs if g.polymer_id not in chosen]
        else:
            val_graphs = check_graphs(val_graphs, enc.schema)
            targets.update(check_targets(val_graphs, val_y))
        init = self.init_encoder
        if isinstance(init, MaskedGraphPretrainer):
            init = init.encoder_state_
        result = finetune(graphs, val_graphs, targets, init, cfg, enc, seed=self.random_state)
        self.predictor_ = result.best
        self.checkpoints_ = result.checkpoints
        self.history_ = result.history
        self.n_features_in_ = enc.schema.atom_dim
        return self

    def predict(self, graphs, mode=EVAL):
        check_is_fitted(self, "predictor_")
        graphs = check_graphs(graphs, EncoderConfig(features=self.features).schema)
        return self.predictor_.predict_cups(graphs, mode)

    def predict_polymers(self, graphs) -> tuple[list[str], np.ndarray]:
        graphs = list(graphs)
        return polymer_mean([g.polymer_id for g in graphs], self.predict(graphs))

"""Masked-graph pretraining and Tg fine-tuning loops."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from scipy.special import ndtr, ndtri
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import engine
from . import features as F
from .errors import CorpusEmpty, EmptyMask, MaskFractionZero, NoValidation, TooFewSamples
from .models import (EVAL, TRAIN, Batch, EncoderConfig, PretrainModel, TgModel, collate, predict)

log = logging.getLogger(__name__)

LOW_BOUND, HIGH_BOUND = 250.0, 400.0
STRATUM_NAMES = ("low", "mid", "high")


def stratum(tg) -> np.ndarray:
    """0 = Low (Tg < 250 K), 1 = Mid (250 <= Tg < 400 K), 2 = High (Tg >= 400 K)."""
    tg = np.asarray(tg, dtype=np.float64)
    return np.where(tg < LOW_BOUND, 0, np.where(tg < HIGH_BOUND, 1, 2))


class QuantileTransform(TransformerMixin, BaseEstimator):
    """Empirical-CDF map of targets onto standard-normal scores.

    Knots are the training quantiles placed at mid-rank probabilities
    ``(i + 0.5) / n``, so the extreme knots map to finite scores and values
    outside the fitted range clamp to them.
    """

    def __init__(self, n_quantiles=1000):
        self.n_quantiles = n_quantiles

    def fit(self, y, X=None):
        y = np.asarray(y, dtype=np.float64).ravel()
        if y.size < 10:
            raise TooFewSamples(f"need at least 10 targets, got {y.size}")
        if not np.all(np.isfinite(y)):
            raise ValueError("targets must be finite")
        nq = min(y.size, self.n_quantiles)
        if nq == y.size:
            self.references_ = np.sort(y)
        else:
            self.references_ = np.quantile(y, np.linspace(0.0, 1.0, nq))
        self.levels_ = (np.arange(nq) + 0.5) / nq
        self.max_score_ = float(ndtri(self.levels_[-1]))
        return self

    def transform(self, y):
        check_is_fitted(self, "references_")
        y = np.asarray(y, dtype=np.float64)
        shape = y.shape
        y = y.ravel()
        refs, lv = self.references_, self.levels_
        # average of left- and right-continuous interpolation handles tied knots
        up = np.interp(y, refs, lv)
        down = -np.interp(-y, -refs[::-1], -lv[::-1])
        level = np.clip(0.5 * (up + down), lv[0], lv[-1])
        return ndtri(level).reshape(shape)

    def inverse_transform(self, z):
        check_is_fitted(self, "references_")
        z = np.asarray(z, dtype=np.float64)
        level = np.clip(ndtr(z), self.levels_[0], self.levels_[-1])
        return np.interp(level, self.levels_, self.references_)

    def get_state(self) -> dict:
        return {"n_quantiles": self.n_quantiles, "references": self.references_.tolist()}

    @classmethod
    def from_state(cls, state: dict) -> "QuantileTransform":
        qt = cls(state["n_quantiles"])
        qt.references_ = np.asarray(state["references"], dtype=np.float64)
        qt.levels_ = (np.arange(len(qt.references_)) + 0.5) / len(qt.references_)
        qt.max_score_ = float(ndtri(qt.levels_[-1]))
        return qt


@dataclass
class PretrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 65
    patience: int = 10
    node_mask_frac: float = 0.15
    edge_mask_frac: float = 0.15
    val_fraction: float = 0.05


@dataclass
class FinetuneConfig:
    lr: float = 5e-5
    weight_decay: float = 3e-4
    batch_size: int = 2
    epochs: int = 85
    patience: int = 30
    warmup: int = 15
    huber_delta: float = 1.0
    plateau_factor: float = 0.3
    plateau_patience: int = 30
    min_lr: float = 1e-6
    val_fraction: float = 0.15
    n_checkpoints: int = 3
    n_quantiles: int = 1000
    weighted_sampling: bool = True


@dataclass
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    @classmethod
    def from_dict(cls, data: Mapping | None) -> "TrainConfig":
        data = dict(data or {})
        unknown = set(data) - {"encoder", "pretrain", "finetune"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")

        def build(kind, values):
            values = dict(values or {})
            names = {f.name for f in fields(kind)}
            bad = set(values) - names
            if bad:
                raise ValueError(f"unknown {kind.__name__} keys: {sorted(bad)}")
            return kind(**values)

        return cls(build(EncoderConfig, data.get("encoder")), build(PretrainConfig, data.get("pretrain")),
                   build(FinetuneConfig, data.get("finetune")))

    def to_dict(self) -> dict:
        return {"encoder": asdict(self.encoder), "pretrain": asdict(self.pretrain),
                "finetune": asdict(self.finetune)}


# ---------------------------------------------------------------------------
# pretraining


def _mask_count(n: int, frac: float) -> int:
    if frac <= 0 or n == 0:
        return 0
    return max(1, int(round(frac * n)))


def masked_batch(graphs: Sequence, node_frac: float, edge_frac: float, rng: np.random.Generator,
                 dtype=torch.float32):
    """Collate graphs and draw independent node/edge masks per graph."""
    batch = collate(graphs, dtype)
    node_mask = np.zeros(batch.num_nodes, dtype=bool)
    edge_mask = np.zeros(batch.edge_attr.shape[0], dtype=bool)
    n_off = e_off = 0
    for g in graphs:
        k = _mask_count(g.n_nodes, node_frac)
        node_mask[n_off + rng.choice(g.n_nodes, size=k, replace=False)] = True
        k = _mask_count(g.n_edges, edge_frac)
        if k:
            edge_mask[e_off + rng.choice(g.n_edges, size=k, replace=False)] = True
        n_off += g.n_nodes
        e_off += g.n_edges
    batch.node_mask = torch.from_numpy(node_mask)
    batch.edge_mask = torch.from_numpy(edge_mask)
    atom_y = torch.from_numpy(F.atom_class_targets(batch.x.numpy())).long()
    bond_y = torch.from_numpy(F.bond_class_targets(batch.edge_attr.numpy())).long()
    return batch, atom_y, bond_y


def ssl_loss(model: PretrainModel, batch: Batch, atom_y, bond_y):
    """Sum of masked-atom and masked-bond cross-entropies, plus accuracy counts."""
    (atom_logits, bond_logits), node_idx, edge_idx = model(batch)
    loss = atom_logits.new_zeros(())
    stats = {"atom_correct": 0, "atom_total": 0, "bond_correct": 0, "bond_total": 0}
    if len(node_idx):
        t = atom_y[node_idx]
        loss = loss + engine.cross_entropy(atom_logits, t)
        stats["atom_correct"] = int((atom_logits.argmax(1) == t).sum())
        stats["atom_total"] = len(node_idx)
    if len(edge_idx):
        t = bond_y[edge_idx]
        loss = loss + engine.cross_entropy(bond_logits, t)
        stats["bond_correct"] = int((bond_logits.argmax(1) == t).sum())
        stats["bond_total"] = len(edge_idx)
    return loss, stats


@dataclass
class PretrainResult:
    model: PretrainModel
    history: list[dict]
    best_epoch: int

    @property
    def encoder_state(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.model.encoder.state_dict().items()}


def _evaluate_ssl(model, batches):
    model.eval()
    total, n = 0.0, 0
    agg = {"atom_correct": 0, "atom_total": 0, "bond_correct": 0, "bond_total": 0}
    with torch.no_grad():
        for batch, ay, by in batches:
            loss, stats = ssl_loss(model, batch, ay, by)
            total += float(loss)
            n += 1
            for k in agg:
                agg[k] += stats[k]
    return {
        "val_loss": total / max(n, 1),
        "val_atom_acc": agg["atom_correct"] / max(agg["atom_total"], 1),
        "val_bond_acc": agg["bond_correct"] / max(agg["bond_total"], 1),
    }


def pretrain(corpus: Sequence, config: PretrainConfig = PretrainConfig(),
             encoder_config: EncoderConfig = EncoderConfig(), seed: int = 0,
             on_epoch: Callable[[dict], None] | None = None) -> PretrainResult:
    """Masked atom/bond type prediction with cosine-annealed AdamW and early stopping."""
    corpus = list(corpus)
    if not corpus:
        raise CorpusEmpty("pretraining corpus is empty")
    if config.node_mask_frac <= 0 and config.edge_mask_frac <= 0:
        raise MaskFractionZero("both mask fractions are zero; nothing to predict")
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    model = PretrainModel(encoder_config)

    order = rng.permutation(len(corpus))
    n_val = max(1, int(round(config.val_fraction * len(corpus)))) if len(corpus) > 1 else 0
    val_graphs = [corpus[i] for i in order[:n_val]]
    train_graphs = [corpus[i] for i in order[n_val:]] or val_graphs
    val_rng = np.random.default_rng([seed, 1])
    val_batches = [
        masked_batch(val_graphs[i:i + config.batch_size], config.node_mask_frac, config.edge_mask_frac, val_rng)
        for i in range(0, len(val_graphs), config.batch_size)
    ]

    opt = engine.adamw(model.parameters(), config.lr, config.weight_decay)
    steps_per_epoch = math.ceil(len(train_graphs) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    history = [{"epoch": 0, "train_loss": float("nan"), **_evaluate_ssl(model, val_batches)}]
    if on_epoch:
        on_epoch(history[-1])
    best = (history[0]["val_loss"], 0, copy.deepcopy(model.state_dict()))
    step = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        perm = rng.permutation(len(train_graphs))
        losses = []
        for start in range(0, len(perm), config.batch_size):
            for g in opt.param_groups:
                g["lr"] = config.lr * engine.cosine_anneal(step, total_steps)
            step += 1
            chunk = [train_graphs[i] for i in perm[start:start + config.batch_size]]
            batch, ay, by = masked_batch(chunk, config.node_mask_frac, config.edge_mask_frac, rng)
            try:
                loss, _ = ssl_loss(model, batch, ay, by)
            except EmptyMask:
                continue
            opt.zero_grad()
            engine.backward(loss)
            opt.step()
            losses.append(loss.item())
        if not losses:
            raise MaskFractionZero("every batch had an empty mask")
        engine.release_memory()
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)), "lr": opt.param_groups[0]["lr"],
                  **_evaluate_ssl(model, val_batches)}
        history.append(record)
        if on_epoch:
            on_epoch(record)
        if record["val_loss"] < best[0]:
            best = (record["val_loss"], epoch, copy.deepcopy(model.state_dict()))
        elif epoch - best[1] >= config.patience:
            break
    model.load_state_dict(best[2])
    model.eval()
    return PretrainResult(model, history, best[1])


# ---------------------------------------------------------------------------
# fine-tuning


class StratumSampler:
    """Draws graph indices with probability inversely proportional to stratum size."""

    def __init__(self, strata: np.ndarray, rng: np.random.Generator, weighted: bool = True):
        strata = np.asarray(strata)
        counts = np.bincount(strata, minlength=3).astype(np.float64)
        w = 1.0 / counts[strata] if weighted else np.ones(len(strata))
        self.p = w / w.sum()
        self.rng = rng
        self.n = len(strata)

    def epoch(self) -> np.ndarray:
        return self.rng.choice(self.n, size=self.n, replace=True, p=self.p)


@dataclass
class Predictor:
    """A trained model plus the target transform needed to report Kelvin."""

    model: TgModel
    transform: QuantileTransform
    epoch: int = -1
    val_rmse: float = float("nan")

    def predict_cups(self, graphs: Sequence, mode: str = EVAL, batch_size: int = 8) -> np.ndarray:
        return self.transform.inverse_transform(predict(self.model, graphs, mode, batch_size))

    def manifest(self) -> dict:
        return {**self.model.manifest(), "quantile_transform": self.transform.get_state(),
                "epoch": self.epoch, "val_rmse": self.val_rmse}

    def save(self, path, extra: dict | None = None):
        manifest = self.manifest()
        if extra:
            manifest.update(extra)
        manifest["config_hash"] = engine.config_hash(manifest["encoder_config"])
        engine.save_state(path, self.model.state_dict(), manifest)

    @classmethod
    def load(cls, path) -> "Predictor":
        state, manifest = engine.load_state(path)
        model = TgModel(EncoderConfig(**manifest["encoder_config"]))
        model.load_state_dict(state)
        model.eval()
        return cls(model, QuantileTransform.from_state(manifest["quantile_transform"]),
                   manifest.get("epoch", -1), manifest.get("val_rmse", float("nan")))


def polymer_mean(ids: Sequence[str], values: np.ndarray) -> tuple[list[str], np.ndarray]:
    """Average cup-level values per polymer; polymers ordered by first appearance."""
    order: dict[str, list[int]] = {}
    for i, pid in enumerate(ids):
        order.setdefault(pid, []).append(i)
    keys = list(order)
    return keys, np.array([np.mean(values[order[k]]) for k in keys])


def rmse(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def polymer_rmse(predictor: Predictor, graphs: Sequence, targets: Mapping[str, float]) -> float:
    ids, pred = polymer_mean([g.polymer_id for g in graphs], predictor.predict_cups(graphs))
    return rmse(pred, [targets[i] for i in ids])


@dataclass
class FinetuneResult:
    best: Predictor
    checkpoints: list[Predictor]
    history: list[dict]
    stopped_epoch: int


def finetune(train_graphs: Sequence, val_graphs: Sequence, targets: Mapping[str, float],
             init_encoder: Mapping[str, torch.Tensor] | None = None,
             config: FinetuneConfig = FinetuneConfig(), encoder_config: EncoderConfig = EncoderConfig(),
             seed: int = 0, track_train: bool = False,
             on_epoch: Callable[[dict], None] | None = None) -> FinetuneResult:
    """Huber regression on quantile-transformed Tg with stratum-balanced sampling.

    ``targets`` maps polymer id to Tg (K) and may contain only training and
    validation polymers.  Early stopping and checkpoint ranking use validation
    RMSE in Kelvin after cup averaging.
    """
    if not val_graphs:
        raise NoValidation("a validation split is required for early stopping")
    train_graphs = list(train_graphs)
    val_graphs = list(val_graphs)
    train_ids = list(dict.fromkeys(g.polymer_id for g in train_graphs))
    transform = QuantileTransform(config.n_quantiles).fit([targets[i] for i in train_ids])
    y = torch.tensor(transform.transform([targets[g.polymer_id] for g in train_graphs]), dtype=torch.float32)

    data_rng = np.random.default_rng([seed, 7])
    sampler = StratumSampler(stratum([targets[g.polymer_id] for g in train_graphs]), data_rng,
                             config.weighted_sampling)
    torch.manual_seed(seed)
    model = TgModel(encoder_config)
    if init_encoder is not None:
        model.encoder.load_state_dict(init_encoder)
    model.scaler.fit(np.stack([g.globals for g in train_graphs]))

    opt = engine.adamw(model.parameters(), config.lr, config.weight_decay)
    plateau = engine.PlateauScheduler(opt, config.plateau_factor, config.plateau_patience, config.min_lr)
    predictor = Predictor(model, transform)
    ranked: list[tuple[float, int, dict]] = []
    history = []
    best_rmse, best_epoch = math.inf, 0
    epoch = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        model.set_mode(TRAIN)
        idx = sampler.epoch()
        losses = []
        for start in range(0, len(idx), config.batch_size):
            chunk = idx[start:start + config.batch_size]
            batch = collate([train_graphs[i] for i in chunk])
            loss = engine.huber_loss(model(batch), y[chunk], config.huber_delta)
            opt.zero_grad()
            engine.backward(loss)
            opt.step()
            losses.append(loss.item())
        val_rmse = polymer_rmse(predictor, val_graphs, targets)
        engine.release_memory()
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_rmse_K": val_rmse,
                  "lr": plateau.lr, "seconds": time.perf_counter() - t0}
        if track_train:
            record["train_rmse_K"] = polymer_rmse(predictor, train_graphs, targets)
        history.append(record)
        if on_epoch:
            on_epoch(record)
        plateau.step(val_rmse)

        ranked.append((val_rmse, epoch, copy.deepcopy(model.state_dict())))
        ranked.sort(key=lambda r: (r[0], r[1]))
        del ranked[config.n_checkpoints:]
        if val_rmse < best_rmse:
            best_rmse, best_epoch = val_rmse, epoch
        elif epoch >= config.warmup and epoch - best_epoch >= config.patience:
            break

    checkpoints = []
    for val_rmse, ep, state in ranked:
        m = TgModel(encoder_config)
        m.load_state_dict(state)
        m.eval()
        checkpoints.append(Predictor(m, transform, ep, val_rmse))
    return FinetuneResult(checkpoints[0], checkpoints, history, epoch)

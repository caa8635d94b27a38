"""Grouped stratified cross-validation, polymer-level metrics and uncertainty tools."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
from scipy.special import betainc

from .errors import MissingCup, StratumEmpty, ZeroVariance
from .graphs import LARGE, BuildConfig, PolymerRecord, build_cup
from .models import EVAL, MC_DROPOUT
from .psmiles import from_psmiles, molar_mass
from .training import (STRATUM_NAMES, FinetuneResult, Predictor, TrainConfig, finetune, polymer_mean,
                       rmse, stratum)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    assignments: dict[str, int]
    n_folds: int = 5
    bounds: tuple[float, float] = (250.0, 400.0)
    seed: int = 0

    def test_ids(self, fold: int) -> list[str]:
        return sorted(pid for pid, f in self.assignments.items() if f == fold)

    def train_ids(self, fold: int) -> list[str]:
        return sorted(pid for pid, f in self.assignments.items() if f != fold)

    def sizes(self) -> list[int]:
        return list(np.bincount(list(self.assignments.values()), minlength=self.n_folds))


def _ids_and_tg(records) -> tuple[list[str], np.ndarray]:
    ids, tgs = [], []
    for r in records:
        pid, tg = (r.id, r.tg) if isinstance(r, PolymerRecord) else r
        if tg is None:
            raise ValueError(f"{pid}: record has no Tg")
        ids.append(pid)
        tgs.append(float(tg))
    if len(set(ids)) != len(ids):
        raise ValueError("polymer ids must be unique")
    return ids, np.asarray(tgs)


def _stratified_order(ids, tgs, rng) -> list[str]:
    """Ids grouped by stratum (low, mid, high), shuffled within each stratum."""
    order = np.argsort(ids, kind="stable")
    ids = [ids[i] for i in order]
    strata = stratum(tgs[order])
    out = []
    for s, name in enumerate(STRATUM_NAMES):
        members = [ids[i] for i in np.flatnonzero(strata == s)]
        if not members:
            warnings.warn(f"Tg stratum {name!r} is empty", StratumEmpty, stacklevel=3)
        out.extend(members[i] for i in rng.permutation(len(members)))
    return out


def make_folds(records, seed: int = 0, n_folds: int = 5) -> FoldPlan:
    """Assign polymers to folds, balancing Tg strata.

    Records are sorted by id first, shuffled within stratum, then dealt
    round-robin with the deal position carried across strata so fold sizes
    differ by at most one.  ``records`` holds :class:`PolymerRecord` objects
    or ``(id, tg)`` pairs.
    """
    ids, tgs = _ids_and_tg(records)
    ordered = _stratified_order(ids, tgs, np.random.default_rng(seed))
    return FoldPlan({pid: i % n_folds for i, pid in enumerate(ordered)}, n_folds, seed=seed)


def validation_split(train_ids: Sequence[str], targets: Mapping[str, float], fraction: float = 0.15,
                     seed: int = 0) -> tuple[list[str], list[str]]:
    """Split polymer ids into (fit, validation), stratified by Tg."""
    ids = sorted(train_ids)
    tgs = np.array([targets[i] for i in ids])
    rng = np.random.default_rng(seed)
    strata = stratum(tgs)
    val = []
    for s in range(3):
        members = [ids[i] for i in np.flatnonzero(strata == s)]
        k = int(round(fraction * len(members)))
        val.extend(members[i] for i in rng.permutation(len(members))[:k])
    if not val and len(ids) > 1:
        val.append(ids[int(rng.integers(len(ids)))])
    chosen = set(val)
    return [i for i in ids if i not in chosen], sorted(val)


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunResult:
    ids: list[str]
    pred: np.ndarray
    truth: np.ndarray
    fold: int = -1
    seed: int = -1
    sigma: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def rmse(self) -> float:
        return rmse(self.pred, self.truth)

    def rows(self) -> list[dict]:
        out = []
        for i, pid in enumerate(self.ids):
            row = {"fold": self.fold, "seed": self.seed, "id": pid,
                   "tg_pred_K": float(self.pred[i]), "tg_true_K": float(self.truth[i])}
            if self.sigma is not None:
                row["sigma_mc_K"] = float(self.sigma[i])
            out.append(row)
        return out


def _check_cups(graphs, truth: Mapping[str, float], expected_cups: int | None, ids: Sequence[str] | None):
    counts: dict[str, int] = {}
    for g in graphs:
        counts[g.polymer_id] = counts.get(g.polymer_id, 0) + 1
    for pid in (ids if ids is not None else counts):
        n = counts.get(pid, 0)
        if n == 0 or (expected_cups is not None and n < expected_cups):
            raise MissingCup(f"{pid}: {n} cups present, expected {expected_cups or 'at least 1'}")
        if pid not in truth:
            raise KeyError(f"{pid}: no ground-truth Tg")


def evaluate_run(predictor: Predictor, graphs: Sequence, truth: Mapping[str, float],
                 ids: Sequence[str] | None = None, expected_cups: int | None = None,
                 fold: int = -1, seed: int = -1) -> RunResult:
    """Predict every cup, convert to Kelvin, average per polymer and score."""
    _check_cups(graphs, truth, expected_cups, ids)
    pids, pred = polymer_mean([g.polymer_id for g in graphs], predictor.predict_cups(graphs))
    return RunResult(pids, pred, np.array([truth[p] for p in pids]), fold, seed)


def ensemble_predict(predictors: Sequence[Predictor], graphs: Sequence) -> tuple[list[str], np.ndarray]:
    """Mean of the members' polymer-level Kelvin predictions."""
    ids = None
    preds = []
    for p in predictors:
        pids, pred = polymer_mean([g.polymer_id for g in graphs], p.predict_cups(graphs))
        ids = ids or pids
        preds.append(pred)
    return ids, np.mean(preds, axis=0)


def mc_dropout(predictor: Predictor, graphs: Sequence, n_passes: int = 30,
               seed: int = 0) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Per-polymer mean and std of Kelvin predictions over stochastic passes."""
    pids = list(dict.fromkeys(g.polymer_id for g in graphs))
    passes = np.empty((n_passes, len(pids)))
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        for k in range(n_passes):
            _, passes[k] = polymer_mean([g.polymer_id for g in graphs],
                                        predictor.predict_cups(graphs, MC_DROPOUT))
    predictor.model.set_mode(EVAL)
    # shift by the first pass so identical passes give exactly zero spread
    shifted = passes - passes[0]
    return pids, passes[0] + shifted.mean(0), shifted.std(0)


# ---------------------------------------------------------------------------
# statistics


def paired_t_test(a, b) -> tuple[float, int, float]:
    """Two-sided paired t-test on matched run errors; returns (t, df, p)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("need two equal-length 1-D samples with at least 2 entries")
    d = a - b
    n = d.size
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise ZeroVariance("all paired differences are equal")
    t = d.mean() / (sd / np.sqrt(n))
    df = n - 1
    p = float(betainc(0.5 * df, 0.5, df / (df + t * t)))
    return float(t), df, p


# ---------------------------------------------------------------------------
# cross-validation harness


def row_label(construction: str, features: str) -> str:
    if features == "topology-only":
        return "Topology-only (no chem. feats.)"
    if construction == LARGE:
        return "Large graph + globals"
    return "Repeat-unit + global scalars"


@dataclass
class CVResult:
    runs: list[RunResult]
    label: str
    arch: str
    ssl: bool
    construction: str
    features: str

    @property
    def rmses(self) -> np.ndarray:
        return np.array([r.rmse for r in self.runs])

    def summary(self) -> dict:
        r = self.rmses
        return {"construction": self.label, "encoder": {"gine": "GINE", "gatv2": "GATv2"}[self.arch],
                "ssl": "Yes" if self.ssl else "No", "rmse_mean_K": float(r.mean()),
                "rmse_std_K": float(r.std(ddof=1)) if r.size > 1 else 0.0, "n_runs": int(r.size)}

    def run_rows(self) -> list[dict]:
        return [{"fold": r.fold, "seed": r.seed, "rmse_K": r.rmse, **r.extra} for r in self.runs]

    def polymer_rows(self) -> list[dict]:
        return [row for r in self.runs for row in r.rows()]


def run_fold(graphs_by_id: Mapping[str, list], targets: Mapping[str, float], plan: FoldPlan, fold: int,
             seed: int, config: TrainConfig, init_encoder=None, expected_cups: int | None = None,
             track_train: bool = False) -> tuple[RunResult, FinetuneResult]:
    """Fine-tune on one fold's training polymers and score its test polymers."""
    fit_ids, val_ids = validation_split(plan.train_ids(fold), targets, config.finetune.val_fraction,
                                        seed=seed * 1009 + fold)
    test_ids = plan.test_ids(fold)
    assert not (set(fit_ids) | set(val_ids)) & set(test_ids), "test polymers leaked into training"
    flat = lambda ids: [g for pid in ids for g in graphs_by_id[pid]]
    train_targets = {pid: targets[pid] for pid in fit_ids + val_ids}
    t0 = time.perf_counter()
    result = finetune(flat(fit_ids), flat(val_ids), train_targets, init_encoder, config.finetune,
                      config.encoder, seed=seed, track_train=track_train)
    test_graphs = flat(test_ids)
    run = evaluate_run(result.best, test_graphs, targets, test_ids, expected_cups, fold, seed)
    _, ens = ensemble_predict(result.checkpoints, test_graphs)
    run.extra = {"ensemble_rmse_K": rmse(ens, run.truth), "best_epoch": result.best.epoch,
                 "stopped_epoch": result.stopped_epoch, "seconds": time.perf_counter() - t0}
    return run, result


def cross_validate(graphs: Sequence, targets: Mapping[str, float], plan: FoldPlan, seeds: Sequence[int],
                   config: TrainConfig, init_encoder=None, construction: str = LARGE,
                   expected_cups: int | None = None, n_jobs: int = 1) -> CVResult:
    """Every (seed, fold) run with the same plan; ``n_jobs > 1`` runs them in worker processes."""
    by_id: dict[str, list] = {}
    for g in graphs:
        by_id.setdefault(g.polymer_id, []).append(g)
    missing = set(plan.assignments) - set(by_id)
    if missing:
        raise MissingCup(f"no graphs for polymers {sorted(missing)[:5]}")
    jobs = [(seed, fold) for seed in seeds for fold in range(plan.n_folds)]

    def one(seed, fold):
        run, _ = run_fold(by_id, targets, plan, fold, seed, config, init_encoder, expected_cups)
        log.info("seed %d fold %d: test RMSE %.2f K", seed, fold, run.rmse)
        return run

    if n_jobs == 1:
        runs = [one(s, f) for s, f in jobs]
    else:
        from joblib import Parallel, delayed
        runs = Parallel(n_jobs=n_jobs)(delayed(one)(s, f) for s, f in jobs)
    return CVResult(runs, row_label(construction, config.encoder.features), config.encoder.arch,
                    init_encoder is not None, construction, config.encoder.features)


# ---------------------------------------------------------------------------
# sensitivity sweep

SWEEP_ID = "sweep"


@dataclass
class SweepResult:
    mn: np.ndarray
    dispersity: np.ndarray
    tg: np.ndarray            # (len(mn), len(dispersity))
    dtg_dd: np.ndarray

    def rows(self) -> list[dict]:
        return [{"mn_g_mol": float(self.mn[i]), "dispersity": float(self.dispersity[j]),
                 "tg_pred_K": float(self.tg[i, j]), "dtg_dd_K": float(self.dtg_dd[i, j])}
                for i in range(len(self.mn)) for j in range(len(self.dispersity))]


def sensitivity_sweep(predictor: Predictor, psmiles: str, m0: float | None = None,
                      mn_range=(2000.0, 20000.0), d_range=(1.5, 4.0), grid=(10, 10),
                      config: BuildConfig | None = None, n_jobs: int = 1,
                      psmiles_2: str | None = None, phi=(1.0, 0.0)) -> SweepResult:
    """Predicted Tg over an (Mn, dispersity) grid and its finite-difference slope along dispersity.

    Every cell reuses the same polymer id and construction seed so neighbouring
    cells share random numbers; the slope uses central differences inside the
    grid and one-sided differences at its edges.
    """
    config = config or BuildConfig()
    if m0 is None:
        m0 = molar_mass(from_psmiles(psmiles))
    mn = np.linspace(*mn_range, grid[0])
    dd = np.linspace(*d_range, grid[1])

    def cell(i, j):
        record = PolymerRecord(SWEEP_ID, psmiles, float(mn[i]), float(mn[i] * dd[j]), m0=m0,
                               psmiles_2=psmiles_2, phi=tuple(phi))
        cups = [build_cup(record, c, config) for c in range(config.n_cups)]
        return float(predictor.predict_cups(cups).mean())

    cells = [(i, j) for i in range(grid[0]) for j in range(grid[1])]
    if n_jobs == 1:
        values = [cell(i, j) for i, j in cells]
    else:
        from joblib import Parallel, delayed
        values = Parallel(n_jobs=n_jobs)(delayed(cell)(i, j) for i, j in cells)
    tg = np.array(values).reshape(grid)
    step = (d_range[1] - d_range[0]) / (grid[1] - 1)
    return SweepResult(mn, dd, tg, np.gradient(tg, step, axis=1))

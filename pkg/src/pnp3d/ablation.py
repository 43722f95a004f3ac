"""Pooling/regularisation and bilinear-combine ablation sweeps."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .classifier import ClassifierConfig, TrainingDiverged, split_neighbors, train
from .core import COMBINE_RULES
from .data import Split

REFERENCE = ("avg", "subtract", "geometric_mean")


@dataclass(frozen=True)
class Variant:
    table: str
    pooling: str
    regularization: str
    combine: str

    @property
    def reference(self) -> bool:
        return (self.pooling, self.regularization, self.combine) == REFERENCE


def ablation_grid() -> list[Variant]:
    """Pooling x regularisation rows (geometric mean), then the other combine rules
    (avg + subtract).  The shared reference configuration appears once: 11 rows."""
    rows = [
        Variant("pooling", pool, reg, "geometric_mean")
        for pool in ("max", "avg")
        for reg in ("product", "sum", "subtract")
    ]
    rows += [Variant("combine", "avg", "subtract", rule) for rule in COMBINE_RULES if rule != "geometric_mean"]
    return rows


@dataclass
class AblationRow:
    variant: Variant
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else math.nan

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies)) if self.accuracies else math.nan


class NeighborCache:
    """Neighbour tables keyed on the search settings; the static graph depends on nothing else."""

    def __init__(self, train_split: Split, test_split: Split):
        self.splits = (train_split, test_split)
        self._tables: dict = {}

    def get(self, cfg: ClassifierConfig):
        if not cfg.use_pnp:
            return None
        p = cfg.pnp
        key = (p.effective_k, p.neighbor_mode, p.radius)
        if key not in self._tables:
            self._tables[key] = tuple(split_neighbors(s, cfg) for s in self.splits)
        return self._tables[key]


def seed_accuracies(cfg: ClassifierConfig, seeds, train_split: Split, test_split: Split,
                    cache: NeighborCache | None = None) -> list[float]:
    """Final test accuracy for each seed; a diverged run contributes NaN."""
    cache = cache or NeighborCache(train_split, test_split)
    accs = []
    for seed in seeds:
        run = ClassifierConfig(**{**cfg.__dict__, "seed": seed})
        try:
            report, _ = train(run, train_split, test_split, neighbors=cache.get(run), eval_every_epoch=False)
            accs.append(report.final_test_acc)
        except TrainingDiverged:
            accs.append(math.nan)
    return accs


def run_ablation(base: ClassifierConfig, seeds, train_split: Split, test_split: Split) -> list[AblationRow]:
    cache = NeighborCache(train_split, test_split)
    rows = []
    for v in ablation_grid():
        pnp = base.pnp.with_(pooling=v.pooling, regularization=v.regularization, combine=v.combine)
        cfg = ClassifierConfig(**{**base.__dict__, "use_pnp": True, "pnp": pnp})
        rows.append(AblationRow(v, seed_accuracies(cfg, seeds, train_split, test_split, cache)))
    return rows


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def rows_to_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["table", "pooling", "regularization", "combine", "reference", "mean_acc", "std_acc", "seeds"])
    for r in rows:
        v = r.variant
        w.writerow([v.table, v.pooling, v.regularization, v.combine, int(v.reference),
                    _fmt(r.mean), _fmt(r.std), len(r.accuracies)])
    return buf.getvalue()

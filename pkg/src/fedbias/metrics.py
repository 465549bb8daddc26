"""Group fairness and accuracy over hard predictions.

Gaps follow the max-over-group-pairs definitions: demographic parity compares
P(yhat=1 | a), equalized odds compares P(yhat=1 | a, y) for each true label,
and the accuracy gap compares per-group accuracy. A gap that cannot be
computed (fewer than two groups with enough support) is ``None``, never 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from . import nn
from .errors import InvalidArgument

MIN_CELL = 5
METRICS = ("dp", "eo", "acc_gap")


@dataclass(frozen=True)
class GroupStats:
    """Indexed ``[group, label]``."""

    count: np.ndarray
    positive: np.ndarray
    correct: np.ndarray

    @property
    def n_groups(self) -> int:
        return self.count.shape[0]

    @property
    def total(self) -> int:
        return int(self.count.sum())


@dataclass(frozen=True)
class FairnessReport:
    accuracy: float
    dp_gap: float | None
    eo_gap: float | None
    acc_gap: float | None
    group_stats: GroupStats
    skipped_groups: tuple[int, ...] = ()
    skipped_cells: tuple[tuple[int, int], ...] = ()

    def gap(self, metric: str) -> float | None:
        if metric == "dp":
            return self.dp_gap
        if metric == "eo":
            return self.eo_gap
        if metric == "acc_gap":
            return self.acc_gap
        if metric == "accuracy":
            return self.accuracy
        raise InvalidArgument(f"unknown metric {metric!r}")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "accuracy": self.accuracy,
            "dp_gap": self.dp_gap,
            "eo_gap": self.eo_gap,
            "acc_gap": self.acc_gap,
            "skipped_groups": list(self.skipped_groups),
            "skipped_cells": [list(c) for c in self.skipped_cells],
        }
        gs = self.group_stats
        for g in range(gs.n_groups):
            for y in (0, 1):
                out[f"count_a{g}_y{y}"] = int(gs.count[g, y])
                out[f"positive_a{g}_y{y}"] = int(gs.positive[g, y])
                out[f"correct_a{g}_y{y}"] = int(gs.correct[g, y])
        return out


def group_stats(y_pred, y_true, a, n_groups: int | None = None) -> GroupStats:
    y_pred = np.asarray(y_pred).astype(np.int64).reshape(-1)
    y_true = np.asarray(y_true).astype(np.int64).reshape(-1)
    a = np.asarray(a).astype(np.int64).reshape(-1)
    if not (y_pred.shape == y_true.shape == a.shape):
        raise InvalidArgument("predictions, labels and groups differ in length")
    if n_groups is None:
        n_groups = int(a.max()) + 1 if a.size else 0
    count = np.zeros((n_groups, 2), dtype=np.int64)
    positive = np.zeros((n_groups, 2), dtype=np.int64)
    correct = np.zeros((n_groups, 2), dtype=np.int64)
    np.add.at(count, (a, y_true), 1)
    np.add.at(positive, (a, y_true), y_pred)
    np.add.at(correct, (a, y_true), (y_pred == y_true).astype(np.int64))
    return GroupStats(count, positive, correct)


def _spread(values: list[float]) -> float | None:
    if len(values) < 2:
        return None
    return float(max(values) - min(values))


def report_from_stats(stats: GroupStats, min_cell: int = MIN_CELL) -> FairnessReport:
    if stats.total == 0:
        raise InvalidArgument("empty dataset")
    per_group = stats.count.sum(axis=1)
    retained = [g for g in range(stats.n_groups) if per_group[g] >= min_cell]
    skipped_groups = tuple(g for g in range(stats.n_groups) if per_group[g] < min_cell)

    dp_rates = [stats.positive[g].sum() / per_group[g] for g in retained]
    acc_rates = [stats.correct[g].sum() / per_group[g] for g in retained]

    skipped_cells = []
    eo_gaps = []
    for y in (0, 1):
        rates = []
        for g in retained:
            c = stats.count[g, y]
            if c >= min_cell:
                rates.append(stats.positive[g, y] / c)
            else:
                skipped_cells.append((g, y))
        gap = _spread(rates)
        if gap is not None:
            eo_gaps.append(gap)

    return FairnessReport(
        accuracy=float(stats.correct.sum() / stats.total),
        dp_gap=_spread(dp_rates),
        eo_gap=max(eo_gaps) if eo_gaps else None,
        acc_gap=_spread(acc_rates),
        group_stats=stats,
        skipped_groups=skipped_groups,
        skipped_cells=tuple(skipped_cells),
    )


def evaluate_predictions(y_pred, y_true, a, n_groups: int | None = None,
                         min_cell: int = MIN_CELL) -> FairnessReport:
    return report_from_stats(group_stats(y_pred, y_true, a, n_groups), min_cell)


def evaluate(model: nn.MlpModel, X, y, a, n_groups: int | None = None,
             min_cell: int = MIN_CELL) -> FairnessReport:
    """Threshold the model at probability 0.5 and score the predictions."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise InvalidArgument("empty dataset")
    return evaluate_predictions(nn.predict(model, X), y, a, n_groups, min_cell)


def evaluate_split(model: nn.MlpModel, split, n_groups: int, min_cell: int = MIN_CELL) -> FairnessReport:
    return evaluate(model, split.X, split.y, split.a, n_groups, min_cell)


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float | None:
    """Pearson r; ``None`` when either side has zero variance."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidArgument("pearson needs two equal-length 1-d sequences")
    if x.shape[0] < 3:
        raise InvalidArgument("pearson needs at least 3 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return None
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))

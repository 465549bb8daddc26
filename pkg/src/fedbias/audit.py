"""Post-hoc analyses over persisted runs.

* benefits of FL / centralized training relative to standalone models,
* leave-one-out influence of each party's local update on every party's gap,
* per-round gap of the global model versus one party's local update.

All evaluations are on the parties' local test sets.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nn
from .data import PartyDataset
from .errors import InvalidArgument, NotFound
from .metrics import MIN_CELL, evaluate_predictions
from .training import RoundTrace, aggregate, iter_traces

# ----------------------------------------------------------------- evaluation


class Evaluator:
    """Scores many models against every party's test set with one forward pass per model."""

    def __init__(self, parties: Sequence[PartyDataset], min_cell: int = MIN_CELL):
        if not parties:
            raise InvalidArgument("no parties")
        self.parties = list(parties)
        self.n_groups = parties[0].schema.n_groups
        self.min_cell = min_cell
        self.X = np.concatenate([p.test.X for p in parties])
        self.bounds = np.cumsum([0] + [len(p.test) for p in parties])

    def reports(self, model: nn.MlpModel):
        pred = nn.predict(model, self.X)
        out = []
        for k, p in enumerate(self.parties):
            lo, hi = self.bounds[k], self.bounds[k + 1]
            out.append(evaluate_predictions(pred[lo:hi], p.test.y, p.test.a, self.n_groups, self.min_cell))
        return out

    def gaps(self, model: nn.MlpModel, metric: str) -> np.ndarray:
        vals = [r.gap(metric) for r in self.reports(model)]
        return np.array([np.nan if v is None else v for v in vals])


def _nanmean(values) -> float | None:
    vals = [v for v in values if v is not None and not np.isnan(v)]
    return float(np.mean(vals)) if vals else None


def _sub(a, b):
    return None if a is None or b is None else a - b


# ------------------------------------------------------------------- benefits


@dataclass
class BenefitReport:
    metric: str
    parties: list[dict]
    averages: dict

    def column(self, key: str) -> list:
        return [p[key] for p in self.parties]

    def to_dict(self) -> dict:
        return {"metric": self.metric, "parties": self.parties, "averages": self.averages}


BENEFIT_KEYS = (
    "standalone_gap", "fl_gap", "centralized_gap",
    "standalone_acc", "fl_acc", "centralized_acc",
    "acc_benefit_fl", "fairness_benefit_fl",
    "acc_benefit_collab", "fairness_benefit_collab",
)


def benefits_from_models(standalone: Sequence[nn.MlpModel], centralized: nn.MlpModel,
                         federated: nn.MlpModel, parties: Sequence[PartyDataset],
                         metric: str = "dp", min_cell: int = MIN_CELL) -> BenefitReport:
    if len(standalone) != len(parties):
        raise InvalidArgument("one standalone model per party required")
    ev = Evaluator(parties, min_cell)
    fl_reports = ev.reports(federated)
    cen_reports = ev.reports(centralized)
    rows = []
    for k, p in enumerate(parties):
        sa = ev.reports(standalone[k])[k]
        fl, cen = fl_reports[k], cen_reports[k]
        s_gap, f_gap, c_gap = sa.gap(metric), fl.gap(metric), cen.gap(metric)
        rows.append({
            "party_id": p.party_id,
            "standalone_gap": s_gap,
            "fl_gap": f_gap,
            "centralized_gap": c_gap,
            "standalone_acc": sa.accuracy,
            "fl_acc": fl.accuracy,
            "centralized_acc": cen.accuracy,
            "acc_benefit_fl": fl.accuracy - sa.accuracy,
            "fairness_benefit_fl": _sub(s_gap, f_gap),
            "acc_benefit_collab": cen.accuracy - sa.accuracy,
            "fairness_benefit_collab": _sub(s_gap, c_gap),
        })
    averages = {key: _nanmean(r[key] for r in rows) for key in BENEFIT_KEYS}
    return BenefitReport(metric, rows, averages)


def load_baselines(seed_dir, parties: Sequence[PartyDataset]):
    seed_dir = Path(seed_dir)
    needed = [seed_dir / "baselines" / f"standalone_{p.party_id}.ckpt" for p in parties]
    needed += [seed_dir / "baselines" / "centralized.ckpt"]
    missing = [str(p) for p in needed if not p.exists()]
    if missing:
        raise NotFound(f"missing baseline checkpoints: {missing}")
    return [nn.load_checkpoint(p) for p in needed[:-1]], nn.load_checkpoint(needed[-1])


def load_final(run_dir) -> nn.MlpModel:
    path = Path(run_dir) / "final.ckpt"
    if not path.exists():
        raise NotFound(f"{path} missing")
    return nn.load_checkpoint(path)


def compute_benefits(seed_dir, parties: Sequence[PartyDataset], metric: str = "dp",
                     federated: str = "fedavg") -> BenefitReport:
    """Benefits for one seed directory holding baselines/ and a federated run."""
    standalone, centralized = load_baselines(seed_dir, parties)
    fl = load_final(Path(seed_dir) / federated)
    return benefits_from_models(standalone, centralized, fl, parties, metric)


# ------------------------------------------------------------------ influence


def leave_one_out_aggregate(locals_: Sequence[nn.MlpModel], sizes: Sequence[float], excluded: int) -> nn.MlpModel:
    """Aggregate without position ``excluded``; remaining weights renormalised to n_k / (N - n_i)."""
    K = len(locals_)
    if K < 2:
        raise InvalidArgument("leave-one-out needs at least two parties")
    if not 0 <= excluded < K:
        raise InvalidArgument(f"excluded index {excluded} out of range for {K} parties")
    keep = [k for k in range(K) if k != excluded]
    return aggregate([locals_[k] for k in keep], [sizes[k] for k in keep])


@dataclass
class InfluenceMatrix:
    """``matrix[i, j]``: summed change in party j's gap when party i is left out.

    Positive means removing i raised j's gap, i.e. i was improving j's fairness.
    """

    metric: str
    party_ids: list[int]
    rounds: list[int]
    per_round: np.ndarray  # (rounds, K, K)
    matrix: np.ndarray = field(init=False)

    def __post_init__(self):
        self.per_round = np.asarray(self.per_round, dtype=np.float64)
        K = len(self.party_ids)
        if self.per_round.size == 0:
            self.per_round = np.zeros((0, K, K))
        self.matrix = self.per_round.sum(axis=0)

    @property
    def mean_influence(self) -> np.ndarray:
        """Row sums divided by K."""
        return self.matrix.sum(axis=1) / len(self.party_ids)

    @property
    def cumulative(self) -> np.ndarray:
        """(rounds, K): influence of each party on all parties up to each audited round."""
        return np.cumsum(self.per_round.sum(axis=2), axis=0)

    @property
    def cumulative_mean(self) -> np.ndarray:
        return self.cumulative / len(self.party_ids)

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "party_ids": list(self.party_ids),
            "rounds": list(self.rounds),
            "matrix": self.matrix.tolist(),
            "mean_influence": self.mean_influence.tolist(),
            "cumulative": self.cumulative.tolist(),
            "cumulative_mean": self.cumulative_mean.tolist(),
        }


def influence_from_traces(traces: Iterable[RoundTrace], parties: Sequence[PartyDataset],
                          metric: str = "dp", min_cell: int = MIN_CELL) -> InfluenceMatrix:
    """One addend per trace: gap(theta_{t,-i}, D_j) - gap(theta_t, D_j) for all (i, j)."""
    K = len(parties)
    if K < 2:
        raise InvalidArgument("influence needs at least two parties")
    ev = Evaluator(parties, min_cell)
    sizes = [p.n_k for p in parties]
    per_round, rounds = [], []
    for trace in traces:
        if len(trace.locals) != K:
            raise InvalidArgument(f"round {trace.round}: {len(trace.locals)} locals for {K} parties")
        base = ev.gaps(trace.global_after, metric)
        addend = np.empty((K, K))
        for i in range(K):
            addend[i] = ev.gaps(leave_one_out_aggregate(trace.locals, sizes, i), metric) - base
        per_round.append(addend)
        rounds.append(trace.round)
    return InfluenceMatrix(metric, [p.party_id for p in parties], rounds, np.array(per_round))


def compute_influence(run_dir, parties: Sequence[PartyDataset], metric: str = "dp",
                      stride: int = 1) -> InfluenceMatrix:
    return influence_from_traces(iter_traces(run_dir, stride), parties, metric)


@dataclass(frozen=True)
class TopPairs:
    positive: list[tuple[int, int, float]]
    negative: list[tuple[int, int, float]]

    def to_dict(self) -> dict:
        fmt = lambda rows: [{"source": i, "target": j, "influence": v} for i, j, v in rows]
        return {"positive": fmt(self.positive), "negative": fmt(self.negative)}


def influence_top_pairs(influence: InfluenceMatrix | np.ndarray, n_pos: int = 5, n_neg: int = 5,
                        party_ids: Sequence[int] | None = None) -> TopPairs:
    """Strongest off-diagonal edges; ties broken by (i, j)."""
    if isinstance(influence, InfluenceMatrix):
        party_ids = influence.party_ids
        M = influence.matrix
    else:
        M = np.asarray(influence, dtype=np.float64)
    K = M.shape[0]
    if party_ids is None:
        party_ids = list(range(K))
    pairs = [(party_ids[i], party_ids[j], float(M[i, j])) for i in range(K) for j in range(K) if i != j]
    pos = sorted(pairs, key=lambda e: (-e[2], e[0], e[1]))[:max(n_pos, 0)]
    neg = sorted(pairs, key=lambda e: (e[2], e[0], e[1]))[:max(n_neg, 0)]
    return TopPairs(pos, neg)


# ------------------------------------------------------------------- dynamics


@dataclass
class DynamicsSeries:
    party_id: int
    metric: str
    rounds: list[int]
    global_gap: list[float]
    local_gap: list[float]

    def mean_difference(self) -> float:
        """Mean over rounds of (local gap - global gap)."""
        return float(np.nanmean(np.array(self.local_gap) - np.array(self.global_gap)))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "global_gap", "local_gap"])
            for row in zip(self.rounds, self.global_gap, self.local_gap):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


def dynamics_from_traces(traces: Iterable[RoundTrace], party: PartyDataset, metric: str = "dp",
                         min_cell: int = MIN_CELL) -> DynamicsSeries:
    n_groups = party.schema.n_groups
    test = party.test

    def gap(model):
        r = evaluate_predictions(nn.predict(model, test.X), test.y, test.a, n_groups, min_cell)
        v = r.gap(metric)
        return float("nan") if v is None else v

    rounds, g, l = [], [], []
    for trace in traces:
        try:
            pos = list(trace.party_ids).index(party.party_id)
        except ValueError:
            raise InvalidArgument(f"party {party.party_id} not in round {trace.round}") from None
        rounds.append(trace.round)
        g.append(gap(trace.global_after))
        l.append(gap(trace.locals[pos]))
    return DynamicsSeries(party.party_id, metric, rounds, g, l)


def fairness_dynamics(run_dir, party: PartyDataset, metric: str = "dp", stride: int = 1) -> DynamicsSeries:
    return dynamics_from_traces(iter_traces(run_dir, stride), party, metric)


def _json_safe(obj):
    if isinstance(obj, float):
        return None if np.isnan(obj) else obj
    if isinstance(obj, (np.floating, np.integer)):
        return _json_safe(obj.item())
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    return obj


def write_json(path, obj) -> None:
    """Sorted keys, NaN written as null."""
    Path(path).write_text(json.dumps(_json_safe(obj), indent=1, sort_keys=True, allow_nan=False) + "\n")

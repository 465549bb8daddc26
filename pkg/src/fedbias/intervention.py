"""Parameter-level probes and mitigations.

"Sensitive parameters" are the first-layer weight columns that read the
sensitive one-hot inputs (biases excluded). With hidden width h and a binary
attribute that is 2*h weights.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import nn
from .audit import Evaluator
from .data import FeatureSchema, PartyDataset, Split
from .errors import InvalidArgument
from .metrics import MIN_CELL
from .training import RoundTrace, TrainingConfig, run_federated

log = logging.getLogger(__name__)

TARGETS = ("sensitive", "other")


def _check_schema(model: nn.MlpModel, schema: FeatureSchema) -> None:
    if model.input_dim != schema.width:
        raise InvalidArgument(f"model reads {model.input_dim} inputs, schema encodes {schema.width}")


def target_columns(schema: FeatureSchema, target: str) -> tuple[int, ...]:
    if target == "sensitive":
        return tuple(schema.sensitive_columns)
    if target == "other":
        return schema.non_sensitive_columns
    raise InvalidArgument(f"unknown scaling target {target!r}; expected one of {TARGETS}")


def sensitive_param_norm(model: nn.MlpModel, schema: FeatureSchema) -> float:
    """||W1[:, sensitive]|| / ||W1||, Frobenius norms of the first layer."""
    _check_schema(model, schema)
    W = model.weights[0]
    total = float(np.linalg.norm(W))
    if total == 0.0:
        return 0.0
    return float(np.linalg.norm(W[:, list(schema.sensitive_columns)])) / total


def scale_params(model: nn.MlpModel, schema: FeatureSchema, factor: float, target: str = "sensitive") -> nn.MlpModel:
    """Copy of ``model`` with the target first-layer weight columns multiplied by ``factor``."""
    _check_schema(model, schema)
    if not factor >= 0:
        raise InvalidArgument(f"scaling factor must be >= 0, got {factor}")
    cols = list(target_columns(schema, target))
    W = model.weights[0].copy()
    W[:, cols] *= factor
    return nn.MlpModel(model.dims, (W,) + model.weights[1:], model.biases)


@dataclass
class ScalingSweep:
    target: str
    factors: list[float]
    party_ids: list[int]
    # rows[f][k] -> dict(accuracy, dp, eo)
    rows: list[list[dict]] = field(default_factory=list)

    def mean(self, key: str) -> list[float]:
        out = []
        for per_party in self.rows:
            vals = [r[key] for r in per_party if r[key] is not None]
            out.append(float(np.mean(vals)) if vals else float("nan"))
        return out

    def entry(self, factor: float) -> dict:
        i = self.factors.index(factor)
        return {k: self.mean(k)[i] for k in ("accuracy", "dp", "eo")}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = ["factor", "mean_accuracy", "mean_dp", "mean_eo"]
            for pid in self.party_ids:
                header += [f"acc_{pid}", f"dp_{pid}", f"eo_{pid}"]
            w.writerow(header)
            acc, dp, eo = self.mean("accuracy"), self.mean("dp"), self.mean("eo")
            for i, f in enumerate(self.factors):
                line = [repr(float(f)), repr(acc[i]), repr(dp[i]), repr(eo[i])]
                for r in self.rows[i]:
                    line += ["" if r[k] is None else repr(r[k]) for k in ("accuracy", "dp", "eo")]
                w.writerow(line)


def scaling_sweep(model: nn.MlpModel, parties: Sequence[PartyDataset], schema: FeatureSchema,
                  factors: Iterable[float], target: str = "sensitive",
                  min_cell: int = MIN_CELL) -> ScalingSweep:
    factors = [float(f) for f in factors]
    if not factors:
        raise InvalidArgument("no scaling factors")
    ev = Evaluator(parties, min_cell)
    sweep = ScalingSweep(target, factors, [p.party_id for p in parties])
    for f in factors:
        reports = ev.reports(scale_params(model, schema, f, target))
        sweep.rows.append([{"accuracy": r.accuracy, "dp": r.dp_gap, "eo": r.eo_gap} for r in reports])
    return sweep


# ------------------------------------------------------------------- reweighing


def reweigh_weights(counts) -> np.ndarray:
    """w(a, y) = P(a) P(y) / P(a, y) from a ``[group, label]`` count table.

    Cells with no rows get weight 1.
    """
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    if n <= 0:
        raise InvalidArgument("cannot reweigh an empty dataset")
    n_a = counts.sum(axis=1, keepdims=True)
    n_y = counts.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = (n_a * n_y) / (n * counts)
    empty = counts == 0
    if empty.any():
        log.info("reweighing: cells %s absent, weight set to 1", [tuple(map(int, c)) for c in np.argwhere(empty)])
        w[empty] = 1.0
    return w


@dataclass(frozen=True)
class ReweighSpec:
    scope: str
    tables: Mapping[int, np.ndarray]

    def weights_for(self, party: PartyDataset) -> np.ndarray:
        table = self.tables[party.party_id]
        return table[party.train.a, party.train.y]


def build_reweigh_spec(parties: Sequence[PartyDataset], scope: str = "local") -> ReweighSpec:
    """Weight tables from each party's own counts (local) or the pooled counts (global)."""
    if scope not in ("local", "global"):
        raise InvalidArgument(f"reweighing scope must be 'local' or 'global', got {scope!r}")
    n_groups = parties[0].schema.n_groups
    if scope == "local":
        tables = {p.party_id: reweigh_weights(p.train.cell_counts(n_groups)) for p in parties}
    else:
        pooled = Split.concat([p.train for p in parties]).cell_counts(n_groups)
        table = reweigh_weights(pooled)
        tables = {p.party_id: table for p in parties}
    return ReweighSpec(scope, tables)


def run_federated_reweighed(parties: Sequence[PartyDataset], cfg: TrainingConfig, spec: ReweighSpec,
                            run_dir=None, keep_traces: bool = True):
    """FedAvg where each party minimises its reweighed loss."""
    weights = [spec.weights_for(p) for p in parties]
    return run_federated(parties, cfg, sample_weights=weights, run_dir=run_dir, keep_traces=keep_traces)


# ---------------------------------------------------------------------- norms


def norm_series(traces: Iterable[RoundTrace], schema: FeatureSchema) -> list[tuple[int, str, float]]:
    """(round, "global" or party id, normalised sensitive norm) for every model in each trace."""
    rows = []
    for trace in traces:
        rows.append((trace.round, "global", sensitive_param_norm(trace.global_after, schema)))
        for pid, m in zip(trace.party_ids, trace.locals):
            rows.append((trace.round, str(pid), sensitive_param_norm(m, schema)))
    return rows


def write_norms_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "model", "normalized_norm"])
        for t, who, v in rows:
            w.writerow([t, who, repr(v)])

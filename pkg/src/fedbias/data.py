"""Tabular datasets: CSV ingestion, one-hot encoding, synthetic biased parties, partitioning."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import InvalidArgument, SchemaError

VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class FeatureSchema:
    feature_names: tuple[str, ...]
    categorical_levels: Mapping[str, tuple[str, ...]]
    sensitive_name: str
    sensitive_columns: tuple[int, ...]
    sensitive_is_binary: bool
    numeric_names: tuple[str, ...] = ()
    label_name: str = "label"

    def __post_init__(self):
        if not self.sensitive_columns:
            raise InvalidArgument("schema needs at least one sensitive column")
        if max(self.sensitive_columns) >= self.width or min(self.sensitive_columns) < 0:
            raise InvalidArgument("sensitive columns fall outside the encoded width")

    @property
    def width(self) -> int:
        return len(self.numeric_names) + sum(len(v) for v in self.categorical_levels.values())

    @property
    def n_groups(self) -> int:
        return len(self.sensitive_columns)

    @property
    def encoded_names(self) -> list[str]:
        names = list(self.numeric_names)
        for name in self.feature_names:
            if name in self.categorical_levels:
                names.extend(f"{name}={lvl}" for lvl in self.categorical_levels[name])
        return names

    @property
    def non_sensitive_columns(self) -> tuple[int, ...]:
        sens = set(self.sensitive_columns)
        return tuple(c for c in range(self.width) if c not in sens)

    def group_ids(self, X) -> np.ndarray:
        """Recover group ids from the sensitive one-hot block."""
        block = np.asarray(X)[:, list(self.sensitive_columns)]
        return np.argmax(block, axis=1)

    def to_dict(self) -> dict[str, Any]:
        return {
            "feature_names": list(self.feature_names),
            "numeric_names": list(self.numeric_names),
            "categorical_levels": {k: list(v) for k, v in self.categorical_levels.items()},
            "sensitive_name": self.sensitive_name,
            "sensitive_columns": list(self.sensitive_columns),
            "sensitive_is_binary": self.sensitive_is_binary,
            "label_name": self.label_name,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FeatureSchema":
        return cls(
            feature_names=tuple(d["feature_names"]),
            categorical_levels={k: tuple(v) for k, v in d["categorical_levels"].items()},
            sensitive_name=d["sensitive_name"],
            sensitive_columns=tuple(d["sensitive_columns"]),
            sensitive_is_binary=bool(d["sensitive_is_binary"]),
            numeric_names=tuple(d.get("numeric_names", ())),
            label_name=d.get("label_name", "label"),
        )


@dataclass(frozen=True)
class Split:
    X: np.ndarray
    y: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y).astype(np.int64).reshape(-1)
        a = np.asarray(self.a).astype(np.int64).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0] or y.shape[0] != a.shape[0]:
            raise InvalidArgument(f"inconsistent split shapes {X.shape}, {y.shape}, {a.shape}")
        if not np.all(np.isfinite(X)):
            raise InvalidArgument("non-finite feature values")
        if y.size and not np.all((y == 0) | (y == 1)):
            raise InvalidArgument("labels must be 0/1")
        for arr in (X, y, a):
            arr.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a)

    def __len__(self) -> int:
        return self.y.shape[0]

    def take(self, idx) -> "Split":
        idx = np.asarray(idx, dtype=np.int64)
        return Split(self.X[idx], self.y[idx], self.a[idx])

    @staticmethod
    def concat(splits: Sequence["Split"]) -> "Split":
        return Split(
            np.concatenate([s.X for s in splits]),
            np.concatenate([s.y for s in splits]),
            np.concatenate([s.a for s in splits]),
        )

    def cell_counts(self, n_groups: int) -> np.ndarray:
        """counts[a, y]"""
        out = np.zeros((n_groups, 2), dtype=np.int64)
        np.add.at(out, (self.a, self.y), 1)
        return out


def _empty_split(width: int) -> Split:
    return Split(np.zeros((0, width)), np.zeros(0), np.zeros(0))


@dataclass(frozen=True)
class PartyDataset:
    party_id: int
    train: Split
    test: Split
    schema: FeatureSchema

    def __post_init__(self):
        for s in (self.train, self.test):
            if s.X.shape[1] != self.schema.width:
                raise InvalidArgument(
                    f"party {self.party_id}: {s.X.shape[1]} columns, schema width {self.schema.width}"
                )
            if len(s) and (s.a.min() < 0 or s.a.max() >= self.schema.n_groups):
                raise InvalidArgument(f"party {self.party_id}: group id out of range")

    @property
    def n_k(self) -> int:
        return len(self.train)


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "iid"
    num_parties: int = 2
    minority_ratio: float = 0.8
    seed: int = 0

    MODES = ("iid", "minority_ratio_split", "single_holder")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise InvalidArgument(f"unknown partition mode {self.mode!r}")
        if self.num_parties < 1:
            raise InvalidArgument("need at least one party")
        if self.mode == "minority_ratio_split" and not 0.0 < self.minority_ratio <= 1.0:
            raise InvalidArgument(f"minority_ratio must be in (0, 1], got {self.minority_ratio}")


# --------------------------------------------------------------------------- CSV


def load_csv(path, schema_spec: Mapping[str, Any]):
    """Read a headed CSV and encode it.

    ``schema_spec`` keys: ``label`` (column name), ``sensitive`` (column name,
    must be categorical), ``categorical`` (name -> ordered level list),
    ``numeric`` (list of names), optional ``positive_label`` (string value of
    the favourable label; default ``"1"``).

    Returns ``(X, y, a, FeatureSchema)``.
    """
    label = schema_spec.get("label")
    sensitive = schema_spec.get("sensitive")
    categorical = {k: tuple(str(v) for v in lv) for k, lv in schema_spec.get("categorical", {}).items()}
    numeric = list(schema_spec.get("numeric", []))
    positive = str(schema_spec.get("positive_label", "1"))
    if label is None or sensitive is None:
        raise SchemaError("schema spec needs 'label' and 'sensitive'")
    if sensitive not in categorical:
        raise SchemaError(f"sensitive column {sensitive!r} must be declared categorical")

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidArgument(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if not rows:
        raise InvalidArgument(f"{path}: no data rows")
    col = {name: i for i, name in enumerate(header)}
    for name in [label, *categorical, *numeric]:
        if name not in col:
            raise SchemaError(f"{path}: missing column {name!r}")

    n = len(rows)
    # Sensitive attribute goes last so its one-hot block is contiguous at the end.
    cat_order = [c for c in categorical if c != sensitive] + [sensitive]
    blocks = []
    if numeric:
        num = np.empty((n, len(numeric)))
        for j, name in enumerate(numeric):
            for i, r in enumerate(rows):
                try:
                    num[i, j] = float(r[col[name]])
                except ValueError:
                    raise InvalidArgument(f"row {i}: non-numeric value {r[col[name]]!r} in {name!r}") from None
        var = num.var(axis=0)
        num = (num - num.mean(axis=0)) / np.sqrt(np.maximum(var, VARIANCE_FLOOR))
        num[:, var <= VARIANCE_FLOOR] = 0.0
        blocks.append(num)
    a = None
    for name in cat_order:
        levels = categorical[name]
        index = {lvl: k for k, lvl in enumerate(levels)}
        ids = np.empty(n, dtype=np.int64)
        for i, r in enumerate(rows):
            v = r[col[name]].strip()
            if v not in index:
                raise InvalidArgument(f"row {i}: unknown level {v!r} for {name!r}")
            ids[i] = index[v]
        onehot = np.zeros((n, len(levels)))
        onehot[np.arange(n), ids] = 1.0
        blocks.append(onehot)
        if name == sensitive:
            a = ids
    y = np.array([1 if r[col[label]].strip() == positive else 0 for r in rows], dtype=np.int64)
    X = np.hstack(blocks) if blocks else np.zeros((n, 0))
    width = X.shape[1]
    k_sens = len(categorical[sensitive])
    schema = FeatureSchema(
        feature_names=tuple(numeric + cat_order),
        categorical_levels={c: categorical[c] for c in cat_order},
        sensitive_name=sensitive,
        sensitive_columns=tuple(range(width - k_sens, width)),
        sensitive_is_binary=k_sens == 2,
        numeric_names=tuple(numeric),
        label_name=label,
    )
    return X, y, a, schema


# --------------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticConfig:
    """Generator settings.

    ``bias_levels[k]`` is the probability that one of party k's labels is
    replaced by ``1[group == 0]``. ``corrupt_test`` controls whether test
    labels are corrupted as well; by default they are clean so accuracy is
    measured against the ground truth.
    """

    d_num: int = 12
    K: int = 20
    n_train: int = 1000
    n_test: int = 2000
    bias_levels: tuple[float, ...] | None = None
    seed: int = 0
    group_fraction: float = 0.5
    signal: float = 4.0
    corrupt_test: bool = False

    def __post_init__(self):
        levels = self.bias_levels
        if levels is None:
            levels = tuple(np.linspace(0.0, 0.9, self.K).tolist()) if self.K >= 2 else (0.0,)
        object.__setattr__(self, "bias_levels", tuple(float(b) for b in levels))
        if self.K < 2:
            raise InvalidArgument("synthetic benchmark needs K >= 2")
        if self.n_train < 1 or self.n_test < 1 or self.d_num < 1:
            raise InvalidArgument("n_train, n_test and d_num must be >= 1")
        if len(self.bias_levels) != self.K:
            raise InvalidArgument(f"{len(self.bias_levels)} bias levels for {self.K} parties")
        if any(not 0.0 <= b <= 1.0 for b in self.bias_levels):
            raise InvalidArgument("bias levels must lie in [0, 1]")
        if not 0.0 < self.group_fraction < 1.0:
            raise InvalidArgument("group_fraction must be in (0, 1)")


def synthetic_schema(d_num: int) -> FeatureSchema:
    numeric = tuple(f"x{i}" for i in range(d_num))
    return FeatureSchema(
        feature_names=numeric + ("group",),
        categorical_levels={"group": ("0", "1")},
        sensitive_name="group",
        sensitive_columns=(d_num, d_num + 1),
        sensitive_is_binary=True,
        numeric_names=numeric,
    )


def ground_truth(config: SyntheticConfig) -> tuple[np.ndarray, float]:
    """The shared logistic labelling rule (weights, intercept)."""
    rng = np.random.default_rng([config.seed, 0])
    w = rng.normal(size=config.d_num)
    w *= config.signal / np.linalg.norm(w)
    return w, 0.0


def _draw(rng, n, config, w, b0, bias, corrupt):
    x = rng.normal(size=(n, config.d_num))
    a = (rng.random(n) < config.group_fraction).astype(np.int64)
    p = 1.0 / (1.0 + np.exp(-(x @ w + b0)))
    y = (rng.random(n) < p).astype(np.int64)
    flip = rng.random(n) < bias
    if corrupt:
        y = np.where(flip, (a == 0).astype(np.int64), y)
    X = np.hstack([x, np.eye(2)[a]])
    return Split(X, y, a)


def generate_synthetic(config: SyntheticConfig) -> list[PartyDataset]:
    """K parties sharing one feature distribution and labelling rule.

    Party k's training labels are overwritten by ``1[group == 0]`` with
    probability ``bias_levels[k]``, which drives its standalone fairness gap.
    """
    w, b0 = ground_truth(config)
    schema = synthetic_schema(config.d_num)
    parties = []
    for k, bias in enumerate(config.bias_levels):
        rng = np.random.default_rng([config.seed, 1, k])
        train = _draw(rng, config.n_train, config, w, b0, bias, True)
        test = _draw(rng, config.n_test, config, w, b0, bias, config.corrupt_test)
        parties.append(PartyDataset(k, train, test, schema))
    return parties


def bayes_predict(config: SyntheticConfig, X) -> np.ndarray:
    """Bayes-optimal predictor for the clean labels."""
    w, b0 = ground_truth(config)
    return (np.asarray(X)[:, : config.d_num] @ w + b0 >= 0).astype(np.int64)


# --------------------------------------------------------------------- splitting


def train_test_split(X, y, a, test_fraction: float, seed: int) -> tuple[Split, Split]:
    if not 0.0 < test_fraction < 1.0:
        raise InvalidArgument(f"test_fraction must be in (0, 1), got {test_fraction}")
    data = Split(X, y, a)
    n = len(data)
    n_test = int(round(n * test_fraction))
    if n_test < 1 or n_test > n - 1:
        raise InvalidArgument(f"cannot split {n} rows with test_fraction {test_fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    return data.take(np.sort(perm[n_test:])), data.take(np.sort(perm[:n_test]))


def minority_cell(y, a) -> tuple[int, int]:
    """The (group, label) cell with the fewest rows among those present."""
    y = np.asarray(y)
    a = np.asarray(a)
    cells = sorted({(int(g), int(l)) for g, l in zip(a, y)})
    counts = [(int(np.sum((a == g) & (y == l))), g, l) for g, l in cells]
    _, g, l = min(counts)
    return g, l


def _even_chunks(idx: np.ndarray, k: int) -> list[np.ndarray]:
    return np.array_split(idx, k)


def partition(X, y, a, spec: PartitionSpec, schema: FeatureSchema | None = None,
              test_fraction: float = 0.0) -> list[PartyDataset]:
    """Allocate rows to ``spec.num_parties`` parties.

    With ``test_fraction > 0`` each party's rows are then split into
    train/test; otherwise every row lands in the party's training set.
    """
    data = Split(X, y, a)
    n = len(data)
    K = spec.num_parties
    if n < K:
        raise InvalidArgument(f"{n} rows cannot cover {K} parties")
    if schema is None:
        n_groups = int(data.a.max()) + 1 if n else 1
        schema = FeatureSchema(
            feature_names=tuple(f"f{i}" for i in range(data.X.shape[1])),
            categorical_levels={},
            sensitive_name="group",
            sensitive_columns=tuple(range(data.X.shape[1] - n_groups, data.X.shape[1])),
            sensitive_is_binary=n_groups == 2,
            numeric_names=tuple(f"f{i}" for i in range(data.X.shape[1])),
        )
    rng = np.random.default_rng(spec.seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(K)]
    if spec.mode == "iid" or K == 1:
        for k, chunk in enumerate(_even_chunks(rng.permutation(n), K)):
            buckets[k].append(chunk)
    else:
        g, l = minority_cell(data.y, data.a)
        is_min = (data.a == g) & (data.y == l)
        minority = rng.permutation(np.flatnonzero(is_min))
        rest = rng.permutation(np.flatnonzero(~is_min))
        if spec.mode == "minority_ratio_split":
            head = math.ceil(K / 2)
            n_head = int(round(spec.minority_ratio * len(minority)))
            for k, chunk in enumerate(_even_chunks(minority[:n_head], head)):
                buckets[k].append(chunk)
            for k, chunk in enumerate(_even_chunks(minority[n_head:], K - head)):
                buckets[head + k].append(chunk)
            for k, chunk in enumerate(_even_chunks(rest, K)):
                buckets[k].append(chunk)
        else:  # single_holder
            n_half = len(minority) // 2
            buckets[0].append(minority[:n_half])
            remaining = rng.permutation(np.concatenate([minority[n_half:], rest]))
            for k, chunk in enumerate(_even_chunks(remaining, K)):
                buckets[k].append(chunk)
    parties = []
    for k in range(K):
        idx = np.sort(np.concatenate(buckets[k])).astype(np.int64)
        rows = data.take(idx)
        if test_fraction > 0:
            if len(rows) < 2:
                raise InvalidArgument(f"party {k} has too few rows to split")
            train, test = train_test_split(rows.X, rows.y, rows.a, test_fraction,
                                           seed=int(rng.integers(2**31)))
        else:
            train, test = rows, _empty_split(data.X.shape[1])
        parties.append(PartyDataset(k, train, test, schema))
    return parties


# ---------------------------------------------------------------------- manifest


def manifest(parties: Sequence[PartyDataset]) -> dict[str, Any]:
    """Per-party sizes and per-(group, label) cell counts."""
    out = {"schema": parties[0].schema.to_dict() if parties else None, "parties": []}
    for p in parties:
        n_groups = p.schema.n_groups
        entry = {"party_id": p.party_id, "n_train": len(p.train), "n_test": len(p.test), "cells": {}}
        for split_name, split in (("train", p.train), ("test", p.test)):
            counts = split.cell_counts(n_groups)
            entry["cells"][split_name] = {
                f"{g},{l}": int(counts[g, l]) for g in range(n_groups) for l in (0, 1)
            }
        out["parties"].append(entry)
    return out


def write_party_csv(path, party: PartyDataset) -> None:
    """One CSV per party with a ``split`` column; sensitive one-hot collapsed to its level."""
    schema = party.schema
    num = list(schema.numeric_names)
    levels = schema.categorical_levels[schema.sensitive_name]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", *num, schema.sensitive_name, schema.label_name])
        for split_name, split in (("train", party.train), ("test", party.test)):
            for i in range(len(split)):
                w.writerow([split_name, *(repr(float(v)) for v in split.X[i, : len(num)]),
                            levels[split.a[i]], int(split.y[i])])


def save_parties(path, parties: Sequence[PartyDataset]) -> None:
    arrays = {}
    for p in parties:
        for name, s in (("train", p.train), ("test", p.test)):
            arrays[f"p{p.party_id}_{name}_X"] = s.X
            arrays[f"p{p.party_id}_{name}_y"] = s.y
            arrays[f"p{p.party_id}_{name}_a"] = s.a
    np.savez(path, **arrays)
    Path(str(path) + ".schema.json").write_text(
        json.dumps({"schema": parties[0].schema.to_dict(),
                    "party_ids": [p.party_id for p in parties]}, indent=1)
    )


def load_parties(path) -> list[PartyDataset]:
    meta = json.loads(Path(str(path) + ".schema.json").read_text())
    schema = FeatureSchema.from_dict(meta["schema"])
    parties = []
    with np.load(path) as z:
        for k in meta["party_ids"]:
            splits = [Split(z[f"p{k}_{s}_X"], z[f"p{k}_{s}_y"], z[f"p{k}_{s}_a"]) for s in ("train", "test")]
            parties.append(PartyDataset(k, splits[0], splits[1], schema))
    return parties

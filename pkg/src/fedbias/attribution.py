"""Integrated Gradients with per-example baselines.

Baseline for an input x: every column takes its test-set mean, except a binary
sensitive attribute, whose one-hot pair is flipped relative to x (the "other
group" version of the same person). Multi-valued sensitive attributes fall
back to the column means.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import nn
from .data import FeatureSchema, PartyDataset
from .errors import InvalidArgument

log = logging.getLogger(__name__)

DEFAULT_STEPS = 64
HIST_BINS = 40
HIST_RANGE = (-1.0, 1.0)


@dataclass(frozen=True)
class BaselineSpec:
    means: np.ndarray
    sensitive_columns: tuple[int, ...]
    flip_sensitive: bool

    @classmethod
    def from_test_set(cls, schema: FeatureSchema, test_X) -> "BaselineSpec":
        test_X = np.asarray(test_X, dtype=np.float64)
        if test_X.ndim != 2 or test_X.shape[0] == 0:
            raise InvalidArgument("baseline statistics need a non-empty test set")
        return cls(test_X.mean(axis=0), tuple(schema.sensitive_columns), schema.sensitive_is_binary)

    def baselines(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.means.shape[0]:
            raise InvalidArgument(f"inputs have {X.shape[1]} columns, baseline has {self.means.shape[0]}")
        out = np.tile(self.means, (X.shape[0], 1))
        if self.flip_sensitive:
            cols = list(self.sensitive_columns)
            block = X[:, cols]
            valid = np.all((block == 0) | (block == 1), axis=1) & (block.sum(axis=1) == 1)
            if not np.all(valid):
                bad = int(np.flatnonzero(~valid)[0])
                raise InvalidArgument(f"row {bad}: sensitive one-hot does not identify a group")
            out[:, cols] = block[:, ::-1]
        return out


def build_baseline(schema: FeatureSchema, test_X, x) -> np.ndarray:
    return BaselineSpec.from_test_set(schema, test_X).baselines(x)[0]


def _ig_uniform(model, X, B, steps, target, chunk_rows=1 << 17):
    n, d = X.shape
    alphas = (np.arange(1, steps + 1) - 0.5) / steps
    out = np.empty((n, d))
    per_chunk = max(1, chunk_rows // steps)
    for lo in range(0, n, per_chunk):
        hi = min(n, lo + per_chunk)
        diff = X[lo:hi] - B[lo:hi]
        path = B[lo:hi, None, :] + alphas[None, :, None] * diff[:, None, :]
        grads = nn.input_gradients(model, path.reshape(-1, d), target).reshape(hi - lo, steps, d)
        out[lo:hi] = diff * grads.mean(axis=1)
    return out


def _kinks_one_hidden(model, X, B):
    """Path positions in (0, 1) where a hidden pre-activation changes sign, one row per example."""
    W, b = model.weights[0], model.biases[0]
    z0 = B @ W.T + b
    z1 = X @ W.T + b
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = z0 / (z0 - z1)
    inside = (alpha > 0) & (alpha < 1) & (np.sign(z0) != np.sign(z1))
    return np.where(inside, alpha, 1.0)  # 1.0 adds a zero-length segment


def _kinks_general(model, x, b, edges):
    """Refine ``edges`` layer by layer until every ReLU pattern is constant on each segment."""
    diff = x - b
    for layer in range(len(model.weights) - 1):
        pts = b[None, :] + edges[:, None] * diff[None, :]
        h = pts
        for l in range(layer + 1):
            z = h @ model.weights[l].T + model.biases[l]
            h = np.maximum(z, 0.0)
        new = []
        for k in range(len(edges) - 1):
            za, zb = z[k], z[k + 1]
            cross = (np.sign(za) * np.sign(zb)) < 0
            if cross.any():
                t = za[cross] / (za[cross] - zb[cross])
                new.extend(edges[k] + t * (edges[k + 1] - edges[k]))
        if new:
            edges = np.unique(np.concatenate([edges, np.asarray(new)]))
    return edges


def _ig_piecewise(model, X, B, steps, target, chunk_rows=1 << 17):
    """Midpoint rule on the uniform grid refined at every activation kink.

    Between kinks a ReLU network is affine along the path, so with the logit
    target each sub-cell midpoint gives the exact integral.
    """
    n, d = X.shape
    grid = np.linspace(0.0, 1.0, steps + 1)
    out = np.empty((n, d))
    if len(model.weights) == 2:
        H = model.dims[1]
        per_chunk = max(1, chunk_rows // (steps + H))
        for lo in range(0, n, per_chunk):
            hi = min(n, lo + per_chunk)
            kinks = _kinks_one_hidden(model, X[lo:hi], B[lo:hi])
            edges = np.sort(np.concatenate([np.tile(grid, (hi - lo, 1)), kinks], axis=1), axis=1)
            width = np.diff(edges, axis=1)
            mids = 0.5 * (edges[:, 1:] + edges[:, :-1])
            diff = X[lo:hi] - B[lo:hi]
            path = B[lo:hi, None, :] + mids[:, :, None] * diff[:, None, :]
            grads = nn.input_gradients(model, path.reshape(-1, d), target).reshape(hi - lo, -1, d)
            out[lo:hi] = diff * np.einsum("ns,nsd->nd", width, grads)
        return out
    for i in range(n):
        edges = _kinks_general(model, X[i], B[i], grid)
        mids = 0.5 * (edges[1:] + edges[:-1])
        path = B[i][None, :] + mids[:, None] * (X[i] - B[i])[None, :]
        grads = nn.input_gradients(model, path, target)
        out[i] = (X[i] - B[i]) * (np.diff(edges) @ grads)
    return out


METHODS = {"piecewise": _ig_piecewise, "uniform": _ig_uniform}


def integrated_gradients(model: nn.MlpModel, x, baseline, steps: int = DEFAULT_STEPS,
                         target: str = "logit", method: str = "piecewise") -> np.ndarray:
    """Integrated Gradients of ``target`` along the straight path from ``baseline`` to ``x``.

    ``method="uniform"`` is the plain midpoint rule
    ``a_i = (x_i - x'_i) * mean_s grad_i(x' + (s - 1/2)/m * (x - x'))``.
    ``method="piecewise"`` (default) splits the same m cells at ReLU kinks,
    which makes the logit attribution exact.
    Accepts a single vector or a batch of rows.
    """
    if steps < 1:
        raise InvalidArgument("steps must be >= 1")
    if method not in METHODS:
        raise InvalidArgument(f"unknown IG method {method!r}")
    X = np.asarray(x, dtype=np.float64)
    B = np.asarray(baseline, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    B = np.atleast_2d(B)
    if X.shape != B.shape or X.shape[1] != model.input_dim:
        raise InvalidArgument(f"input {X.shape} / baseline {B.shape} / model input {model.input_dim} mismatch")
    out = METHODS[method](model, X, B, steps, target)
    return out[0] if single else out


def _score(model, X, target):
    return nn.logits(model, X) if target == "logit" else nn.predict_proba(model, X)


@dataclass
class AttributionResult:
    attributions: np.ndarray  # (n, d)
    residuals: np.ndarray  # sum(a) - (f(x) - f(x'))
    groups: np.ndarray
    sensitive_columns: tuple[int, ...]

    @property
    def sensitive(self) -> np.ndarray:
        """Per-example attribution of the sensitive attribute (summed over its one-hot columns)."""
        return self.attributions[:, list(self.sensitive_columns)].sum(axis=1)


def attribute(model: nn.MlpModel, X, schema: FeatureSchema, spec: BaselineSpec, groups,
              steps: int = DEFAULT_STEPS, target: str = "logit", method: str = "piecewise") -> AttributionResult:
    X = np.asarray(X, dtype=np.float64)
    B = spec.baselines(X)
    attr = integrated_gradients(model, X, B, steps, target, method)
    attr = np.atleast_2d(attr)
    resid = attr.sum(axis=1) - (_score(model, X, target) - _score(model, B, target))
    return AttributionResult(attr, resid, np.asarray(groups), tuple(schema.sensitive_columns))


def _histogram(values) -> list[int]:
    """Underflow, HIST_BINS uniform bins over HIST_RANGE, overflow."""
    lo, hi = HIST_RANGE
    inside = values[(values >= lo) & (values <= hi)]
    inner, _ = np.histogram(inside, bins=HIST_BINS, range=HIST_RANGE)
    return [int(np.sum(values < lo)), *map(int, inner), int(np.sum(values > hi))]


def group_attribution_summary(model: nn.MlpModel, party: PartyDataset, schema: FeatureSchema | None = None,
                              steps: int = DEFAULT_STEPS, target: str = "logit",
                              method: str = "piecewise") -> dict[str, Any]:
    """Attribute every test example of ``party`` and aggregate by sensitive group."""
    schema = schema or party.schema
    test = party.test
    if len(test) == 0:
        raise InvalidArgument(f"party {party.party_id} has an empty test set")
    spec = BaselineSpec.from_test_set(schema, test.X)
    res = attribute(model, test.X, schema, spec, test.a, steps, target, method)
    sens = res.sensitive
    groups: dict[str, Any] = {}
    omitted = []
    for g in range(schema.n_groups):
        mask = res.groups == g
        if not mask.any():
            log.info("party %s: group %d absent from test set, omitted", party.party_id, g)
            omitted.append(g)
            continue
        groups[str(g)] = {
            "count": int(mask.sum()),
            "mean_sensitive": float(sens[mask].mean()),
            "mean_abs_sensitive": float(np.abs(sens[mask]).mean()),
            "feature_means": res.attributions[mask].mean(axis=0).tolist(),
            "feature_abs_means": np.abs(res.attributions[mask]).mean(axis=0).tolist(),
            "histogram": _histogram(sens[mask]),
        }
    return {
        "party_id": party.party_id,
        "target": target,
        "steps": steps,
        "method": method,
        "feature_names": schema.encoded_names,
        "mean_abs_sensitive": float(np.abs(sens).mean()),
        "feature_abs_means": np.abs(res.attributions).mean(axis=0).tolist(),
        "groups": groups,
        "omitted_groups": omitted,
        "histogram_edges": np.linspace(*HIST_RANGE, HIST_BINS + 1).tolist(),
        "residual": {
            "max_abs": float(np.abs(res.residuals).max()),
            "mean_abs": float(np.abs(res.residuals).mean()),
        },
    }

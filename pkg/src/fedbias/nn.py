"""Dense feed-forward network: ReLU hidden layers, one sigmoid output unit.

Everything here is a pure function of its inputs. Models are immutable;
training code that needs speed works on private copies of the arrays (see
``_train_loop`` in ``fedbias.training``) but goes through the same
arithmetic as :func:`loss_and_gradients` and :func:`sgd_step`.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import InvalidArgument, NumericError


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class MlpModel:
    """Parameters of a dense network.

    ``weights[l]`` has shape ``(dims[l+1], dims[l])`` and ``biases[l]`` has
    length ``dims[l+1]``.
    """

    dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        _check_dims(dims)
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise InvalidArgument("number of layers does not match dims")
        weights = tuple(_frozen(w) for w in self.weights)
        biases = tuple(_frozen(b) for b in self.biases)
        for l, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (dims[l + 1], dims[l]) or b.shape != (dims[l + 1],):
                raise InvalidArgument(
                    f"layer {l}: got weight {w.shape} / bias {b.shape}, "
                    f"expected ({dims[l + 1]}, {dims[l]}) / ({dims[l + 1]},)"
                )
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def n_params(self) -> int:
        return param_count(self.dims)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MlpModel):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(flatten(self), flatten(other))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class GradientSet:
    """Per-parameter derivatives, shaped like the model they belong to."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def as_model(self, dims: Sequence[int]) -> MlpModel:
        return MlpModel(tuple(dims), self.weights, self.biases)

    @classmethod
    def from_model(cls, model: MlpModel) -> "GradientSet":
        return cls(model.weights, model.biases)


def _check_dims(dims: Sequence[int]) -> None:
    if len(dims) < 2:
        raise InvalidArgument(f"need at least 2 layer widths, got {list(dims)}")
    if any(int(d) < 1 for d in dims):
        raise InvalidArgument(f"layer widths must be >= 1, got {list(dims)}")
    if int(dims[-1]) != 1:
        raise InvalidArgument(f"output width must be 1, got {dims[-1]}")


def param_count(dims: Sequence[int]) -> int:
    return sum(dims[l + 1] * dims[l] + dims[l + 1] for l in range(len(dims) - 1))


def init_model(layer_dims: Sequence[int], seed: int) -> MlpModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    dims = tuple(int(d) for d in layer_dims)
    _check_dims(dims)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for l in range(len(dims) - 1):
        bound = 1.0 / np.sqrt(dims[l])
        weights.append(rng.uniform(-bound, bound, size=(dims[l + 1], dims[l])))
        biases.append(np.zeros(dims[l + 1]))
    return MlpModel(dims, tuple(weights), tuple(biases))


def _as_batch(model: MlpModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise InvalidArgument(
            f"expected inputs with {model.input_dim} features, got shape {X.shape}"
        )
    return X


def _forward_cache(weights, biases, X):
    """Returns (layer inputs, hidden pre-activations, logits)."""
    acts = [X]
    pre = []
    h = X
    for W, b in zip(weights[:-1], biases[:-1]):
        z = h @ W.T + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    logit = (h @ weights[-1].T + biases[-1])[:, 0]
    return acts, pre, logit


def logits(model: MlpModel, X) -> np.ndarray:
    """Pre-sigmoid scores for a batch (or a single row)."""
    return _forward_cache(model.weights, model.biases, _as_batch(model, X))[2]


def predict_proba(model: MlpModel, X) -> np.ndarray:
    return expit(logits(model, X))


def predict(model: MlpModel, X) -> np.ndarray:
    """Hard labels: positive iff probability >= 0.5, i.e. logit >= 0."""
    return (logits(model, X) >= 0.0).astype(np.int64)


def forward(model: MlpModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidArgument("forward takes a single feature vector")
    return float(predict_proba(model, x)[0])


def _backprop(weights, biases, X, y, w, need_loss=True):
    """Gradients of mean_i w_i * BCE_i with respect to every parameter."""
    n = X.shape[0]
    acts, pre, z = _forward_cache(weights, biases, X)
    loss = None
    if need_loss:
        # log(1 + e^z) - y z is BCE written on the logit.
        loss = float(np.sum(w * (np.logaddexp(0.0, z) - y * z)) / n)
    delta = ((w * (expit(z) - y)) / n)[:, None]
    gW = [None] * len(weights)
    gb = [None] * len(weights)
    for l in range(len(weights) - 1, -1, -1):
        gW[l] = delta.T @ acts[l]
        gb[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ weights[l]) * (pre[l - 1] > 0.0)
    return loss, gW, gb


def _check_batch(model, X, y, sample_weights):
    X = _as_batch(model, X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.shape[0] == 0:
        raise InvalidArgument("empty batch")
    if y.shape[0] != X.shape[0]:
        raise InvalidArgument(f"{X.shape[0]} rows but {y.shape[0]} labels")
    if sample_weights is None:
        w = np.ones(X.shape[0])
    else:
        w = np.asarray(sample_weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != X.shape[0]:
            raise InvalidArgument(f"{X.shape[0]} rows but {w.shape[0]} sample weights")
        if not np.all(w > 0):
            raise InvalidArgument("sample weights must be positive")
    return X, y, w


def loss_and_gradients(model: MlpModel, X, y, sample_weights=None) -> tuple[float, GradientSet]:
    """Weighted mean binary cross-entropy and its exact gradient.

    The weighted loss is ``(1/n) * sum_i w_i * bce_i``; unit weights give the
    plain mean.
    """
    X, y, w = _check_batch(model, X, y, sample_weights)
    loss, gW, gb = _backprop(model.weights, model.biases, X, y, w)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    return loss, GradientSet(tuple(gW), tuple(gb))


def loss(model: MlpModel, X, y, sample_weights=None) -> float:
    X, y, w = _check_batch(model, X, y, sample_weights)
    z = _forward_cache(model.weights, model.biases, X)[2]
    return float(np.sum(w * (np.logaddexp(0.0, z) - y * z)) / X.shape[0])


def input_gradients(model: MlpModel, X, target: str = "logit") -> np.ndarray:
    """d(score)/d(input) for every row of ``X``.

    ``target`` is ``"logit"`` (pre-sigmoid score) or ``"probability"``.
    """
    if target not in ("logit", "probability"):
        raise InvalidArgument(f"unknown attribution target {target!r}")
    X = _as_batch(model, X)
    _, pre, z = _forward_cache(model.weights, model.biases, X)
    W = model.weights
    delta = np.ones((X.shape[0], 1))
    if target == "probability":
        p = expit(z)
        delta = (p * (1.0 - p))[:, None]
    for l in range(len(W) - 1, 0, -1):
        delta = (delta @ W[l]) * (pre[l - 1] > 0.0)
    return delta @ W[0]


def input_gradient(model: MlpModel, x, target: str = "logit") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidArgument("input_gradient takes a single feature vector")
    return input_gradients(model, x, target)[0]


def sgd_step(model: MlpModel, grads: GradientSet, lr: float) -> MlpModel:
    if not lr > 0:
        raise InvalidArgument(f"learning rate must be positive, got {lr}")
    if len(grads.weights) != len(model.weights) or len(grads.biases) != len(model.biases):
        raise InvalidArgument("gradient layer count does not match model")
    new_w, new_b = [], []
    for p, g in zip(model.weights + model.biases, grads.weights + grads.biases):
        if np.shape(g) != p.shape:
            raise InvalidArgument(f"gradient shape {np.shape(g)} does not match {p.shape}")
    for W, g in zip(model.weights, grads.weights):
        new_w.append(W - lr * np.asarray(g))
    for b, g in zip(model.biases, grads.biases):
        new_b.append(b - lr * np.asarray(g))
    return MlpModel(model.dims, tuple(new_w), tuple(new_b))


def flatten(model: MlpModel) -> np.ndarray:
    """Layer by layer: weights (row-major) then biases."""
    parts = []
    for W, b in zip(model.weights, model.biases):
        parts.append(W.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten(dims: Sequence[int], vector) -> MlpModel:
    dims = tuple(int(d) for d in dims)
    _check_dims(dims)
    vec = np.asarray(vector, dtype=np.float64).reshape(-1)
    if vec.shape[0] != param_count(dims):
        raise InvalidArgument(
            f"vector has {vec.shape[0]} entries, dims {list(dims)} need {param_count(dims)}"
        )
    weights, biases = [], []
    pos = 0
    for l in range(len(dims) - 1):
        size = dims[l + 1] * dims[l]
        weights.append(vec[pos:pos + size].reshape(dims[l + 1], dims[l]))
        pos += size
        biases.append(vec[pos:pos + dims[l + 1]])
        pos += dims[l + 1]
    return MlpModel(dims, tuple(weights), tuple(biases))


def is_finite(model: MlpModel) -> bool:
    return bool(np.all(np.isfinite(flatten(model))))


def save_checkpoint(path, model: MlpModel) -> None:
    """Header line ``dims=d0,d1,...`` followed by little-endian float64 params."""
    path = Path(path)
    header = ("dims=" + ",".join(str(d) for d in model.dims) + "\n").encode("ascii")
    path.write_bytes(header + flatten(model).astype("<f8").tobytes())


def load_checkpoint(path) -> MlpModel:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0 or not raw.startswith(b"dims="):
        raise InvalidArgument(f"{path}: missing dims header")
    dims = [int(d) for d in raw[5:nl].decode("ascii").split(",")]
    vec = np.frombuffer(raw[nl + 1:], dtype="<f8")
    return unflatten(dims, vec)

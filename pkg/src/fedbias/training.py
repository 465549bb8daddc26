"""Standalone, centralized and federated (FedAvg / FedProx) training.

Minibatch order is drawn from a generator keyed on
``(seed, party_id, round, local_epoch)``. Dropping one party therefore leaves
every other party's shuffles untouched, and a standalone run over epochs
``1..T`` sees exactly the shuffles a single-party federation sees over rounds
``1..T``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .data import PartyDataset, Split
from .errors import InvalidArgument, NotFound, NumericError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    rounds: int = 200
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.1
    centralized_lr: float | None = None
    fedprox_mu: float = 0.0
    seed: int = 0
    hidden_width: int = 32

    def __post_init__(self):
        if self.rounds < 0:
            raise InvalidArgument("rounds must be >= 0")
        if self.local_epochs < 1 or self.batch_size < 1 or self.hidden_width < 1:
            raise InvalidArgument("local_epochs, batch_size and hidden_width must be >= 1")
        if self.lr < 0 or (self.centralized_lr is not None and self.centralized_lr < 0):
            raise InvalidArgument("learning rates must be >= 0")
        if self.fedprox_mu < 0:
            raise InvalidArgument("fedprox_mu must be >= 0")
        if self.seed < 0:
            raise InvalidArgument("seed must be >= 0")

    def dims(self, input_dim: int) -> tuple[int, int, int]:
        return (input_dim, self.hidden_width, 1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RoundTrace:
    round: int
    global_before: nn.MlpModel
    locals: tuple[nn.MlpModel, ...]
    global_after: nn.MlpModel
    party_ids: tuple[int, ...] = field(default=())


def _train_loop(model: nn.MlpModel, data: Split, lr: float, batch_size: int,
                shuffle_keys: Sequence[Sequence[int]], sample_weights=None,
                anchor: nn.MlpModel | None = None, mu: float = 0.0) -> nn.MlpModel:
    """Minibatch SGD, one pass over ``data`` per entry of ``shuffle_keys``.

    Updates are ``p - lr * g`` on private copies: the same arithmetic as
    ``nn.sgd_step`` without allocating a model per step.
    """
    n = len(data)
    if n == 0:
        raise InvalidArgument("empty training set")
    weights = [W.copy() for W in model.weights]
    biases = [b.copy() for b in model.biases]
    if lr == 0 or not shuffle_keys:
        return model
    X, y = data.X, data.y.astype(np.float64)
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    if w.shape != (n,) or not np.all(w > 0):
        raise InvalidArgument("sample weights must be positive, one per training row")
    prox = anchor is not None and mu > 0
    for key in shuffle_keys:
        order = np.random.default_rng(list(key)).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, gW, gb = nn._backprop(weights, biases, X[idx], y[idx], w[idx], need_loss=False)
            for l in range(len(weights)):
                gw_l, gb_l = gW[l], gb[l]
                if prox:
                    gw_l = gw_l + mu * (weights[l] - anchor.weights[l])
                    gb_l = gb_l + mu * (biases[l] - anchor.biases[l])
                weights[l] = weights[l] - lr * gw_l
                biases[l] = biases[l] - lr * gb_l
    out = nn.MlpModel(model.dims, tuple(weights), tuple(biases))
    if not nn.is_finite(out):
        raise NumericError("training diverged to non-finite parameters")
    return out


def local_update(global_model: nn.MlpModel, party: PartyDataset, cfg: TrainingConfig,
                 round_idx: int = 1, sample_weights=None) -> nn.MlpModel:
    """``cfg.local_epochs`` of SGD from the broadcast model, with the FedProx pull if enabled."""
    if party.n_k == 0:
        raise InvalidArgument(f"party {party.party_id} has no training rows")
    keys = [(cfg.seed, party.party_id, round_idx, e) for e in range(cfg.local_epochs)]
    return _train_loop(global_model, party.train, cfg.lr, cfg.batch_size, keys,
                       sample_weights, anchor=global_model, mu=cfg.fedprox_mu)


def aggregate(locals_: Sequence[nn.MlpModel], sizes: Sequence[float]) -> nn.MlpModel:
    """Size-weighted parameter mean, reduced in the given (party) order.

    Computed as ``first + sum_k w_k * (theta_k - first)`` so identical inputs
    come back bit-for-bit.
    """
    if not locals_:
        raise InvalidArgument("nothing to aggregate")
    if len(locals_) != len(sizes):
        raise InvalidArgument(f"{len(locals_)} models but {len(sizes)} sizes")
    sizes = np.asarray(sizes, dtype=np.float64)
    if not np.all(sizes > 0):
        raise InvalidArgument("sizes must be positive")
    dims = locals_[0].dims
    if any(m.dims != dims for m in locals_):
        raise InvalidArgument("models have different shapes")
    frac = sizes / sizes.sum()
    vecs = [nn.flatten(m) for m in locals_]
    ref = vecs[0]
    acc = np.zeros_like(ref)
    for f, v in zip(frac, vecs):
        acc = acc + f * (v - ref)
    return nn.unflatten(dims, ref + acc)


def _run_dir_write(run_dir: Path, trace: RoundTrace, sizes) -> None:
    check = aggregate(trace.locals, sizes)
    if not check == trace.global_after:
        raise NumericError(f"round {trace.round}: aggregate does not reproduce global model")
    d = run_dir / f"round_{trace.round}"
    d.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(d / "global_before.ckpt", trace.global_before)
    nn.save_checkpoint(d / "global_after.ckpt", trace.global_after)
    for pid, m in zip(trace.party_ids, trace.locals):
        nn.save_checkpoint(d / f"local_{pid}.ckpt", m)


def run_federated(parties: Sequence[PartyDataset], cfg: TrainingConfig, sample_weights=None,
                  run_dir=None, on_round: Callable[[RoundTrace], None] | None = None,
                  keep_traces: bool = True):
    """FedAvg with every party in every round (FedProx when ``cfg.fedprox_mu > 0``).

    ``sample_weights`` is an optional per-party list of per-row weights.
    When ``run_dir`` is given each round is checkpointed as it completes.
    Returns ``(final_model, traces)``.
    """
    if not parties:
        raise InvalidArgument("need at least one party")
    dims = cfg.dims(parties[0].schema.width)
    sizes = [p.n_k for p in parties]
    pids = tuple(p.party_id for p in parties)
    if sample_weights is None:
        sample_weights = [None] * len(parties)
    model = nn.init_model(dims, cfg.seed)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_run_config(run_dir, cfg, parties)
    traces = []
    for t in range(1, cfg.rounds + 1):
        locals_ = tuple(
            local_update(model, p, cfg, t, w) for p, w in zip(parties, sample_weights)
        )
        new = aggregate(locals_, sizes)
        trace = RoundTrace(t, model, locals_, new, pids)
        if run_dir is not None:
            _run_dir_write(run_dir, trace, sizes)
        if on_round is not None:
            on_round(trace)
        if keep_traces:
            traces.append(trace)
        model = new
        if t % 50 == 0:
            log.debug("round %d/%d", t, cfg.rounds)
    if run_dir is not None:
        nn.save_checkpoint(run_dir / "final.ckpt", model)
        write_manifest(run_dir, cfg, parties, complete=True)
    return model, traces


def train_standalone(party: PartyDataset, cfg: TrainingConfig, sample_weights=None) -> nn.MlpModel:
    """``cfg.rounds`` epochs on one party's data, from the shared initial model."""
    if party.n_k == 0:
        raise InvalidArgument(f"party {party.party_id} has no training rows")
    model = nn.init_model(cfg.dims(party.schema.width), cfg.seed)
    keys = [(cfg.seed, party.party_id, e, 0) for e in range(1, cfg.rounds + 1)]
    return _train_loop(model, party.train, cfg.lr, cfg.batch_size, keys, sample_weights)


def pool(parties: Sequence[PartyDataset]) -> PartyDataset:
    """Union of all training (and test) rows; takes the first party's id."""
    if not parties:
        raise InvalidArgument("need at least one party")
    return PartyDataset(
        parties[0].party_id,
        Split.concat([p.train for p in parties]),
        Split.concat([p.test for p in parties]),
        parties[0].schema,
    )


def train_centralized(parties: Sequence[PartyDataset], cfg: TrainingConfig, sample_weights=None) -> nn.MlpModel:
    pooled = pool(parties)
    if sample_weights is not None and not isinstance(sample_weights, np.ndarray):
        sample_weights = np.concatenate([np.asarray(w, dtype=np.float64) for w in sample_weights])
    lr = cfg.lr if cfg.centralized_lr is None else cfg.centralized_lr
    model = nn.init_model(cfg.dims(pooled.schema.width), cfg.seed)
    keys = [(cfg.seed, pooled.party_id, e, 0) for e in range(1, cfg.rounds + 1)]
    return _train_loop(model, pooled.train, lr, cfg.batch_size, keys, sample_weights)


# ----------------------------------------------------------------- run directory


def write_run_config(run_dir: Path, cfg: TrainingConfig, parties: Sequence[PartyDataset]) -> None:
    (run_dir / "config.json").write_text(json.dumps(
        {"training": cfg.to_dict(), "party_ids": [p.party_id for p in parties],
         "sizes": [p.n_k for p in parties]}, indent=1, sort_keys=True))


def write_manifest(run_dir: Path, cfg: TrainingConfig, parties: Sequence[PartyDataset], complete: bool) -> None:
    (run_dir / "manifest.json").write_text(json.dumps(
        {"rounds": cfg.rounds, "party_ids": [p.party_id for p in parties],
         "sizes": [p.n_k for p in parties], "dims": list(cfg.dims(parties[0].schema.width)),
         "complete": complete}, indent=1, sort_keys=True))


def read_manifest(run_dir) -> dict:
    path = Path(run_dir) / "manifest.json"
    if not path.exists():
        raise NotFound(f"{path} missing (run incomplete?)")
    m = json.loads(path.read_text())
    if not m.get("complete"):
        raise NotFound(f"{run_dir}: run not complete")
    return m


def load_trace(run_dir, t: int, party_ids: Sequence[int] | None = None) -> RoundTrace:
    run_dir = Path(run_dir)
    if party_ids is None:
        party_ids = read_manifest(run_dir)["party_ids"]
    d = run_dir / f"round_{t}"
    names = ["global_before", "global_after", *(f"local_{k}" for k in party_ids)]
    missing = [n for n in names if not (d / f"{n}.ckpt").exists()]
    if missing:
        raise NotFound(f"{d}: missing checkpoints {missing}")
    return RoundTrace(
        t,
        nn.load_checkpoint(d / "global_before.ckpt"),
        tuple(nn.load_checkpoint(d / f"local_{k}.ckpt") for k in party_ids),
        nn.load_checkpoint(d / "global_after.ckpt"),
        tuple(party_ids),
    )


def iter_traces(run_dir, stride: int = 1):
    """Yield persisted traces for rounds ``stride, 2*stride, ...`` (every round if stride=1)."""
    m = read_manifest(run_dir)
    if stride < 1:
        raise InvalidArgument("stride must be >= 1")
    for t in range(stride, m["rounds"] + 1, stride):
        yield load_trace(run_dir, t, m["party_ids"])

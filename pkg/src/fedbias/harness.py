"""Config-driven experiments: train every regime per seed, then audit the checkpoints.

Layout under ``<output_dir>/<name>-<hash12>/``::

    config.json
    seed_<s>/data/parties.npz        encoded party datasets
    seed_<s>/data/manifest.json      per-party cell counts
    seed_<s>/baselines/standalone_<k>.ckpt, centralized.ckpt
    seed_<s>/fedavg/round_<t>/{global_before,global_after,local_<k>}.ckpt
    seed_<s>/reweigh_<scope>/...     when reweighing is enabled
    seed_<s>/fedprox/...             when FedProx is enabled
    seed_<s>/DONE.json
    report/summary.json
    report/seed_<s>/{benefits,influence,top_pairs,...}
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import shutil
import statistics
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from . import attribution, audit, data, intervention, nn, training
from .errors import ConfigError, NotFound, NumericError
from .metrics import pearson

log = logging.getLogger(__name__)

_BOOL = {"type": "boolean"}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_NUM = {"type": "number"}

SYNTHETIC_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "d_num": _POS_INT, "K": {"type": "integer", "minimum": 2},
        "n_train": _POS_INT, "n_test": _POS_INT,
        "bias_levels": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "seed": _NONNEG_INT,
        "group_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "signal": {"type": "number", "minimum": 0},
        "corrupt_test": _BOOL,
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["data"],
    "properties": {
        "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "output_dir": {"type": "string"},
        "seeds": {"type": "array", "items": _NONNEG_INT, "minItems": 1},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "minProperties": 1,
            "maxProperties": 1,
            "properties": {
                "synthetic": SYNTHETIC_SCHEMA,
                "csv": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["path", "schema", "partition"],
                    "properties": {
                        "path": {"type": "string"},
                        "schema": {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["label", "sensitive", "categorical"],
                            "properties": {
                                "label": {"type": "string"},
                                "sensitive": {"type": "string"},
                                "positive_label": {"type": "string"},
                                "numeric": {"type": "array", "items": {"type": "string"}},
                                "categorical": {
                                    "type": "object",
                                    "additionalProperties": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                                },
                            },
                        },
                        "partition": {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["num_parties"],
                            "properties": {
                                "mode": {"enum": list(data.PartitionSpec.MODES)},
                                "num_parties": _POS_INT,
                                "minority_ratio": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                            },
                        },
                        "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    },
                },
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rounds": _NONNEG_INT, "local_epochs": _POS_INT, "batch_size": _POS_INT,
                "lr": {"type": "number", "minimum": 0},
                "centralized_lr": {"type": ["number", "null"], "minimum": 0},
                "fedprox_mu": {"type": "number", "minimum": 0},
                "hidden_width": _POS_INT,
            },
        },
        "runs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "reweigh": {"type": "array", "items": {"enum": ["local", "global"]}, "uniqueItems": True},
                "fedprox": _BOOL,
            },
        },
        "audit": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "metric": {"enum": ["dp", "eo", "acc_gap"]},
                "stride": _POS_INT,
                "benefits": _BOOL, "influence": _BOOL, "dynamics": _BOOL,
                "attribution": _BOOL, "norms": _BOOL, "sweeps": _BOOL, "reweigh": _BOOL,
                "sweep_factors": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                "attribution_steps": _POS_INT,
                "top_pairs": _NONNEG_INT,
            },
        },
    },
}

DEFAULTS: dict[str, Any] = {
    "name": "experiment",
    "output_dir": "runs",
    "seeds": [0, 1, 2, 3, 4],
    "training": {
        "rounds": 200, "local_epochs": 1, "batch_size": 32, "lr": 0.1,
        "centralized_lr": None, "fedprox_mu": 0.0, "hidden_width": 32,
    },
    "runs": {"reweigh": ["local"], "fedprox": False},
    "audit": {
        "metric": "dp", "stride": 1,
        "benefits": True, "influence": True, "dynamics": True, "attribution": True,
        "norms": True, "sweeps": True, "reweigh": True,
        "sweep_factors": [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0],
        "attribution_steps": 64, "top_pairs": 5,
    },
}

AUDIT_TOGGLES = ("benefits", "influence", "dynamics", "attribution", "norms", "sweeps", "reweigh")


def _merge(defaults, given):
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_config(raw: dict) -> dict:
    """Schema check (unknown keys rejected), then fill defaults."""
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {path}: {e.message}") from None
    cfg = _merge(DEFAULTS, raw)
    if "synthetic" in cfg["data"]:
        syn = cfg["data"]["synthetic"]
        try:
            data.SyntheticConfig(**syn)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"config error at data/synthetic: {e}") from None
    try:
        training_config(cfg, 0)
    except ValueError as e:
        raise ConfigError(f"config error at training: {e}") from None
    return cfg


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise NotFound(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return validate_config(raw)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    """Digest of everything that changes trained checkpoints."""
    relevant = {k: cfg[k] for k in ("data", "training", "runs")}
    return hashlib.sha256(canonical_json(relevant).encode()).hexdigest()


def experiment_dir(cfg: dict) -> Path:
    return Path(cfg["output_dir"]) / f"{cfg['name']}-{config_hash(cfg)[:12]}"


def training_config(cfg: dict, seed: int) -> training.TrainingConfig:
    return training.TrainingConfig(seed=seed, **cfg["training"])


def build_parties(cfg: dict, seed: int) -> list[data.PartyDataset]:
    src = cfg["data"]
    if "synthetic" in src:
        syn = dict(src["synthetic"])
        syn["seed"] = syn.get("seed", 0) + seed
        return data.generate_synthetic(data.SyntheticConfig(**syn))
    c = src["csv"]
    X, y, a, schema = data.load_csv(c["path"], c["schema"])
    part = c["partition"]
    spec = data.PartitionSpec(mode=part.get("mode", "iid"), num_parties=part["num_parties"],
                              minority_ratio=part.get("minority_ratio", 0.8), seed=seed)
    return data.partition(X, y, a, spec, schema, test_fraction=c.get("test_fraction", 0.5))


# ------------------------------------------------------------------------ run


def _run_seed(cfg: dict, seed: int) -> str:
    exp = experiment_dir(cfg)
    seed_dir = exp / f"seed_{seed}"
    h = config_hash(cfg)
    done = seed_dir / "DONE.json"
    if done.exists() and json.loads(done.read_text()).get("config_hash") == h:
        log.info("seed %d already complete, skipping", seed)
        return "skipped"
    if seed_dir.exists():
        shutil.rmtree(seed_dir)
    (seed_dir / "data").mkdir(parents=True)
    (seed_dir / "baselines").mkdir()
    parties = build_parties(cfg, seed)
    data.save_parties(seed_dir / "data" / "parties.npz", parties)
    audit.write_json(seed_dir / "data" / "manifest.json", data.manifest(parties))

    tcfg = training_config(cfg, seed)
    plain = training.TrainingConfig(**{**tcfg.to_dict(), "fedprox_mu": 0.0})
    log.info("seed %d: standalone x%d", seed, len(parties))
    for p in parties:
        nn.save_checkpoint(seed_dir / "baselines" / f"standalone_{p.party_id}.ckpt",
                           training.train_standalone(p, plain))
    log.info("seed %d: centralized", seed)
    nn.save_checkpoint(seed_dir / "baselines" / "centralized.ckpt", training.train_centralized(parties, plain))
    log.info("seed %d: fedavg", seed)
    training.run_federated(parties, plain, run_dir=seed_dir / "fedavg", keep_traces=False)
    for scope in cfg["runs"]["reweigh"]:
        log.info("seed %d: fedavg + %s reweighing", seed, scope)
        spec = intervention.build_reweigh_spec(parties, scope)
        intervention.run_federated_reweighed(parties, plain, spec, run_dir=seed_dir / f"reweigh_{scope}",
                                             keep_traces=False)
    if cfg["runs"]["fedprox"] and tcfg.fedprox_mu == 0:
        log.warning("fedprox run requested but training.fedprox_mu is 0; skipped")
    if cfg["runs"]["fedprox"] and tcfg.fedprox_mu > 0:
        log.info("seed %d: fedprox mu=%g", seed, tcfg.fedprox_mu)
        training.run_federated(parties, tcfg, run_dir=seed_dir / "fedprox", keep_traces=False)
    audit.write_json(done, {"config_hash": h, "seed": seed})
    return "trained"


def cmd_run(cfg: dict, seeds=None, parallel: bool = False) -> Path:
    seeds = list(cfg["seeds"] if seeds is None else seeds)
    exp = experiment_dir(cfg)
    exp.mkdir(parents=True, exist_ok=True)
    (exp / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    if parallel and len(seeds) > 1:
        with ProcessPoolExecutor() as pool:
            list(pool.map(_run_seed, [cfg] * len(seeds), seeds))
    else:
        for s in seeds:
            _run_seed(cfg, s)
    return exp


# ---------------------------------------------------------------------- audit


def _pearson_defined(xs, ys):
    """Pearson r over the parties where both values are defined; None if fewer than 3."""
    pairs = [(x, y) for x, y in zip(xs, ys)
             if x is not None and y is not None and not (np.isnan(x) or np.isnan(y))]
    if len(pairs) < 3:
        return None
    return pearson([p[0] for p in pairs], [p[1] for p in pairs])


def _rank_from_min(values, idx) -> int:
    """1 if values[idx] is the smallest, 2 if second smallest, ... (NaN sorts last)."""
    order = sorted(range(len(values)), key=lambda k: (bool(np.isnan(values[k])), values[k], k))
    return order.index(idx) + 1


def _audit_seed(cfg: dict, exp: Path, seed: int, toggles: dict) -> dict:
    """Write one seed's report files and return its scalar summary."""
    seed_dir = exp / f"seed_{seed}"
    if not (seed_dir / "DONE.json").exists():
        raise NotFound(f"{seed_dir}: run incomplete (DONE.json missing)")
    out = exp / "report" / f"seed_{seed}"
    out.mkdir(parents=True, exist_ok=True)
    parties = data.load_parties(seed_dir / "data" / "parties.npz")
    schema = parties[0].schema
    metric = cfg["audit"]["metric"]
    stride = cfg["audit"]["stride"]
    fed_dir = seed_dir / "fedavg"
    stand, cen = audit.load_baselines(seed_dir, parties)
    fl = audit.load_final(fed_dir)
    summary: dict[str, Any] = {}

    primary = audit.benefits_from_models(stand, cen, fl, parties, metric)
    sgap = primary.column("standalone_gap")
    defined = [k for k, g in enumerate(sgap) if g is not None]
    if not defined:
        raise NumericError(f"seed {seed}: no party has a defined standalone {metric} gap")
    most = max(defined, key=lambda k: (sgap[k], -k))
    least = min(defined, key=lambda k: (sgap[k], k))
    summary["most_biased_party"] = parties[most].party_id
    summary["least_biased_party"] = parties[least].party_id

    if toggles["benefits"]:
        reports = {m: audit.benefits_from_models(stand, cen, fl, parties, m) for m in ("dp", "eo", "acc_gap")}
        audit.write_json(out / "benefits.json", {m: r.to_dict() for m, r in reports.items()})
        for m, r in reports.items():
            for key, v in r.averages.items():
                summary[f"benefits.{m}.{key}"] = v
        summary["benefits.pearson_standalone_vs_fairness_benefit"] = _pearson_defined(
            sgap, primary.column("fairness_benefit_fl"))

    if toggles["influence"]:
        inf = audit.compute_influence(fed_dir, parties, metric, stride)
        top = audit.influence_top_pairs(inf, cfg["audit"]["top_pairs"], cfg["audit"]["top_pairs"])
        np.save(out / "influence_per_round.npy", inf.per_round)
        d = inf.to_dict()
        d["per_round_path"] = "influence_per_round.npy"
        d["stride"] = stride
        audit.write_json(out / "influence.json", d)
        audit.write_json(out / "top_pairs.json", top.to_dict())
        mean_inf = inf.mean_influence.tolist()
        summary["influence.pearson_standalone_vs_mean_influence"] = _pearson_defined(sgap, mean_inf)
        summary["influence.most_biased_rank_from_min"] = _rank_from_min(mean_inf, most)
        summary["influence.mean_influence_most_biased"] = mean_inf[most]
        summary["influence.mean_influence_least_biased"] = mean_inf[least]

    if toggles["dynamics"]:
        for tag, k in (("most_biased", most), ("least_biased", least)):
            series = audit.fairness_dynamics(fed_dir, parties[k], metric, stride)
            series.write_csv(out / f"dynamics_{parties[k].party_id}.csv")
            summary[f"dynamics.{tag}.mean_local_minus_global"] = series.mean_difference()

    if toggles["attribution"]:
        steps = cfg["audit"]["attribution_steps"]
        models = {"fedavg": fl, "centralized": cen}
        per_model_abs = {name: [] for name in [*models, "standalone"]}
        max_resid = 0.0
        for k, p in enumerate(parties):
            for name, m in [*models.items(), ("standalone", stand[k])]:
                s = attribution.group_attribution_summary(m, p, schema, steps)
                per_model_abs[name].append(s["mean_abs_sensitive"])
                max_resid = max(max_resid, s["residual"]["max_abs"])
                if k in (most, least):
                    audit.write_json(out / f"attribution_{name}_{p.party_id}.json", s)
        for name, vals in per_model_abs.items():
            summary[f"attribution.{name}.mean_abs_sensitive"] = float(np.mean(vals))
        summary["attribution.max_completeness_residual"] = max_resid

    if toggles["norms"]:
        rows = intervention.norm_series(training.iter_traces(fed_dir, stride), schema)
        intervention.write_norms_csv(out / "norms.csv", rows)
        last = max(r[0] for r in rows) if rows else None
        final_local = {who: v for t, who, v in rows if t == last and who != "global"}
        if final_local:
            summary["norms.final_global"] = next(v for t, who, v in rows if t == last and who == "global")
            summary["norms.pearson_standalone_vs_final_local"] = _pearson_defined(
                sgap, [final_local[str(p.party_id)] for p in parties])

    if toggles["sweeps"]:
        factors = sorted(set(cfg["audit"]["sweep_factors"]) | {0.1, 1.0, 10.0})
        for target in intervention.TARGETS:
            sweep = intervention.scaling_sweep(fl, parties, schema, factors, target)
            sweep.to_csv(out / f"sweep_{target}.csv")
            for f in factors:
                e = sweep.entry(f)
                for key in ("accuracy", "dp", "eo"):
                    summary[f"sweeps.{target}.{f:g}.{key}"] = e[key]

    if toggles["reweigh"]:
        rows = {}
        for scope in cfg["runs"]["reweigh"]:
            model = audit.load_final(seed_dir / f"reweigh_{scope}")
            r = audit.benefits_from_models(stand, cen, model, parties, metric)
            rows[scope] = r.to_dict()
            summary[f"reweigh.{scope}.fl_gap"] = r.averages["fl_gap"]
            summary[f"reweigh.{scope}.fl_acc"] = r.averages["fl_acc"]
        summary["reweigh.fedavg.fl_gap"] = primary.averages["fl_gap"]
        summary["reweigh.fedavg.fl_acc"] = primary.averages["fl_acc"]
        if rows:
            audit.write_json(out / "reweigh.json", rows)

    if cfg["runs"]["fedprox"] and (seed_dir / "fedprox").exists() and toggles["benefits"]:
        r = audit.benefits_from_models(stand, cen, audit.load_final(seed_dir / "fedprox"), parties, metric)
        audit.write_json(out / "fedprox_benefits.json", r.to_dict())
        summary["fedprox.fl_gap"] = r.averages["fl_gap"]
        summary["fedprox.fl_acc"] = r.averages["fl_acc"]
    return summary


def _mean_stdev(values):
    vals = [v for v in values if v is not None and not (isinstance(v, float) and np.isnan(v))]
    if not vals:
        return {"mean": None, "stdev": None, "n": 0}
    sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
    return {"mean": statistics.fmean(vals), "stdev": sd, "n": len(vals)}


def cmd_audit(cfg: dict, exp: Path | None = None, seeds=None, toggles: dict | None = None) -> Path:
    """Audit a completed experiment. Returns the path of ``summary.json``."""
    exp = Path(exp) if exp is not None else experiment_dir(cfg)
    seeds = list(cfg["seeds"] if seeds is None else seeds)
    toggles = {t: cfg["audit"][t] for t in AUDIT_TOGGLES} if toggles is None else toggles
    missing = [f"seed_{s}/DONE.json" for s in seeds if not (exp / f"seed_{s}" / "DONE.json").exists()]
    if missing:
        raise NotFound(f"{exp}: incomplete run, missing {missing}")
    report = exp / "report"
    report.mkdir(parents=True, exist_ok=True)
    per_seed = {}
    if any(toggles.values()):
        for s in seeds:
            log.info("auditing seed %d", s)
            per_seed[str(s)] = _audit_seed(cfg, exp, s, toggles)
    keys = sorted({k for v in per_seed.values() for k in v})
    summary = {
        "config_hash": config_hash(cfg),
        "metric": cfg["audit"]["metric"],
        "seeds": seeds,
        "toggles": toggles,
        "per_seed": per_seed,
        "aggregate": {k: _mean_stdev([per_seed[str(s)].get(k) for s in seeds]) for k in keys},
    }
    path = report / "summary.json"
    audit.write_json(path, summary)
    return path


def cmd_generate(gen_cfg: dict, out: Path) -> Path:
    """Write one CSV per synthetic party plus a manifest."""
    try:
        jsonschema.validate(gen_cfg, SYNTHETIC_SCHEMA)
        syn = data.SyntheticConfig(**gen_cfg)
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {path}: {e.message}") from None
    except ValueError as e:
        raise ConfigError(str(e)) from None
    parties = data.generate_synthetic(syn)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for p in parties:
        data.write_party_csv(out / f"party_{p.party_id}.csv", p)
    m = data.manifest(parties)
    m["generator"] = {**gen_cfg, "bias_levels": list(syn.bias_levels)}
    audit.write_json(out / "manifest.json", m)
    return out

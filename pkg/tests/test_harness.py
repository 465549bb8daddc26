from __future__ import annotations

import csv
import json
import statistics
from collections import Counter

import pytest

from fedbias import cli, harness
from fedbias.errors import ConfigError, NotFound

TINY = {
    "name": "tiny",
    "seeds": [0, 1],
    "data": {"synthetic": {"K": 3, "n_train": 60, "n_test": 80, "d_num": 3, "bias_levels": [0.0, 0.4, 0.9]}},
    "training": {"rounds": 3, "hidden_width": 6},
    "audit": {"stride": 1, "attribution_steps": 8, "sweep_factors": [0.5]},
}


def make(tmp_path, **over):
    raw = json.loads(json.dumps(TINY))
    raw["output_dir"] = str(tmp_path / "runs")
    for k, v in over.items():
        raw[k] = v
    return harness.validate_config(raw)


def write_cfg(tmp_path, raw, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return p


class TestConfig:
    def test_unknown_key(self, tmp_path):
        raw = dict(TINY, trianing={"rounds": 1})
        with pytest.raises(ConfigError, match="<root>"):
            harness.validate_config(raw)

    def test_nested_path(self):
        raw = json.loads(json.dumps(TINY))
        raw["training"]["lr"] = -1
        with pytest.raises(ConfigError, match="training/lr"):
            harness.validate_config(raw)
        raw = json.loads(json.dumps(TINY))
        raw["audit"]["bogus"] = True
        with pytest.raises(ConfigError, match="audit"):
            harness.validate_config(raw)

    def test_bad_synthetic(self):
        raw = json.loads(json.dumps(TINY))
        raw["data"]["synthetic"]["bias_levels"] = [0.1]
        with pytest.raises(ConfigError, match="data/synthetic"):
            harness.validate_config(raw)

    def test_defaults(self):
        cfg = harness.validate_config({"data": {"synthetic": {}}})
        assert cfg["seeds"] == [0, 1, 2, 3, 4]
        assert cfg["training"]["rounds"] == 200 and cfg["audit"]["stride"] == 1

    def test_hash_tracks_training(self, tmp_path):
        base = make(tmp_path)
        h = harness.config_hash(base)
        for field, value in [("rounds", 4), ("lr", 0.05), ("batch_size", 8), ("local_epochs", 2),
                             ("fedprox_mu", 0.1), ("hidden_width", 7), ("centralized_lr", 0.01)]:
            cfg = make(tmp_path, training={**TINY["training"], field: value})
            assert harness.config_hash(cfg) != h, field
        assert harness.config_hash(make(tmp_path, seeds=[9])) == h
        assert harness.config_hash(make(tmp_path, audit={"stride": 2})) == h

    def test_hash_canonical(self, tmp_path):
        explicit = make(tmp_path, training={**TINY["training"], "lr": 0.1, "batch_size": 32})
        assert harness.config_hash(explicit) == harness.config_hash(make(tmp_path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(NotFound):
            harness.load_config(tmp_path / "none.json")
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigError):
            harness.load_config(tmp_path / "bad.json")


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("tiny")
    cfg = make(tmp, runs={"reweigh": ["local", "global"], "fedprox": True},
               training={**TINY["training"], "fedprox_mu": 0.5})
    exp = harness.cmd_run(cfg)
    summary = harness.cmd_audit(cfg)
    return cfg, exp, summary


class TestRunAudit:
    def test_layout(self, tiny_run):
        cfg, exp, _ = tiny_run
        for s in (0, 1):
            d = exp / f"seed_{s}"
            assert (d / "DONE.json").exists()
            assert (d / "fedavg" / "final.ckpt").exists() and (d / "fedprox" / "final.ckpt").exists()
            assert (d / "reweigh_local" / "round_3" / "local_2.ckpt").exists()
            assert (d / "reweigh_global" / "final.ckpt").exists()
            assert (d / "baselines" / "centralized.ckpt").exists()
            assert json.loads((d / "data" / "manifest.json").read_text())["parties"][0]["n_train"] == 60

    def test_idempotent(self, tiny_run, caplog):
        cfg, exp, _ = tiny_run
        before = {p: p.stat().st_mtime_ns for p in exp.rglob("*.ckpt")}
        with caplog.at_level("INFO"):
            harness.cmd_run(cfg)
        assert sum("already complete" in r.message for r in caplog.records) == 2
        assert before == {p: p.stat().st_mtime_ns for p in exp.rglob("*.ckpt")}

    def test_report_files(self, tiny_run):
        cfg, exp, _ = tiny_run
        rep = exp / "report" / "seed_0"
        names = {p.name for p in rep.iterdir()}
        for n in ("benefits.json", "influence.json", "top_pairs.json", "norms.csv",
                  "sweep_sensitive.csv", "sweep_other.csv", "reweigh.json", "fedprox_benefits.json"):
            assert n in names
        assert any(n.startswith("dynamics_") for n in names)
        assert any(n.startswith("attribution_fedavg_") for n in names)

    def test_summary_averages(self, tiny_run):
        cfg, exp, path = tiny_run
        s = json.loads(path.read_text())
        assert s["seeds"] == [0, 1]
        for key, agg in s["aggregate"].items():
            vals = [s["per_seed"][str(k)][key] for k in (0, 1) if s["per_seed"][str(k)].get(key) is not None]
            if not vals:
                assert agg["mean"] is None
                continue
            assert agg["mean"] == pytest.approx(sum(vals) / len(vals), rel=1e-12, abs=1e-15)
            assert agg["stdev"] == pytest.approx(statistics.stdev(vals) if len(vals) > 1 else 0.0, abs=1e-15)

    def test_audit_rerun_reproduces(self, tiny_run):
        cfg, exp, path = tiny_run
        first = path.read_bytes()
        assert harness.cmd_audit(cfg).read_bytes() == first

    def test_toggles_off(self, tiny_run):
        cfg, exp, _ = tiny_run
        out = exp.parent / "off"
        import shutil

        shutil.copytree(exp, out, ignore=shutil.ignore_patterns("report"))
        path = harness.cmd_audit(cfg, exp=out, toggles={t: False for t in harness.AUDIT_TOGGLES})
        assert [p.name for p in (out / "report").iterdir()] == ["summary.json"]
        assert json.loads(path.read_text())["per_seed"] == {}

    def test_incomplete(self, tmp_path):
        cfg = make(tmp_path, seeds=[3])
        with pytest.raises(NotFound, match="seed_3"):
            harness.cmd_audit(cfg)


def test_two_seeds_two_dirs(tmp_path):
    cfg = make(tmp_path, seeds=[1, 2], training={"rounds": 1, "hidden_width": 4}, runs={"reweigh": []})
    exp = harness.cmd_run(cfg)
    assert sorted(p.name for p in exp.glob("seed_*")) == ["seed_1", "seed_2"]
    assert all((exp / f"seed_{s}" / "DONE.json").exists() for s in (1, 2))


def test_single_seed_stdev_zero(tmp_path):
    cfg = make(tmp_path, seeds=[0], training={"rounds": 1, "hidden_width": 4}, runs={"reweigh": []},
               audit={"attribution": False, "reweigh": False, "sweeps": False})
    harness.cmd_run(cfg)
    s = json.loads(harness.cmd_audit(cfg).read_text())
    assert s["aggregate"] and all(v["stdev"] in (0.0, None) for v in s["aggregate"].values())


def test_csv_source(tmp_path):
    lines = ["age,sex,income"]
    for i in range(80):
        lines.append(f"{20 + i % 40},{'F' if i % 3 else 'M'},{'yes' if i % 4 == 0 else 'no'}")
    (tmp_path / "d.csv").write_text("\n".join(lines) + "\n")
    raw = {"name": "csv", "output_dir": str(tmp_path / "runs"), "seeds": [0],
           "data": {"csv": {"path": str(tmp_path / "d.csv"),
                            "schema": {"label": "income", "sensitive": "sex", "positive_label": "yes",
                                       "categorical": {"sex": ["F", "M"]}, "numeric": ["age"]},
                            "partition": {"mode": "minority_ratio_split", "num_parties": 2},
                            "test_fraction": 0.5}},
           "training": {"rounds": 2, "hidden_width": 4},
           "audit": {"attribution_steps": 4, "sweep_factors": [1.0]}}
    cfg = harness.validate_config(raw)
    harness.cmd_run(cfg)
    s = json.loads(harness.cmd_audit(cfg).read_text())
    assert "0" in s["per_seed"]


class TestGenerate:
    GEN = {"K": 4, "n_train": 30, "n_test": 20, "d_num": 2, "seed": 7}

    def test_files(self, tmp_path):
        out = harness.cmd_generate(self.GEN, tmp_path / "a")
        assert sorted(p.name for p in out.glob("party_*.csv")) == [f"party_{k}.csv" for k in range(4)]
        assert (out / "manifest.json").exists()

    def test_deterministic(self, tmp_path):
        a = harness.cmd_generate(self.GEN, tmp_path / "a")
        b = harness.cmd_generate(self.GEN, tmp_path / "b")
        for p in a.iterdir():
            assert p.read_bytes() == (b / p.name).read_bytes()

    def test_manifest_recount(self, tmp_path):
        out = harness.cmd_generate(self.GEN, tmp_path / "a")
        m = json.loads((out / "manifest.json").read_text())
        for entry in m["parties"]:
            with open(out / f"party_{entry['party_id']}.csv", newline="") as fh:
                rows = list(csv.DictReader(fh))
            for split in ("train", "test"):
                counts = Counter(f"{r['group']},{r['label']}" for r in rows if r["split"] == split)
                assert {k: v for k, v in entry["cells"][split].items() if v} == dict(counts)
            assert entry["n_train"] == sum(r["split"] == "train" for r in rows)

    def test_invalid(self, tmp_path):
        with pytest.raises(ConfigError):
            harness.cmd_generate({"K": 1}, tmp_path / "x")
        with pytest.raises(ConfigError):
            harness.cmd_generate({"K": 3, "colour": "red"}, tmp_path / "x")


class TestCli:
    def test_exit_codes(self, tmp_path):
        assert cli.main(["run", "--config", str(tmp_path / "missing.json")]) == 3
        bad = write_cfg(tmp_path, {"data": {"synthetic": {}}, "extra": 1})
        assert cli.main(["run", "--config", str(bad)]) == 2
        raw = dict(TINY, output_dir=str(tmp_path / "runs"))
        good = write_cfg(tmp_path, raw, "good.json")
        assert cli.main(["audit", "--config", str(good)]) == 3
        assert cli.main(["run", "--config", str(good), "--seeds", "x"]) == 2

    def test_generate_run_audit_sweep(self, tmp_path, capsys):
        raw = dict(TINY, output_dir=str(tmp_path / "runs"), training={"rounds": 2, "hidden_width": 4})
        cfg = write_cfg(tmp_path, raw)
        assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "gen")]) == 0
        assert len(list((tmp_path / "gen").glob("party_*.csv"))) == 3
        assert cli.main(["run", "--config", str(cfg), "--seeds", "0", "--out", str(tmp_path / "o")]) == 0
        assert cli.main(["sweep", "--config", str(cfg), "--seeds", "0", "--out", str(tmp_path / "o")]) == 0
        exp = next((tmp_path / "o").glob("tiny-*"))
        assert {p.name for p in (exp / "report" / "seed_0").iterdir()} == {"sweep_sensitive.csv", "sweep_other.csv"}
        assert cli.main(["audit", "--config", str(cfg), "--seeds", "0", "--stride", "2",
                         "--out", str(tmp_path / "o")]) == 0
        inf = json.loads((exp / "report" / "seed_0" / "influence.json").read_text())
        assert inf["rounds"] == [2]
        assert capsys.readouterr().out.strip().endswith("summary.json")

    def test_parallel_matches_sequential(self, tmp_path):
        raw = dict(TINY, training={"rounds": 2, "hidden_width": 4}, runs={"reweigh": []})
        seq = write_cfg(tmp_path, dict(raw, output_dir=str(tmp_path / "seq")), "seq.json")
        par = write_cfg(tmp_path, dict(raw, output_dir=str(tmp_path / "par")), "par.json")
        assert cli.main(["run", "--config", str(seq)]) == 0
        assert cli.main(["run", "--config", str(par), "--parallel-seeds"]) == 0
        a = sorted(p.relative_to(tmp_path / "seq") for p in (tmp_path / "seq").rglob("*.ckpt"))
        b = sorted(p.relative_to(tmp_path / "par") for p in (tmp_path / "par").rglob("*.ckpt"))
        assert a == b
        assert all((tmp_path / "seq" / p).read_bytes() == (tmp_path / "par" / p).read_bytes() for p in a)

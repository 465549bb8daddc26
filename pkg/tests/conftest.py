from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import pytest

from fedbias import data, harness, nn


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_model(rng, dims=(6, 4, 1), scale=1.0) -> nn.MlpModel:
    weights = tuple(rng.normal(scale=scale, size=(dims[l + 1], dims[l])) for l in range(len(dims) - 1))
    biases = tuple(rng.normal(scale=scale, size=dims[l + 1]) for l in range(len(dims) - 1))
    return nn.MlpModel(tuple(dims), weights, biases)


def small_parties(K=3, n_train=60, n_test=80, seed=0, bias_levels=None, d_num=3):
    cfg = data.SyntheticConfig(d_num=d_num, K=K, n_train=n_train, n_test=n_test, seed=seed,
                               bias_levels=bias_levels)
    return data.generate_synthetic(cfg)


@pytest.fixture
def parties():
    return small_parties()


# ---------------------------------------------------------------- benchmark

ROOT = Path(__file__).resolve().parents[1]
BENCHMARK_CONFIG = ROOT / "configs" / "benchmark.json"
CRITERIA: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])


def benchmark_config(output_dir) -> dict:
    cfg = harness.load_config(BENCHMARK_CONFIG)
    cfg["output_dir"] = str(output_dir)
    return cfg


def run_pipeline(output_dir) -> tuple[dict, Path, Path]:
    cfg = benchmark_config(output_dir)
    exp = harness.cmd_run(cfg)
    return cfg, exp, harness.cmd_audit(cfg)


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    """The 5-seed synthetic benchmark, trained and audited once per session.

    Set FEDBIAS_BENCH_DIR to keep the trained runs between sessions; training
    is skipped for seeds already complete there.
    """
    out = os.environ.get("FEDBIAS_BENCH_DIR") or tmp_path_factory.mktemp("benchmark")
    cfg, exp, summary = run_pipeline(out)
    return cfg, exp, json.loads(summary.read_text()), summary

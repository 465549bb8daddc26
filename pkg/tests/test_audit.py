from __future__ import annotations

import json

import numpy as np
import pytest

from fedbias import audit, data, nn, training
from fedbias.errors import InvalidArgument, NotFound

from conftest import small_parties


def const_model(dims, value):
    return nn.unflatten(dims, np.full(nn.param_count(dims), float(value)))


def cfg(**kw):
    base = dict(rounds=3, hidden_width=6, batch_size=16, seed=0)
    base.update(kw)
    return training.TrainingConfig(**base)


class TestLeaveOneOut:
    def test_identical(self, rng):
        m = nn.unflatten((3, 2, 1), rng.normal(size=11))
        for i in range(4):
            assert audit.leave_one_out_aggregate([m] * 4, [1, 2, 3, 4], i) == m

    def test_two_parties(self, rng):
        a = nn.unflatten((3, 2, 1), rng.normal(size=11))
        b = nn.unflatten((3, 2, 1), rng.normal(size=11))
        assert audit.leave_one_out_aggregate([a, b], [10, 30], 0) == b
        assert audit.leave_one_out_aggregate([a, b], [10, 30], 1) == a

    def test_three_equal(self):
        ms = [const_model((1, 1, 1), v) for v in (0.0, 3.0, 6.0)]
        assert np.all(nn.flatten(audit.leave_one_out_aggregate(ms, [5, 5, 5], 2)) == 1.5)

    def test_renormalized(self):
        ms = [const_model((1, 1, 1), v) for v in (0.0, 1.0, 4.0)]
        out = audit.leave_one_out_aggregate(ms, [7, 1, 3], 0)
        assert np.allclose(nn.flatten(out), (1 * 1 + 3 * 4) / 4, rtol=0, atol=1e-15)

    def test_errors(self):
        m = const_model((1, 1, 1), 1.0)
        with pytest.raises(InvalidArgument):
            audit.leave_one_out_aggregate([m], [1], 0)
        with pytest.raises(InvalidArgument):
            audit.leave_one_out_aggregate([m, m], [1, 1], 2)


@pytest.fixture
def run(tmp_path):
    parties = small_parties(K=3, n_train=60, n_test=120, bias_levels=[0.0, 0.5, 0.9])
    c = cfg()
    seed_dir = tmp_path / "seed"
    (seed_dir / "baselines").mkdir(parents=True)
    for p in parties:
        nn.save_checkpoint(seed_dir / "baselines" / f"standalone_{p.party_id}.ckpt", training.train_standalone(p, c))
    nn.save_checkpoint(seed_dir / "baselines" / "centralized.ckpt", training.train_centralized(parties, c))
    final, traces = training.run_federated(parties, c, run_dir=seed_dir / "fedavg")
    return parties, seed_dir, final, traces


class TestBenefits:
    def test_fields(self, run):
        parties, seed_dir, final, _ = run
        r = audit.compute_benefits(seed_dir, parties, "dp")
        assert len(r.parties) == 3
        for row in r.parties:
            assert row["fairness_benefit_fl"] == row["standalone_gap"] - row["fl_gap"]
            assert row["acc_benefit_fl"] == row["fl_acc"] - row["standalone_acc"]
            assert row["fairness_benefit_collab"] == row["standalone_gap"] - row["centralized_gap"]
        assert r.averages["fl_gap"] == pytest.approx(np.mean(r.column("fl_gap")))

    def test_fl_equals_standalone(self, run):
        parties, _, final, _ = run
        stand = [final, nn.init_model(final.dims, 5), nn.init_model(final.dims, 6)]
        r = audit.benefits_from_models(stand, final, final, parties, "eo")
        assert r.parties[0]["fairness_benefit_fl"] == 0.0 and r.parties[0]["acc_benefit_fl"] == 0.0

    def test_identical_test_sets(self, run):
        parties, _, final, _ = run
        same = [data.PartyDataset(p.party_id, p.train, parties[0].test, p.schema) for p in parties]
        r = audit.benefits_from_models([final] * 3, final, final, same, "dp")
        assert len(set(r.column("fl_gap"))) == 1

    def test_missing(self, run, tmp_path):
        parties, seed_dir, *_ = run
        (seed_dir / "baselines" / "standalone_1.ckpt").unlink()
        with pytest.raises(NotFound):
            audit.compute_benefits(seed_dir, parties)
        with pytest.raises(NotFound):
            audit.load_final(tmp_path / "missing")


class TestInfluence:
    def test_decomposition(self, run):
        parties, seed_dir, *_ = run
        inf = audit.compute_influence(seed_dir / "fedavg", parties, "dp")
        assert inf.per_round.shape == (3, 3, 3)
        assert np.max(np.abs(inf.matrix - inf.per_round.sum(axis=0))) <= 1e-12
        assert np.allclose(inf.mean_influence, inf.matrix.sum(axis=1) / 3, rtol=0, atol=1e-15)
        assert np.allclose(inf.cumulative[-1], inf.matrix.sum(axis=1), rtol=0, atol=1e-12)
        assert np.allclose(inf.cumulative_mean, inf.cumulative / 3)

    def test_addend_definition(self, run):
        parties, seed_dir, _, traces = run
        inf = audit.influence_from_traces(traces, parties, "eo")
        ev = audit.Evaluator(parties)
        sizes = [p.n_k for p in parties]
        t = traces[1]
        i, j = 2, 0
        loo = audit.leave_one_out_aggregate(t.locals, sizes, i)
        expected = ev.reports(loo)[j].eo_gap - ev.reports(t.global_after)[j].eo_gap
        assert inf.per_round[1, i, j] == expected

    def test_all_metrics(self, run):
        parties, seed_dir, *_ = run
        for m in ("dp", "eo", "acc_gap"):
            assert audit.compute_influence(seed_dir / "fedavg", parties, m).matrix.shape == (3, 3)

    def test_party_matching_aggregate_has_zero_row(self, run):
        parties, _, _, traces = run
        fake = []
        sizes = [p.n_k for p in parties]
        for tr in traces:
            # party 0's local equals the aggregate of the other two, so removing it changes nothing
            rest = training.aggregate(tr.locals[1:], sizes[1:])
            locs = (rest,) + tr.locals[1:]
            fake.append(training.RoundTrace(tr.round, tr.global_before, locs, training.aggregate(locs, sizes),
                                            tr.party_ids))
        inf = audit.influence_from_traces(fake, parties, "dp")
        assert np.all(inf.matrix[0] == 0.0)

    def test_two_parties_reduction(self, run):
        parties, _, _, traces = run
        two = parties[:2]
        sizes = [p.n_k for p in two]
        tr = [training.RoundTrace(t.round, t.global_before, t.locals[:2], training.aggregate(t.locals[:2], sizes),
                                  t.party_ids[:2]) for t in traces]
        inf = audit.influence_from_traces(tr, two, "dp")
        ev = audit.Evaluator(two)
        expected = sum(ev.gaps(t.locals[1], "dp")[1] - ev.gaps(t.global_after, "dp")[1] for t in tr)
        assert inf.matrix[0, 1] == pytest.approx(expected, abs=1e-15)

    def test_stride(self, run):
        parties, seed_dir, *_ = run
        assert audit.compute_influence(seed_dir / "fedavg", parties, "dp", stride=2).rounds == [2]

    def test_missing_trace(self, run):
        parties, seed_dir, *_ = run
        (seed_dir / "fedavg" / "round_3" / "global_after.ckpt").unlink()
        with pytest.raises(NotFound):
            audit.compute_influence(seed_dir / "fedavg", parties, "dp")

    def test_needs_two(self, run):
        parties, _, _, traces = run
        with pytest.raises(InvalidArgument):
            audit.influence_from_traces(traces, parties[:1], "dp")


class TestTopPairs:
    def test_hand_sorted(self):
        M = np.array([[9.0, 0.2, -0.5], [0.2, 9.0, 0.7], [-0.1, -0.5, 9.0]])
        top = audit.influence_top_pairs(M, 3, 3)
        assert top.positive == [(1, 2, 0.7), (0, 1, 0.2), (1, 0, 0.2)]
        assert top.negative == [(0, 2, -0.5), (2, 1, -0.5), (2, 0, -0.1)]

    def test_zero_matrix(self):
        top = audit.influence_top_pairs(np.zeros((4, 4)), 5, 5)
        assert len(top.positive) == 5 and all(v == 0.0 for *_, v in top.positive)

    def test_dominant(self):
        M = np.zeros((3, 3))
        M[2, 0] = 4.0
        assert audit.influence_top_pairs(M, 1, 1).positive == [(2, 0, 4.0)]

    def test_truncated(self):
        top = audit.influence_top_pairs(np.ones((2, 2)), 5, 5)
        assert len(top.positive) == 2 and len(top.negative) == 2


class TestDynamics:
    def test_lengths(self, run):
        parties, seed_dir, *_ = run
        s = audit.fairness_dynamics(seed_dir / "fedavg", parties[1], "dp")
        assert s.rounds == [1, 2, 3] and len(s.global_gap) == len(s.local_gap) == 3

    def test_single_round(self, parties):
        _, traces = training.run_federated(parties, cfg(rounds=1))
        s = audit.dynamics_from_traces(traces, parties[0], "dp")
        assert len(s.global_gap) == 1

    def test_constant_model(self, parties):
        m = nn.init_model((5, 6, 1), 4)
        traces = [training.RoundTrace(t, m, (m, m, m), m, (0, 1, 2)) for t in range(1, 5)]
        s = audit.dynamics_from_traces(traces, parties[0], "dp")
        assert len(set(s.global_gap)) == 1 and s.global_gap == s.local_gap
        assert s.mean_difference() == 0.0

    def test_csv(self, run, tmp_path):
        parties, seed_dir, *_ = run
        s = audit.fairness_dynamics(seed_dir / "fedavg", parties[2], "dp")
        s.write_csv(tmp_path / "d.csv")
        lines = (tmp_path / "d.csv").read_text().splitlines()
        assert lines[0] == "round,global_gap,local_gap" and len(lines) == 4


def test_write_json_nan_null(tmp_path):
    audit.write_json(tmp_path / "x.json", {"b": float("nan"), "a": np.float64(1.5), "c": np.arange(2)})
    text = (tmp_path / "x.json").read_text()
    assert json.loads(text) == {"a": 1.5, "b": None, "c": [0, 1]}
    assert text.index('"a"') < text.index('"b"')

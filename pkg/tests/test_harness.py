import json

import numpy as np
import pytest

from rpmlab import harness as H
from rpmlab.dataset import Pack, generate_dataset
from rpmlab.nn import NetworkSpec, build_network
from rpmlab.solvers import initial_model

TINY = H.TrainConfig(conv_channels=(4, 4, 4, 4), epochs=1, batch_size=8)


@pytest.fixture(scope="module")
def pack():
    return generate_dataset({"Center": 20, "L-R": 10, "U-D": 10, "2*2Grid": 10, "3*3Grid": 10}, seed=11)


def fake_pack(counts: dict[int, int]) -> Pack:
    codes = np.concatenate([np.full(n, c, np.uint8) for c, n in counts.items()])
    n = len(codes)
    return Pack((32, 32), codes, np.zeros(n, np.uint8), [b""] * n, np.zeros((n, 16, 1, 1), np.uint8))


class TestSplit:
    def test_single_config_sizes(self):
        s = H.split_dataset(fake_pack({0: 1000}), seed=0)
        assert (len(s.train), len(s.val), len(s.test)) == (600, 200, 200)

    def test_full_scale_sizes(self):
        s = H.split_dataset(fake_pack({c: 14_000 for c in range(5)}), seed=0)
        assert (len(s.train), len(s.val), len(s.test)) == (42_000, 14_000, 14_000)

    def test_desk_scale_center(self):
        s = H.split_dataset(fake_pack({0: 6667}), seed=0)
        assert (len(s.train), len(s.val), len(s.test)) == (4000, 1333, 1334)

    def test_disjoint_cover_and_per_config_exact(self):
        counts = {0: 37, 1: 101, 3: 12}
        p = fake_pack(counts)
        s = H.split_dataset(p, seed=5)
        allidx = np.concatenate([s.train, s.val, s.test])
        assert sorted(allidx.tolist()) == list(range(len(p)))
        for code, n in counts.items():
            got = [int((p.config_codes[part] == code).sum()) for part in (s.train, s.val, s.test)]
            assert got == list(H.split_sizes(n))

    def test_deterministic_and_seeded(self):
        p = fake_pack({0: 50, 2: 50})
        a, b, c = H.split_dataset(p, 1), H.split_dataset(p, 1), H.split_dataset(p, 2)
        assert all(np.array_equal(x, y) for x, y in zip((a.train, a.val, a.test), (b.train, b.val, b.test)))
        assert not np.array_equal(a.train, c.train)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            H.split_dataset(fake_pack({0: 0}), 0)
        with pytest.raises(ValueError, match="too few"):
            H.split_dataset(fake_pack({0: 10, 1: 1}), 0)

    def test_part_and_restrict(self, pack):
        s = H.split_dataset(pack, 0)
        assert len(s.part("all")) == len(pack)
        with pytest.raises(ValueError):
            s.part("holdout")
        lr = s.restrict(pack, "lr")
        assert set(pack.config_codes[lr.test].tolist()) == {3}


class TestEvaluate:
    def test_oracle_scores_one(self, pack):
        s = H.split_dataset(pack, 0)
        rep = H.evaluate(H.oracle_model(pack), pack, s.test, "supervised")
        assert rep.overall == 1.0 and set(rep.per_config.values()) == {1.0}

    def test_constant_model_matches_answer_frequency(self, pack):
        idx = np.arange(len(pack))
        rep = H.evaluate(H.constant_model(0), pack, idx, "supervised")
        assert rep.overall == np.mean(pack.answers == 0)

    def test_overall_is_count_weighted_mean(self, pack):
        idx = np.arange(len(pack))
        rep = H.evaluate(H.constant_model(3), pack, idx, "supervised")
        weighted = sum(rep.per_config[c] * rep.counts[c] for c in rep.counts) / rep.n
        assert rep.overall == pytest.approx(weighted, abs=1e-15)
        assert sum(rep.correct.values()) == round(rep.overall * rep.n)

    def test_network_repeatable(self, pack):
        model = build_network(NetworkSpec.row_scorer(conv_channels=(4, 4, 4, 4)), 0)
        a = H.evaluate(model, pack, range(12), "mcpt", seed=0)
        b = H.evaluate(model, pack, range(12), "mcpt", seed=0)
        assert a == b and a.model_id and a.dataset_id == H.pack_id(pack)

    def test_mode_mismatch(self, pack):
        model = build_network(NetworkSpec.row_scorer(conv_channels=(4, 4, 4, 4)), 0)
        with pytest.raises(ValueError):
            H.evaluate(model, pack, range(4), "supervised")
        with pytest.raises(ValueError):
            H.evaluate(model, pack, range(4), "contrastive")

    def test_rows(self, pack):
        rep = H.evaluate(H.constant_model(0), pack, range(len(pack)), "supervised", seed=4)
        rows = rep.rows("always-first")
        assert rows[-1]["config"] == "all" and rows[-1]["n"] == len(pack)
        assert all(r["seed"] == 4 for r in rows)


class TestRandomBaseline:
    def test_within_three_sigma(self):
        acc = H.random_baseline(np.random.default_rng(0).integers(8, size=500), 10_000, seed=1)
        assert abs(acc - 0.125) <= 0.01

    def test_single_choice_is_forced(self):
        assert H.random_baseline([0, 0, 0], 50, seed=0, n_choices=1) == 1.0

    def test_seeded(self):
        assert H.random_baseline([1, 2], 1000, 3) == H.random_baseline([1, 2], 1000, 3)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            H.random_baseline([0], 0, 0)
        with pytest.raises(ValueError):
            H.random_baseline([8], 10, 0)


class TestAblation:
    def test_four_rows_with_seeds(self, pack):
        res = H.run_ablation(pack, [1, 2], TINY, random_trials=500)
        assert [r["method"] for r in res.rows] == ["random", "untrained", "one-hot", "two-hot"]
        for r in res.rows:
            assert 0 <= r["accuracy"] <= 1 and r["seed"] == "1;2"
        assert res.accuracy("untrained") == float(np.median(res.per_seed["untrained"]))
        csv = H.rows_to_csv(res.rows).splitlines()
        assert csv[0] == "method,config,accuracy,n,seed" and len(csv) == 5

    def test_untrained_row_is_the_training_start(self, pack):
        split = H.split_dataset(pack, 0)
        spec = TINY.spec("mcpt", 32)
        res = H.run_ablation(pack, [7], TINY, split=split, random_trials=100)
        direct = H.evaluate(initial_model(spec, 7), pack, split.test, "mcpt").overall
        assert res.per_seed["untrained"] == [direct]

    def test_needs_seed(self, pack):
        with pytest.raises(ValueError):
            H.run_ablation(pack, [], TINY)


class TestGeneralization:
    @pytest.mark.parametrize("train_cfg,tests", [(t, tuple(c for c in ts if c != "O-IC"))
                                                 for t, ts in H.GENERALIZATION_SETUPS])
    def test_setups_run_and_stay_disjoint(self, pack, train_cfg, tests):
        res = H.run_generalization(pack, train_cfg, tests, "supervised", seed=0, cfg=TINY)
        assert set(res.reports) == set(tests)
        train_codes = set(pack.config_codes[res.train_indices].tolist())
        assert len(train_codes) == 1
        H.check_disjoint(res.train_indices, res.test_indices)
        split = H.split_dataset(pack, 0)
        assert set(res.train_indices.tolist()) <= set(split.train.tolist())
        for idx in res.test_indices.values():
            assert set(idx.tolist()) <= set(split.test.tolist())

    def test_oic_reported_unsupported(self, pack):
        res = H.run_generalization(pack, "Center", ["L-R", "U-D", "O-IC"], "mcpt", cfg=TINY)
        assert set(res.reports) == {"L-R", "U-D"} and res.unsupported == ["O-IC"]
        assert any(r["accuracy"] == "unsupported" for r in res.rows())

    def test_unknown_or_absent_config(self, pack):
        with pytest.raises(ValueError):
            H.run_generalization(pack, "Hex", ["L-R"], "supervised", cfg=TINY)
        only_center = generate_dataset({"Center": 10}, seed=1)
        with pytest.raises(ValueError, match="not present"):
            H.run_generalization(only_center, "Center", ["L-R"], "supervised", cfg=TINY)

    def test_leak_detection(self):
        with pytest.raises(AssertionError, match="leak"):
            H.check_disjoint([1, 2, 3], {"x": np.array([3, 4])})


def test_gradcheck_suite_small():
    summary = H.gradcheck_suite(seeds=[0], conv_channels=(2, 3), image_size=8, max_entries=4)
    assert "network_mcpt" in summary.errors and "conv2d" in summary.errors
    assert summary.max_error < 1e-4 and summary.skipped <= summary.checked // 20


def test_log_and_reports(tmp_path):
    log = tmp_path / "log.jsonl"
    H.append_log(log, ["train", "--seed", "1"], [1], {"acc": np.float32(0.5)})
    H.append_log(log, "eval", [2], {"acc": 0.25})
    lines = [json.loads(line) for line in log.read_text().splitlines()]
    assert [ln["command"] for ln in lines] == ["train --seed 1", "eval"]
    assert set(lines[0]) == {"timestamp", "command", "seeds", "build", "metrics"}
    rows = [dict(method="m", config="Center", accuracy=0.5, n=2, seed=1)]
    H.write_csv(rows, tmp_path / "r.csv")
    H.write_json({"rows": rows, "arr": np.arange(2)}, tmp_path / "r.json")
    assert (tmp_path / "r.csv").read_text() == "method,config,accuracy,n,seed\nm,Center,0.500000,2,1\n"
    assert json.loads((tmp_path / "r.json").read_text())["arr"] == [0, 1]
